//! Shared test helpers: an independent quantized-SGD reference for a
//! two-layer ReLU MLP, written with plain loops.
#![allow(dead_code)]

use metaquant::data::{synthetic_dataset, SyntheticKind};
use metaquant::meta_update::{Mode, OptimizerConfig, OptimizerKind, Trainer, TrainerConfig};
use metaquant::models::{Architecture, LayerQuant, Model, ModelSpec};
use metaquant::{Precision, Tape, Tensor};

pub struct RefMlp {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    /// `hidden × inputs`, then `classes × hidden`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub momentum: Option<f64>,
    pub vel: Vec<Option<Vec<f64>>>,
}

fn quantize_max_abs(g: &[f64], bits: u32) -> Vec<f64> {
    let c = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if c == 0.0 {
        return vec![0.0; g.len()];
    }
    let l = ((1i64 << (bits - 1)) - 1) as f64;
    g.iter()
        .map(|&v| {
            let code = (v.clamp(-c, c) * l / c).round();
            c * (code / l)
        })
        .collect()
}

impl RefMlp {
    pub fn from_model(m: &Model, momentum: Option<f64>) -> Self {
        let w1 = m.layers[0].weight.value();
        let w2 = m.layers[1].weight.value();
        Self {
            inputs: w1.shape()[1],
            hidden: w1.shape()[0],
            classes: w2.shape()[0],
            w1: w1.data().to_vec(),
            b1: m.layers[0].bias.as_ref().unwrap().value().data().to_vec(),
            w2: w2.data().to_vec(),
            b2: m.layers[1].bias.as_ref().unwrap().value().data().to_vec(),
            momentum,
            vel: vec![None; 4],
        }
    }

    fn pi(&mut self, slot: usize, g: Vec<f64>) -> Vec<f64> {
        match self.momentum {
            None => g,
            Some(m) => {
                let out = match &self.vel[slot] {
                    None => g,
                    Some(v) => g.iter().zip(v).map(|(gi, vi)| gi + m * vi).collect(),
                };
                self.vel[slot] = Some(out.clone());
                out
            }
        }
    }

    /// One step on `x` (`batch × inputs`, row-major). Weight gradients are
    /// fake-quantized with a max-abs clip; biases are not.
    pub fn step(&mut self, x: &[f64], labels: &[usize], lr: f64, bits: u32) {
        let (n_in, n_h, n_c) = (self.inputs, self.hidden, self.classes);
        let batch = labels.len();
        let mut pre = vec![0.0; batch * n_h];
        let mut h = vec![0.0; batch * n_h];
        for i in 0..batch {
            for j in 0..n_h {
                let mut s = 0.0;
                for k in 0..n_in {
                    s += x[i * n_in + k] * self.w1[j * n_in + k];
                }
                pre[i * n_h + j] = s + self.b1[j];
                h[i * n_h + j] = pre[i * n_h + j].max(0.0);
            }
        }
        let mut z = vec![0.0; batch * n_c];
        for i in 0..batch {
            for j in 0..n_c {
                let mut s = 0.0;
                for k in 0..n_h {
                    s += h[i * n_h + k] * self.w2[j * n_h + k];
                }
                z[i * n_c + j] = s + self.b2[j];
            }
        }
        // softmax cross-entropy gradient, mean over the batch
        let scale = 1.0 / batch as f64;
        let mut dz = vec![0.0; batch * n_c];
        for i in 0..batch {
            let row = &z[i * n_c..(i + 1) * n_c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..n_c {
                let mut p = e[j] / s;
                if j == labels[i] {
                    p -= 1.0;
                }
                dz[i * n_c + j] = p * scale;
            }
        }
        let mut gb2 = vec![0.0; n_c];
        let mut gw2 = vec![0.0; n_c * n_h];
        for j in 0..n_c {
            for i in 0..batch {
                gb2[j] += dz[i * n_c + j];
            }
            for k in 0..n_h {
                let mut s = 0.0;
                for i in 0..batch {
                    s += h[i * n_h + k] * dz[i * n_c + j];
                }
                gw2[j * n_h + k] = s;
            }
        }
        let mut dpre = vec![0.0; batch * n_h];
        for i in 0..batch {
            for k in 0..n_h {
                let mut s = 0.0;
                for j in 0..n_c {
                    s += dz[i * n_c + j] * self.w2[j * n_h + k];
                }
                dpre[i * n_h + k] = if pre[i * n_h + k] > 0.0 { s } else { 0.0 };
            }
        }
        let mut gb1 = vec![0.0; n_h];
        let mut gw1 = vec![0.0; n_h * n_in];
        for j in 0..n_h {
            for i in 0..batch {
                gb1[j] += dpre[i * n_h + j];
            }
            for k in 0..n_in {
                let mut s = 0.0;
                for i in 0..batch {
                    s += x[i * n_in + k] * dpre[i * n_h + j];
                }
                gw1[j * n_in + k] = s;
            }
        }

        let gw1 = quantize_max_abs(&gw1, bits);
        let gw2 = quantize_max_abs(&gw2, bits);
        let upd = |w: &mut Vec<f64>, d: Vec<f64>| {
            for (wi, di) in w.iter_mut().zip(d) {
                *wi -= di * lr;
            }
        };
        // order matches the trainer: biases first, then weight layers
        let d = self.pi(0, gb1);
        upd(&mut self.b1, d);
        let d = self.pi(1, gb2);
        upd(&mut self.b2, d);
        let d = self.pi(2, gw1);
        upd(&mut self.w1, d);
        let d = self.pi(3, gw2);
        upd(&mut self.w2, d);
    }
}

pub fn mlp_spec(widths: Vec<usize>) -> ModelSpec {
    let inputs = widths[0];
    let classes = *widths.last().unwrap();
    ModelSpec { arch: Architecture::Mlp { widths }, input_shape: vec![inputs], num_classes: classes, quant: LayerQuant::default() }
}

/// Runs the plain-mode trainer and the loop reference side by side for
/// `steps` steps and returns `(trainer weights, reference weights)` as flat
/// vectors `[w1, b1, w2, b2]`.
pub fn plain_vs_reference(steps: usize, momentum: Option<f64>, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let tape = Tape::new(Precision::F64);
    let model = Model::build(mlp_spec(vec![2, 8, 2]), &tape, seed).unwrap();
    let mut reference = RefMlp::from_model(&model, momentum);
    let kind = match momentum {
        Some(m) => OptimizerKind::Momentum { m },
        None => OptimizerKind::Sgd,
    };
    let opt = OptimizerConfig { kind, lr: 0.1, lr_decay: 0.0, psi_lr: 0.0 };
    let cfg = TrainerConfig::new(Mode::Plain, opt, 4);
    let mut trainer = Trainer::new(tape, model, cfg, None).unwrap();
    let data = synthetic_dataset(SyntheticKind::TwoGaussians, 64, seed).unwrap();
    for s in 0..steps {
        let idx: Vec<usize> = (s * 16..(s + 1) * 16).map(|i| i % data.len()).collect();
        let (x, y) = data.gather(&idx);
        trainer.training_step(&x, &y).unwrap();
        reference.step(x.data(), &y, 0.1, 4);
    }
    let m = trainer.model();
    let got = vec![
        m.layers[0].weight.value().data().to_vec(),
        m.layers[0].bias.as_ref().unwrap().value().data().to_vec(),
        m.layers[1].weight.value().data().to_vec(),
        m.layers[1].bias.as_ref().unwrap().value().data().to_vec(),
    ];
    let want = vec![reference.w1, reference.b1, reference.w2, reference.b2];
    (got, want)
}

pub fn tensor_bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}
