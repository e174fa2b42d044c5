//! Desk-scale model zoo: MLP, small CNN and a CIFAR-style residual network
//! with parameter-free shortcuts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::quant::{self, QuantConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    /// Widths include the input feature count and the class count.
    Mlp { widths: Vec<usize> },
    /// One stride-2 3×3 conv per entry of `channels`, then a hidden FC
    /// layer of `fc_width` and the classifier.
    SmallCnn { channels: Vec<usize>, fc_width: usize },
    /// 3×3 stem, then stages of two-conv basic blocks; the first block of
    /// every stage after the first downsamples.
    MiniResnet { blocks_per_stage: Vec<usize>, widths: Vec<usize> },
}

/// Forward quantization settings shared by all layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerQuant {
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
    /// Keep the first and last weight layers in full precision (forward).
    pub skip_first_last: bool,
    /// Quantizes error signals at every weight layer's output.
    pub error_signal: Option<QuantConfig>,
}

impl Default for LayerQuant {
    fn default() -> Self {
        Self { weight_bits: None, act_bits: None, skip_first_last: true, error_signal: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// Shape of one input sample, e.g. `[1, 28, 28]` or `[2]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub quant: LayerQuant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Fc,
    Conv { stride: usize, pad: usize },
}

/// A weight layer. Its weight gradient goes through gradient quantization.
#[derive(Clone, Debug)]
pub struct WeightLayer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Var,
    pub bias: Option<Var>,
    pub quantize_forward: bool,
}

/// Per-channel normalization with running statistics.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

const NORM_MOMENTUM: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;

impl Norm {
    fn new(tape: &Tape, c: usize) -> Self {
        Self {
            gamma: tape.leaf(Tensor::ones(vec![c])),
            beta: tape.leaf(Tensor::zeros(vec![c])),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    /// Training mode first folds the batch statistics into the running
    /// ones; both modes normalize with the running statistics, which enter
    /// the graph as constants.
    fn forward(&mut self, x: &Var, train: bool) -> Result<Var> {
        let (n, c, h, w) = x.value().dims4();
        if train {
            let hw = h * w;
            let count = (n * hw) as f64;
            let data = x.value().data();
            for ch in 0..c {
                let mut s = 0.0;
                let mut sq = 0.0;
                for i in 0..n {
                    for &v in &data[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                        s += v;
                        sq += v * v;
                    }
                }
                let mean = s / count;
                let var = (sq / count - mean * mean).max(0.0);
                self.running_mean[ch] = (1.0 - NORM_MOMENTUM) * self.running_mean[ch] + NORM_MOMENTUM * mean;
                self.running_var[ch] = (1.0 - NORM_MOMENTUM) * self.running_var[ch] + NORM_MOMENTUM * var;
            }
        }
        let inv_std = self.running_var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        x.channel_affine(&self.gamma, &self.beta, self.running_mean.clone(), inv_std)
    }
}

/// A built model bound to one tape.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<WeightLayer>,
    pub norms: Vec<Norm>,
}

fn he(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::invalid("build_model", msg)
}

impl Model {
    pub fn build(spec: ModelSpec, tape: &Tape, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if spec.num_classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        if spec.input_shape.iter().any(|&d| d == 0) || spec.input_shape.is_empty() {
            return Err(invalid(format!("bad input shape {:?}", spec.input_shape)));
        }
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let fc = |name: String, fan_in: usize, out: usize, rng: &mut ChaCha8Rng| WeightLayer {
            name,
            kind: LayerKind::Fc,
            weight: tape.leaf(he(vec![out, fan_in], fan_in, rng)),
            bias: Some(tape.leaf(Tensor::zeros(vec![out]))),
            quantize_forward: true,
        };
        let conv = |name: String, cin: usize, cout: usize, stride: usize, bias: bool, rng: &mut ChaCha8Rng| WeightLayer {
            name,
            kind: LayerKind::Conv { stride, pad: 1 },
            weight: tape.leaf(he(vec![cout, cin, 3, 3], cin * 9, rng)),
            bias: bias.then(|| tape.leaf(Tensor::zeros(vec![cout]))),
            quantize_forward: true,
        };

        match &spec.arch {
            Architecture::Mlp { widths } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(invalid(format!("MLP widths {widths:?} need at least two positive entries")));
                }
                let features: usize = spec.input_shape.iter().product();
                if widths[0] != features || *widths.last().unwrap() != spec.num_classes {
                    return Err(invalid(format!(
                        "MLP widths {widths:?} must start at {features} inputs and end at {} classes",
                        spec.num_classes
                    )));
                }
                for (i, w) in widths.windows(2).enumerate() {
                    layers.push(fc(format!("fc{i}"), w[0], w[1], &mut rng));
                }
            }
            Architecture::SmallCnn { channels, fc_width } => {
                let [c, mut h, mut w] = image_shape(&spec.input_shape)?;
                if channels.is_empty() || channels.contains(&0) || *fc_width == 0 {
                    return Err(invalid("small CNN needs positive channel counts and FC width"));
                }
                let mut cin = c;
                for (i, &cout) in channels.iter().enumerate() {
                    layers.push(conv(format!("conv{i}"), cin, cout, 2, true, &mut rng));
                    cin = cout;
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
                layers.push(fc("fc0".into(), cin * h * w, *fc_width, &mut rng));
                layers.push(fc("fc1".into(), *fc_width, spec.num_classes, &mut rng));
            }
            Architecture::MiniResnet { blocks_per_stage, widths } => {
                image_shape(&spec.input_shape)?;
                if blocks_per_stage.is_empty() || blocks_per_stage.contains(&0) {
                    return Err(invalid("every stage needs at least one block"));
                }
                if widths.len() != blocks_per_stage.len() || widths.contains(&0) {
                    return Err(invalid("one positive width per stage required"));
                }
                let c = spec.input_shape[0];
                layers.push(conv("stem".into(), c, widths[0], 1, false, &mut rng));
                norms.push(Norm::new(tape, widths[0]));
                let mut cin = widths[0];
                for (s, (&blocks, &width)) in blocks_per_stage.iter().zip(widths).enumerate() {
                    for b in 0..blocks {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        layers.push(conv(format!("s{s}b{b}c0"), cin, width, stride, false, &mut rng));
                        norms.push(Norm::new(tape, width));
                        layers.push(conv(format!("s{s}b{b}c1"), width, width, 1, false, &mut rng));
                        norms.push(Norm::new(tape, width));
                        cin = width;
                    }
                }
                layers.push(fc("fc".into(), cin, spec.num_classes, &mut rng));
            }
        }
        let last = layers.len() - 1;
        for (i, l) in layers.iter_mut().enumerate() {
            let edge = i == 0 || i == last;
            l.quantize_forward = !(spec.quant.skip_first_last && edge);
        }
        Ok(Self { spec, layers, norms })
    }

    /// Weight leaves/fragments in layer order.
    pub fn weights(&self) -> Vec<Var> {
        self.layers.iter().map(|l| l.weight.clone()).collect()
    }

    /// Full-precision parameters outside gradient quantization: biases,
    /// then normalization scales and shifts.
    pub fn aux_params(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().filter_map(|l| l.bias.clone()).collect();
        for n in &self.norms {
            out.push(n.gamma.clone());
            out.push(n.beta.clone());
        }
        out
    }

    pub fn set_aux_params(&mut self, params: Vec<Var>) {
        let mut it = params.into_iter();
        for l in &mut self.layers {
            if l.bias.is_some() {
                l.bias = it.next();
            }
        }
        for n in &mut self.norms {
            n.gamma = it.next().expect("gamma");
            n.beta = it.next().expect("beta");
        }
    }

    fn layer(&mut self, i: usize, x: &Var) -> Result<Var> {
        let q = self.spec.quant;
        let l = &self.layers[i];
        let mut input = x.clone();
        let mut w = l.weight.clone();
        if l.quantize_forward {
            if let Some(bits) = q.act_bits {
                input = quant::dorefa_activation_quantize(&input, bits)?;
            }
            if let Some(bits) = q.weight_bits {
                w = quant::dorefa_weight_quantize(&w, bits)?;
            }
        }
        let mut y = match l.kind {
            LayerKind::Fc => {
                let y = input.matmul(&w.transpose()?)?;
                match &l.bias {
                    Some(b) => y.add_row(b)?,
                    None => y,
                }
            }
            LayerKind::Conv { stride, pad } => {
                let y = input.conv2d(&w, stride, pad)?;
                match &l.bias {
                    Some(b) => y.add_channel(b)?,
                    None => y,
                }
            }
        };
        if let Some(cfg) = q.error_signal {
            y = quant::error_signal_hook(&y, cfg)?;
        }
        Ok(y)
    }

    /// Logits of shape `batch × classes`. `train` updates normalization
    /// statistics.
    pub fn forward(&mut self, tape: &Tape, x: &Tensor, train: bool) -> Result<Var> {
        let batch = x.shape()[0];
        let mut expect = vec![batch];
        expect.extend_from_slice(&self.spec.input_shape);
        if x.shape() != expect.as_slice() {
            return Err(Error::ShapeMismatch { op: "model_forward", lhs: x.shape().to_vec(), rhs: expect });
        }
        let input = tape.constant(x.clone());
        match self.spec.arch.clone() {
            Architecture::Mlp { .. } => {
                let mut h = input.flatten()?;
                let last = self.layers.len() - 1;
                for i in 0..=last {
                    h = self.layer(i, &h)?;
                    if i != last {
                        h = h.relu()?;
                    }
                }
                Ok(h)
            }
            Architecture::SmallCnn { channels, .. } => {
                let mut h = input;
                for i in 0..channels.len() {
                    h = self.layer(i, &h)?.relu()?;
                }
                h = h.flatten()?;
                h = self.layer(channels.len(), &h)?.relu()?;
                self.layer(channels.len() + 1, &h)
            }
            Architecture::MiniResnet { blocks_per_stage, widths } => {
                let mut h = self.layer(0, &input)?;
                h = self.norms[0].forward(&h, train)?.relu()?;
                let mut li = 1;
                let mut cin = widths[0];
                for (s, (&blocks, &width)) in blocks_per_stage.iter().zip(&widths).enumerate() {
                    for b in 0..blocks {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        let mut r = self.layer(li, &h)?;
                        r = self.norms[li].forward(&r, train)?.relu()?;
                        r = self.layer(li + 1, &r)?;
                        r = self.norms[li + 1].forward(&r, train)?;
                        let shortcut = if stride != 1 || cin != width { h.shortcut_pad(stride, width)? } else { h.clone() };
                        h = r.add(&shortcut)?.relu()?;
                        li += 2;
                        cin = width;
                    }
                }
                let pooled = h.mean_spatial()?;
                self.layer(li, &pooled)
            }
        }
    }

    /// Every tensor that defines the model's state, in a fixed order:
    /// weights, aux parameters, then normalization running statistics.
    pub fn state_tensors(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.weights().iter().map(|v| v.value().clone()).collect();
        out.extend(self.aux_params().iter().map(|v| v.value().clone()));
        for n in &self.norms {
            out.push(Tensor::vector(n.running_mean.clone()));
            out.push(Tensor::vector(n.running_var.clone()));
        }
        out
    }

    pub fn load_state(&mut self, tape: &Tape, state: Vec<Tensor>) -> Result<()> {
        let expected = self.state_tensors();
        if state.len() != expected.len() {
            return Err(Error::invalid("load_state", format!("expected {} tensors, got {}", expected.len(), state.len())));
        }
        for (a, b) in expected.iter().zip(&state) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch { op: "load_state", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
            }
        }
        let mut it = state.into_iter();
        for l in &mut self.layers {
            l.weight = tape.leaf(it.next().unwrap());
        }
        let n_aux = self.aux_params().len();
        let aux: Vec<Var> = (0..n_aux).map(|_| tape.leaf(it.next().unwrap())).collect();
        self.set_aux_params(aux);
        for n in &mut self.norms {
            n.running_mean = it.next().unwrap().into_data();
            n.running_var = it.next().unwrap().into_data();
        }
        Ok(())
    }
}

fn image_shape(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(invalid(format!("convolutional models need C×H×W input, got {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;

    fn spec(arch: Architecture, input: Vec<usize>, classes: usize) -> ModelSpec {
        ModelSpec { arch, input_shape: input, num_classes: classes, quant: LayerQuant::default() }
    }

    #[test]
    fn layer_counts() {
        let t = Tape::new(Precision::F64);
        let m = Model::build(spec(Architecture::Mlp { widths: vec![784, 128, 10] }, vec![1, 28, 28], 10), &t, 0).unwrap();
        assert_eq!(m.layers.len(), 2);
        let r = Model::build(
            spec(Architecture::MiniResnet { blocks_per_stage: vec![3, 3, 3], widths: vec![16, 32, 64] }, vec![3, 32, 32], 10),
            &t,
            0,
        )
        .unwrap();
        assert_eq!(r.layers.len(), 20);
        assert!(!r.layers[0].quantize_forward && !r.layers[19].quantize_forward && r.layers[5].quantize_forward);
    }

    #[test]
    fn invalid_specs() {
        let t = Tape::new(Precision::F64);
        assert!(Model::build(spec(Architecture::Mlp { widths: vec![4] }, vec![4], 2), &t, 0).is_err());
        assert!(Model::build(spec(Architecture::Mlp { widths: vec![3, 0, 2] }, vec![3], 2), &t, 0).is_err());
        assert!(Model::build(spec(Architecture::Mlp { widths: vec![5, 2] }, vec![3], 2), &t, 0).is_err());
        let cnn = Architecture::SmallCnn { channels: vec![], fc_width: 8 };
        assert!(Model::build(spec(cnn, vec![1, 8, 8], 3), &t, 0).is_err());
        let res = Architecture::MiniResnet { blocks_per_stage: vec![0], widths: vec![4] };
        assert!(Model::build(spec(res, vec![1, 8, 8], 3), &t, 0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let t = Tape::new(Precision::F64);
        let s = spec(Architecture::SmallCnn { channels: vec![4, 8], fc_width: 16 }, vec![1, 12, 12], 10);
        let a = Model::build(s.clone(), &t, 3).unwrap();
        let b = Model::build(s, &t, 3).unwrap();
        assert_eq!(a.state_tensors(), b.state_tensors());
    }
}
