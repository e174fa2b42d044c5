mod common;

use metaquant::autodiff::Var;
use metaquant::data::{synthetic_dataset, SyntheticKind};
use metaquant::hypernet::{Design, HyperNet, HyperNetConfig, RecurrentState};
use metaquant::meta_update::{
    delayed_weight_update, meta_quantize_grad, optimizer_step_pi, Mode, OptimizerConfig, OptimizerKind, PiState,
    Trainer, TrainerConfig,
};
use metaquant::models::Model;
use metaquant::quant::QuantConfig;
use metaquant::{Precision, Tape, Tensor};

#[test]
fn plain_mode_matches_loop_reference_bitwise() {
    for momentum in [None, Some(0.9)] {
        let (got, want) = common::plain_vs_reference(2, momentum, 5);
        for (g, w) in got.iter().zip(&want) {
            let gb: Vec<u64> = g.iter().map(|v| v.to_bits()).collect();
            let wb: Vec<u64> = w.iter().map(|v| v.to_bits()).collect();
            assert_eq!(gb, wb, "momentum {momentum:?}");
        }
    }
}

fn psi_grad_for_layers(layers: usize) -> Vec<f64> {
    let tape = Tape::new(Precision::F64);
    let net = HyperNet::init(&tape, HyperNetConfig::new(Design::LstmFc, 3), 9).unwrap();
    let target = Tensor::vector(vec![0.3, -0.2, 0.5]);
    let loss = |w: &Var| w.sub(&tape.constant(target.clone())).unwrap().square().unwrap().sum().unwrap();
    let mut total = None::<Var>;
    for _ in 0..layers {
        let w = tape.leaf(Tensor::vector(vec![1.0, -1.0, 0.25]));
        let g = loss(&w).backward().unwrap().get_or_zeros(&w);
        let (gq, _) = meta_quantize_grad(&g, &w, &net, &mut RecurrentState::default(), None).unwrap();
        let pi = optimizer_step_pi(&gq, &mut PiState::default(), OptimizerKind::Sgd).unwrap();
        let next = delayed_weight_update(&w, &pi, 0.1).unwrap();
        let l = loss(&next);
        total = Some(match total {
            None => l,
            Some(t) => t.add(&l).unwrap(),
        });
    }
    let grads = total.unwrap().backward().unwrap();
    net.params().iter().flat_map(|p| grads.get_or_zeros(p).into_data()).collect()
}

#[test]
fn psi_gradient_accumulates_over_identical_layers() {
    let one = psi_grad_for_layers(1);
    let two = psi_grad_for_layers(2);
    assert!(one.iter().any(|v| v.abs() > 0.0));
    for (a, b) in one.iter().zip(&two) {
        assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} {b}");
    }
}

#[test]
fn zero_upstream_gives_zero_psi_gradient() {
    let tape = Tape::new(Precision::F64);
    let net = HyperNet::init(&tape, HyperNetConfig::new(Design::DualLstmFc, 4), 1).unwrap();
    let w = tape.leaf(Tensor::vector(vec![0.4, -0.1]));
    let g = Tensor::vector(vec![0.2, 0.05]);
    let (gq, _) = meta_quantize_grad(&g, &w, &net, &mut RecurrentState::default(), Some(&QuantConfig::new(4))).unwrap();
    let next = delayed_weight_update(&w, &gq, 0.1).unwrap();
    let grads = next.scale(0.0).unwrap().sum().unwrap().backward().unwrap();
    for p in net.params() {
        assert_eq!(grads.get_or_zeros(&p).max_abs(), 0.0);
    }
}

fn toy_model(tape: &Tape, seed: u64) -> Model {
    Model::build(common::mlp_spec(vec![2, 16, 2]), tape, seed).unwrap()
}

#[test]
fn next_loss_reaches_the_hypernetwork() {
    let tape = Tape::new(Precision::F64);
    let mut cfg = TrainerConfig::new(Mode::Meta, OptimizerConfig { psi_lr: 0.01, ..OptimizerConfig::sgd(0.1) }, 4);
    cfg.hypernet = Some(HyperNetConfig::new(Design::DualLstmFc, 11));
    let mut tr = Trainer::new(tape.clone(), toy_model(&tape, 3), cfg, None).unwrap();
    let data = synthetic_dataset(SyntheticKind::TwoGaussians, 32, 1).unwrap();
    let (x, y) = data.gather(&(0..32).collect::<Vec<_>>());
    let before = tr.hypernet().unwrap().param_values();
    tr.training_step(&x, &y).unwrap();
    let m = tr.training_step(&x, &y).unwrap();
    assert!(m.psi_updated && m.psi_grad_norm > 0.0);
    assert_ne!(tr.hypernet().unwrap().param_values(), before);
}

/// Identity hypernetwork and 16-bit (or bypassed) quantization against
/// plain full-precision SGD over 50 steps.
#[test]
fn identity_meta_tracks_full_precision_sgd() {
    for bypass in [true, false] {
        let data = synthetic_dataset(SyntheticKind::TwoGaussians, 256, 4).unwrap();
        let run = |mode: Mode| -> Vec<Vec<f64>> {
            let tape = Tape::new(Precision::F64);
            let opt = OptimizerConfig { psi_lr: 0.001, ..OptimizerConfig::sgd(0.1) };
            let mut cfg = TrainerConfig::new(mode, opt, 16);
            cfg.bypass_quantizer = bypass;
            let net = (mode == Mode::Meta).then(|| HyperNet::exact_identity(&tape, 8, 0).unwrap());
            let mut tr = Trainer::new(tape.clone(), toy_model(&tape, 7), cfg, net).unwrap();
            for s in 0..50 {
                let idx: Vec<usize> = (s * 16..(s + 1) * 16).map(|i| i % data.len()).collect();
                let (x, y) = data.gather(&idx);
                tr.training_step(&x, &y).unwrap();
            }
            tr.model().state_tensors().into_iter().map(|t| t.into_data()).collect()
        };
        let meta = run(Mode::Meta);
        let fp = run(Mode::Fp);
        let worst = meta
            .iter()
            .flatten()
            .zip(fp.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-4, "bypass {bypass}: max deviation {worst}");
    }
}

#[test]
fn detached_history_matches_retained_values() {
    // keeping the history attached changes gradients, never forward values
    let data = synthetic_dataset(SyntheticKind::Ring, 64, 2).unwrap();
    let (x, y) = data.gather(&(0..64).collect::<Vec<_>>());
    let run = |detach: bool| {
        let tape = Tape::new(Precision::F64);
        let mut cfg = TrainerConfig::new(Mode::Meta, OptimizerConfig::sgd(0.1), 8);
        cfg.hypernet = Some(HyperNetConfig::new(Design::MultiFc, 4));
        cfg.detach_weight_history = detach;
        let mut tr = Trainer::new(tape.clone(), toy_model(&tape, 1), cfg, None).unwrap();
        let losses: Vec<f64> = (0..5).map(|_| tr.training_step(&x, &y).unwrap().loss).collect();
        (losses, tr.last_psi_grads().unwrap().to_vec())
    };
    let (l_det, g_det) = run(true);
    let (l_att, g_att) = run(false);
    assert_eq!(l_det, l_att);
    assert_ne!(g_det, g_att);
}

#[test]
fn full_precision_mlp_learns_two_gaussians() {
    let tape = Tape::new(Precision::F64);
    let cfg = TrainerConfig::new(Mode::Fp, OptimizerConfig::sgd(0.1), 8);
    let mut tr = Trainer::new(tape.clone(), toy_model(&tape, 0), cfg, None).unwrap();
    let data = synthetic_dataset(SyntheticKind::TwoGaussians, 512, 0).unwrap();
    'train: for epoch in 0..16 {
        for b in metaquant::data::batch_iterator(&data, 16, Some(1), epoch).unwrap() {
            if tr.iteration() == 500 {
                break 'train;
            }
            tr.training_step(&b.images, &b.labels).unwrap();
        }
    }
    let acc = metaquant::harness::eval_accuracy(tr.model_mut(), &tape, &data, 64).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}
