use std::path::Path;

use metaquant::config::ExperimentConfig;
use metaquant::data::{synthetic_dataset, Dataset, Split, SyntheticKind};
use metaquant::harness::{self, eval_accuracy};
use metaquant::models::{Architecture, LayerQuant, Model, ModelSpec};
use metaquant::{Precision, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_config(out: &Path, mode: &str, bits: u32, seed: u64) -> ExperimentConfig {
    let text = format!(
        "run.mode = {mode}\nrun.seed = {seed}\nrun.out = {}\ndata.source = two-gaussians\ndata.train_size = 512\n\
         model.arch = mlp\nmodel.hidden = 16\nquant.grad_bits = {bits}\noptimizer.kind = sgd\noptimizer.lr = 0.05\n\
         schedule.epochs = 6\nschedule.batch_size = 16\nhypernet.design = duallstmfc\n",
        out.display()
    );
    ExperimentConfig::from_text(&text, &[]).unwrap()
}

#[test]
fn same_seed_reproduces_metrics_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["meta", "plain"] {
        let a = dir.path().join(format!("{mode}-a"));
        let b = dir.path().join(format!("{mode}-b"));
        harness::run_experiment(&toy_config(&a, mode, 4, 3)).unwrap();
        harness::run_experiment(&toy_config(&b, mode, 4, 3)).unwrap();
        let ma = std::fs::read(a.join("metrics.csv")).unwrap();
        assert_eq!(ma, std::fs::read(b.join("metrics.csv")).unwrap());
        assert_eq!(std::fs::read(a.join("weights.bin")).unwrap(), std::fs::read(b.join("weights.bin")).unwrap());
    }
}

#[test]
fn metrics_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let s = harness::run_experiment(&toy_config(&out, "meta", 4, 0)).unwrap();
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,epoch,train_loss,test_accuracy,psi_updates,mse_fc0,mse_fc1,cos_fc0,cos_fc1"
    );
    assert_eq!(lines.count(), 6);
    assert_eq!(s.records.len(), 6);
    for r in &s.records {
        assert!((0.0..=1.0).contains(&r.test_accuracy));
        assert!(r.layer_cos.iter().all(|c| (-1.0..=1.0).contains(c)));
        assert!(r.layer_mse.iter().all(|&m| m >= 0.0));
    }
    assert_eq!(s.final_record.psi_updates, s.final_record.iteration - 1);
    let timing = std::fs::read_to_string(out.join("timing.csv")).unwrap();
    assert!(timing.starts_with("iteration,wall_clock_ms\n"));

    let acc = harness::evaluate_run(&out).unwrap();
    assert_eq!(acc, s.final_record.test_accuracy);
}

#[test]
fn sixteen_bit_plain_matches_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let fp = harness::run_experiment(&toy_config(&dir.path().join("fp"), "fp", 16, 1)).unwrap();
    let plain = harness::run_experiment(&toy_config(&dir.path().join("plain"), "plain", 16, 1)).unwrap();
    let (a, b) = (fp.final_record.train_loss, plain.final_record.train_loss);
    assert!((a - b).abs() <= 0.02 * a, "fp {a} plain {b}");
}

#[test]
fn two_bit_plain_is_worse_than_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let fp = harness::run_experiment(&toy_config(&dir.path().join(format!("fp{seed}")), "fp", 8, seed)).unwrap();
        let plain =
            harness::run_experiment(&toy_config(&dir.path().join(format!("p{seed}")), "plain", 2, seed)).unwrap();
        assert!(
            plain.final_record.train_loss > fp.final_record.train_loss,
            "seed {seed}: plain {} fp {}",
            plain.final_record.train_loss,
            fp.final_record.train_loss
        );
    }
}

#[test]
fn delta_against_reference_run() {
    let dir = tempfile::tempdir().unwrap();
    let fp_dir = dir.path().join("fp");
    let fp = harness::run_experiment(&toy_config(&fp_dir, "fp", 8, 2)).unwrap();
    let mut cfg = toy_config(&dir.path().join("plain"), "plain", 4, 2);
    cfg.fp_reference = Some(fp_dir);
    let s = harness::run_experiment(&cfg).unwrap();
    let d = s.delta.unwrap();
    assert_eq!(d, s.final_record.test_accuracy - fp.final_record.test_accuracy);
    let summary = harness::read_summary(&cfg.out.join("summary.txt")).unwrap();
    assert!(summary.iter().any(|(k, _)| k == "delta"));

    let mut missing = toy_config(&dir.path().join("x"), "plain", 4, 2);
    missing.fp_reference = Some(dir.path().join("nowhere"));
    assert!(harness::run_experiment(&missing).is_err());
}

#[test]
fn unwritable_output_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(harness::run_experiment(&toy_config(&blocker.join("run"), "fp", 8, 0)).is_err());
}

fn ten_class_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = Tensor::randn(vec![n * 16], 1.0, &mut rng).into_data();
    let mut labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    labels.shuffle(&mut rng);
    Dataset::new(vec![1, 4, 4], pixels, labels, 10, Split::Test).unwrap()
}

#[test]
fn eval_accuracy_properties() {
    let tape = Tape::new(Precision::F64);
    let spec = ModelSpec {
        arch: Architecture::SmallCnn { channels: vec![4], fc_width: 8 },
        input_shape: vec![1, 4, 4],
        num_classes: 10,
        quant: LayerQuant::default(),
    };
    let mut chance = Vec::new();
    for seed in 0..5 {
        let mut model = Model::build(spec.clone(), &tape, seed).unwrap();
        let data = ten_class_data(2000, seed + 100);
        let a = eval_accuracy(&mut model, &tape, &data, 64).unwrap();
        let b = eval_accuracy(&mut model, &tape, &data, 7).unwrap();
        assert_eq!(a, b);
        chance.push(a);

        // relabel with the model's own predictions: everything correct
        let logits = model.forward(&tape, &data.gather(&(0..data.len()).collect::<Vec<_>>()).0, false).unwrap();
        let own = Dataset { labels: harness::argmax_rows(logits.value()), ..data.clone() };
        assert_eq!(eval_accuracy(&mut model, &tape, &own, 100).unwrap(), 1.0);
    }
    let mean = chance.iter().sum::<f64>() / chance.len() as f64;
    assert!((mean - 0.1).abs() <= 0.05, "chance accuracy {mean}");

    let empty = Dataset::new(vec![1, 4, 4], vec![], vec![], 10, Split::Test).unwrap();
    let mut model = Model::build(spec, &tape, 0).unwrap();
    assert!(eval_accuracy(&mut model, &tape, &empty, 8).is_err());
}

#[test]
fn forward_shapes_for_all_architectures() {
    let tape = Tape::new(Precision::F64);
    let archs = [
        (Architecture::Mlp { widths: vec![48, 10, 5] }, vec![3, 4, 4]),
        (Architecture::SmallCnn { channels: vec![4, 6], fc_width: 9 }, vec![3, 8, 8]),
        (Architecture::MiniResnet { blocks_per_stage: vec![1, 1], widths: vec![4, 8] }, vec![3, 8, 8]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (arch, input) in archs {
        let spec = ModelSpec {
            arch,
            input_shape: input.clone(),
            num_classes: 5,
            quant: LayerQuant { weight_bits: Some(4), act_bits: Some(4), ..LayerQuant::default() },
        };
        let mut model = Model::build(spec, &tape, 1).unwrap();
        for batch in [1, 3] {
            let mut shape = vec![batch];
            shape.extend_from_slice(&input);
            let x = Tensor::randn(shape, 1.0, &mut rng);
            assert_eq!(model.forward(&tape, &x, true).unwrap().shape(), &[batch, 5]);
        }
    }
}

/// With every residual-branch weight zeroed, each block reduces to its
/// shortcut, so the network equals a hand-built skip-only path.
#[test]
fn residual_identity_audit() {
    let tape = Tape::new(Precision::F64);
    let spec = ModelSpec {
        arch: Architecture::MiniResnet { blocks_per_stage: vec![2, 2], widths: vec![4, 8] },
        input_shape: vec![2, 6, 6],
        num_classes: 3,
        quant: LayerQuant::default(),
    };
    let mut model = Model::build(spec, &tape, 5).unwrap();
    let last = model.layers.len() - 1;
    for l in &mut model.layers[1..last] {
        l.weight = tape.leaf(Tensor::zeros(l.weight.shape().to_vec()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(vec![2, 2, 6, 6], 1.0, &mut rng);
    let logits = model.forward(&tape, &x, false).unwrap();

    // skip-only path: stem, norm, relu, shortcuts (with relu), pool, fc
    let input = tape.constant(x);
    let mut h = input.conv2d(&model.layers[0].weight, 1, 1).unwrap();
    let n0 = &model.norms[0];
    let inv: Vec<f64> = n0.running_var.iter().map(|v| 1.0 / (v + 1e-5).sqrt()).collect();
    h = h.channel_affine(&n0.gamma, &n0.beta, n0.running_mean.clone(), inv).unwrap().relu().unwrap();
    // zeroed convolutions normalize to beta (zero) before the residual add
    h = h.relu().unwrap();
    h = h.relu().unwrap();
    h = h.shortcut_pad(2, 8).unwrap().relu().unwrap();
    h = h.relu().unwrap();
    let fc = &model.layers[last];
    let skip = h
        .mean_spatial()
        .unwrap()
        .matmul(&fc.weight.transpose().unwrap())
        .unwrap()
        .add_row(fc.bias.as_ref().unwrap())
        .unwrap();
    for (a, b) in logits.value().data().iter().zip(skip.value().data()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn synthetic_runs_use_distinct_test_split() {
    let train = synthetic_dataset(SyntheticKind::TwoGaussians, 100, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(&dir.path().join("r"), "fp", 8, 3);
    let (t, test) = harness::load_datasets(&cfg).unwrap();
    assert_eq!(t.sample(0), train.sample(0));
    assert_ne!(test.sample(0), train.sample(0));
}
