//! Experiment orchestration: data loading, training loop, evaluation and
//! run-directory persistence.
//!
//! A run directory holds
//! - `config.txt`: resolved configuration,
//! - `metrics.csv`: one row per evaluation, bitwise reproducible,
//! - `timing.csv`: wall-clock time of the same rows,
//! - `summary.txt`: final `key = value` results,
//! - `weights.bin`: final model state.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::Tape;
use crate::config::{DataSource, ExperimentConfig, HyperNetInit};
use crate::data::{self, CifarOptions, Dataset, Split, SyntheticKind};
use crate::error::{Error, Result};
use crate::hypernet::HyperNet;
use crate::meta_update::{StepMetrics, Trainer, TrainerConfig};
use crate::models::{Architecture, Model, ModelSpec};
use crate::tensor::Tensor;

/// Header of `metrics.csv` before the per-layer columns.
pub const METRICS_COLUMNS: &[&str] = &["iteration", "epoch", "train_loss", "test_accuracy", "psi_updates"];

const EVAL_BATCH: usize = 500;

/// One evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub epoch: usize,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub psi_updates: u64,
    pub layer_mse: Vec<f64>,
    pub layer_cos: Vec<f64>,
    pub wall_clock_ms: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub final_record: MetricsRecord,
    pub records: Vec<MetricsRecord>,
    pub layer_names: Vec<String>,
    /// `final accuracy - reference accuracy` when a reference run is given.
    pub delta: Option<f64>,
}

/// Train and test splits for `cfg`. Image data is scaled to `[0, 1]` and,
/// if configured, standardized with training-set statistics.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let (mut train, mut test) = match d.source {
        DataSource::Mnist => (
            data::load_mnist_dir(&d.path, Split::Train)?,
            data::load_mnist_dir(&d.path, Split::Test)?,
        ),
        DataSource::Cifar10 => {
            let names: Vec<PathBuf> = (1..=5).map(|i| d.path.join(format!("data_batch_{i}.bin"))).collect();
            let refs: Vec<&Path> = names.iter().map(PathBuf::as_path).collect();
            let raw = CifarOptions { subset: None, standardize: false };
            (
                data::load_cifar10_files(&refs, raw, Split::Train)?,
                data::load_cifar10_binary(&d.path.join("test_batch.bin"), raw, Split::Test)?,
            )
        }
        DataSource::TwoGaussians | DataSource::Ring => {
            let kind = if d.source == DataSource::Ring { SyntheticKind::Ring } else { SyntheticKind::TwoGaussians };
            let mut test = data::synthetic_dataset(kind, d.test_size, cfg.seed.wrapping_add(0x5eed))?;
            test.split = Split::Test;
            (data::synthetic_dataset(kind, d.train_size, cfg.seed)?, test)
        }
    };
    if let Some(k) = d.train_subset {
        train = train.take(k);
    }
    if let Some(k) = d.test_subset {
        test = test.take(k);
    }
    let image = matches!(d.source, DataSource::Mnist | DataSource::Cifar10);
    if image && d.standardize && !train.is_empty() {
        let stats = train.channel_stats();
        train.standardize(&stats);
        test.standardize(&stats);
    }
    Ok((train, test))
}

/// Model description for a dataset. MLP widths in the configuration are
/// the hidden widths only.
pub fn model_spec(cfg: &ExperimentConfig, sample_shape: &[usize], num_classes: usize) -> ModelSpec {
    let arch = match &cfg.arch {
        Architecture::Mlp { widths } => {
            let mut full = vec![sample_shape.iter().product()];
            full.extend_from_slice(widths);
            full.push(num_classes);
            Architecture::Mlp { widths: full }
        }
        other => other.clone(),
    };
    ModelSpec { arch, input_shape: sample_shape.to_vec(), num_classes, quant: cfg.layer_quant }
}

pub fn trainer_config(cfg: &ExperimentConfig) -> TrainerConfig {
    TrainerConfig {
        mode: cfg.mode,
        optimizer: cfg.optimizer,
        grad_quant: cfg.grad_quant,
        hypernet: cfg.hypernet.clone(),
        hypernet_seed: cfg.seed.wrapping_add(1),
        bypass_quantizer: false,
        detach_weight_history: true,
    }
}

/// Index of the largest logit per row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Top-1 accuracy of `model` on `data`, evaluated in inference mode.
pub fn eval_accuracy(model: &mut Model, tape: &Tape, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("eval_accuracy", "dataset is empty"));
    }
    let mut correct = 0usize;
    for b in data::batch_iterator(data, batch_size.max(1), None, 0)? {
        let logits = model.forward(tape, &b.images, false)?;
        correct += argmax_rows(logits.value()).iter().zip(&b.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

const WEIGHTS_MAGIC: &[u8; 4] = b"MQW1";

pub fn save_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(WEIGHTS_MAGIC)?;
    put(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        put(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            put(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| Error::format(path, "truncated weights file"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != WEIGHTS_MAGIC {
        return Err(Error::format(path, "not a weights file"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        out.push(Tensor::new(shape, data)?);
    }
    Ok(out)
}

/// Parses a `key = value` summary file.
pub fn read_summary(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn reference_accuracy(run: &Path) -> Result<f64> {
    let path = run.join("summary.txt");
    let summary = read_summary(&path)?;
    let mode = summary.iter().find(|(k, _)| k == "mode").map(|(_, v)| v.as_str());
    if mode != Some("fp") {
        log::warn!("{}: reference run has mode {:?}, not fp", path.display(), mode);
    }
    summary
        .iter()
        .find(|(k, _)| k == "final_test_accuracy")
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::format(&path, "no final_test_accuracy entry"))
}

fn csv_header(layers: &[String]) -> String {
    let mut cols: Vec<String> = METRICS_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.extend(layers.iter().map(|n| format!("mse_{n}")));
    cols.extend(layers.iter().map(|n| format!("cos_{n}")));
    cols.join(",")
}

fn csv_row(r: &MetricsRecord) -> String {
    let mut s = format!("{},{},{},{},{}", r.iteration, r.epoch, r.train_loss, r.test_accuracy, r.psi_updates);
    for v in r.layer_mse.iter().chain(&r.layer_cos) {
        let _ = write!(s, ",{v}");
    }
    s
}

/// Running means of step metrics between two evaluations.
#[derive(Default)]
struct Window {
    steps: usize,
    loss: f64,
    mse: Vec<f64>,
    cos: Vec<f64>,
}

impl Window {
    fn push(&mut self, m: &StepMetrics) {
        if self.mse.is_empty() {
            self.mse = vec![0.0; m.layer_mse.len()];
            self.cos = vec![0.0; m.layer_cos.len()];
        }
        self.steps += 1;
        self.loss += m.loss;
        for (a, b) in self.mse.iter_mut().zip(&m.layer_mse) {
            *a += b;
        }
        for (a, b) in self.cos.iter_mut().zip(&m.layer_cos) {
            *a += b;
        }
    }

    fn take(&mut self) -> (f64, Vec<f64>, Vec<f64>) {
        let n = self.steps.max(1) as f64;
        let out = (
            self.loss / n,
            self.mse.iter().map(|v| v / n).collect(),
            self.cos.iter().map(|v| v / n).collect(),
        );
        *self = Window::default();
        out
    }
}

/// Trains per `cfg` on the given data and writes the run directory.
pub fn run_with_data(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<RunSummary> {
    if train.is_empty() {
        return Err(Error::invalid("run_experiment", "training set is empty"));
    }
    let reference = match &cfg.fp_reference {
        Some(p) => Some(reference_accuracy(p)?),
        None => None,
    };
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_file(&cfg.out.join("config.txt"), cfg.to_text().as_bytes())?;

    let tape = Tape::new(cfg.precision);
    let spec = model_spec(cfg, &train.sample_shape, train.num_classes);
    let model = Model::build(spec, &tape, cfg.seed)?;
    let layer_names: Vec<String> = model.layers.iter().map(|l| l.name.clone()).collect();
    let tcfg = trainer_config(cfg);
    let net = match (cfg.mode, cfg.hypernet_init, &cfg.hypernet) {
        (crate::meta_update::Mode::Meta, HyperNetInit::Identity, Some(h)) => {
            Some(HyperNet::exact_identity(&tape, h.hidden, tcfg.hypernet_seed)?)
        }
        _ => None,
    };
    let mut trainer = Trainer::new(tape.clone(), model, tcfg, net)?;

    let start = Instant::now();
    let mut records = Vec::new();
    let mut window = Window::default();
    let shuffle = Some(cfg.seed);
    let max_steps = cfg.schedule.max_steps.unwrap_or(u64::MAX);
    let evaluate = |trainer: &mut Trainer, window: &mut Window, epoch: usize| -> Result<MetricsRecord> {
        let (train_loss, layer_mse, layer_cos) = window.take();
        let test_accuracy = eval_accuracy(trainer.model_mut(), &tape, test, EVAL_BATCH)?;
        let r = MetricsRecord {
            iteration: trainer.iteration(),
            epoch,
            train_loss,
            test_accuracy,
            psi_updates: trainer.psi_updates(),
            layer_mse,
            layer_cos,
            wall_clock_ms: start.elapsed().as_millis(),
        };
        log::info!(
            "iter {} epoch {} loss {:.5} acc {:.4}",
            r.iteration,
            r.epoch,
            r.train_loss,
            r.test_accuracy
        );
        Ok(r)
    };

    'outer: for epoch in 0..cfg.schedule.epochs {
        for batch in data::batch_iterator(train, cfg.schedule.batch_size, shuffle, epoch as u64)? {
            if trainer.iteration() >= max_steps {
                break 'outer;
            }
            let m = trainer.training_step(&batch.images, &batch.labels)?;
            window.push(&m);
            let interval = cfg.schedule.eval_interval as u64;
            if interval > 0 && trainer.iteration() % interval == 0 {
                records.push(evaluate(&mut trainer, &mut window, epoch)?);
            }
        }
        if cfg.schedule.eval_interval == 0 {
            records.push(evaluate(&mut trainer, &mut window, epoch)?);
        }
    }
    if records.last().is_none_or(|r| r.iteration != trainer.iteration()) {
        let epoch = records.last().map_or(0, |r| r.epoch);
        records.push(evaluate(&mut trainer, &mut window, epoch)?);
    }

    let mut metrics = csv_header(&layer_names);
    metrics.push('\n');
    let mut timing = String::from("iteration,wall_clock_ms\n");
    for r in &records {
        metrics.push_str(&csv_row(r));
        metrics.push('\n');
        let _ = writeln!(timing, "{},{}", r.iteration, r.wall_clock_ms);
    }
    write_file(&cfg.out.join("metrics.csv"), metrics.as_bytes())?;
    write_file(&cfg.out.join("timing.csv"), timing.as_bytes())?;
    save_tensors(&cfg.out.join("weights.bin"), &trainer.model().state_tensors())?;

    let last = records.last().cloned().expect("at least one record");
    let delta = reference.map(|a| last.test_accuracy - a);
    let mut summary = String::new();
    let _ = writeln!(summary, "mode = {}", cfg.mode);
    let _ = writeln!(summary, "seed = {}", cfg.seed);
    let _ = writeln!(summary, "iterations = {}", last.iteration);
    let _ = writeln!(summary, "psi_updates = {}", last.psi_updates);
    let _ = writeln!(summary, "final_train_loss = {}", last.train_loss);
    let _ = writeln!(summary, "final_test_accuracy = {}", last.test_accuracy);
    if let (Some(p), Some(a), Some(d)) = (&cfg.fp_reference, reference, delta) {
        let _ = writeln!(summary, "fp_reference = {}", p.display());
        let _ = writeln!(summary, "fp_reference_accuracy = {a}");
        let _ = writeln!(summary, "delta = {d}");
    }
    write_file(&cfg.out.join("summary.txt"), summary.as_bytes())?;

    Ok(RunSummary { final_record: last, records, layer_names, delta })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let (train, test) = load_datasets(cfg)?;
    run_with_data(cfg, &train, &test)
}

/// Re-evaluates a finished run on its test split.
pub fn evaluate_run(dir: &Path) -> Result<f64> {
    let cfg = ExperimentConfig::from_file(&dir.join("config.txt"), &[])?;
    let (train, test) = load_datasets(&cfg)?;
    let tape = Tape::new(cfg.precision);
    let mut model = Model::build(model_spec(&cfg, &train.sample_shape, train.num_classes), &tape, cfg.seed)?;
    model.load_state(&tape, load_tensors(&dir.join("weights.bin"))?)?;
    eval_accuracy(&mut model, &tape, &test, EVAL_BATCH)
}
