//! Experiment configuration: `key = value` lines with dotted section keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::Precision;
use crate::error::{Error, Result};
use crate::hypernet::{Design, HyperNetConfig};
use crate::meta_update::{Mode, OptimizerConfig, OptimizerKind};
use crate::models::{Architecture, LayerQuant};
use crate::quant::{ClipPolicy, QuantConfig, MAX_BITS, MIN_BITS};

/// Every accepted key with its default; `None` marks keys without one.
const KEYS: &[(&str, Option<&str>)] = &[
    ("run.mode", Some("meta")),
    ("run.seed", Some("0")),
    ("run.out", Some("runs/latest")),
    ("run.precision", Some("f64")),
    ("run.fp_reference", None),
    ("data.source", None),
    ("data.path", Some("data/mnist")),
    ("data.train_subset", None),
    ("data.test_subset", None),
    ("data.train_size", Some("1000")),
    ("data.test_size", Some("1000")),
    ("data.standardize", Some("true")),
    ("model.arch", None),
    ("model.hidden", Some("32")),
    ("model.channels", Some("8,16")),
    ("model.fc_width", Some("32")),
    ("model.blocks", Some("3,3,3")),
    ("model.widths", Some("16,32,64")),
    ("quant.weight_bits", Some("0")),
    ("quant.act_bits", Some("0")),
    ("quant.grad_bits", Some("8")),
    ("quant.clip", Some("max-abs")),
    ("quant.error_signal", Some("false")),
    ("quant.error_signal_bits", Some("8")),
    ("quant.skip_first_last", Some("true")),
    ("hypernet.design", Some("duallstmfc")),
    ("hypernet.hidden", Some("11")),
    ("hypernet.fc_layers", None),
    ("hypernet.psi_lr", Some("0.001")),
    ("hypernet.residual", Some("false")),
    ("hypernet.persistent_state", Some("false")),
    ("hypernet.input_scaling", Some("false")),
    ("hypernet.init", Some("default")),
    ("optimizer.kind", Some("momentum")),
    ("optimizer.lr", Some("0.01")),
    ("optimizer.momentum", Some("0.9")),
    ("optimizer.lr_decay", Some("0")),
    ("optimizer.beta1", Some("0.9")),
    ("optimizer.beta2", Some("0.999")),
    ("optimizer.eps", Some("1e-8")),
    ("schedule.epochs", Some("1")),
    ("schedule.batch_size", Some("32")),
    ("schedule.eval_interval", Some("0")),
    ("schedule.max_steps", None),
];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Mnist,
    Cifar10,
    TwoGaussians,
    Ring,
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DataSource::Mnist),
            "cifar10" => Ok(DataSource::Cifar10),
            "two-gaussians" => Ok(DataSource::TwoGaussians),
            "ring" => Ok(DataSource::Ring),
            _ => Err(Error::Config(format!(
                "data.source: unknown source `{s}` (expected mnist, cifar10, two-gaussians or ring)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: PathBuf,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Sample counts of the synthetic generators.
    pub train_size: usize,
    pub test_size: usize,
    pub standardize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HyperNetInit {
    Default,
    /// Exact identity `MultiFc` (final weights zero, bias one).
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Steps between evaluations; 0 evaluates once per epoch.
    pub eval_interval: usize,
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    pub precision: Precision,
    pub fp_reference: Option<PathBuf>,
    pub data: DataConfig,
    pub arch: Architecture,
    pub layer_quant: LayerQuant,
    pub grad_quant: QuantConfig,
    pub hypernet: Option<HyperNetConfig>,
    pub hypernet_init: HyperNetInit,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    /// Resolved key/value pairs, defaults included.
    values: BTreeMap<String, String>,
}

fn nearest_key(key: &str) -> &'static str {
    KEYS.iter()
        .map(|(k, _)| *k)
        .max_by(|a, b| strsim::jaro_winkler(key, a).total_cmp(&strsim::jaro_winkler(key, b)))
        .expect("key table is not empty")
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// Parses `key = value` text into raw pairs. Blank lines and `#` comments
/// are skipped; unknown and repeated keys are errors.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !known(k) {
            return Err(Error::Config(format!(
                "line {}: unknown key `{k}` (did you mean `{}`?)",
                no + 1,
                nearest_key(k)
            )));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key `{k}` given twice", no + 1)));
        }
    }
    Ok(out)
}

struct Lookup<'a> {
    values: &'a BTreeMap<String, String>,
}

impl Lookup<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn req(&self, key: &str) -> Result<&str> {
        self.raw(key).ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn parse<T: FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let v = self.req(key)?;
        v.parse().map_err(|_| Error::Config(format!("{key}: expected {what}, got `{v}`")))
    }

    fn opt<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(_) => self.parse(key, what).map(Some),
        }
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.req(key)?;
        v.split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("{key}: expected a comma-separated list of integers, got `{v}`"))))
            .collect()
    }

    fn bits(&self, key: &str, allow_off: bool) -> Result<Option<u32>> {
        let b: u32 = self.parse(key, "an integer")?;
        if allow_off && b == 0 {
            return Ok(None);
        }
        if !(MIN_BITS..=MAX_BITS).contains(&b) {
            let off = if allow_off { " (or 0 to disable)" } else { "" };
            return Err(Error::Config(format!("{key}: {b} outside [{MIN_BITS}, {MAX_BITS}]{off}")));
        }
        Ok(Some(b))
    }

    fn positive(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse(key, "a number")?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{key}: {v} must be positive")));
        }
        Ok(v)
    }
}

fn parse_clip(v: &str) -> Result<ClipPolicy> {
    let bad = || Error::Config(format!("quant.clip: expected max-abs, percentile:P or fixed:C, got `{v}`"));
    if v == "max-abs" {
        return Ok(ClipPolicy::MaxAbs);
    }
    let (kind, arg) = v.split_once(':').ok_or_else(bad)?;
    let x: f64 = arg.trim().parse().map_err(|_| bad())?;
    match kind.trim() {
        "percentile" => Ok(ClipPolicy::Percentile(x)),
        "fixed" => Ok(ClipPolicy::Fixed(x)),
        _ => Err(bad()),
    }
}

fn clip_text(c: ClipPolicy) -> String {
    match c {
        ClipPolicy::MaxAbs => "max-abs".into(),
        ClipPolicy::Percentile(p) => format!("percentile:{p}"),
        ClipPolicy::Fixed(x) => format!("fixed:{x}"),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, overrides)
    }

    /// Parses `text`, then applies `overrides` (later entries win).
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut given = parse_pairs(text)?;
        for (k, v) in overrides {
            if !known(k) {
                return Err(Error::Config(format!("unknown key `{k}` (did you mean `{}`?)", nearest_key(k))));
            }
            given.insert(k.clone(), v.clone());
        }
        Self::from_pairs(given)
    }

    pub fn from_pairs(given: BTreeMap<String, String>) -> Result<Self> {
        let has_hypernet = given.keys().any(|k| k.starts_with("hypernet."));
        let mut values = given;
        for (k, d) in KEYS {
            if let Some(d) = d {
                values.entry(k.to_string()).or_insert_with(|| d.to_string());
            }
        }
        let l = Lookup { values: &values };

        let mode: Mode = l.req("run.mode")?.parse()?;
        let precision = match l.req("run.precision")? {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => return Err(Error::Config(format!("run.precision: expected f64 or f32, got `{other}`"))),
        };

        let data = DataConfig {
            source: l.req("data.source")?.parse()?,
            path: PathBuf::from(l.req("data.path")?),
            train_subset: l.opt("data.train_subset", "an integer")?,
            test_subset: l.opt("data.test_subset", "an integer")?,
            train_size: l.parse("data.train_size", "an integer")?,
            test_size: l.parse("data.test_size", "an integer")?,
            standardize: l.parse("data.standardize", "true or false")?,
        };
        if data.train_size < 2 || data.test_size < 1 {
            return Err(Error::Config("data.train_size must be at least 2 and data.test_size at least 1".into()));
        }

        let arch = match l.req("model.arch")? {
            "mlp" => {
                let hidden = l.list("model.hidden")?;
                Architecture::Mlp { widths: hidden }
            }
            "small-cnn" => Architecture::SmallCnn {
                channels: l.list("model.channels")?,
                fc_width: l.parse("model.fc_width", "an integer")?,
            },
            "mini-resnet" => Architecture::MiniResnet {
                blocks_per_stage: l.list("model.blocks")?,
                widths: l.list("model.widths")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "model.arch: expected mlp, small-cnn or mini-resnet, got `{other}`"
                )))
            }
        };

        let grad_bits = l.bits("quant.grad_bits", false)?.expect("gradient bits are always on");
        let grad_quant = QuantConfig::new(grad_bits).with_clip(parse_clip(l.req("quant.clip")?)?);
        grad_quant.validate().map_err(|e| Error::Config(e.to_string()))?;
        let error_signal = if l.parse("quant.error_signal", "true or false")? {
            let b = l.bits("quant.error_signal_bits", false)?.expect("on");
            Some(QuantConfig::new(b))
        } else {
            None
        };
        let layer_quant = LayerQuant {
            weight_bits: l.bits("quant.weight_bits", true)?,
            act_bits: l.bits("quant.act_bits", true)?,
            skip_first_last: l.parse("quant.skip_first_last", "true or false")?,
            error_signal,
        };

        if mode == Mode::Meta && !has_hypernet {
            return Err(Error::Config("run.mode = meta requires a hypernet section (hypernet.* keys)".into()));
        }
        let hypernet = if mode == Mode::Meta {
            let design: Design = l.req("hypernet.design")?.parse()?;
            let hidden: usize = l.parse("hypernet.hidden", "an integer")?;
            if hidden == 0 {
                return Err(Error::Config("hypernet.hidden must be at least 1".into()));
            }
            Some(HyperNetConfig {
                design,
                hidden,
                fc_layers: l.opt("hypernet.fc_layers", "an integer")?,
                residual: l.parse("hypernet.residual", "true or false")?,
                persistent_state: l.parse("hypernet.persistent_state", "true or false")?,
                input_scaling: l.parse("hypernet.input_scaling", "true or false")?,
            })
        } else {
            None
        };
        let hypernet_init = match l.req("hypernet.init")? {
            "default" => HyperNetInit::Default,
            "identity" => HyperNetInit::Identity,
            other => return Err(Error::Config(format!("hypernet.init: expected default or identity, got `{other}`"))),
        };

        let kind = match l.req("optimizer.kind")? {
            "sgd" => OptimizerKind::Sgd,
            "momentum" => OptimizerKind::Momentum { m: l.parse("optimizer.momentum", "a number")? },
            "adam" => OptimizerKind::Adam {
                beta1: l.parse("optimizer.beta1", "a number")?,
                beta2: l.parse("optimizer.beta2", "a number")?,
                eps: l.positive("optimizer.eps")?,
            },
            other => return Err(Error::Config(format!("optimizer.kind: expected sgd, momentum or adam, got `{other}`"))),
        };
        let optimizer = OptimizerConfig {
            kind,
            lr: l.positive("optimizer.lr")?,
            lr_decay: l.parse("optimizer.lr_decay", "a number")?,
            psi_lr: l.parse("hypernet.psi_lr", "a number")?,
        };
        optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;

        let schedule = ScheduleConfig {
            epochs: l.parse("schedule.epochs", "an integer")?,
            batch_size: l.parse("schedule.batch_size", "an integer")?,
            eval_interval: l.parse("schedule.eval_interval", "an integer")?,
            max_steps: l.opt("schedule.max_steps", "an integer")?,
        };
        if schedule.epochs == 0 || schedule.batch_size == 0 {
            return Err(Error::Config("schedule.epochs and schedule.batch_size must be at least 1".into()));
        }

        Ok(Self {
            mode,
            seed: l.parse("run.seed", "an integer")?,
            out: PathBuf::from(l.req("run.out")?),
            precision,
            fp_reference: l.raw("run.fp_reference").map(PathBuf::from),
            data,
            arch,
            layer_quant,
            grad_quant,
            hypernet,
            hypernet_init,
            optimizer,
            schedule,
            values,
        })
    }

    /// All resolved settings as `key = value` text; parsing it back yields
    /// the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn clip_text(&self) -> String {
        clip_text(self.grad_quant.clip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "\
# toy run
data.source = two-gaussians
model.arch = mlp
model.hidden = 8
run.mode = plain
quant.grad_bits = 4   # gradient bit-width
";

    #[test]
    fn parses_and_applies_defaults() {
        let c = ExperimentConfig::from_text(BASE, &[]).unwrap();
        assert_eq!(c.grad_quant.bits, 4);
        assert_eq!(c.mode, Mode::Plain);
        assert_eq!(c.schedule.batch_size, 32);
        assert!(c.hypernet.is_none());
        assert_eq!(c.arch, Architecture::Mlp { widths: vec![8] });
    }

    #[test]
    fn range_and_type_errors() {
        let bad = BASE.replace("grad_bits = 4", "grad_bits = 1");
        let e = ExperimentConfig::from_text(&bad, &[]).unwrap_err().to_string();
        assert!(e.contains("quant.grad_bits"), "{e}");
        let bad = BASE.replace("grad_bits = 4", "grad_bits = four");
        assert!(ExperimentConfig::from_text(&bad, &[]).is_err());
        let bad = BASE.replace("model.arch = mlp\n", "");
        let e = ExperimentConfig::from_text(&bad, &[]).unwrap_err().to_string();
        assert!(e.contains("model.arch"), "{e}");
    }

    #[test]
    fn overrides_take_precedence() {
        let o = vec![("quant.grad_bits".to_string(), "8".to_string())];
        assert_eq!(ExperimentConfig::from_text(BASE, &o).unwrap().grad_quant.bits, 8);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let e = parse_pairs("quant.grad_bit = 4").unwrap_err().to_string();
        assert!(e.contains("quant.grad_bits"), "{e}");
        assert!(parse_pairs("a = 1\nno equals sign").is_err());
        assert!(parse_pairs("run.seed = 1\nrun.seed = 2").is_err());
    }

    #[test]
    fn meta_needs_hypernet_section() {
        let meta = BASE.replace("run.mode = plain", "run.mode = meta");
        assert!(ExperimentConfig::from_text(&meta, &[]).is_err());
        let with = format!("{meta}hypernet.design = multifc\n");
        let c = ExperimentConfig::from_text(&with, &[]).unwrap();
        assert_eq!(c.hypernet.unwrap().design, Design::MultiFc);
    }

    #[test]
    fn text_round_trip() {
        let c = ExperimentConfig::from_text(BASE, &[]).unwrap();
        let again = ExperimentConfig::from_text(&c.to_text(), &[]).unwrap();
        assert_eq!(c, again);
    }
}
