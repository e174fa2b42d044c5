use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metaquant::checks::{self, GRAD_CHECK_THRESHOLD};
use metaquant::config::ExperimentConfig;
use metaquant::{harness, Error};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "metaquant", version, about = "Quantization-aware training with meta-learned gradient quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        grad_bits: Option<u32>,
        #[arg(long)]
        weight_bits: Option<u32>,
        #[arg(long)]
        act_bits: Option<u32>,
        #[arg(long)]
        design: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        psi_lr: Option<f64>,
        /// Run directory of a full-precision reference for the delta report.
        #[arg(long)]
        fp_reference: Option<PathBuf>,
        /// Any other setting, as `key=value`; may be repeated.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Re-evaluate a finished run on its test split.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Finite-difference check of the hypernetwork gradients.
    GradCheck {
        /// Keep the weight history attached (negative control).
        #[arg(long)]
        no_detach: bool,
    },
    /// Oracle, symmetry and monotonicity sweeps of the quantizer.
    QuantizerCheck {
        #[arg(long, default_value_t = 100_000)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn train_overrides(cmd: &Command) -> Result<Vec<(String, String)>, String> {
    let Command::Train {
        seed, out, mode, grad_bits, weight_bits, act_bits, design, epochs, lr, psi_lr, fp_reference, set, ..
    } = cmd
    else {
        return Ok(Vec::new());
    };
    let mut o: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    put("run.seed", seed.map(|v| v.to_string()));
    put("run.out", out.as_ref().map(|p| p.display().to_string()));
    put("run.mode", mode.clone());
    put("quant.grad_bits", grad_bits.map(|v| v.to_string()));
    put("quant.weight_bits", weight_bits.map(|v| v.to_string()));
    put("quant.act_bits", act_bits.map(|v| v.to_string()));
    put("hypernet.design", design.clone());
    put("schedule.epochs", epochs.map(|v| v.to_string()));
    put("optimizer.lr", lr.map(|v| v.to_string()));
    put("hypernet.psi_lr", psi_lr.map(|v| v.to_string()));
    put("run.fp_reference", fp_reference.as_ref().map(|p| p.display().to_string()));
    for kv in set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        o.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(o)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match &cli.command {
        cmd @ Command::Train { config, .. } => {
            let overrides = train_overrides(cmd).map_err(Error::Config)?;
            let cfg = ExperimentConfig::from_file(config, &overrides)?;
            let s = harness::run_experiment(&cfg)?;
            println!("final_test_accuracy = {}", s.final_record.test_accuracy);
            println!("final_train_loss = {}", s.final_record.train_loss);
            if let Some(d) = s.delta {
                println!("delta = {d}");
            }
            println!("run directory: {}", cfg.out.display());
            Ok(0)
        }
        Command::Eval { run } => {
            let acc = harness::evaluate_run(run)?;
            println!("test_accuracy = {acc}");
            Ok(0)
        }
        Command::GradCheck { no_detach } => {
            let report = checks::grad_check(!no_detach)?;
            println!("{:<12} {:>7} {:>14}", "design", "params", "max_rel_err");
            for r in &report.rows {
                println!("{:<12} {:>7} {:>14.3e}", r.design.name(), r.params, r.max_rel_err);
            }
            let ok = report.passed(GRAD_CHECK_THRESHOLD);
            if ok {
                println!("PASS (threshold {GRAD_CHECK_THRESHOLD:e})");
            } else if *no_detach {
                println!("FAIL: weight history attached; gradients disagree with the one-step reference");
            } else {
                println!("FAIL (threshold {GRAD_CHECK_THRESHOLD:e})");
            }
            Ok(if ok { 0 } else { EXIT_VALIDATION })
        }
        Command::QuantizerCheck { cases, seed } => {
            let r = checks::quantizer_check(*cases, *seed)?;
            println!("oracle:       {} cases, {} mismatches", r.cases, r.mismatches);
            println!("symmetry:     {} cases, {} violations", r.symmetry_cases, r.symmetry_violations);
            println!("monotonicity: {} pairs, {} violations", r.monotonicity_cases, r.monotonicity_violations);
            Ok(if r.passed() { 0 } else { EXIT_VALIDATION })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
