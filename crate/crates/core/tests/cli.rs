use std::path::Path;
use std::process::{Command, Output};

fn metaquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaquant")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.conf");
    let text = format!(
        "run.mode = plain\nrun.out = {}\ndata.source = two-gaussians\ndata.train_size = 64\nmodel.arch = mlp\n\
         model.hidden = 4\nquant.grad_bits = 4\nschedule.batch_size = 16\n{extra}",
        dir.join("out").display()
    );
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = metaquant(&["train", "--config", &cfg, "--grad-bits", "8", "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let written = std::fs::read_to_string(dir.path().join("out/config.txt")).unwrap();
    assert!(written.contains("quant.grad_bits = 8"));
    assert!(written.contains("run.seed = 4"));

    let run = dir.path().join("out").display().to_string();
    let eval = metaquant(&["eval", "--run", &run]);
    assert!(eval.status.success());
    let stdout = String::from_utf8_lossy(&eval.stdout);
    let summary = std::fs::read_to_string(dir.path().join("out/summary.txt")).unwrap();
    let acc = stdout.trim().strip_prefix("test_accuracy = ").unwrap();
    assert!(summary.contains(&format!("final_test_accuracy = {acc}")));
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quant.grad_bitz = 4\n");
    let out = metaquant(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("quant.grad_bits"));

    let cfg = write_config(dir.path(), "");
    assert_eq!(metaquant(&["train", "--config", &cfg, "--grad-bits", "1"]).status.code(), Some(3));
    assert_eq!(metaquant(&["train", "--config", &cfg, "--mode", "meta"]).status.code(), Some(3));
    assert_eq!(metaquant(&["train", "--config", &cfg, "--set", "novalue"]).status.code(), Some(3));
    assert_eq!(metaquant(&["frobnicate"]).status.code(), Some(3));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing").display().to_string();
    assert_eq!(metaquant(&["eval", "--run", &missing]).status.code(), Some(2));
}

#[test]
fn validation_subcommands() {
    let ok = metaquant(&["grad-check"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8_lossy(&ok.stdout);
    for d in ["multifc", "lstmfc", "duallstmfc"] {
        assert!(text.lines().any(|l| l.starts_with(d)), "{text}");
    }
    assert_eq!(metaquant(&["grad-check", "--no-detach"]).status.code(), Some(1));
    assert_eq!(metaquant(&["quantizer-check", "--cases", "2000"]).status.code(), Some(0));
}
