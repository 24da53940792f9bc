//! End-to-end tests of the `pidcnn` binary: exit codes, byte-stable
//! dataset generation, and the full train/eval/analyze pipeline on a
//! small 16x16 configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pidcnn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code (killed by signal?)")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn first_line(path: &str) -> String {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {path}: {e}"));
    text.lines().next().unwrap_or_default().to_string()
}

/// Every row of a CSV parses: fixed column count, numeric cells numeric.
fn assert_csv_rows(path: &str, columns: usize, numeric_from: usize) {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {path}: {e}"));
    let mut lines = text.lines();
    lines.next().expect("header row");
    let mut rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), columns, "row {line:?} in {path}");
        for cell in &cells[numeric_from..] {
            if !cell.is_empty() {
                cell.parse::<f64>()
                    .unwrap_or_else(|e| panic!("cell {cell:?} in {path}: {e}"));
            }
        }
        rows += 1;
    }
    assert!(rows > 0, "{path} has no data rows");
}

fn gen_data(dir: &TempDir, name: &str, count: u32, seed: u64, size: usize) -> String {
    let out = path_str(dir, name);
    let result = run(&[
        "gen-data",
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--size",
        &size.to_string(),
        "--out",
        &out,
    ]);
    assert_eq!(code(&result), 0, "gen-data failed: {}", stderr(&result));
    out
}

#[test]
fn usage_and_help_exit_codes() {
    assert_eq!(code(&run(&[])), 1, "no arguments is a usage error");
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["train", "--help"])), 0);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["train"])), 1, "missing required flags");
}

#[test]
fn gen_data_is_byte_identical_across_reruns() {
    let dir = TempDir::new().unwrap();
    let a = gen_data(&dir, "a.pidb", 12, 9, 16);
    let b = gen_data(&dir, "b.pidb", 12, 9, 16);
    let c = gen_data(&dir, "c.pidb", 12, 10, 16);
    let bytes_a = std::fs::read(&a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&b).unwrap(), "same seed, same bytes");
    assert_ne!(bytes_a, std::fs::read(&c).unwrap(), "new seed, new scenes");
}

#[test]
fn missing_inputs_exit_with_io_code() {
    let dir = TempDir::new().unwrap();
    let missing = path_str(&dir, "missing.pidw");
    let report = path_str(&dir, "r.csv");
    let out = run(&["eval", "--ckpt", &missing, "--data", &missing, "--report", &report]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).starts_with("error:"), "stderr: {}", stderr(&out));
    let out = run(&["analyze-kernels", "--ckpt", &missing, "--report", &report]);
    assert_eq!(code(&out), 2);
    let ckpt = path_str(&dir, "out.pidw");
    let out = run(&[
        "train", "--stage", "1", "--data", &missing, "--val", &missing, "--out", &ckpt,
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_configuration_exits_with_usage_code() {
    let dir = TempDir::new().unwrap();
    let data = gen_data(&dir, "d.pidb", 8, 1, 16);
    let ckpt = path_str(&dir, "out.pidw");

    // Stage outside the curriculum.
    let out = run(&[
        "train", "--stage", "4", "--data", &data, "--val", &data, "--out", &ckpt,
    ]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));

    // Unknown schedule name.
    let out = run(&[
        "train", "--stage", "1", "--data", &data, "--val", &data, "--out", &ckpt,
        "--schedule", "bogus",
    ]);
    assert_eq!(code(&out), 1);

    // Later stages need a checkpoint to grow from.
    let out = run(&[
        "train", "--stage", "2", "--data", &data, "--val", &data, "--out", &ckpt,
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--init"), "stderr: {}", stderr(&out));

    // Image sizes that cannot host the block stack.
    let bad = path_str(&dir, "bad.pidb");
    let out = run(&["gen-data", "--count", "4", "--size", "4", "--out", &bad]);
    assert_eq!(code(&out), 1);

    let out = run(&[
        "compare", "--what", "bogus", "--data", &data, "--val", &data, "--out", &ckpt,
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn pipeline_writes_every_report() {
    let dir = TempDir::new().unwrap();
    let train = gen_data(&dir, "train.pidb", 16, 1, 16);
    let val = gen_data(&dir, "val.pidb", 8, 2, 16);
    let s1 = path_str(&dir, "s1.pidw");
    let s2 = path_str(&dir, "s2.pidw");

    let out = run(&[
        "train", "--stage", "1", "--data", &train, "--val", &val, "--out", &s1,
        "--epochs", "2", "--seed", "5", "--batch-size", "8",
    ]);
    assert_eq!(code(&out), 0, "stage 1: {}", stderr(&out));
    assert!(Path::new(&s1).exists());
    let metrics = path_str(&dir, "s1.metrics.csv");
    assert_eq!(first_line(&metrics), "step,epoch,lr,train_loss,val_loss,val_std");
    assert_csv_rows(&metrics, 6, 0);

    let report = path_str(&dir, "eval.csv");
    let out = run(&["eval", "--ckpt", &s1, "--data", &val, "--report", &report]);
    assert_eq!(code(&out), 0, "eval: {}", stderr(&out));
    assert_eq!(first_line(&report), "quantity,axis,std,max,mean,n");
    assert_csv_rows(&report, 6, 2);

    let kernels = path_str(&dir, "kernels.csv");
    let out = run(&["analyze-kernels", "--ckpt", &s1, "--report", &kernels]);
    assert_eq!(code(&out), 0, "analyze: {}", stderr(&out));
    assert_eq!(first_line(&kernels), "layer,outc,inc,axis,kp,ki,kd,ep,ei,ed");
    assert_csv_rows(&kernels, 10, 4);

    let out = run(&[
        "train", "--stage", "2", "--data", &train, "--val", &val, "--init", &s1,
        "--out", &s2, "--epochs", "1", "--seed", "5", "--batch-size", "8",
    ]);
    assert_eq!(code(&out), 0, "stage 2: {}", stderr(&out));

    let ablation = path_str(&dir, "ablation.csv");
    let out = run(&["ablate", "--ckpt", &s2, "--data", &val, "--report", &ablation]);
    assert_eq!(code(&out), 0, "ablate: {}", stderr(&out));
    assert_eq!(first_line(&ablation), "arm,quantity,axis,std,max,mean,n");
    assert_csv_rows(&ablation, 7, 3);

    let curves = path_str(&dir, "curves.csv");
    let out = run(&[
        "compare", "--what", "nonlinearity", "--data", &train, "--val", &val,
        "--out", &curves, "--epochs", "1", "--seed", "5", "--batch-size", "8",
    ]);
    assert_eq!(code(&out), 0, "compare: {}", stderr(&out));
    assert_eq!(first_line(&curves), "arm,step,epoch,lr,loss");
    assert_csv_rows(&curves, 5, 1);

    let bench = path_str(&dir, "bench.csv");
    let out = run(&[
        "bench", "--ckpt", &s1, "--data", &val, "--count", "4", "--warmup", "1",
        "--report", &bench,
    ]);
    assert_eq!(code(&out), 0, "bench: {}", stderr(&out));
    assert_eq!(first_line(&bench), "metric,value");
    assert_csv_rows(&bench, 2, 1);
}

#[test]
fn checkpoint_gating_rejects_wrong_stages() {
    let dir = TempDir::new().unwrap();
    let train = gen_data(&dir, "train.pidb", 8, 1, 16);
    let s1 = path_str(&dir, "s1.pidw");
    let out = run(&[
        "train", "--stage", "1", "--data", &train, "--val", &train, "--out", &s1,
        "--epochs", "1", "--batch-size", "8",
    ]);
    assert_eq!(code(&out), 0, "stage 1: {}", stderr(&out));

    // A one-frame checkpoint has no motion heads to ablate.
    let report = path_str(&dir, "r.csv");
    let out = run(&["ablate", "--ckpt", &s1, "--data", &train, "--report", &report]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));

    // Growing must go one stage at a time.
    let s3 = path_str(&dir, "s3.pidw");
    let out = run(&[
        "train", "--stage", "3", "--data", &train, "--val", &train, "--init", &s1,
        "--out", &s3, "--epochs", "1",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("frame"), "stderr: {}", stderr(&out));

    // Architecture flags must agree with the checkpoint being grown.
    let s2 = path_str(&dir, "s2.pidw");
    let out = run(&[
        "train", "--stage", "2", "--data", &train, "--val", &train, "--init", &s1,
        "--out", &s2, "--epochs", "1", "--pooling", "max",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("pooling"), "stderr: {}", stderr(&out));
}

#[test]
fn resume_continues_from_saved_epoch() {
    let dir = TempDir::new().unwrap();
    let train = gen_data(&dir, "train.pidb", 16, 1, 16);
    let full = path_str(&dir, "full.pidw");
    let out = run(&[
        "train", "--stage", "1", "--data", &train, "--val", &train, "--out", &full,
        "--epochs", "2", "--seed", "3", "--batch-size", "8",
    ]);
    assert_eq!(code(&out), 0, "full run: {}", stderr(&out));

    let half = path_str(&dir, "half.pidw");
    let out = run(&[
        "train", "--stage", "1", "--data", &train, "--val", &train, "--out", &half,
        "--epochs", "1", "--seed", "3", "--batch-size", "8",
    ]);
    assert_eq!(code(&out), 0, "half run: {}", stderr(&out));
    let resumed = path_str(&dir, "resumed.pidw");
    let out = run(&[
        "train", "--stage", "1", "--data", &train, "--val", &train, "--init", &half,
        "--out", &resumed, "--epochs", "2", "--seed", "3", "--batch-size", "8",
    ]);
    assert_eq!(code(&out), 0, "resumed run: {}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.contains("resuming stage 1"), "stdout: {stdout}");

    // The resumed checkpoint matches the uninterrupted one bit for bit.
    assert_eq!(
        std::fs::read(&full).unwrap(),
        std::fs::read(&resumed).unwrap(),
        "resumed training diverged from the uninterrupted run"
    );
}

#[test]
fn metrics_flag_overrides_default_path() {
    let dir = TempDir::new().unwrap();
    let train = gen_data(&dir, "train.pidb", 8, 1, 16);
    let ckpt = path_str(&dir, "model.pidw");
    let metrics = path_str(&dir, "custom_metrics.csv");
    let out = run(&[
        "train", "--stage", "1", "--data", &train, "--val", &train, "--out", &ckpt,
        "--epochs", "1", "--batch-size", "8", "--metrics", &metrics,
    ]);
    assert_eq!(code(&out), 0, "train: {}", stderr(&out));
    assert!(Path::new(&metrics).exists());
    assert!(!Path::new(&path_str(&dir, "model.metrics.csv")).exists());
}

#[test]
fn zero_epoch_training_still_writes_a_checkpoint() {
    let dir = TempDir::new().unwrap();
    let train = gen_data(&dir, "train.pidb", 8, 1, 16);
    let ckpt = path_str(&dir, "init.pidw");
    let out = run(&[
        "train", "--stage", "1", "--data", &train, "--val", &train, "--out", &ckpt,
        "--epochs", "0",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(Path::new(&ckpt).exists());
    assert!(PathBuf::from(path_str(&dir, "init.metrics.csv")).exists());
}
