//! Drives the `ssept` binary for end-to-end tests.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_ssept"))
}

/// Runs the binary in `dir` and returns its output, whatever the exit status.
pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn ssept")
}

/// Runs the binary and panics with its stderr unless it exits with 0.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "ssept {args:?} exited with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// Parses `key = value` lines.
pub fn key_values(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn report_value(path: &Path, key: &str) -> f64 {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    key_values(&text)[key].parse().expect("numeric report value")
}

/// Parses a metrics log line such as `epoch=3 train_loss=… wall_seconds=0.5`.
pub fn log_fields(line: &str) -> HashMap<String, f64> {
    line.split_whitespace()
        .filter_map(|f| f.split_once('='))
        .map(|(k, v)| (k.to_string(), v.parse().unwrap()))
        .collect()
}

/// Mean `wall_seconds` over every epoch in a metrics log.
pub fn mean_epoch_seconds(log: &Path) -> f64 {
    let text = std::fs::read_to_string(log).unwrap();
    let secs: Vec<f64> = text.lines().map(|l| log_fields(l)["wall_seconds"]).collect();
    secs.iter().sum::<f64>() / secs.len() as f64
}

/// Reads an exported attention CSV into rows.
pub fn read_matrix(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

/// Largest deviation of a prefix row sum from 1, and whether every cell above
/// the diagonal is exactly zero.
pub fn attention_integrity(m: &[Vec<f64>]) -> (f64, bool) {
    let mut worst = 0.0f64;
    let mut upper_zero = true;
    for (i, row) in m.iter().enumerate() {
        worst = worst.max((row[..=i].iter().sum::<f64>() - 1.0).abs());
        upper_zero &= row[i + 1..].iter().all(|&v| v == 0.0);
    }
    (worst, upper_zero)
}

/// Settings for the sampled-Movielens pipeline.
#[derive(Debug, Clone)]
pub struct MlSettings {
    pub users: usize,
    pub epochs: usize,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct MlResults {
    pub ndcg: Vec<f64>,
    pub recall: Vec<f64>,
    pub poprec_ndcg: f64,
    pub ndcg_short: f64,
    pub epoch_seconds_long: f64,
    pub epoch_seconds_short: f64,
    pub prepare_stdout: String,
}

/// Shared model and training settings for the Movielens runs.
pub const ML_CONFIG: &str = "\
data.delimiter = ::
data.min_user_count = 5
data.min_item_count = 5
paths.cache = ml.cache
model.d_u = 25
model.d_i = 25
model.blocks = 1
model.dropout = 0.2
train.lr = 0.001
train.batch_size = 16
sse.p_u = 0.92
sse.p_i = 0.1
sse.p_y = 0.1
eval.k = 10
eval.negatives = 100
";

/// prepare → train at T=50 → evaluate at every C, PopRec at the first C,
/// then train at T=25 with p_s = 0.3 and evaluate at the first C.
pub fn ml_pipeline(ratings: &Path, dir: &Path, s: &MlSettings) -> MlResults {
    std::fs::write(dir.join("ml.conf"), ML_CONFIG).unwrap();
    let ratings = ratings.display().to_string();
    let users = format!("data.sample_users={}", s.users);
    let epochs = format!("train.epochs={}", s.epochs);
    let prepare_stdout = ok(dir, &["prepare", "-c", "ml.conf", "--input", &ratings, "--set", &users]);

    ok(dir, &["train", "-c", "ml.conf", "--out", "t50", "--set", "model.max_len=50", "--set", &epochs]);
    let negs = s.negatives.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    let common = ["-c", "ml.conf", "--out", "t50", "--set", "model.max_len=50"];
    ok(dir, &[&["evaluate"][..], &common, &["--negatives", &negs]].concat());
    let c0 = s.negatives[0].to_string();
    ok(dir, &[&["evaluate"][..], &common, &["--negatives", &c0, "--baseline", "poprec"]].concat());
    let report = |scorer: &str, out: &str, c: usize| dir.join(out).join(format!("report_test_{scorer}_c{c}.txt"));
    let ndcg = s.negatives.iter().map(|&c| report_value(&report("model", "t50", c), "ndcg_at_k")).collect();
    let recall = s.negatives.iter().map(|&c| report_value(&report("model", "t50", c), "recall_at_k")).collect();
    let poprec_ndcg = report_value(&report("poprec", "t50", s.negatives[0]), "ndcg_at_k");

    let short = ["-c", "ml.conf", "--out", "t25", "--set", "model.max_len=25", "--set", "train.sampling_prob=0.3"];
    ok(dir, &[&["train"][..], &short, &["--set", &epochs]].concat());
    ok(dir, &[&["evaluate"][..], &short, &["--negatives", &c0]].concat());
    MlResults {
        ndcg,
        recall,
        poprec_ndcg,
        ndcg_short: report_value(&report("model", "t25", s.negatives[0]), "ndcg_at_k"),
        epoch_seconds_long: mean_epoch_seconds(&dir.join("t50/metrics.log")),
        epoch_seconds_short: mean_epoch_seconds(&dir.join("t25/metrics.log")),
        prepare_stdout,
    }
}
