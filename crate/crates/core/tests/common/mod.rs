#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(self.stdout.trim()).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", self.stdout))
    }

    #[track_caller]
    pub fn ok(self) -> Self {
        assert_eq!(self.code, 0, "stderr: {}", self.stderr);
        self
    }
}

pub fn cli<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let out: Output = Command::new(env!("CARGO_BIN_EXE_imu-align"))
        .args(args)
        .env("IMU_ALIGN_THREADS", "1")
        .output()
        .expect("spawn imu-align");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

/// Synthetic corpus → ingested cache. Returns (corpus dir, cache path).
pub fn corpus(root: &Path, seed: u64, n: usize, noise: f64) -> (PathBuf, PathBuf) {
    let dir = root.join("corpus");
    let s = cli(&[
        "synth", "--seed", &seed.to_string(), "--n", &n.to_string(), "--classes", "4", "--dim", "16",
        "--noise", &noise.to_string(), "--samples", "200", "--out-dir", &p(&dir),
    ])
    .ok()
    .json();
    let ingest = &s["ingest"];
    let cache = root.join("windows.cache");
    cli(&[
        "ingest", "--imu", &p(&dir.join("synth.csv")),
        "--window-s", &ingest["window_s"].to_string(),
        "--stride-s", &ingest["stride_s"].to_string(),
        "--rate-hz", &ingest["rate_hz"].to_string(),
        "--out", &p(&cache),
    ])
    .ok();
    (dir, cache)
}

/// Short small-preset training run; returns the printed summary.
pub fn train(corpus: &Path, cache: &Path, run_dir: &Path, epochs: usize, extra: &[&str]) -> serde_json::Value {
    let mut args: Vec<String> = [
        "train", "--cache", &p(cache), "--video-anchors", &p(&corpus.join("video_anchors.jsonl")),
        "--preset", "small", "--epochs", &epochs.to_string(), "--seed", "3", "--batch-size", "8",
        "--run-dir", &p(run_dir),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    args.extend(extra.iter().map(|s| s.to_string()));
    cli(&args).ok().json()
}
