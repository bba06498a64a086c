#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_fieldasr");

pub const STAGES: [&str; 9] =
    ["synth", "split", "align", "filter", "train-detector", "tune", "detect", "transcribe", "evaluate"];

/// In-process mock engines over the synthetic corpus.
pub const MOCK_ENGINES: &str = r#"
[[engines]]
name = "asr"
kind = "transcriber"
transport = "in_process_mock"
mock = "echo"

[[engines]]
name = "mfa"
kind = "forced_aligner"
transport = "in_process_mock"
mock = "jittered_table"
table = "corpus/words.jsonl"
jitter_s = 0.03
seed = 5

[[engines]]
name = "w2v2"
kind = "forced_aligner"
transport = "in_process_mock"
mock = "uniform"

[[engines]]
name = "vad"
kind = "frame_scorer"
transport = "in_process_mock"
mock = "energy_vad"
"#;

pub fn small_pipeline(stops: usize, jobs: usize) -> String {
    format!(
        r#"seed = 11
jobs = {jobs}

[synth]
stops = {stops}

[split]
test_stops = 4
validation_stops = 3

[filter]
criterion = "c4"

[tune]
budget = 8
init_samples = 4
{MOCK_ENGINES}"#
    )
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(BIN).arg("--config").arg(config).args(args).output().expect("spawn fieldasr")
}

/// Run a subcommand and panic with its stderr if it fails.
pub fn run_ok(config: &Path, args: &[&str]) -> serde_json::Value {
    let out = run(config, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout summary is JSON")
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Every regular file under `root`, relative and sorted.
pub fn files_under(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
