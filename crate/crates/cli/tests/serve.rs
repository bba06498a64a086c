mod common;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};

use common::*;
use fieldasr_core::engines::protocol::{decode_response, encode, Op, Request};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// What the server must answer for one line.
enum Expect {
    Valid(Op),
    Fails { id: u64, prefix: &'static str },
}

fn request(id: u64, op: Op, audio: &str, s: f64, e: f64) -> Request {
    Request { id, op, audio_path: audio.into(), start_s: s, end_s: e, transcript: None, features: None }
}

fn fuzz_line(rng: &mut ChaCha8Rng, id: u64, audio: &str, words: &[(String, f64, f64)]) -> (String, Expect) {
    let (w, ws, we) = &words[rng.gen_range(0..words.len())];
    let features = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        let frames = rng.gen_range(1..40);
        (0..frames).map(|_| (0..64).map(|_| rng.gen_range(-12.0..2.0)).collect()).collect()
    };
    match rng.gen_range(0..11) {
        0 | 1 => {
            let r = request(id, Op::Transcribe, audio, *ws, *we);
            (encode(&r), Expect::Valid(Op::Transcribe))
        }
        2 | 3 => {
            let mut r = request(id, Op::ForceAlign, audio, (ws - 0.1).max(0.0), we + 0.1);
            r.transcript = Some(w.clone());
            (encode(&r), Expect::Valid(Op::ForceAlign))
        }
        4 | 5 => {
            let mut r = request(id, Op::ScoreFrames, audio, *ws, *we);
            r.features = Some(features(rng));
            (encode(&r), Expect::Valid(Op::ScoreFrames))
        }
        6 => {
            let r = request(id, Op::Transcribe, audio, *we, *ws);
            (encode(&r), Expect::Fails { id, prefix: "precondition" })
        }
        7 => {
            let mut r = request(id, Op::ForceAlign, audio, *ws, *we);
            r.transcript = Some("  ".into());
            (encode(&r), Expect::Fails { id, prefix: "precondition" })
        }
        8 => {
            let mut r = request(id, Op::ScoreFrames, audio, *ws, *we);
            let mut f = features(rng);
            f.push(vec![0.0; 3]);
            r.features = Some(f);
            (encode(&r), Expect::Fails { id, prefix: "shape" })
        }
        9 => {
            let v = json!({ "id": id, "op": "translate", "audio_path": audio, "start_s": 0.0, "end_s": 1.0 });
            (v.to_string(), Expect::Fails { id, prefix: "parse" })
        }
        _ => {
            let full = encode(&request(id, Op::Transcribe, audio, *ws, *we));
            let cut = rng.gen_range(1..full.len() - 1);
            (full[..cut].to_string(), Expect::Fails { id: 0, prefix: "parse" })
        }
    }
}

fn corpus(dir: &Path) -> std::path::PathBuf {
    let cfg = write_config(dir, "pipeline.toml", &small_pipeline(2, 1));
    run_ok(&cfg, &["synth"]);
    cfg
}

#[test]
fn serve_answers_a_thousand_fuzzed_lines_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = corpus(dir.path());
    let words: Vec<serde_json::Value> = std::fs::read_to_string(dir.path().join("corpus/words.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let first = &words[0];
    let audio = dir.path().join("corpus").join(first["audio_path"].as_str().unwrap());
    let timings: Vec<(String, f64, f64)> = first["words"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| (w["w"].as_str().unwrap().to_string(), w["s"].as_f64().unwrap(), w["e"].as_f64().unwrap()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (lines, expects): (Vec<String>, Vec<Expect>) =
        (1..=1000).map(|id| fuzz_line(&mut rng, id, audio.to_str().unwrap(), &timings)).unzip();

    let mut child = Command::new(BIN)
        .arg("--config")
        .arg(&cfg)
        .args(["serve", "--transcriber", "asr", "--aligner", "mfa", "--scorer", "vad"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let writer = std::thread::spawn(move || {
        for l in lines {
            writeln!(stdin, "{l}").unwrap();
        }
    });
    let responses: Vec<String> = BufReader::new(child.stdout.take().unwrap()).lines().map(Result::unwrap).collect();
    writer.join().unwrap();
    assert!(child.wait().unwrap().success());

    assert_eq!(responses.len(), 1000);
    let mut ok = 0;
    for (i, (line, exp)) in responses.iter().zip(&expects).enumerate() {
        let r = decode_response(line).unwrap_or_else(|e| panic!("line {i}: {e}: {line}"));
        match exp {
            Expect::Valid(op) => {
                assert_eq!(r.id, i as u64 + 1);
                assert!(r.ok, "line {i}: {line}");
                r.validate_for(*op).unwrap();
                ok += 1;
            }
            Expect::Fails { id, prefix } => {
                assert_eq!(r.id, *id, "line {i}");
                assert!(!r.ok);
                let err = r.error.as_deref().unwrap();
                assert!(err.starts_with(prefix), "line {i}: expected {prefix}, got {err}");
            }
        }
    }
    assert!(ok > 400, "{ok}");
}

#[test]
fn serve_rejects_roles_it_was_not_given() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = corpus(dir.path());
    let mut child = Command::new(BIN)
        .arg("--config")
        .arg(&cfg)
        .args(["serve", "--scorer", "vad"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let req = request(5, Op::Transcribe, "x.wav", 0.0, 1.0);
    writeln!(child.stdin.take().unwrap(), "{}", encode(&req)).unwrap();
    let out = child.wait_with_output().unwrap();
    let r = decode_response(String::from_utf8(out.stdout).unwrap().trim()).unwrap();
    assert_eq!(r.id, 5);
    assert!(r.error.unwrap().starts_with("unsupported"));
}

#[test]
fn subprocess_engines_reproduce_in_process_results() {
    let dir = tempfile::tempdir().unwrap();
    let inner = corpus(dir.path());
    let serve = |role: &str, name: &str| {
        json!([BIN, "--config", inner.to_str().unwrap(), "serve", format!("--{role}"), name]).to_string()
    };
    let sub = format!(
        r#"seed = 11
jobs = 2

[paths]
out_dir = "run_sub"

[split]
test_stops = 0
validation_stops = 0

[[engines]]
name = "asr"
kind = "transcriber"
transport = "subprocess"
command = {}

[[engines]]
name = "mfa"
kind = "forced_aligner"
transport = "subprocess"
command = {}

[[engines]]
name = "w2v2"
kind = "forced_aligner"
transport = "in_process_mock"
mock = "uniform"

[[engines]]
name = "vad"
kind = "frame_scorer"
transport = "subprocess"
command = {}
"#,
        serve("transcriber", "asr"),
        serve("aligner", "mfa"),
        serve("scorer", "vad"),
    );
    let sub = write_config(dir.path(), "sub.toml", &sub);
    let truth = dir.path().join("corpus/truth.jsonl");
    let t = truth.to_str().unwrap();
    for cfg in [&inner, &sub] {
        run_ok(cfg, &["align", "--input", t]);
        run_ok(cfg, &["filter"]);
        run_ok(cfg, &["train-detector"]);
    }
    for f in ["align/aligned.jsonl", "align/report.jsonl", "filter/kept.jsonl", "detector/officer.json"] {
        let a = std::fs::read(dir.path().join("run").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("run_sub").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}
