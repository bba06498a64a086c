mod common;

use common::*;
use sha2::{Digest, Sha256};

fn full_run(dir: &std::path::Path, jobs: usize) -> std::path::PathBuf {
    let cfg = write_config(dir, "pipeline.toml", &small_pipeline(18, jobs));
    for stage in STAGES {
        run_ok(&cfg, &[stage]);
    }
    cfg
}

#[test]
fn pipeline_is_reproducible_across_directories_and_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    full_run(a.path(), 1);
    full_run(b.path(), 3);

    // Everything except the config itself, whose `jobs` differs.
    let artifacts = |d: &std::path::Path| -> Vec<_> {
        files_under(d).into_iter().filter(|f| f.as_os_str() != "pipeline.toml").collect()
    };
    let files = artifacts(a.path());
    assert_eq!(files, artifacts(b.path()));
    assert!(files.len() > 30, "{files:?}");
    for f in &files {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{} differs between runs", f.display());
    }

    let report = read_json(&a.path().join("run/evaluate/report.json"));
    assert_eq!(report["utterance"]["wer"], 0.0);
    assert!(report["utterance"]["utterances"].as_u64().unwrap() > 0);
    assert!(report["detection"]["wer"].as_f64().unwrap() <= 0.25, "{}", report["detection"]);
    assert!(report["config_hash"].is_string());
}

#[test]
fn run_records_list_digests_of_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "pipeline.toml", &small_pipeline(10, 2));
    run_ok(&cfg, &["synth"]);
    let s = run_ok(&cfg, &["split"]);
    let record = read_json(&dir.path().join("run/split/run.json"));
    assert_eq!(record["subcommand"], "split");
    assert_eq!(record["config_hash"], s["config_hash"]);
    assert_eq!(record["inputs"][0]["path"], "corpus/truth.jsonl");
    let outputs = record["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 4);
    for o in outputs {
        let bytes = std::fs::read(dir.path().join("run/split").join(o["path"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"], format!("{:x}", Sha256::digest(&bytes)));
    }
}

#[test]
fn align_gives_every_alignable_utterance_a_segment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "pipeline.toml", &small_pipeline(3, 1));
    run_ok(&cfg, &["synth"]);
    let truth = dir.path().join("corpus/truth.jsonl");
    run_ok(&cfg, &["align", "--input", truth.to_str().unwrap()]);
    let aligned = fieldasr_core::corpus::load_manifest(dir.path().join("run/align/aligned.jsonl")).unwrap();
    assert_eq!(aligned.stops.len(), 3);
    let mut n = 0;
    for s in &aligned.stops {
        for u in &s.utterances {
            if !fieldasr_core::textnorm::normalize(&u.raw_text).is_empty() {
                assert!(u.segment.is_some(), "{} has no segment", u.id);
                n += 1;
            }
        }
    }
    assert!(n > 10);
}

#[test]
fn criterion_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "pipeline.toml", &small_pipeline(8, 1));
    run_ok(&cfg, &["synth"]);
    run_ok(&cfg, &["split"]);
    run_ok(&cfg, &["align"]);
    let s = run_ok(&cfg, &["--criterion", "c1", "filter"]);
    assert_eq!(s["summary"]["criterion"], "c1");
    let stats = read_json(&dir.path().join("run/filter/stats.json"));
    assert_eq!(stats["criterion"], "c1");
}

#[test]
fn missing_engine_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let text = small_pipeline(3, 1).replacen("[filter]", "[align]\nmfa = \"ghost\"\n\n[filter]", 1);
    let cfg = write_config(dir.path(), "pipeline.toml", &text);
    run_ok(&cfg, &["synth"]);
    let truth = dir.path().join("corpus/truth.jsonl");
    let out = run(&cfg, &["align", "--input", truth.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["ok"], false);
    let msg = err["error"].as_str().unwrap();
    assert!(msg.contains("ghost") && msg.contains("align.mfa"), "{msg}");
}

#[test]
fn wrong_engine_kind_and_bad_config_fail() {
    let dir = tempfile::tempdir().unwrap();
    let text = small_pipeline(3, 1).replacen("[filter]", "[detector]\nvad = \"asr\"\n\n[filter]", 1);
    let cfg = write_config(dir.path(), "pipeline.toml", &text);
    let out = run(&cfg, &["train-detector"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected FrameScorer"));

    let bad = write_config(dir.path(), "bad.toml", "seeed = 3\n");
    let out = run(&bad, &["split"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeed"));
}
