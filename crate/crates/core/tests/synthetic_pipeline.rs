use std::path::Path;
use std::sync::Arc;

use fieldasr_core::align::{align_stop, AlignStatus, DEFAULT_MAX_CHUNK_S};
use fieldasr_core::audio::AudioCache;
use fieldasr_core::detect::{
    build_training_chunks, detect_officer_segments, evaluate_detection, featurize, officer_references, segment_f1,
    train_chunk_scorer, TrainConfig, TrainingConfig,
};
use fieldasr_core::engines::{EchoTranscriber, EnergyVad, JitteredTableAligner, UniformAligner};
use fieldasr_core::synthgen::{corpus_scenes, write_corpus, CorpusSpec};
use fieldasr_core::tune::{tune_detector, TuneSpec};
use fieldasr_core::{Manifest, SpeakerRole};

#[test]
fn alignment_recovers_midpoints_on_dense_clean_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        stops: 50,
        seed: 21,
        noise_floor: 0.0,
        gap_range_s: (0.1, 0.5),
        leading_silence_s: 1.0,
        ..Default::default()
    };
    let (truth, files) = write_corpus(&corpus_scenes(&spec), dir.path()).unwrap();
    let cache = Arc::new(AudioCache::with_root(dir.path()));
    let echo = EchoTranscriber::new("echo", cache.clone());
    let uniform = UniformAligner::new("uniform");
    let jittered = JitteredTableAligner::from_file("jittered", &dir.path().join(&files.words), 0.03, 5).unwrap();
    let (mut total, mut hit) = (0, 0);
    for stop in &truth.stops {
        let input = fieldasr_core::synthgen::strip_segments(stop);
        let dur = cache.get(&stop.audio).unwrap().duration_ms();
        let out = align_stop(&input, dur, &jittered, &uniform, &[&echo], DEFAULT_MAX_CHUNK_S);
        for (u, r) in stop.utterances.iter().zip(&out.reports) {
            total += 1;
            if r.status == AlignStatus::Aligned {
                let got = (r.start_s.unwrap() + r.end_s.unwrap()) / 2.0;
                if (got - u.segment.unwrap().midpoint()).abs() <= 0.25 {
                    hit += 1;
                }
            }
        }
    }
    let rate = hit as f64 / total as f64;
    eprintln!("midpoints within 0.25 s: {hit}/{total}");
    assert!(rate >= 0.95, "{rate}");
}

fn subset(m: &Manifest, range: std::ops::Range<usize>) -> Manifest {
    Manifest { stops: m.stops[range].to_vec(), schema_version: m.schema_version }
}

#[test]
fn detection_pipeline_on_near_and_far_speakers() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec { stops: 14, seed: 4, noise_floor: 0.01, driver_gain: 0.2, ..Default::default() };
    let (truth, _) = write_corpus(&corpus_scenes(&spec), dir.path()).unwrap();
    let cache = Arc::new(AudioCache::with_root(dir.path()));
    let (train, val, test) = (subset(&truth, 0..8), subset(&truth, 8..10), subset(&truth, 10..14));

    let vad = EnergyVad::new("energy");
    let chunks = build_training_chunks(&train, &cache, &vad, &TrainingConfig { seed: 1, ..Default::default() }).unwrap();
    let (x, y) = featurize(&chunks, &cache).unwrap();
    let officer = train_chunk_scorer(&x, &y, &TrainConfig { seed: 1, ..Default::default() }).unwrap();
    let echo = EchoTranscriber::new("echo", cache.clone());
    let (th, result) = tune_detector(&val, &cache, &vad, &officer, &echo, &TuneSpec { seed: 3, ..Default::default() }).unwrap();
    eprintln!("thresholds {th:?} cost {}", result.best_cost);

    let (mut matched, mut det, mut tru) = (0, 0, 0);
    let mut wers = Vec::new();
    for stop in &test.stops {
        let a = cache.get(Path::new(&stop.audio)).unwrap();
        let detected: Vec<_> = detect_officer_segments(&a, &vad, &officer, &th).unwrap().into_iter().map(|d| d.segment).collect();
        let truth_segs: Vec<_> = officer_references(stop).into_iter().map(|(s, _)| s).collect();
        let f = segment_f1(&detected, &truth_segs);
        matched += f.matched;
        det += f.detected;
        tru += f.truth;
        wers.push(evaluate_detection(&detected, stop, &echo).wer.value);
        assert!(stop.utterances.iter().any(|u| u.speaker_role == SpeakerRole::PrimaryOfficer));
    }
    let (p, r) = (matched as f64 / det as f64, matched as f64 / tru as f64);
    let f1 = 2.0 * p * r / (p + r);
    let wer = wers.iter().sum::<f64>() / wers.len() as f64;
    eprintln!("f1 {f1:.3} (p {p:.3} r {r:.3}), wer {wer:.3}");
    assert!(f1 >= 0.9);
    assert!(wer <= 0.1);
}
