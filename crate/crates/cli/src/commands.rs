use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use fieldasr_core::align::{align_stop, method_frequencies, AlignmentReport};
use fieldasr_core::audio::AudioCache;
use fieldasr_core::corpus::{load_manifest, partition_splits, SplitConfig};
use fieldasr_core::detect::{
    build_training_chunks, detect_officer_segments, featurize, score_transcripts, train_chunk_scorer, DetectionEval,
    DetectorThresholds, LinearScorer,
};
use fieldasr_core::engines::protocol::{serve, Backend};
use fieldasr_core::engines::{EngineKind, EngineRegistry, EngineSpec};
use fieldasr_core::eval::{fit_mixed_effects, render_report, subgroup_table, EvalRow, GroupField};
use fieldasr_core::filter::{filter_manifest, scores_from_reports};
use fieldasr_core::metrics::{cer, pooled, wer};
use fieldasr_core::synthgen::{corpus_scenes, write_corpus, CorpusSpec};
use fieldasr_core::tune::{tune_detector, TuneSpec};
use fieldasr_core::{Manifest, Segment, StopRecord, Transcriber};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts::Run;
use crate::config::Loaded;

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn load(path: &Path) -> Result<Manifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

/// `--input` if given, otherwise `<out>/<stage>/<file>`.
fn input_or(loaded: &Loaded, flag: &Option<PathBuf>, stage: &str, file: &str) -> PathBuf {
    match flag {
        Some(p) => p.clone(),
        None => loaded.out_dir().join(stage).join(file),
    }
}

fn pool(loaded: &Loaded) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(loaded.config.jobs).build()?)
}

fn audio_cache(loaded: &Loaded) -> Arc<AudioCache> {
    Arc::new(AudioCache::with_root(loaded.audio_root()))
}

/// Build only the named engines, plus whatever they wrap.
fn registry(loaded: &Loaded, names: &[&str], audio: Arc<AudioCache>) -> Result<EngineRegistry> {
    let specs = &loaded.config.engines;
    let mut wanted: BTreeSet<String> = names.iter().map(|s| s.to_string()).collect();
    loop {
        let extra: Vec<String> = specs
            .iter()
            .filter(|s| wanted.contains(&s.name))
            .filter_map(|s| s.inner.clone())
            .filter(|n| !wanted.contains(n))
            .collect();
        if extra.is_empty() {
            break;
        }
        wanted.extend(extra);
    }
    let chosen: Vec<EngineSpec> = specs.iter().filter(|s| wanted.contains(&s.name)).cloned().collect();
    Ok(EngineRegistry::build(&chosen, audio, &loaded.base, loaded.config.jobs)?)
}

pub fn synth(loaded: &Loaded) -> Result<Value> {
    let dir = loaded.audio_root();
    let spec = CorpusSpec { seed: loaded.sub_seed("synth"), ..loaded.config.synth.clone() };
    let mut run = Run::new(loaded, "synth", dir.clone())?;
    let (manifest, files) = write_corpus(&corpus_scenes(&spec), &dir)?;
    for s in &manifest.stops {
        run.output(&dir.join(&s.audio));
    }
    for f in [&files.truth, &files.manifest, &files.words] {
        run.output(&dir.join(f));
    }
    run.finish(json!({ "stops": manifest.stops.len(), "utterances": manifest.utterance_count() }))
}

pub fn split(loaded: &Loaded, input: &Option<PathBuf>) -> Result<Value> {
    let path = input.clone().unwrap_or_else(|| loaded.resolve(&loaded.config.paths.manifest));
    let manifest = load(&path)?;
    let s = &loaded.config.split;
    let cfg = SplitConfig {
        test_stops: s.test_stops,
        validation_stops: s.validation_stops,
        test_utterance_limit: s.test_utterance_limit,
        race_balance: s.race_balance,
        seed: loaded.sub_seed("split"),
    };
    let splits = partition_splits(&manifest, &cfg)?;
    let mut run = Run::new(loaded, "split", loaded.out_dir().join("split"))?;
    run.input(&path);
    let mut counts = BTreeMap::new();
    for (name, m) in [
        ("train", &splits.train),
        ("validation", &splits.validation),
        ("test", &splits.test),
        ("withheld", &splits.withheld),
    ] {
        run.write_manifest(&format!("{name}.jsonl"), m)?;
        counts.insert(name, json!({ "stops": m.stops.len(), "utterances": m.utterance_count() }));
    }
    run.finish(json!(counts))
}

pub fn align(loaded: &Loaded, input: &Option<PathBuf>) -> Result<Value> {
    let a = &loaded.config.align;
    let mut refs = vec![(a.mfa.as_str(), EngineKind::ForcedAligner, "align.mfa"), (a.w2v2.as_str(), EngineKind::ForcedAligner, "align.w2v2")];
    refs.extend(a.transcribers.iter().map(|t| (t.as_str(), EngineKind::Transcriber, "align.transcribers")));
    loaded.config.require(&refs)?;
    if a.transcribers.is_empty() {
        bail!("align.transcribers is empty");
    }
    let path = input_or(loaded, input, "split", "train.jsonl");
    let manifest = load(&path)?;
    let audio = audio_cache(loaded);
    let names: Vec<&str> = refs.iter().map(|r| r.0).collect();
    let reg = registry(loaded, &names, Arc::clone(&audio))?;
    let mfa = reg.aligner(&a.mfa)?;
    let w2v2 = reg.aligner(&a.w2v2)?;
    let transcribers: Vec<Arc<dyn Transcriber>> =
        a.transcribers.iter().map(|t| reg.transcriber(t)).collect::<Result<_, _>>()?;
    let tref: Vec<&dyn Transcriber> = transcribers.iter().map(|t| t.as_ref()).collect();

    let results = pool(loaded)?.install(|| {
        manifest
            .stops
            .par_iter()
            .map(|stop| -> Result<_> {
                let mut input = stop.clone();
                for u in &mut input.utterances {
                    u.segment = None;
                }
                let dur = audio.get(&stop.audio)?.duration_ms();
                Ok(align_stop(&input, dur, mfa.as_ref(), w2v2.as_ref(), &tref, a.max_chunk_s))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let aligned = Manifest { stops: results.iter().map(|r| r.stop.clone()).collect(), schema_version: manifest.schema_version };
    let reports: Vec<AlignmentReport> = results.into_iter().flat_map(|r| r.reports).collect();
    let mut run = Run::new(loaded, "align", loaded.out_dir().join("align"))?;
    run.input(&path);
    run.write_manifest("aligned.jsonl", &aligned)?;
    run.write_jsonl("report.jsonl", &reports)?;
    let freq: BTreeMap<&str, Value> = method_frequencies(&reports)
        .into_iter()
        .map(|(m, (n, p))| (m.as_str(), json!({ "count": n, "proportion": p })))
        .collect();
    let mut status: BTreeMap<String, usize> = BTreeMap::new();
    for r in &reports {
        *status.entry(serde_json::to_value(r.status)?.as_str().unwrap_or("").to_string()).or_default() += 1;
    }
    let summary = json!({ "methods": freq, "status": status });
    run.write_json("summary.json", &summary)?;
    run.finish(summary)
}

pub fn filter(loaded: &Loaded, input: &Option<PathBuf>, report: &Option<PathBuf>) -> Result<Value> {
    let path = input_or(loaded, input, "align", "aligned.jsonl");
    let report_path = input_or(loaded, report, "align", "report.jsonl");
    let manifest = load(&path)?;
    let reports: Vec<AlignmentReport> = read_jsonl(&report_path)?;
    let f = &loaded.config.filter;
    let out = filter_manifest(&manifest, &scores_from_reports(&reports), f.criterion, &f.params)?;
    let mut run = Run::new(loaded, "filter", loaded.out_dir().join("filter"))?;
    run.input(&path);
    run.input(&report_path);
    run.write_manifest("kept.jsonl", &out.kept)?;
    run.write_manifest("dropped.jsonl", &out.dropped)?;
    run.write_json("stats.json", &out.stats)?;
    run.finish(serde_json::to_value(&out.stats)?)
}

pub fn train_detector(loaded: &Loaded, input: &Option<PathBuf>) -> Result<Value> {
    let d = &loaded.config.detector;
    loaded.config.require(&[(d.vad.as_str(), EngineKind::FrameScorer, "detector.vad")])?;
    let path = input_or(loaded, input, "filter", "kept.jsonl");
    let manifest = load(&path)?;
    let audio = audio_cache(loaded);
    let reg = registry(loaded, &[&d.vad], Arc::clone(&audio))?;
    let vad = reg.scorer(&d.vad)?;
    let sampling = fieldasr_core::detect::TrainingConfig { seed: loaded.sub_seed("sampling"), ..d.sampling.clone() };
    let training = fieldasr_core::detect::TrainConfig { seed: loaded.sub_seed("training"), ..d.training.clone() };
    let chunks = build_training_chunks(&manifest, &audio, vad.as_ref(), &sampling)?;
    let (x, y) = featurize(&chunks, &audio)?;
    let mut scorer = train_chunk_scorer(&x, &y, &training)?;
    scorer.name = "officer".into();
    let mut run = Run::new(loaded, "train-detector", loaded.out_dir().join("detector"))?;
    run.input(&path);
    let model = run.dir().join("officer.json");
    scorer.save(&model)?;
    run.output(&model);
    let positives = y.iter().filter(|v| **v).count();
    let summary = json!({
        "chunks": y.len(),
        "officer_chunks": positives,
        "other_chunks": y.len() - positives,
        "epochs": scorer.epochs,
        "final_loss": scorer.final_loss,
    });
    run.write_json("summary.json", &summary)?;
    run.finish(summary)
}

#[derive(Serialize, Deserialize)]
struct ThresholdsFile {
    thresholds: DetectorThresholds,
    best_cost: f64,
}

pub fn tune(loaded: &Loaded, input: &Option<PathBuf>, model: &Option<PathBuf>) -> Result<Value> {
    let (d, t) = (&loaded.config.detector, &loaded.config.tune);
    loaded.config.require(&[
        (d.vad.as_str(), EngineKind::FrameScorer, "detector.vad"),
        (t.transcriber.as_str(), EngineKind::Transcriber, "tune.transcriber"),
    ])?;
    let path = input_or(loaded, input, "split", "validation.jsonl");
    let model_path = input_or(loaded, model, "detector", "officer.json");
    let manifest = load(&path)?;
    let officer = LinearScorer::load(&model_path)?;
    let audio = audio_cache(loaded);
    let reg = registry(loaded, &[&d.vad, &t.transcriber], Arc::clone(&audio))?;
    let spec = TuneSpec {
        budget: t.budget,
        init_samples: t.init_samples,
        mode: t.mode,
        seed: loaded.sub_seed("tuning"),
        ..TuneSpec::default()
    };
    let (th, result) = tune_detector(
        &manifest,
        &audio,
        reg.scorer(&d.vad)?.as_ref(),
        &officer,
        reg.transcriber(&t.transcriber)?.as_ref(),
        &spec,
    )?;
    let mut run = Run::new(loaded, "tune", loaded.out_dir().join("tune"))?;
    run.input(&path);
    run.input(&model_path);
    let file = ThresholdsFile { thresholds: th, best_cost: result.best_cost };
    run.write_json("thresholds.json", &file)?;
    run.write_jsonl("trace.jsonl", &result.trace)?;
    run.finish(serde_json::to_value(&file)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectedLine {
    stop_id: String,
    start_s: f64,
    end_s: f64,
    vad: f64,
    officer: f64,
}

pub fn detect(loaded: &Loaded, input: &Option<PathBuf>, model: &Option<PathBuf>, thresholds: &Option<PathBuf>) -> Result<Value> {
    let d = &loaded.config.detector;
    loaded.config.require(&[(d.vad.as_str(), EngineKind::FrameScorer, "detector.vad")])?;
    let path = input_or(loaded, input, "split", "test.jsonl");
    let model_path = input_or(loaded, model, "detector", "officer.json");
    let th_path = input_or(loaded, thresholds, "tune", "thresholds.json");
    let manifest = load(&path)?;
    let officer = LinearScorer::load(&model_path)?;
    let th_text = fs::read_to_string(&th_path).with_context(|| format!("reading {}", th_path.display()))?;
    let th: ThresholdsFile = serde_json::from_str(&th_text).with_context(|| format!("parsing {}", th_path.display()))?;
    let th = th.thresholds;
    th.validate()?;
    let audio = audio_cache(loaded);
    let reg = registry(loaded, &[&d.vad], Arc::clone(&audio))?;
    let vad = reg.scorer(&d.vad)?;
    let per_stop = pool(loaded)?.install(|| {
        manifest
            .stops
            .par_iter()
            .map(|stop| -> Result<Vec<DetectedLine>> {
                let a = audio.get(&stop.audio)?;
                Ok(detect_officer_segments(&a, vad.as_ref(), &officer, &th)?
                    .into_iter()
                    .map(|s| DetectedLine {
                        stop_id: stop.stop_id.clone(),
                        start_s: s.segment.start(),
                        end_s: s.segment.end(),
                        vad: s.vad,
                        officer: s.officer,
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let lines: Vec<DetectedLine> = per_stop.into_iter().flatten().collect();
    let mut run = Run::new(loaded, "detect", loaded.out_dir().join("detect"))?;
    run.input(&path);
    run.input(&model_path);
    run.input(&th_path);
    run.write_jsonl("segments.jsonl", &lines)?;
    let seconds: f64 = lines.iter().map(|l| l.end_s - l.start_s).sum();
    run.finish(json!({ "segments": lines.len(), "detected_seconds": seconds, "thresholds": th }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HypothesisLine {
    stop_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    utt_id: Option<String>,
    start_s: f64,
    end_s: f64,
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn transcribe(loaded: &Loaded, input: &Option<PathBuf>, segments: &Option<PathBuf>) -> Result<Value> {
    let t = &loaded.config.transcribe;
    loaded.config.require(&[(t.transcriber.as_str(), EngineKind::Transcriber, "transcribe.transcriber")])?;
    let path = input_or(loaded, input, "split", "test.jsonl");
    let seg_path = input_or(loaded, segments, "detect", "segments.jsonl");
    let manifest = load(&path)?;
    let detected: Vec<DetectedLine> = read_jsonl(&seg_path)?;
    let audio = audio_cache(loaded);
    let reg = registry(loaded, &[&t.transcriber], Arc::clone(&audio))?;
    let asr = reg.transcriber(&t.transcriber)?;
    let stops: HashMap<&str, &StopRecord> = manifest.stops.iter().map(|s| (s.stop_id.as_str(), s)).collect();

    let mut jobs: Vec<(bool, HypothesisLine, PathBuf)> = Vec::new();
    for s in &manifest.stops {
        for u in &s.utterances {
            if let Some(seg) = u.segment {
                let line = HypothesisLine {
                    stop_id: s.stop_id.clone(),
                    utt_id: Some(u.id.clone()),
                    start_s: seg.start(),
                    end_s: seg.end(),
                    text: None,
                    error: None,
                };
                jobs.push((true, line, s.audio.clone()));
            }
        }
    }
    for d in &detected {
        let stop = stops.get(d.stop_id.as_str()).ok_or_else(|| anyhow!("detected segment for unknown stop {}", d.stop_id))?;
        let line = HypothesisLine {
            stop_id: d.stop_id.clone(),
            utt_id: None,
            start_s: d.start_s,
            end_s: d.end_s,
            text: None,
            error: None,
        };
        jobs.push((false, line, stop.audio.clone()));
    }
    let done: Vec<(bool, HypothesisLine)> = pool(loaded)?.install(|| {
        jobs.into_par_iter()
            .map(|(utt, mut line, audio_path)| -> Result<(bool, HypothesisLine)> {
                let seg = Segment::from_secs(line.start_s, line.end_s)?;
                match asr.transcribe(&audio_path, seg) {
                    Ok(text) => line.text = Some(text),
                    Err(e) => line.error = Some(e.to_string()),
                }
                Ok((utt, line))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let failed = done.iter().filter(|(_, l)| l.error.is_some()).count();
    let (utts, dets): (Vec<_>, Vec<_>) = done.into_iter().partition(|(u, _)| *u);
    let mut run = Run::new(loaded, "transcribe", loaded.out_dir().join("transcribe"))?;
    run.input(&path);
    run.input(&seg_path);
    run.write_jsonl("utterances.jsonl", utts.iter().map(|(_, l)| l))?;
    run.write_jsonl("detected.jsonl", dets.iter().map(|(_, l)| l))?;
    run.finish(json!({ "utterances": utts.len(), "detected_segments": dets.len(), "failed": failed }))
}

#[derive(Serialize)]
struct StopDetection {
    stop_id: String,
    #[serde(flatten)]
    eval: DetectionEval,
}

pub fn evaluate(loaded: &Loaded, input: &Option<PathBuf>, hypotheses: &Option<PathBuf>) -> Result<Value> {
    let path = input_or(loaded, input, "split", "test.jsonl");
    let hyp_dir = hypotheses.clone().unwrap_or_else(|| loaded.out_dir().join("transcribe"));
    let utt_path = hyp_dir.join("utterances.jsonl");
    let det_path = hyp_dir.join("detected.jsonl");
    let manifest = load(&path)?;
    let utt_hyps: Vec<HypothesisLine> = read_jsonl(&utt_path)?;
    let det_hyps: Vec<HypothesisLine> = read_jsonl(&det_path)?;
    let by_utt: HashMap<(&str, &str), &HypothesisLine> = utt_hyps
        .iter()
        .filter_map(|h| Some(((h.stop_id.as_str(), h.utt_id.as_deref()?), h)))
        .collect();

    let mut rows = Vec::new();
    let (mut word_counts, mut char_counts) = (Vec::new(), Vec::new());
    let (mut missing, mut unsegmented) = (0usize, 0usize);
    for s in &manifest.stops {
        for u in &s.utterances {
            if u.segment.is_none() {
                unsegmented += 1;
                continue;
            }
            let hyp = match by_utt.get(&(s.stop_id.as_str(), u.id.as_str())).and_then(|h| h.text.as_deref()) {
                Some(t) => t,
                None => {
                    missing += 1;
                    ""
                }
            };
            let w = wer(&u.raw_text, hyp);
            word_counts.push(w.counts);
            char_counts.push(cer(&u.raw_text, hyp).counts);
            rows.push(EvalRow::from_utterance(s, u, &w));
        }
    }
    let utt_wer = pooled(word_counts);
    let utt_cer = pooled(char_counts);

    let mut per_stop_hyps: BTreeMap<&str, Vec<&HypothesisLine>> = BTreeMap::new();
    for h in &det_hyps {
        per_stop_hyps.entry(h.stop_id.as_str()).or_default().push(h);
    }
    let mut stop_evals = Vec::new();
    for s in &manifest.stops {
        let mut hyps = Vec::new();
        let mut failed = Vec::new();
        for h in per_stop_hyps.get(s.stop_id.as_str()).into_iter().flatten() {
            let seg = Segment::from_secs(h.start_s, h.end_s)?;
            if h.text.is_none() {
                failed.push(seg);
            }
            hyps.push((seg, h.text.clone().unwrap_or_default()));
        }
        hyps.sort_by_key(|(seg, _)| (seg.start_ms(), seg.end_ms()));
        stop_evals.push(StopDetection { stop_id: s.stop_id.clone(), eval: score_transcripts(s, &hyps, failed) });
    }
    let det_wer = DetectionEval::from_wer(pooled(stop_evals.iter().map(|e| e.eval.wer.counts)), Vec::new());

    let regression = fit_mixed_effects(&rows);
    let mut text = format!(
        "utterance WER {:.2}% CER {:.2}% over {} utterances\ndetected-speech WER {:.2}% over {} stops\n\n",
        100.0 * utt_wer.value,
        100.0 * utt_cer.value,
        rows.len(),
        100.0 * det_wer.wer.value,
        stop_evals.len()
    );
    if let Err(e) = &regression {
        text.push_str(&format!("regression not fitted: {e}\n"));
    }
    text.push_str(&render_report(regression.as_ref().ok(), &rows));

    let report = json!({
        "utterance": {
            "wer": utt_wer.value,
            "cer": utt_cer.value,
            "counts": utt_wer.counts,
            "utterances": rows.len(),
            "missing_hypotheses": missing,
            "unsegmented": unsegmented,
        },
        "detection": {
            "wer": det_wer.wer.value,
            "substitution_pct": det_wer.substitution_pct,
            "deletion_pct": det_wer.deletion_pct,
            "insertion_pct": det_wer.insertion_pct,
            "stops": stop_evals,
        },
        "subgroups": {
            "role_race": subgroup_table(&rows, &[GroupField::Role, GroupField::Race]),
            "role": subgroup_table(&rows, &[GroupField::Role]),
            "race": subgroup_table(&rows, &[GroupField::Race]),
            "gender": subgroup_table(&rows, &[GroupField::Gender]),
        },
        "regression": match &regression {
            Ok(r) => serde_json::to_value(r)?,
            Err(e) => json!({ "error": e.to_string() }),
        },
    });
    let mut run = Run::new(loaded, "evaluate", loaded.out_dir().join("evaluate"))?;
    run.input(&path);
    run.input(&utt_path);
    run.input(&det_path);
    run.write_jsonl("rows.jsonl", &rows)?;
    run.write_json("report.json", &report)?;
    run.write_text("report.txt", &text)?;
    run.finish(json!({ "utterance_wer": utt_wer.value, "detection_wer": det_wer.wer.value, "utterances": rows.len() }))
}

/// Answer wire-protocol requests on stdin with the named engines.
pub fn serve_stdio(loaded: &Loaded, transcriber: &Option<String>, aligner: &Option<String>, scorer: &Option<String>) -> Result<()> {
    let mut refs = Vec::new();
    if let Some(t) = transcriber {
        refs.push((t.as_str(), EngineKind::Transcriber, "--transcriber"));
    }
    if let Some(a) = aligner {
        refs.push((a.as_str(), EngineKind::ForcedAligner, "--aligner"));
    }
    if let Some(s) = scorer {
        refs.push((s.as_str(), EngineKind::FrameScorer, "--scorer"));
    }
    loaded.config.require(&refs)?;
    let names: Vec<&str> = refs.iter().map(|r| r.0).collect();
    let reg = registry(loaded, &names, audio_cache(loaded))?;
    let t = transcriber.as_deref().map(|n| reg.transcriber(n)).transpose()?;
    let a = aligner.as_deref().map(|n| reg.aligner(n)).transpose()?;
    let s = scorer.as_deref().map(|n| reg.scorer(n)).transpose()?;
    let backend = Backend { transcriber: t.as_deref(), aligner: a.as_deref(), scorer: s.as_deref() };
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve(stdin.lock(), stdout.lock(), &backend)?;
    Ok(())
}
