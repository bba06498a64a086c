//! Training data for the chunk classifier and the reference linear scorer.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mel::{mel_from_samples, N_MELS};
use super::{chunk_span, frame_mel, DetectError, MelFeatures};
use crate::audio::{Audio, AudioCache, AudioError};
use crate::corpus::{Manifest, SpeakerRole, StopRecord};
use crate::engines::{score_frames, EngineError, FrameScorer};
use crate::segment::Segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkLabel {
    Officer,
    NotOfficer,
    Unlabeled,
}

/// One sampled training chunk. `gain` is the volume augmentation factor;
/// 1.0 means the audio is used untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingChunk {
    pub stop_id: String,
    pub audio: PathBuf,
    pub segment: Segment,
    pub label: ChunkLabel,
    pub gain: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub per_class: usize,
    /// Utterances whose whole-segment speech score is below this are skipped.
    pub speech_gate: f64,
    /// Speech score a background chunk needs to become a negative.
    pub negative_speech_score: f64,
    /// Background chunks closer than this many seconds are merged.
    pub negative_merge_gap_s: f64,
    pub augment_probability: f64,
    pub min_gain: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            per_class: 150_000,
            speech_gate: 0.3,
            negative_speech_score: 0.5,
            negative_merge_gap_s: 1.0,
            augment_probability: 0.5,
            min_gain: 0.1,
            seed: 0,
        }
    }
}

/// Sort segments and merge neighbours whose end-to-start gap is at most
/// `max_gap_ms`. Overlapping segments always merge.
pub fn merge_within(mut segments: Vec<Segment>, max_gap_ms: u64) -> Vec<Segment> {
    segments.sort_by_key(|s| (s.start_ms(), s.end_ms()));
    let mut out: Vec<Segment> = Vec::with_capacity(segments.len());
    for s in segments {
        match out.last_mut() {
            Some(last) if s.start_ms() <= last.end_ms() + max_gap_ms => *last = last.hull(&s),
            _ => out.push(s),
        }
    }
    out
}

fn speech_regions(audio: &Audio, vad: &dyn FrameScorer, min_score: f64, merge_gap_ms: u64) -> Result<Vec<Segment>, DetectError> {
    let mut kept = Vec::new();
    for c in chunk_span(0, audio.duration_ms()) {
        if score_frames(vad, &frame_mel(audio, c)?)? >= min_score {
            kept.push(c);
        }
    }
    Ok(merge_within(kept, merge_gap_ms))
}

/// Speech regions of the stop that no transcribed utterance touches.
pub fn augment_negatives(stop: &StopRecord, audio: &Audio, vad: &dyn FrameScorer) -> Result<Vec<Segment>, DetectError> {
    let cfg = TrainingConfig::default();
    negatives_with(stop, audio, vad, &cfg)
}

fn negatives_with(stop: &StopRecord, audio: &Audio, vad: &dyn FrameScorer, cfg: &TrainingConfig) -> Result<Vec<Segment>, DetectError> {
    let gap_ms = (cfg.negative_merge_gap_s * 1000.0).round() as u64;
    let transcribed: Vec<Segment> = stop.utterances.iter().filter_map(|u| u.segment).collect();
    Ok(speech_regions(audio, vad, cfg.negative_speech_score, gap_ms)?
        .into_iter()
        .filter(|r| !transcribed.iter().any(|t| t.overlaps(r)))
        .collect())
}

fn candidates_for_stop(
    stop: &StopRecord,
    audio: &Audio,
    vad: &dyn FrameScorer,
    cfg: &TrainingConfig,
) -> Result<Vec<(Segment, ChunkLabel)>, DetectError> {
    let mut out = Vec::new();
    for u in &stop.utterances {
        let Some(seg) = u.segment else { continue };
        if seg.end_ms() > audio.duration_ms() {
            return Err(AudioError::OutOfBounds { segment: seg, duration_s: audio.duration() }.into());
        }
        if score_frames(vad, &frame_mel(audio, seg)?)? < cfg.speech_gate {
            continue;
        }
        let label = if u.speaker_role == SpeakerRole::PrimaryOfficer { ChunkLabel::Officer } else { ChunkLabel::NotOfficer };
        out.extend(chunk_span(seg.start_ms(), seg.end_ms()).into_iter().map(|c| (c, label)));
    }
    for r in negatives_with(stop, audio, vad, cfg)? {
        out.extend(chunk_span(r.start_ms(), r.end_ms()).into_iter().map(|c| (c, ChunkLabel::NotOfficer)));
    }
    Ok(out)
}

/// Labeled chunks for training: utterance chunks labeled by speaker role,
/// background speech chunks as negatives, up to `per_class` of each class
/// sampled with the config seed, each volume-augmented at random.
pub fn build_training_chunks(
    manifest: &Manifest,
    audio: &AudioCache,
    vad: &dyn FrameScorer,
    cfg: &TrainingConfig,
) -> Result<Vec<TrainingChunk>, DetectError> {
    let mut pools: [Vec<TrainingChunk>; 2] = [Vec::new(), Vec::new()];
    for stop in &manifest.stops {
        let a = audio.get(&stop.audio)?;
        for (segment, label) in candidates_for_stop(stop, &a, vad, cfg)? {
            let k = usize::from(label != ChunkLabel::Officer);
            pools[k].push(TrainingChunk { stop_id: stop.stop_id.clone(), audio: stop.audio.clone(), segment, label, gain: 1.0 });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = (cfg.min_gain.max(1e-6).ln(), 0.0f64);
    let mut out = Vec::new();
    for (pool, label) in pools.iter_mut().zip([ChunkLabel::Officer, ChunkLabel::NotOfficer]) {
        if pool.is_empty() {
            return Err(DetectError::EmptyClass(label));
        }
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(cfg.per_class);
        idx.sort_unstable();
        for i in idx {
            let mut c = pool[i].clone();
            if rng.gen::<f64>() < cfg.augment_probability {
                c.gain = rng.gen_range(lo..=hi).exp() as f32;
            }
            out.push(c);
        }
    }
    Ok(out)
}

/// Samples of one chunk with its gain applied.
pub fn chunk_audio(audio: &Audio, chunk: &TrainingChunk) -> Result<Vec<f32>, AudioError> {
    let x = audio.slice(chunk.segment)?;
    Ok(if chunk.gain == 1.0 { x.to_vec() } else { x.iter().map(|v| v * chunk.gain).collect() })
}

/// Pooled features and officer labels for a set of chunks.
pub fn featurize(chunks: &[TrainingChunk], audio: &AudioCache) -> Result<(Vec<Vec<f64>>, Vec<bool>), DetectError> {
    let mut xs = Vec::with_capacity(chunks.len());
    let mut ys = Vec::with_capacity(chunks.len());
    for c in chunks {
        let a = audio.get(&c.audio)?;
        xs.push(mel_from_samples(&chunk_audio(&a, c)?).pooled_mean_std());
        ys.push(c.label == ChunkLabel::Officer);
    }
    Ok((xs, ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop when the relative change in loss falls below this.
    pub tolerance: f64,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.5, max_epochs: 500, tolerance: 1e-6, l2: 1e-4, seed: 0 }
    }
}

/// Logistic regression over per-bin mel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScorer {
    pub name: String,
    pub feature: String,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub epochs: usize,
    pub final_loss: f64,
}

pub const FEATURE_SPEC: &str = "log_mel64_mean_std";

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearScorer {
    pub fn score_pooled(&self, pooled: &[f64]) -> f64 {
        let z: f64 = pooled
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .zip(&self.weights)
            .map(|(((x, m), s), w)| w * (x - m) / s)
            .sum::<f64>()
            + self.bias;
        sigmoid(z)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scorer serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, DetectError> {
        let me: Self = serde_json::from_str(s).map_err(|e| DetectError::Persist(e.to_string()))?;
        let d = me.weights.len();
        if me.feature != FEATURE_SPEC || d != 2 * N_MELS || me.feature_mean.len() != d || me.feature_std.len() != d {
            return Err(DetectError::Persist(format!("expected {FEATURE_SPEC} with {} weights", 2 * N_MELS)));
        }
        Ok(me)
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| DetectError::Persist(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DetectError> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| DetectError::Persist(e.to_string()))?)
    }
}

impl FrameScorer for LinearScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_shape(&self) -> (usize, Option<usize>) {
        (N_MELS, None)
    }

    fn score_frames(&self, features: &MelFeatures) -> Result<f64, EngineError> {
        Ok(self.score_pooled(&features.pooled_mean_std()))
    }
}

/// Fit a [`LinearScorer`] by full-batch gradient descent on mean
/// cross-entropy over standardized features.
pub fn train_chunk_scorer(features: &[Vec<f64>], labels: &[bool], cfg: &TrainConfig) -> Result<LinearScorer, DetectError> {
    if features.len() != labels.len() {
        return Err(DetectError::Degenerate(format!("{} feature rows for {} labels", features.len(), labels.len())));
    }
    if !labels.iter().any(|&y| y) {
        return Err(DetectError::EmptyClass(ChunkLabel::Officer));
    }
    if labels.iter().all(|&y| y) {
        return Err(DetectError::EmptyClass(ChunkLabel::NotOfficer));
    }
    let d = 2 * N_MELS;
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(DetectError::Degenerate(format!("feature row of length {} (expected {d})", bad.len())));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / n;
        }
    }
    let mut std = vec![0.0; d];
    for f in features {
        for ((s, x), m) in std.iter_mut().zip(f).zip(&mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    for s in &mut std {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).zip(&std).map(|((x, m), s)| (x - m) / s).collect())
        .collect();
    let y: Vec<f64> = labels.iter().map(|&b| f64::from(u8::from(b))).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.01..0.01)).collect();
    let mut b = 0.0;
    let loss_at = |w: &[f64], b: f64| -> f64 {
        let ce: f64 = z
            .iter()
            .zip(&y)
            .map(|(row, &t)| {
                let s = row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
                // log(1 + e^s) - t*s, computed stably.
                s.max(0.0) + (-s.abs()).exp().ln_1p() - t * s
            })
            .sum::<f64>()
            / n;
        ce + 0.5 * cfg.l2 * w.iter().map(|v| v * v).sum::<f64>()
    };
    let mut loss = loss_at(&w, b);
    let mut epochs = 0;
    while epochs < cfg.max_epochs {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (row, &t) in z.iter().zip(&y) {
            let p = sigmoid(row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b);
            let r = (p - t) / n;
            for (g, a) in gw.iter_mut().zip(row) {
                *g += r * a;
            }
            gb += r;
        }
        for ((wi, g), _) in w.iter_mut().zip(&gw).zip(0..) {
            *wi -= cfg.learning_rate * (g + cfg.l2 * *wi);
        }
        b -= cfg.learning_rate * gb;
        epochs += 1;
        let next = loss_at(&w, b);
        let rel = (loss - next).abs() / loss.abs().max(1e-300);
        loss = next;
        if rel < cfg.tolerance {
            break;
        }
    }
    Ok(LinearScorer {
        name: "reference_linear".into(),
        feature: FEATURE_SPEC.into(),
        feature_mean: mean,
        feature_std: std,
        weights: w,
        bias: b,
        epochs,
        final_loss: loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Gender, Race, Utterance};
    use crate::engines::EnergyVad;
    use rand_distr::{Distribution, Normal};

    fn seg(a: u64, b: u64) -> Segment {
        Segment::from_ms(a, b).unwrap()
    }

    fn blob(rng: &mut ChaCha8Rng, shift: f64) -> Vec<f64> {
        let n = Normal::new(0.0, 1.0).unwrap();
        (0..2 * N_MELS).map(|i| n.sample(rng) + if i < 4 { shift } else { 0.0 }).collect()
    }

    fn accuracy(s: &LinearScorer, xs: &[Vec<f64>], ys: &[bool]) -> f64 {
        xs.iter().zip(ys).filter(|(x, &y)| (s.score_pooled(x) > 0.5) == y).count() as f64 / xs.len() as f64
    }

    #[test]
    fn merge_within_example() {
        let out = merge_within(vec![seg(10_800, 11_050), seg(10_000, 10_250)], 1000);
        assert_eq!(out, vec![seg(10_000, 11_050)]);
        assert_eq!(merge_within(vec![seg(0, 250), seg(1300, 1550)], 1000).len(), 2);
    }

    #[test]
    fn separable_set_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..400 {
            let pos = i % 2 == 0;
            xs.push(blob(&mut rng, if pos { 6.0 } else { -6.0 }));
            ys.push(pos);
        }
        let s = train_chunk_scorer(&xs, &ys, &TrainConfig::default()).unwrap();
        assert!(accuracy(&s, &xs, &ys) >= 0.99);
        let back = LinearScorer::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Vec<f64>> = (0..4000).map(|_| blob(&mut rng, 0.0)).collect();
        let ys: Vec<bool> = (0..4000).map(|_| rng.gen::<bool>()).collect();
        let s = train_chunk_scorer(&xs[..2000], &ys[..2000], &TrainConfig::default()).unwrap();
        let acc = accuracy(&s, &xs[2000..], &ys[2000..]);
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn identical_features_give_prior() {
        let xs = vec![vec![1.0; 2 * N_MELS]; 100];
        let ys: Vec<bool> = (0..100).map(|i| i < 30).collect();
        let s = train_chunk_scorer(&xs, &ys, &TrainConfig { max_epochs: 5000, tolerance: 1e-12, ..Default::default() }).unwrap();
        assert!((s.score_pooled(&xs[0]) - 0.3).abs() < 1e-3);
    }

    #[test]
    fn single_class_rejected() {
        let xs = vec![vec![0.0; 2 * N_MELS]; 3];
        assert!(matches!(train_chunk_scorer(&xs, &[true; 3], &TrainConfig::default()), Err(DetectError::EmptyClass(_))));
    }

    fn tone(ms: u64, amp: f32) -> Vec<f32> {
        (0..ms * 16).map(|i| amp * (i as f32 * 0.3).sin()).collect()
    }

    fn stop_with(audio: PathBuf, utts: Vec<(SpeakerRole, Segment)>) -> StopRecord {
        StopRecord {
            stop_id: "s".into(),
            audio,
            primary_officer_ids: Default::default(),
            all_officer_ids: Default::default(),
            driver_race: Race::White,
            driver_gender: Gender::Male,
            officer_race: Race::White,
            officer_gender: Gender::Male,
            utterances: utts
                .into_iter()
                .enumerate()
                .map(|(i, (r, s))| Utterance {
                    id: format!("u{i}"),
                    speaker_role: r,
                    raw_text: "x".into(),
                    segment: Some(s),
                    raw_start_s: Some(s.start_ms() as u32 / 1000),
                    raw_end_s: Some(s.end_ms().div_ceil(1000) as u32),
                })
                .collect(),
        }
    }

    #[test]
    fn negatives_avoid_transcribed_speech() {
        // speech at 1.0-2.0 s (transcribed) and 4.0-5.0 s (not).
        let mut x = vec![0.0f32; 16_000];
        x.extend(tone(1000, 0.5));
        x.extend(vec![0.0; 32_000]);
        x.extend(tone(1000, 0.5));
        x.extend(vec![0.0; 16_000]);
        let audio = Audio { samples: x, sample_rate: 16_000 };
        let stop = stop_with("a.wav".into(), vec![(SpeakerRole::PrimaryOfficer, seg(1000, 2000))]);
        let vad = EnergyVad::new("vad");
        let neg = augment_negatives(&stop, &audio, &vad).unwrap();
        assert_eq!(neg.len(), 1);
        assert!(neg[0].start_ms() >= 3800 && neg[0].end_ms() <= 5200, "{}", neg[0]);
        let covered = stop_with("a.wav".into(), vec![(SpeakerRole::PrimaryOfficer, seg(0, 6000))]);
        assert!(augment_negatives(&covered, &audio, &vad).unwrap().is_empty());
    }

    #[test]
    fn sampling_is_capped_and_seeded() {
        let dir = tempfile::tempdir().unwrap();
        let mut x = tone(10_000, 0.5);
        x.extend(tone(10_000, 0.5));
        crate::audio::write_wav(dir.path().join("a.wav"), &x).unwrap();
        let stop = stop_with(
            "a.wav".into(),
            vec![(SpeakerRole::PrimaryOfficer, seg(0, 10_000)), (SpeakerRole::CommunityMember, seg(10_000, 20_000))],
        );
        let manifest = Manifest::new(vec![stop]).unwrap();
        let cache = AudioCache::with_root(dir.path());
        let vad = EnergyVad::new("vad");
        let cfg = TrainingConfig { per_class: 10, seed: 9, ..Default::default() };
        let a = build_training_chunks(&manifest, &cache, &vad, &cfg).unwrap();
        assert_eq!(a.iter().filter(|c| c.label == ChunkLabel::Officer).count(), 10);
        assert_eq!(a.iter().filter(|c| c.label == ChunkLabel::NotOfficer).count(), 10);
        assert_eq!(a, build_training_chunks(&manifest, &cache, &vad, &cfg).unwrap());
        assert!(a.iter().all(|c| c.gain > 0.0 && c.gain <= 1.0));
        let audio = cache.get(Path::new("a.wav")).unwrap();
        let same = a.iter().find(|c| c.gain == 1.0).unwrap();
        assert_eq!(chunk_audio(&audio, same).unwrap(), audio.slice(same.segment).unwrap());

        let mut only_driver = manifest.clone();
        only_driver.stops[0].utterances.remove(0);
        assert!(matches!(
            build_training_chunks(&only_driver, &cache, &vad, &cfg),
            Err(DetectError::EmptyClass(ChunkLabel::Officer))
        ));
    }
}
