//! Officer (near-field) speech detection.
//!
//! Audio is cut into 250 ms chunks on a 100 ms hop. Each chunk gets a voice
//! activity score and an officer score; chunks clearing both thresholds are
//! merged into segments when the gap between them is at most `t_smooth`.

pub mod mel;
mod train;

use serde::{Deserialize, Serialize};

use crate::audio::{Audio, AudioError};
use crate::corpus::{SpeakerRole, StopRecord};
use crate::engines::{score_frames, EngineError, FrameScorer, Transcriber};
use crate::metrics::{concat_wer, WerScore};
use crate::segment::Segment;

pub use mel::{frame_mel, MelFeatures};
pub use train::{
    augment_negatives, build_training_chunks, chunk_audio, featurize, merge_within, train_chunk_scorer, ChunkLabel,
    LinearScorer, TrainConfig, TrainingChunk, TrainingConfig,
};

pub const CHUNK_MS: u64 = 250;
pub const HOP_MS: u64 = 100;

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("no {0:?} chunks available for training")]
    EmptyClass(ChunkLabel),
    #[error("degenerate training set: {0}")]
    Degenerate(String),
    #[error("threshold {name} = {value} outside [{lo}, {hi}]")]
    Thresholds { name: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("scorer file: {0}")]
    Persist(String),
}

/// Gates for detection inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorThresholds {
    pub t_vad: f64,
    pub t_officer: f64,
    /// Largest gap in seconds bridged when merging positive chunks.
    pub t_smooth: f64,
}

impl DetectorThresholds {
    pub const T_SMOOTH_MIN: f64 = 0.25;
    pub const T_SMOOTH_MAX: f64 = 2.0;

    pub fn validate(&self) -> Result<(), DetectError> {
        let check = |name, value: f64, lo, hi| {
            if (lo..=hi).contains(&value) {
                Ok(())
            } else {
                Err(DetectError::Thresholds { name, value, lo, hi })
            }
        };
        check("t_vad", self.t_vad, 0.0, 1.0)?;
        check("t_officer", self.t_officer, 0.0, 1.0)?;
        check("t_smooth", self.t_smooth, Self::T_SMOOTH_MIN, Self::T_SMOOTH_MAX)
    }

    fn smooth_ms(&self) -> i64 {
        (self.t_smooth * 1000.0).round() as i64
    }
}

/// 250 ms chunks starting every 100 ms; a trailing partial chunk is dropped.
pub fn chunk_stream(duration: f64) -> Vec<Segment> {
    if !duration.is_finite() || duration <= 0.0 {
        return Vec::new();
    }
    chunk_span(0, (duration * 1000.0).round() as u64)
}

/// Chunks covering `[start_ms, end_ms)` on the same grid, offset to start.
pub(crate) fn chunk_span(start_ms: u64, end_ms: u64) -> Vec<Segment> {
    (0..)
        .map(|k| start_ms + k * HOP_MS)
        .take_while(|s| s + CHUNK_MS <= end_ms)
        .map(|s| Segment::from_ms(s, s + CHUNK_MS).expect("chunk has positive width"))
        .collect()
}

/// One chunk with both scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub segment: Segment,
    pub vad: f64,
    pub officer: f64,
}

/// A merged detection with the mean scores of its chunks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedSegment {
    pub segment: Segment,
    pub vad: f64,
    pub officer: f64,
}

/// Score every chunk of `audio` with the VAD and officer scorers.
pub fn score_chunks(audio: &Audio, vad: &dyn FrameScorer, officer: &dyn FrameScorer) -> Result<Vec<ScoredChunk>, DetectError> {
    chunk_span(0, audio.duration_ms())
        .into_iter()
        .map(|segment| {
            let feats = frame_mel(audio, segment)?;
            Ok(ScoredChunk { segment, vad: score_frames(vad, &feats)?, officer: score_frames(officer, &feats)? })
        })
        .collect()
}

/// Keep chunks with `vad > t_vad` and `officer > t_officer`, then merge
/// neighbours whose end-to-start gap is at most `t_smooth`.
pub fn gate_and_merge(chunks: &[ScoredChunk], th: &DetectorThresholds) -> Vec<DetectedSegment> {
    let mut kept: Vec<&ScoredChunk> = chunks.iter().filter(|c| c.vad > th.t_vad && c.officer > th.t_officer).collect();
    kept.sort_by_key(|c| (c.segment.start_ms(), c.segment.end_ms()));
    let max_gap = th.smooth_ms();
    let mut out = Vec::new();
    let mut group: Vec<&ScoredChunk> = Vec::new();
    let flush = |group: &mut Vec<&ScoredChunk>, out: &mut Vec<DetectedSegment>| {
        if let Some(first) = group.first() {
            let end = group.iter().map(|c| c.segment.end_ms()).max().expect("non-empty");
            let n = group.len() as f64;
            out.push(DetectedSegment {
                segment: Segment::from_ms(first.segment.start_ms(), end).expect("valid hull"),
                vad: group.iter().map(|c| c.vad).sum::<f64>() / n,
                officer: group.iter().map(|c| c.officer).sum::<f64>() / n,
            });
        }
        group.clear();
    };
    let mut group_end = 0i64;
    for c in kept {
        if !group.is_empty() && c.segment.start_ms() as i64 - group_end > max_gap {
            flush(&mut group, &mut out);
        }
        group_end = if group.is_empty() { c.segment.end_ms() as i64 } else { group_end.max(c.segment.end_ms() as i64) };
        group.push(c);
    }
    flush(&mut group, &mut out);
    out
}

pub fn detect_officer_segments(
    audio: &Audio,
    vad: &dyn FrameScorer,
    officer: &dyn FrameScorer,
    th: &DetectorThresholds,
) -> Result<Vec<DetectedSegment>, DetectError> {
    th.validate()?;
    Ok(gate_and_merge(&score_chunks(audio, vad, officer)?, th))
}

/// Detection quality measured through the transcriber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    pub wer: WerScore,
    pub substitution_pct: f64,
    pub deletion_pct: f64,
    pub insertion_pct: f64,
    /// Detected segments the transcriber failed on; they count as empty text.
    pub failed_segments: Vec<Segment>,
}

impl DetectionEval {
    pub fn from_wer(wer: WerScore, failed_segments: Vec<Segment>) -> Self {
        let n = wer.counts.reference_length.max(1) as f64;
        let pct = |k: usize| 100.0 * k as f64 / n;
        Self {
            substitution_pct: pct(wer.counts.substitutions),
            deletion_pct: pct(wer.counts.deletions),
            insertion_pct: pct(wer.counts.insertions),
            wer,
            failed_segments,
        }
    }
}

/// Primary-officer reference segments of a stop, in time order.
pub fn officer_references(stop: &StopRecord) -> Vec<(Segment, &str)> {
    let mut refs: Vec<(Segment, &str)> = stop
        .utterances
        .iter()
        .filter(|u| u.speaker_role == SpeakerRole::PrimaryOfficer)
        .filter_map(|u| u.segment.map(|s| (s, u.raw_text.as_str())))
        .collect();
    refs.sort_by_key(|(s, _)| (s.start_ms(), s.end_ms()));
    refs
}

/// Transcribe each detected segment and compare the concatenation with the
/// concatenated primary-officer references.
pub fn evaluate_detection(detected: &[Segment], stop: &StopRecord, transcriber: &dyn Transcriber) -> DetectionEval {
    let mut hyps: Vec<(Segment, String)> = Vec::with_capacity(detected.len());
    let mut failed = Vec::new();
    for &seg in detected {
        match transcriber.transcribe(&stop.audio, seg) {
            Ok(text) => hyps.push((seg, text)),
            Err(_) => {
                failed.push(seg);
                hyps.push((seg, String::new()));
            }
        }
    }
    hyps.sort_by_key(|(s, _)| (s.start_ms(), s.end_ms()));
    score_transcripts(stop, &hyps, failed)
}

/// [`evaluate_detection`] with transcripts already in hand.
pub fn score_transcripts(stop: &StopRecord, hyps: &[(Segment, String)], failed: Vec<Segment>) -> DetectionEval {
    let wer = concat_wer(&officer_references(stop), hyps).expect("both sides sorted");
    DetectionEval::from_wer(wer, failed)
}

/// Segment-level precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentF1 {
    pub matched: usize,
    pub detected: usize,
    pub truth: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Match detections to truth one-to-one, in time order. A pair matches when
/// their intersection covers at least half of each segment.
pub fn segment_f1(detected: &[Segment], truth: &[Segment]) -> SegmentF1 {
    let mut used = vec![false; truth.len()];
    let mut matched = 0;
    for d in detected {
        let hit = truth.iter().enumerate().find(|(j, t)| {
            let ov = d.overlap_ms(t);
            !used[*j] && 2 * ov >= d.duration_ms() && 2 * ov >= t.duration_ms()
        });
        if let Some((j, _)) = hit {
            used[j] = true;
            matched += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (precision, recall) = (ratio(matched, detected.len()), ratio(matched, truth.len()));
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    SegmentF1 { matched, detected: detected.len(), truth: truth.len(), precision, recall, f1 }
}
