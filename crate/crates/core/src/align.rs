//! Utterance alignment: five ways of placing each transcribed utterance in
//! the stop audio, and selection of the placement whose transcription best
//! matches the reference text.
//!
//! Methods, in canonical (tie-breaking) order:
//! * `unaligned`: the transcriber's whole-second marks padded by 0.25 s;
//! * `mfa` / `w2v2`: the first / second forced aligner run on that padded
//!   segment, trimmed to the first and last word;
//! * `mfa_chunked` / `w2v2_chunked`: the same aligners run on chunks of
//!   consecutive utterances (up to 20 s of speech), split back per utterance
//!   by word timings.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{StopRecord, Utterance};
use crate::engines::{force_align, EngineError, ForcedAligner, Transcriber, WordTiming};
use crate::metrics::wer;
use crate::segment::Segment;
use crate::textnorm::normalize;

pub const PAD_MS: u64 = 250;
pub const DEFAULT_MAX_CHUNK_S: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMethod {
    Unaligned,
    Mfa,
    MfaChunked,
    W2v2,
    W2v2Chunked,
}

impl AlignMethod {
    pub const ALL: [AlignMethod; 5] =
        [AlignMethod::Unaligned, AlignMethod::Mfa, AlignMethod::MfaChunked, AlignMethod::W2v2, AlignMethod::W2v2Chunked];

    pub fn as_str(self) -> &'static str {
        match self {
            AlignMethod::Unaligned => "unaligned",
            AlignMethod::Mfa => "mfa",
            AlignMethod::MfaChunked => "mfa_chunked",
            AlignMethod::W2v2 => "w2v2",
            AlignMethod::W2v2Chunked => "w2v2_chunked",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("{timings} word timings for {tokens} tokens")]
    CountMismatch { timings: usize, tokens: usize },
    #[error("utterance with no words in chunk")]
    EmptyMember,
    #[error("utterance {0} could not be transcribed by any engine in any candidate segment")]
    Unalignable(String),
    #[error("no candidates for utterance {0}")]
    NoCandidates(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Heuristic segments from whole-second marks, one per utterance (`None`
/// when the utterance has no start mark or the clamped segment is empty).
///
/// Repairs, in order: a start earlier than the previous start is raised to
/// it; a missing end becomes the next marked start (or start + 1 for the
/// last); an end before the start becomes start + 1. The result is padded by
/// 0.25 s on each side and clamped to the audio.
pub fn heuristic_timestamps(utterances: &[Utterance], audio_duration_ms: u64) -> Vec<Option<Segment>> {
    let starts: Vec<Option<u64>> = utterances.iter().map(|u| u.raw_start_s.map(u64::from)).collect();
    let mut out = Vec::with_capacity(utterances.len());
    let mut prev_start: Option<u64> = None;
    for (i, u) in utterances.iter().enumerate() {
        let Some(mut start) = starts[i] else {
            out.push(None);
            continue;
        };
        if let Some(p) = prev_start {
            start = start.max(p);
        }
        prev_start = Some(start);
        let mut end = match u.raw_end_s {
            Some(e) => u64::from(e),
            None => starts[i + 1..].iter().flatten().next().copied().unwrap_or(start + 1),
        };
        if end < start {
            end = start + 1;
        }
        let lo = (start * 1000).saturating_sub(PAD_MS);
        let hi = (end * 1000 + PAD_MS).min(audio_duration_ms);
        out.push(Segment::from_ms(lo, hi).ok());
    }
    out
}

/// A run of consecutive utterances aligned together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    /// Indices into the input list.
    pub members: Vec<usize>,
    pub span: Segment,
}

/// Group consecutive segments greedily so the summed duration of each group
/// stays at most `max_len_ms`; a segment longer than that stands alone.
pub fn chunk_utterances(segments: &[Segment], max_len_ms: u64) -> Vec<Chunk> {
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut total = 0u64;
    for (i, s) in segments.iter().enumerate() {
        match chunks.last_mut() {
            Some(c) if total + s.duration_ms() <= max_len_ms => {
                c.members.push(i);
                c.span = c.span.hull(s);
                total += s.duration_ms();
            }
            _ => {
                chunks.push(Chunk { members: vec![i], span: *s });
                total = s.duration_ms();
            }
        }
    }
    chunks
}

/// Per-member segments from word timings covering a whole chunk.
/// `token_counts[i]` is the number of words member `i` contributes.
pub fn split_chunk_by_words(token_counts: &[usize], timings: &[WordTiming]) -> Result<Vec<Segment>, AlignError> {
    let tokens: usize = token_counts.iter().sum();
    if tokens != timings.len() {
        return Err(AlignError::CountMismatch { timings: timings.len(), tokens });
    }
    let mut out = Vec::with_capacity(token_counts.len());
    let mut at = 0;
    for &k in token_counts {
        if k == 0 {
            return Err(AlignError::EmptyMember);
        }
        let words = &timings[at..at + k];
        out.push(
            Segment::from_ms(words[0].span.start_ms(), words[k - 1].span.end_ms())
                .expect("word timings are ordered"),
        );
        at += k;
    }
    Ok(out)
}

/// A proposed placement before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub method: AlignMethod,
    pub segment: Segment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodFailure {
    pub method: AlignMethod,
    pub utterance_ids: Vec<String>,
    pub error: String,
}

/// Candidates for every alignable utterance of a stop.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Proposals {
    /// Utterance index within the stop and its proposals in canonical order.
    pub per_utterance: Vec<(usize, Vec<Proposal>)>,
    /// Utterances without usable raw marks.
    pub skipped: Vec<String>,
    pub failures: Vec<MethodFailure>,
}

fn trimmed(words: &[WordTiming]) -> Segment {
    Segment::from_ms(words[0].span.start_ms(), words[words.len() - 1].span.end_ms()).expect("ordered words")
}

/// Run every method on a stop. `mfa` and `w2v2` are the two aligner roles.
pub fn propose_candidates(
    stop: &StopRecord,
    audio_duration_ms: u64,
    mfa: &dyn ForcedAligner,
    w2v2: &dyn ForcedAligner,
    max_chunk_s: f64,
) -> Proposals {
    let heur = heuristic_timestamps(&stop.utterances, audio_duration_ms);
    let mut out = Proposals::default();
    let mut by_utt: BTreeMap<usize, Vec<Proposal>> = BTreeMap::new();
    let mut usable: Vec<(usize, Segment, usize)> = Vec::new();
    for (i, u) in stop.utterances.iter().enumerate() {
        match heur[i] {
            Some(seg) => {
                by_utt.entry(i).or_default().push(Proposal { method: AlignMethod::Unaligned, segment: seg });
                let n = normalize(&u.raw_text).len();
                if n > 0 {
                    usable.push((i, seg, n));
                }
            }
            None => out.skipped.push(u.id.clone()),
        }
    }

    let max_ms = (max_chunk_s * 1000.0).round() as u64;
    let segs: Vec<Segment> = usable.iter().map(|(_, s, _)| *s).collect();
    let chunks = chunk_utterances(&segs, max_ms);
    for (aligner, single, chunked) in
        [(mfa, AlignMethod::Mfa, AlignMethod::MfaChunked), (w2v2, AlignMethod::W2v2, AlignMethod::W2v2Chunked)]
    {
        for &(i, seg, _) in &usable {
            match force_align(aligner, &stop.audio, seg, &stop.utterances[i].raw_text) {
                Ok(words) => by_utt.entry(i).or_default().push(Proposal { method: single, segment: trimmed(&words) }),
                Err(e) => out.failures.push(MethodFailure {
                    method: single,
                    utterance_ids: vec![stop.utterances[i].id.clone()],
                    error: e.to_string(),
                }),
            }
        }
        for c in &chunks {
            let members: Vec<&(usize, Segment, usize)> = c.members.iter().map(|&k| &usable[k]).collect();
            let text = members.iter().map(|(i, _, _)| stop.utterances[*i].raw_text.as_str()).collect::<Vec<_>>().join(" ");
            let counts: Vec<usize> = members.iter().map(|(_, _, n)| *n).collect();
            let result = force_align(aligner, &stop.audio, c.span, &text)
                .map_err(AlignError::from)
                .and_then(|words| split_chunk_by_words(&counts, &words));
            match result {
                Ok(parts) => {
                    for ((i, _, _), seg) in members.iter().zip(parts) {
                        by_utt.entry(*i).or_default().push(Proposal { method: chunked, segment: seg });
                    }
                }
                Err(e) => out.failures.push(MethodFailure {
                    method: chunked,
                    utterance_ids: members.iter().map(|(i, _, _)| stop.utterances[*i].id.clone()).collect(),
                    error: e.to_string(),
                }),
            }
        }
    }
    out.per_utterance = by_utt
        .into_iter()
        .map(|(i, mut v)| {
            v.sort_by_key(|p| p.method);
            (i, v)
        })
        .collect();
    out
}

/// A scored placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCandidate {
    pub method: AlignMethod,
    pub segment: Segment,
    pub per_engine_wer: BTreeMap<String, f64>,
    pub min_wer: f64,
    pub per_engine_wer_no_subs: BTreeMap<String, f64>,
    pub min_wer_no_subs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedUtterance {
    pub utterance_id: String,
    pub chosen: AlignmentCandidate,
    pub all_candidates: Vec<AlignmentCandidate>,
}

/// Transcriptions keyed by engine index and segment, shared across the
/// candidates of one stop since methods often agree.
#[derive(Default)]
pub struct TranscriptCache {
    entries: HashMap<(usize, Segment), Option<String>>,
}

impl TranscriptCache {
    fn get(&mut self, k: usize, engine: &dyn Transcriber, audio: &Path, segment: Segment) -> Option<String> {
        self.entries.entry((k, segment)).or_insert_with(|| engine.transcribe(audio, segment).ok()).clone()
    }
}

/// Score every candidate with every transcriber and keep the one with the
/// lowest min WER; ties go to the earlier method in canonical order.
pub fn select_best(
    utterance_id: &str,
    candidates: &[Proposal],
    transcribers: &[&dyn Transcriber],
    audio: &Path,
    ref_text: &str,
    cache: &mut TranscriptCache,
) -> Result<AlignedUtterance, AlignError> {
    if candidates.is_empty() || transcribers.is_empty() {
        return Err(AlignError::NoCandidates(utterance_id.into()));
    }
    let mut ordered: Vec<&Proposal> = candidates.iter().collect();
    ordered.sort_by_key(|p| p.method);
    let mut scored = Vec::new();
    for p in ordered {
        let mut per_engine_wer = BTreeMap::new();
        let mut per_engine_wer_no_subs = BTreeMap::new();
        for (k, t) in transcribers.iter().enumerate() {
            if let Some(hyp) = cache.get(k, *t, audio, p.segment) {
                let w = wer(ref_text, &hyp);
                per_engine_wer.insert(t.name().to_string(), w.value);
                per_engine_wer_no_subs.insert(t.name().to_string(), w.without_substitutions().value);
            }
        }
        if per_engine_wer.is_empty() {
            continue;
        }
        let min = |m: &BTreeMap<String, f64>| m.values().copied().fold(f64::INFINITY, f64::min);
        scored.push(AlignmentCandidate {
            method: p.method,
            segment: p.segment,
            min_wer: min(&per_engine_wer),
            min_wer_no_subs: min(&per_engine_wer_no_subs),
            per_engine_wer,
            per_engine_wer_no_subs,
        });
    }
    let best = scored
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.min_wer.total_cmp(&b.min_wer).then(i.cmp(j)))
        .map(|(_, c)| c.clone())
        .ok_or_else(|| AlignError::Unalignable(utterance_id.into()))?;
    Ok(AlignedUtterance { utterance_id: utterance_id.into(), chosen: best, all_candidates: scored })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignStatus {
    Aligned,
    Unalignable,
    Skipped,
}

/// One line of the alignment report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub stop_id: String,
    pub utterance_id: String,
    pub status: AlignStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub method: Option<AlignMethod>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub start_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub end_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub min_wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub min_wer_no_subs: Option<f64>,
    pub candidates: Vec<AlignmentCandidate>,
    pub failures: Vec<String>,
}

/// A stop with chosen segments filled in, plus its report lines.
#[derive(Debug, Clone, PartialEq)]
pub struct StopAlignment {
    pub stop: StopRecord,
    pub reports: Vec<AlignmentReport>,
}

/// Propose and select for every utterance of a stop. Utterances that cannot
/// be aligned lose any segment they carried.
pub fn align_stop(
    stop: &StopRecord,
    audio_duration_ms: u64,
    mfa: &dyn ForcedAligner,
    w2v2: &dyn ForcedAligner,
    transcribers: &[&dyn Transcriber],
    max_chunk_s: f64,
) -> StopAlignment {
    let proposals = propose_candidates(stop, audio_duration_ms, mfa, w2v2, max_chunk_s);
    let mut out = stop.clone();
    let mut reports: Vec<Option<AlignmentReport>> = vec![None; stop.utterances.len()];
    let failures_for = |id: &str| -> Vec<String> {
        proposals
            .failures
            .iter()
            .filter(|f| f.utterance_ids.iter().any(|u| u == id))
            .map(|f| format!("{}: {}", f.method.as_str(), f.error))
            .collect()
    };
    let base = |u: &Utterance, status| AlignmentReport {
        stop_id: stop.stop_id.clone(),
        utterance_id: u.id.clone(),
        status,
        method: None,
        start_s: None,
        end_s: None,
        min_wer: None,
        min_wer_no_subs: None,
        candidates: Vec::new(),
        failures: failures_for(&u.id),
    };
    let mut cache = TranscriptCache::default();
    for (i, props) in &proposals.per_utterance {
        let u = &stop.utterances[*i];
        match select_best(&u.id, props, transcribers, &stop.audio, &u.raw_text, &mut cache) {
            Ok(a) => {
                out.utterances[*i].segment = Some(a.chosen.segment);
                let mut r = base(u, AlignStatus::Aligned);
                r.method = Some(a.chosen.method);
                r.start_s = Some(a.chosen.segment.start());
                r.end_s = Some(a.chosen.segment.end());
                r.min_wer = Some(a.chosen.min_wer);
                r.min_wer_no_subs = Some(a.chosen.min_wer_no_subs);
                r.candidates = a.all_candidates;
                reports[*i] = Some(r);
            }
            Err(_) => {
                out.utterances[*i].segment = None;
                reports[*i] = Some(base(u, AlignStatus::Unalignable));
            }
        }
    }
    for (i, u) in stop.utterances.iter().enumerate() {
        if reports[i].is_none() {
            out.utterances[i].segment = None;
            reports[i] = Some(base(u, AlignStatus::Skipped));
        }
    }
    StopAlignment { stop: out, reports: reports.into_iter().flatten().collect() }
}

/// How often each method was chosen: count and proportion of aligned
/// utterances.
pub fn method_frequencies(reports: &[AlignmentReport]) -> BTreeMap<AlignMethod, (usize, f64)> {
    let chosen: Vec<AlignMethod> = reports.iter().filter_map(|r| r.method).collect();
    let n = chosen.len().max(1) as f64;
    AlignMethod::ALL
        .iter()
        .map(|&m| {
            let k = chosen.iter().filter(|&&c| c == m).count();
            (m, (k, k as f64 / n))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SpeakerRole;
    use crate::engines::UniformAligner;

    fn utt(id: &str, s: Option<u32>, e: Option<u32>, text: &str) -> Utterance {
        Utterance {
            id: id.into(),
            speaker_role: SpeakerRole::PrimaryOfficer,
            raw_text: text.into(),
            segment: None,
            raw_start_s: s,
            raw_end_s: e,
        }
    }

    fn seg(a: u64, b: u64) -> Segment {
        Segment::from_ms(a, b).unwrap()
    }

    #[test]
    fn heuristic_examples() {
        let h = heuristic_timestamps(&[utt("a", Some(12), Some(13), "x")], 60_000);
        assert_eq!(h, vec![Some(seg(11_750, 13_250))]);
        let h = heuristic_timestamps(&[utt("a", Some(5), Some(3), "x")], 60_000);
        assert_eq!(h, vec![Some(seg(4_750, 6_250))]);
        let h = heuristic_timestamps(&[utt("a", Some(0), Some(1), "x")], 60_000);
        assert_eq!(h[0].unwrap().start_ms(), 0);
    }

    #[test]
    fn heuristic_repairs_missing_end_and_order() {
        let us = [utt("a", Some(4), None, "x"), utt("b", Some(7), Some(8), "x"), utt("c", Some(6), None, "x")];
        let h = heuristic_timestamps(&us, 9_000);
        assert_eq!(h[0], Some(seg(3_750, 7_250)));
        // Start 6 < previous 7 is raised to 7; last with no end gets +1 s, clamped.
        assert_eq!(h[2], Some(seg(6_750, 8_250)));
        let h = heuristic_timestamps(&[utt("a", None, None, "x")], 9_000);
        assert_eq!(h, vec![None]);
    }

    #[test]
    fn chunk_examples() {
        let s = |d: u64, at: u64| seg(at, at + d * 1000);
        let c = chunk_utterances(&[s(8, 0), s(7, 10_000), s(6, 20_000)], 20_000);
        assert_eq!(c.iter().map(|c| c.members.clone()).collect::<Vec<_>>(), vec![vec![0, 1], vec![2]]);
        assert_eq!(c[0].span, seg(0, 17_000));
        assert_eq!(chunk_utterances(&[s(25, 0)], 20_000).len(), 1);
        let four = [s(5, 0), s(5, 5_000), s(5, 10_000), s(5, 15_000)];
        assert_eq!(chunk_utterances(&four, 20_000).len(), 1);
    }

    #[test]
    fn split_examples() {
        let toks: Vec<String> = "a b c d e".split(' ').map(String::from).collect();
        let t = crate::engines::mock::uniform_timings(seg(0, 5_000), &toks).unwrap();
        assert_eq!(split_chunk_by_words(&[2, 3], &t).unwrap(), vec![seg(0, 2_000), seg(2_000, 5_000)]);
        assert_eq!(split_chunk_by_words(&[5], &t).unwrap(), vec![seg(0, 5_000)]);
        assert!(matches!(split_chunk_by_words(&[5], &t[..4]), Err(AlignError::CountMismatch { .. })));
    }

    struct Failing;

    impl ForcedAligner for Failing {
        fn name(&self) -> &str {
            "failing"
        }

        fn force_align(&self, _: &Path, _: Segment, _: &str) -> Result<Vec<WordTiming>, EngineError> {
            Err(EngineError::AlignmentFailure("no".into()))
        }
    }

    fn stop(utts: Vec<Utterance>) -> StopRecord {
        StopRecord {
            stop_id: "s1".into(),
            audio: "a.wav".into(),
            primary_officer_ids: Default::default(),
            all_officer_ids: Default::default(),
            driver_race: crate::corpus::Race::White,
            driver_gender: crate::corpus::Gender::Male,
            officer_race: crate::corpus::Race::White,
            officer_gender: crate::corpus::Gender::Male,
            utterances: utts,
        }
    }

    #[test]
    fn proposals_with_uniform_and_failing_aligners() {
        let s = stop(vec![utt("a", Some(1), Some(2), "yes sir"), utt("b", Some(3), Some(5), "license please now")]);
        let u = UniformAligner::new("u");
        let p = propose_candidates(&s, 10_000, &u, &u, DEFAULT_MAX_CHUNK_S);
        assert!(p.per_utterance.iter().all(|(_, v)| v.len() == 5));
        let p = propose_candidates(&s, 10_000, &Failing, &u, DEFAULT_MAX_CHUNK_S);
        for (_, v) in &p.per_utterance {
            let methods: Vec<AlignMethod> = v.iter().map(|c| c.method).collect();
            assert_eq!(methods, vec![AlignMethod::Unaligned, AlignMethod::W2v2, AlignMethod::W2v2Chunked]);
        }
        assert_eq!(p.failures.len(), 3);
    }

    struct Table(HashMap<Segment, &'static str>);

    impl Transcriber for Table {
        fn name(&self) -> &str {
            "table"
        }

        fn transcribe(&self, _: &Path, s: Segment) -> Result<String, EngineError> {
            Ok(self.0.get(&s).copied().unwrap_or("").to_string())
        }
    }

    #[test]
    fn select_prefers_exact_hit_then_canonical_order() {
        let hit = seg(1_000, 2_000);
        let t = Table(HashMap::from([(hit, "yes sir")]));
        let props = [
            Proposal { method: AlignMethod::Unaligned, segment: seg(750, 2_250) },
            Proposal { method: AlignMethod::W2v2, segment: hit },
            Proposal { method: AlignMethod::Mfa, segment: seg(900, 1_500) },
        ];
        let a = select_best("u", &props, &[&t], Path::new("a.wav"), "yes sir", &mut TranscriptCache::default()).unwrap();
        assert_eq!(a.chosen.method, AlignMethod::W2v2);
        assert_eq!(a.chosen.min_wer, 0.0);
        assert!(a.all_candidates.iter().all(|c| a.chosen.min_wer <= c.min_wer));

        let same = [
            Proposal { method: AlignMethod::W2v2Chunked, segment: hit },
            Proposal { method: AlignMethod::MfaChunked, segment: hit },
        ];
        let a = select_best("u", &same, &[&t], Path::new("a.wav"), "yes sir", &mut TranscriptCache::default()).unwrap();
        assert_eq!(a.chosen.method, AlignMethod::MfaChunked);
    }
}
