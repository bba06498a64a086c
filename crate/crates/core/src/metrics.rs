//! Edit-distance alignment and the WER/CER family used for alignment
//! selection, filtering and evaluation.
//!
//! All variants share one deterministic alignment: among minimal unit-cost
//! alignments the traceback prefers match, then substitution, then deletion,
//! then insertion. `wer_no_subs` reads its deletion and insertion counts
//! from that same alignment, so it can never exceed `wer`.

use serde::{Deserialize, Serialize};

use crate::segment::Segment;
use crate::textnorm::{normalize, scrub_repetitions, DEFAULT_REPETITION_LIMIT};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn matches(&self) -> usize {
        self.reference_length - self.substitutions - self.deletions
    }
}

impl std::ops::Add for EditCounts {
    type Output = EditCounts;
    fn add(self, o: EditCounts) -> EditCounts {
        EditCounts {
            substitutions: self.substitutions + o.substitutions,
            deletions: self.deletions + o.deletions,
            insertions: self.insertions + o.insertions,
            reference_length: self.reference_length + o.reference_length,
        }
    }
}

impl std::iter::Sum for EditCounts {
    fn sum<I: Iterator<Item = EditCounts>>(iter: I) -> Self {
        iter.fold(EditCounts::default(), |a, b| a + b)
    }
}

/// An error rate together with the counts it was computed from.
///
/// When the reference is empty the rate is defined as the insertion count
/// and `degenerate` is set; such rows are excluded from regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerScore {
    pub value: f64,
    pub counts: EditCounts,
    pub degenerate: bool,
}

impl WerScore {
    fn from_errors(errors: usize, counts: EditCounts) -> Self {
        if counts.reference_length == 0 {
            WerScore { value: errors as f64, counts, degenerate: errors > 0 }
        } else {
            WerScore { value: errors as f64 / counts.reference_length as f64, counts, degenerate: false }
        }
    }

    pub fn from_counts(counts: EditCounts) -> Self {
        Self::from_errors(counts.errors(), counts)
    }

    /// Same counts, substitutions not counted as errors.
    pub fn without_substitutions(&self) -> Self {
        Self::from_errors(self.counts.deletions + self.counts.insertions, self.counts)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no hypotheses to compare")]
    NoHypotheses,
    #[error("{side} segments are not sorted by start time (index {index})")]
    Unsorted { side: &'static str, index: usize },
}

/// Minimal unit-cost alignment of `hyp` against `reference`.
pub fn edit_alignment<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let n = reference.len();
    let m = hyp.len();
    let w = m + 1;
    let mut dp = vec![0u32; (n + 1) * w];
    for (j, v) in dp[..w].iter_mut().enumerate() {
        *v = j as u32;
    }
    for i in 1..=n {
        dp[i * w] = i as u32;
        for j in 1..=m {
            let diag = dp[(i - 1) * w + j - 1] + u32::from(reference[i - 1] != hyp[j - 1]);
            let up = dp[(i - 1) * w + j] + 1;
            let left = dp[i * w + j - 1] + 1;
            dp[i * w + j] = diag.min(up).min(left);
        }
    }

    let mut counts = EditCounts { reference_length: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let diag = dp[(i - 1) * w + j - 1];
            if reference[i - 1] == hyp[j - 1] && diag == here {
                i -= 1;
                j -= 1;
                continue;
            }
            if diag + 1 == here {
                counts.substitutions += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

fn hyp_tokens(hyp: &str, scrub: bool) -> Vec<String> {
    if scrub {
        normalize(&scrub_repetitions(hyp, DEFAULT_REPETITION_LIMIT)).into_tokens()
    } else {
        normalize(hyp).into_tokens()
    }
}

fn word_counts(reference: &str, hyp: &str, scrub: bool) -> EditCounts {
    let r = normalize(reference).into_tokens();
    let h = hyp_tokens(hyp, scrub);
    edit_alignment(&r, &h)
}

fn char_counts(reference: &str, hyp: &str, scrub: bool) -> EditCounts {
    let r: Vec<char> = normalize(reference).char_string().chars().collect();
    let h: Vec<char> = hyp_tokens(hyp, scrub).join(" ").chars().collect();
    edit_alignment(&r, &h)
}

/// Word error rate after bracket stripping and normalization of both sides
/// and repetition scrubbing of the hypothesis.
pub fn wer(reference: &str, hyp: &str) -> WerScore {
    WerScore::from_counts(word_counts(reference, hyp, true))
}

/// Character error rate over the normalized strings, spaces included.
pub fn cer(reference: &str, hyp: &str) -> WerScore {
    WerScore::from_counts(char_counts(reference, hyp, true))
}

/// `(D + I) / N` over the same alignment `wer` uses.
pub fn wer_no_subs(reference: &str, hyp: &str) -> WerScore {
    wer(reference, hyp).without_substitutions()
}

/// Lowest WER across hypotheses and the index of the first one reaching it.
pub fn min_wer<S: AsRef<str>>(reference: &str, hyps: &[S]) -> Result<(WerScore, usize), MetricsError> {
    let mut best: Option<(WerScore, usize)> = None;
    for (i, h) in hyps.iter().enumerate() {
        let s = wer(reference, h.as_ref());
        if best.as_ref().is_none_or(|(b, _)| s.value < b.value) {
            best = Some((s, i));
        }
    }
    best.ok_or(MetricsError::NoHypotheses)
}

fn check_sorted<S>(side: &'static str, segs: &[(Segment, S)]) -> Result<(), MetricsError> {
    for (index, w) in segs.windows(2).enumerate() {
        if w[1].0.start_ms() < w[0].0.start_ms() {
            return Err(MetricsError::Unsorted { side, index: index + 1 });
        }
    }
    Ok(())
}

/// WER between concatenated reference segments and concatenated hypothesis
/// segments. Each hypothesis segment is one model output, so repetition
/// scrubbing happens per segment before concatenation.
pub fn concat_wer<R: AsRef<str>, H: AsRef<str>>(
    reference: &[(Segment, R)],
    hyp: &[(Segment, H)],
) -> Result<WerScore, MetricsError> {
    check_sorted("reference", reference)?;
    check_sorted("hypothesis", hyp)?;
    let ref_text = reference.iter().map(|(_, t)| t.as_ref()).collect::<Vec<_>>().join(" ");
    let hyp_text = hyp
        .iter()
        .map(|(_, t)| scrub_repetitions(t.as_ref(), DEFAULT_REPETITION_LIMIT))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(WerScore::from_counts(word_counts(&ref_text, &hyp_text, false)))
}

/// Corpus-level rate: total errors over total reference length.
pub fn pooled(scores: impl IntoIterator<Item = EditCounts>) -> WerScore {
    WerScore::from_counts(scores.into_iter().sum())
}
