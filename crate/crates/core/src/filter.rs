//! Training-set filters over aligned utterances.
//!
//! | id | keeps |
//! |----|-------|
//! | c1 | 0.5 s ≤ duration ≤ 10 s |
//! | c2 | c1 and min WER ≤ 0.50 |
//! | c3 | c1 and min no-subs WER < 0.10 and min WER < 0.50 |
//! | c4 | c1 and min WER ≤ 0.10 and min no-subs WER < 0.10 |

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::{AlignStatus, AlignedUtterance, AlignmentCandidate, AlignmentReport};
use crate::corpus::{Manifest, StopRecord, Utterance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    C1,
    C2,
    #[default]
    C3,
    C4,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::C1, Criterion::C2, Criterion::C3, Criterion::C4];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::C1 => "c1",
            Criterion::C2 => "c2",
            Criterion::C3 => "c3",
            Criterion::C4 => "c4",
        }
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown criterion {s:?} (expected c1, c2, c3 or c4)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub wer_cap: f64,
    pub no_subs_cap: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self { min_duration_s: 0.5, max_duration_s: 10.0, wer_cap: 0.5, no_subs_cap: 0.1 }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), FilterError> {
        let ok = self.min_duration_s > 0.0
            && self.max_duration_s > self.min_duration_s
            && self.wer_cap > 0.0
            && self.no_subs_cap > 0.0
            && self.no_subs_cap <= self.wer_cap;
        if ok {
            Ok(())
        } else {
            Err(FilterError::Params(format!("{self:?}")))
        }
    }
}

/// The two scores the filters look at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterScores {
    pub min_wer: f64,
    pub min_wer_no_subs: f64,
}

impl From<&AlignmentCandidate> for FilterScores {
    fn from(c: &AlignmentCandidate) -> Self {
        Self { min_wer: c.min_wer, min_wer_no_subs: c.min_wer_no_subs }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("utterance {stop_id}/{utterance_id} has a segment but no alignment scores")]
    MissingScores { stop_id: String, utterance_id: String },
    #[error("invalid filter parameters: {0}")]
    Params(String),
}

pub fn passes(criterion: Criterion, params: &FilterParams, duration_s: f64, s: &FilterScores) -> bool {
    let c1 = duration_s >= params.min_duration_s && duration_s <= params.max_duration_s;
    c1 && match criterion {
        Criterion::C1 => true,
        Criterion::C2 => s.min_wer <= params.wer_cap,
        Criterion::C3 => s.min_wer_no_subs < params.no_subs_cap && s.min_wer < params.wer_cap,
        // Differs from `min_wer <= cap` only when both scores equal the cap.
        Criterion::C4 => s.min_wer <= params.no_subs_cap && s.min_wer_no_subs < params.no_subs_cap,
    }
}

pub fn passes_aligned(criterion: Criterion, params: &FilterParams, utt: &AlignedUtterance) -> bool {
    passes(criterion, params, utt.chosen.segment.duration(), &FilterScores::from(&utt.chosen))
}

/// Scores keyed by `(stop_id, utterance_id)` from alignment report lines.
pub fn scores_from_reports(reports: &[AlignmentReport]) -> HashMap<(String, String), FilterScores> {
    reports
        .iter()
        .filter(|r| r.status == AlignStatus::Aligned)
        .filter_map(|r| {
            Some((
                (r.stop_id.clone(), r.utterance_id.clone()),
                FilterScores { min_wer: r.min_wer?, min_wer_no_subs: r.min_wer_no_subs? },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KeptTotals {
    pub utterances: usize,
    pub hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub criterion: Criterion,
    pub params: FilterParams,
    pub input: KeptTotals,
    /// Utterances with no segment; they fail every criterion.
    pub unaligned_utterances: usize,
    pub kept: BTreeMap<Criterion, KeptTotals>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub kept: Manifest,
    pub dropped: Manifest,
    pub stats: FilterStats,
}

fn verdicts(
    stop: &StopRecord,
    u: &Utterance,
    params: &FilterParams,
    scores: &HashMap<(String, String), FilterScores>,
) -> Result<Option<[bool; 4]>, FilterError> {
    let Some(seg) = u.segment else { return Ok(None) };
    let s = scores.get(&(stop.stop_id.clone(), u.id.clone())).ok_or_else(|| FilterError::MissingScores {
        stop_id: stop.stop_id.clone(),
        utterance_id: u.id.clone(),
    })?;
    Ok(Some(Criterion::ALL.map(|c| passes(c, params, seg.duration(), s))))
}

/// Split a manifest's utterances into kept and dropped under `criterion`,
/// and count what every criterion would keep. A stop appears in `kept`
/// (`dropped`) when at least one of its utterances does; stops without
/// utterances go to `kept`.
pub fn filter_manifest(
    manifest: &Manifest,
    scores: &HashMap<(String, String), FilterScores>,
    criterion: Criterion,
    params: &FilterParams,
) -> Result<FilterOutput, FilterError> {
    params.validate()?;
    let mut kept_stops = Vec::new();
    let mut dropped_stops = Vec::new();
    let mut input = KeptTotals::default();
    let mut unaligned = 0;
    let mut kept: BTreeMap<Criterion, KeptTotals> = Criterion::ALL.iter().map(|&c| (c, KeptTotals::default())).collect();
    let ci = Criterion::ALL.iter().position(|&c| c == criterion).expect("listed");
    for stop in &manifest.stops {
        let mut k = stop.clone();
        let mut d = stop.clone();
        k.utterances.clear();
        d.utterances.clear();
        for u in &stop.utterances {
            let hours = u.segment.map_or(0.0, |s| s.duration() / 3600.0);
            input.utterances += 1;
            input.hours += hours;
            let v = verdicts(stop, u, params, scores)?;
            if v.is_none() {
                unaligned += 1;
            }
            let v = v.unwrap_or([false; 4]);
            for (c, pass) in Criterion::ALL.iter().zip(v) {
                if pass {
                    let t = kept.get_mut(c).expect("all criteria present");
                    t.utterances += 1;
                    t.hours += hours;
                }
            }
            if v[ci] { k.utterances.push(u.clone()) } else { d.utterances.push(u.clone()) }
        }
        if !k.utterances.is_empty() || stop.utterances.is_empty() {
            kept_stops.push(k);
        }
        if !d.utterances.is_empty() {
            dropped_stops.push(d);
        }
    }
    let version = manifest.schema_version;
    Ok(FilterOutput {
        kept: Manifest { stops: kept_stops, schema_version: version },
        dropped: Manifest { stops: dropped_stops, schema_version: version },
        stats: FilterStats { criterion, params: *params, input, unaligned_utterances: unaligned, kept },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(min_wer: f64, min_wer_no_subs: f64) -> FilterScores {
        FilterScores { min_wer, min_wer_no_subs }
    }

    fn verdict(d: f64, sc: FilterScores) -> [bool; 4] {
        Criterion::ALL.map(|c| passes(c, &FilterParams::default(), d, &sc))
    }

    #[test]
    fn criterion_examples() {
        assert_eq!(verdict(0.3, s(0.0, 0.0)), [false; 4]);
        assert_eq!(verdict(2.0, s(0.6, 0.0)), [true, false, false, false]);
        assert_eq!(verdict(2.0, s(0.4, 0.05)), [true, true, true, false]);
    }

    #[test]
    fn boundaries() {
        assert_eq!(verdict(0.5, s(0.0, 0.0)), [true; 4]);
        assert_eq!(verdict(10.0, s(0.0, 0.0)), [true; 4]);
        assert_eq!(verdict(10.001, s(0.0, 0.0)), [false; 4]);
        // c2 keeps at the cap, c3 does not.
        assert_eq!(verdict(1.0, s(0.5, 0.0)), [true, true, false, false]);
        assert_eq!(verdict(1.0, s(0.1, 0.0)), [true, true, true, true]);
        assert_eq!(verdict(1.0, s(0.1, 0.1)), [true, true, false, false]);
    }

    #[test]
    fn parse_criterion() {
        assert_eq!("C4".parse::<Criterion>().unwrap(), Criterion::C4);
        assert!("c5".parse::<Criterion>().is_err());
    }
}
