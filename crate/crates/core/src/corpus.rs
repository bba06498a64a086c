//! Stops, utterances and manifests, plus train/validation/test splitting.
//!
//! A manifest is stored as JSONL with one stop per line. Splits keep every
//! officer who appears in a test stop out of train and validation, and keep
//! validation primary officers out of train; stops that would break either
//! rule are moved to a `withheld` bucket rather than dropped.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::segment::Segment;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerRole {
    PrimaryOfficer,
    SecondaryOfficer,
    CommunityMember,
    Dispatch,
    Unknown,
}

impl SpeakerRole {
    pub fn is_officer(self) -> bool {
        matches!(self, SpeakerRole::PrimaryOfficer | SpeakerRole::SecondaryOfficer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Race {
    Black,
    White,
    Hispanic,
    Other,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_role: SpeakerRole,
    pub raw_text: String,
    pub segment: Option<Segment>,
    pub raw_start_s: Option<u32>,
    pub raw_end_s: Option<u32>,
}

impl Utterance {
    /// Utterances without a transcriber start mark cannot seed alignment.
    pub fn lacks_raw_marks(&self) -> bool {
        self.raw_start_s.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopRecord {
    pub stop_id: String,
    pub audio: PathBuf,
    pub primary_officer_ids: BTreeSet<String>,
    pub all_officer_ids: BTreeSet<String>,
    pub driver_race: Race,
    pub driver_gender: Gender,
    pub officer_race: Race,
    pub officer_gender: Gender,
    pub utterances: Vec<Utterance>,
}

impl StopRecord {
    /// Sort utterances by raw start mark. Utterances without a mark keep
    /// their positions; the marked ones are stably reordered around them.
    pub fn sort_utterances(&mut self) {
        let slots: Vec<usize> = (0..self.utterances.len())
            .filter(|&i| self.utterances[i].raw_start_s.is_some())
            .collect();
        let mut marked: Vec<Utterance> = slots.iter().map(|&i| self.utterances[i].clone()).collect();
        marked.sort_by_key(|u| u.raw_start_s);
        for (slot, u) in slots.into_iter().zip(marked) {
            self.utterances[slot] = u;
        }
    }

    fn validate(&self) -> Result<(), InvariantViolation> {
        let fail = |field: &str, detail: String| InvariantViolation {
            stop_id: self.stop_id.clone(),
            field: field.to_string(),
            detail,
        };
        if self.stop_id.is_empty() {
            return Err(fail("stop_id", "empty stop id".into()));
        }
        if let Some(o) = self.primary_officer_ids.difference(&self.all_officer_ids).next() {
            return Err(fail(
                "primary_officer_ids",
                format!("primary officer {o} missing from all_officer_ids"),
            ));
        }
        let mut seen = HashSet::new();
        let mut last: Option<u32> = None;
        for u in &self.utterances {
            if u.raw_text.trim().is_empty() {
                return Err(fail("utterances.raw_text", format!("utterance {} has empty text", u.id)));
            }
            if !seen.insert(u.id.as_str()) {
                return Err(fail("utterances.id", format!("duplicate utterance id {}", u.id)));
            }
            if let Some(s) = u.raw_start_s {
                if last.is_some_and(|l| s < l) {
                    return Err(fail(
                        "utterances.raw_start_s",
                        format!("utterance {} out of order", u.id),
                    ));
                }
                last = Some(s);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub stops: Vec<StopRecord>,
    pub schema_version: u32,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { stops: Vec::new(), schema_version: SCHEMA_VERSION }
    }
}

impl Manifest {
    pub fn new(stops: Vec<StopRecord>) -> Result<Self, CorpusError> {
        let m = Self { stops, schema_version: SCHEMA_VERSION };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut ids = HashSet::new();
        for s in &self.stops {
            s.validate().map_err(CorpusError::Invariant)?;
            if !ids.insert(s.stop_id.as_str()) {
                return Err(CorpusError::Invariant(InvariantViolation {
                    stop_id: s.stop_id.clone(),
                    field: "stop_id".into(),
                    detail: "duplicate stop id".into(),
                }));
            }
        }
        Ok(())
    }

    pub fn stop(&self, stop_id: &str) -> Option<&StopRecord> {
        self.stops.iter().find(|s| s.stop_id == stop_id)
    }

    pub fn utterance_count(&self) -> usize {
        self.stops.iter().map(|s| s.utterances.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("stop {stop_id}: invalid {field}: {detail}")]
pub struct InvariantViolation {
    pub stop_id: String,
    pub field: String,
    pub detail: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Invariant(InvariantViolation),
    #[error(
        "infeasible split: {message} (eligible black-driver stops {black}, white-driver stops {white}, total eligible {eligible})"
    )]
    Infeasible { message: String, black: usize, white: usize, eligible: usize },
}

// Wire form of one manifest line. Key names are the on-disk contract.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StopLine {
    stop_id: String,
    audio_path: String,
    primary_officer_ids: Vec<String>,
    all_officer_ids: Vec<String>,
    driver_race: Race,
    driver_gender: Gender,
    officer_race: Race,
    officer_gender: Gender,
    utterances: Vec<UtteranceLine>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceLine {
    id: String,
    speaker_role: SpeakerRole,
    raw_text: String,
    raw_start_s: Option<u32>,
    raw_end_s: Option<u32>,
    start_s: Option<f64>,
    end_s: Option<f64>,
}

impl From<&StopRecord> for StopLine {
    fn from(s: &StopRecord) -> Self {
        StopLine {
            stop_id: s.stop_id.clone(),
            audio_path: s.audio.to_string_lossy().into_owned(),
            primary_officer_ids: s.primary_officer_ids.iter().cloned().collect(),
            all_officer_ids: s.all_officer_ids.iter().cloned().collect(),
            driver_race: s.driver_race,
            driver_gender: s.driver_gender,
            officer_race: s.officer_race,
            officer_gender: s.officer_gender,
            utterances: s
                .utterances
                .iter()
                .map(|u| UtteranceLine {
                    id: u.id.clone(),
                    speaker_role: u.speaker_role,
                    raw_text: u.raw_text.clone(),
                    raw_start_s: u.raw_start_s,
                    raw_end_s: u.raw_end_s,
                    start_s: u.segment.map(|g| g.start()),
                    end_s: u.segment.map(|g| g.end()),
                })
                .collect(),
        }
    }
}

impl StopLine {
    fn into_record(self) -> Result<StopRecord, InvariantViolation> {
        let stop_id = self.stop_id;
        let mut utterances = Vec::with_capacity(self.utterances.len());
        for u in self.utterances {
            let segment = match (u.start_s, u.end_s) {
                (None, None) => None,
                (Some(a), Some(b)) => Some(Segment::from_secs(a, b).map_err(|e| InvariantViolation {
                    stop_id: stop_id.clone(),
                    field: "utterances.start_s/end_s".into(),
                    detail: format!("utterance {}: {e}", u.id),
                })?),
                _ => {
                    return Err(InvariantViolation {
                        stop_id,
                        field: "utterances.start_s/end_s".into(),
                        detail: format!("utterance {}: start_s and end_s must both be set or both null", u.id),
                    })
                }
            };
            utterances.push(Utterance {
                id: u.id,
                speaker_role: u.speaker_role,
                raw_text: u.raw_text,
                segment,
                raw_start_s: u.raw_start_s,
                raw_end_s: u.raw_end_s,
            });
        }
        let mut rec = StopRecord {
            stop_id,
            audio: PathBuf::from(self.audio_path),
            primary_officer_ids: self.primary_officer_ids.into_iter().collect(),
            all_officer_ids: self.all_officer_ids.into_iter().collect(),
            driver_race: self.driver_race,
            driver_gender: self.driver_gender,
            officer_race: self.officer_race,
            officer_gender: self.officer_gender,
            utterances,
        };
        rec.sort_utterances();
        rec.validate()?;
        Ok(rec)
    }
}

pub fn stop_to_json_line(stop: &StopRecord) -> String {
    serde_json::to_string(&StopLine::from(stop)).expect("manifest line serializes")
}

/// Parse manifest JSONL from any reader. Blank lines are ignored.
pub fn read_manifest<R: BufRead>(reader: R) -> Result<Manifest, CorpusError> {
    let mut stops = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| CorpusError::Parse { line: lineno, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: StopLine = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Parse { line: lineno, message: e.to_string() })?;
        let rec = parsed.into_record().map_err(CorpusError::Invariant)?;
        if !ids.insert(rec.stop_id.clone()) {
            return Err(CorpusError::Invariant(InvariantViolation {
                stop_id: rec.stop_id,
                field: "stop_id".into(),
                detail: format!("duplicate stop id on line {lineno}"),
            }));
        }
        stops.push(rec);
    }
    Ok(Manifest { stops, schema_version: SCHEMA_VERSION })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, CorpusError> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    read_manifest(BufReader::new(f))
}

pub fn write_manifest<W: Write>(manifest: &Manifest, mut w: W) -> std::io::Result<()> {
    for s in &manifest.stops {
        writeln!(w, "{}", stop_to_json_line(s))?;
    }
    w.flush()
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let f = File::create(path).map_err(io)?;
    write_manifest(manifest, BufWriter::new(f)).map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_stops: usize,
    pub validation_stops: usize,
    /// Test stops must have strictly fewer utterances than this.
    pub test_utterance_limit: usize,
    /// Require an equal number of black-driver and white-driver test stops.
    pub race_balance: bool,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_stops: 20, validation_stops: 8, test_utterance_limit: 60, race_balance: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Manifest,
    pub validation: Manifest,
    pub test: Manifest,
    pub withheld: Manifest,
}

fn officer_load(stops: &[StopRecord]) -> BTreeMap<&str, usize> {
    let mut load = BTreeMap::new();
    for s in stops {
        for o in &s.all_officer_ids {
            *load.entry(o.as_str()).or_insert(0) += 1;
        }
    }
    load
}

/// Stops sharing an officer with `s`, excluding `s` itself.
fn conflict_weight(s: &StopRecord, load: &BTreeMap<&str, usize>) -> usize {
    s.all_officer_ids.iter().map(|o| load[o.as_str()] - 1).sum()
}

/// Partition stops into train / validation / test / withheld.
///
/// Test stops are drawn from stops with a known black or white driver and
/// fewer than `test_utterance_limit` utterances, preferring officers with few
/// other stops, and are officer-disjoint from one another. Every remaining
/// stop that shares any officer with a test stop is withheld. Validation
/// stops are then chosen the same way, and train stops sharing a primary
/// officer with validation are withheld as well.
pub fn partition_splits(manifest: &Manifest, config: &SplitConfig) -> Result<Splits, CorpusError> {
    let stops = &manifest.stops;
    let load = officer_load(stops);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut order: Vec<usize> = (0..stops.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| conflict_weight(&stops[i], &load));

    let eligible: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| {
            let s = &stops[i];
            matches!(s.driver_race, Race::Black | Race::White)
                && s.utterances.len() < config.test_utterance_limit
        })
        .collect();
    let count_race = |r: Race| eligible.iter().filter(|&&i| stops[i].driver_race == r).count();
    let infeasible = |message: String| CorpusError::Infeasible {
        message,
        black: count_race(Race::Black),
        white: count_race(Race::White),
        eligible: eligible.len(),
    };

    let mut test: Vec<usize> = Vec::new();
    let mut test_officers: BTreeSet<&str> = BTreeSet::new();
    let mut take = |pool: &mut dyn Iterator<Item = usize>, want: usize, test: &mut Vec<usize>| -> usize {
        let mut got = 0;
        for i in pool {
            if got == want {
                break;
            }
            if stops[i].all_officer_ids.iter().any(|o| test_officers.contains(o.as_str())) {
                continue;
            }
            test_officers.extend(stops[i].all_officer_ids.iter().map(String::as_str));
            test.push(i);
            got += 1;
        }
        got
    };

    if config.race_balance {
        if !config.test_stops.is_multiple_of(2) {
            return Err(infeasible(format!(
                "race balance needs an even number of test stops, got {}",
                config.test_stops
            )));
        }
        let half = config.test_stops / 2;
        // Interleave races so neither claims all low-conflict officers first.
        let mut black = eligible.iter().copied().filter(|&i| stops[i].driver_race == Race::Black).peekable();
        let mut white = eligible.iter().copied().filter(|&i| stops[i].driver_race == Race::White).peekable();
        let (mut nb, mut nw) = (0, 0);
        while (nb < half && black.peek().is_some()) || (nw < half && white.peek().is_some()) {
            if nb < half && black.peek().is_some() {
                nb += take(&mut black.by_ref().take(1), 1, &mut test);
            }
            if nw < half && white.peek().is_some() {
                nw += take(&mut white.by_ref().take(1), 1, &mut test);
            }
        }
        if nb < half || nw < half {
            return Err(infeasible(format!(
                "need {half} officer-disjoint test stops per race, found {nb} black and {nw} white"
            )));
        }
    } else {
        let got = take(&mut eligible.iter().copied(), config.test_stops, &mut test);
        if got < config.test_stops {
            return Err(infeasible(format!(
                "need {} officer-disjoint test stops, found {got}",
                config.test_stops
            )));
        }
    }

    let test_set: HashSet<usize> = test.iter().copied().collect();
    let mut withheld: Vec<usize> = Vec::new();
    let mut rest: Vec<usize> = Vec::new();
    for &i in &order {
        if test_set.contains(&i) {
            continue;
        }
        if stops[i].all_officer_ids.iter().any(|o| test_officers.contains(o.as_str())) {
            withheld.push(i);
        } else {
            rest.push(i);
        }
    }

    if rest.len() < config.validation_stops {
        return Err(infeasible(format!(
            "need {} validation stops, only {} stops remain after test selection",
            config.validation_stops,
            rest.len()
        )));
    }
    let mut validation: Vec<usize> = Vec::new();
    let mut val_primary: BTreeSet<&str> = BTreeSet::new();
    for &i in &rest {
        if validation.len() == config.validation_stops {
            break;
        }
        validation.push(i);
        val_primary.extend(stops[i].primary_officer_ids.iter().map(String::as_str));
    }
    let val_set: HashSet<usize> = validation.iter().copied().collect();
    let mut train: Vec<usize> = Vec::new();
    for &i in &rest {
        if val_set.contains(&i) {
            continue;
        }
        if stops[i].primary_officer_ids.iter().any(|o| val_primary.contains(o.as_str())) {
            withheld.push(i);
        } else {
            train.push(i);
        }
    }

    // Outputs keep the input order of stops.
    let collect = |mut idx: Vec<usize>| {
        idx.sort_unstable();
        Manifest { stops: idx.into_iter().map(|i| stops[i].clone()).collect(), schema_version: SCHEMA_VERSION }
    };
    Ok(Splits {
        train: collect(train),
        validation: collect(validation),
        test: collect(test),
        withheld: collect(withheld),
    })
}
