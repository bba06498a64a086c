//! Synthetic traffic-stop recordings with exact ground truth.
//!
//! Utterances are pseudo-speech (see [`crate::pseudo`]) laid out on a
//! timeline, mixed at per-speaker gains over white noise. The primary
//! officer is always rendered at gain 1.0. Raw second marks are the floor of
//! the true start and the ceiling of the true end.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioError, SAMPLE_RATE};
use crate::corpus::{stop_to_json_line, Gender, Manifest, Race, SpeakerRole, StopRecord, Utterance};
use crate::engines::mock::WordsLine;
use crate::engines::protocol::WireWord;
use crate::engines::WordTiming;
use crate::pseudo::{self, LEXICON, WORD_GAP_MS, WORD_MS};
use crate::segment::Segment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub role: SpeakerRole,
    pub gain: f32,
    pub utterances: usize,
    /// Lexicon words this speaker draws from; empty means the whole lexicon.
    #[serde(default)]
    pub vocabulary: Vec<String>,
    /// Untranscribed speakers are audible but absent from the manifest.
    #[serde(default = "yes")]
    pub transcribed: bool,
    #[serde(default)]
    pub officer_id: Option<String>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TurnOrder {
    /// Speakers take turns round-robin while they have utterances left.
    #[default]
    Alternate,
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub stop_id: String,
    pub duration_s: f64,
    pub speakers: Vec<SpeakerSpec>,
    pub noise_floor: f32,
    pub overlap_probability: f64,
    pub seed: u64,
    pub turn_order: TurnOrder,
    /// Silence between consecutive utterances, drawn uniformly.
    pub gap_range_s: (f64, f64),
    pub words_per_utterance: (usize, usize),
    pub leading_silence_s: f64,
    pub driver_race: Race,
    pub driver_gender: Gender,
    pub officer_race: Race,
    pub officer_gender: Gender,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            stop_id: "stop".into(),
            duration_s: 30.0,
            speakers: vec![
                SpeakerSpec {
                    role: SpeakerRole::PrimaryOfficer,
                    gain: 1.0,
                    utterances: 5,
                    vocabulary: Vec::new(),
                    transcribed: true,
                    officer_id: None,
                },
                SpeakerSpec {
                    role: SpeakerRole::CommunityMember,
                    gain: 0.2,
                    utterances: 5,
                    vocabulary: Vec::new(),
                    transcribed: true,
                    officer_id: None,
                },
            ],
            noise_floor: 0.01,
            overlap_probability: 0.0,
            seed: 0,
            turn_order: TurnOrder::Alternate,
            gap_range_s: (0.4, 1.0),
            words_per_utterance: (3, 6),
            leading_silence_s: 0.5,
            driver_race: Race::White,
            driver_gender: Gender::Male,
            officer_race: Race::White,
            officer_gender: Gender::Male,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Spec(String),
    #[error("utterances need {needed_s:.3}s but the scene lasts {duration_s:.3}s")]
    DoesNotFit { needed_s: f64, duration_s: f64 },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.stop_id.is_empty() {
            return bad("empty stop id".into());
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration {}", self.duration_s));
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor.is_finite()) {
            return bad(format!("noise floor {}", self.noise_floor));
        }
        if !(0.0..=1.0).contains(&self.overlap_probability) {
            return bad(format!("overlap probability {}", self.overlap_probability));
        }
        let (g0, g1) = self.gap_range_s;
        if !(g0 >= 0.0 && g1 >= g0 && g1.is_finite()) {
            return bad(format!("gap range {g0}..{g1}"));
        }
        let (w0, w1) = self.words_per_utterance;
        if !(w0 >= 1 && w1 >= w0) {
            return bad(format!("words per utterance {w0}..{w1}"));
        }
        if !(self.leading_silence_s >= 0.0 && self.leading_silence_s.is_finite()) {
            return bad(format!("leading silence {}", self.leading_silence_s));
        }
        for (i, s) in self.speakers.iter().enumerate() {
            if !(s.gain > 0.0 && s.gain <= 1.0) {
                return bad(format!("speaker {i} gain {}", s.gain));
            }
            if let Some(w) = s.vocabulary.iter().find(|w| pseudo::word_index(w).is_none()) {
                return bad(format!("speaker {i} word {w:?} is not in the lexicon"));
            }
        }
        Ok(())
    }

    fn officer_id(&self, k: usize) -> String {
        self.speakers[k].officer_id.clone().unwrap_or_else(|| format!("{}-officer{k}", self.stop_id))
    }
}

/// One placed utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedUtterance {
    pub speaker: usize,
    pub words: Vec<WordTiming>,
    pub segment: Segment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStop {
    pub samples: Vec<f32>,
    pub truth: StopRecord,
    pub placed: Vec<PlacedUtterance>,
}

impl GeneratedStop {
    /// Word timings of every rendered word, transcribed or not.
    pub fn words(&self) -> Vec<WordTiming> {
        self.placed.iter().flat_map(|p| p.words.iter().cloned()).collect()
    }
}

fn turn_sequence(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut left: Vec<usize> = spec.speakers.iter().map(|s| s.utterances).collect();
    let mut seq = Vec::with_capacity(left.iter().sum());
    match spec.turn_order {
        TurnOrder::Alternate => {
            while left.iter().any(|&n| n > 0) {
                for (k, n) in left.iter_mut().enumerate() {
                    if *n > 0 {
                        *n -= 1;
                        seq.push(k);
                    }
                }
            }
        }
        TurnOrder::Shuffled => {
            for (k, &n) in left.iter().enumerate() {
                seq.extend(std::iter::repeat_n(k, n));
            }
            seq.shuffle(rng);
        }
    }
    seq
}

fn to_ms(s: f64) -> u64 {
    (s * 1000.0).round() as u64
}

/// Lay out and render one stop. `audio_path` is stored in the record as is.
pub fn generate_stop(spec: &SceneSpec, audio_path: &Path) -> Result<GeneratedStop, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let order = turn_sequence(spec, &mut rng);
    let duration_ms = to_ms(spec.duration_s);

    let mut placed: Vec<PlacedUtterance> = Vec::with_capacity(order.len());
    let mut cursor = to_ms(spec.leading_silence_s);
    for &k in &order {
        let s = &spec.speakers[k];
        let vocab: Vec<&str> = if s.vocabulary.is_empty() {
            LEXICON.to_vec()
        } else {
            s.vocabulary.iter().map(String::as_str).collect()
        };
        let n = rng.gen_range(spec.words_per_utterance.0..=spec.words_per_utterance.1);
        let text: Vec<&str> = (0..n).map(|_| *vocab.choose(&mut rng).expect("non-empty")).collect();
        let overlap = rng.gen_bool(spec.overlap_probability);
        let gap = to_ms(rng.gen_range(spec.gap_range_s.0..=spec.gap_range_s.1));
        let start = match placed.last() {
            Some(prev) if overlap && prev.speaker != k => {
                prev.segment.start_ms() + rng.gen_range(0..prev.segment.duration_ms())
            }
            Some(_) => cursor + gap,
            None => cursor,
        };
        let len = pseudo::utterance_ms(n);
        let segment = Segment::from_ms(start, start + len).expect("positive length");
        let words = text
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let ws = start + i as u64 * (WORD_MS + WORD_GAP_MS);
                WordTiming { word: w.to_string(), span: Segment::from_ms(ws, ws + WORD_MS).expect("positive length") }
            })
            .collect();
        cursor = cursor.max(segment.end_ms());
        placed.push(PlacedUtterance { speaker: k, words, segment });
    }
    if cursor > duration_ms {
        return Err(SynthError::DoesNotFit { needed_s: cursor as f64 / 1000.0, duration_s: spec.duration_s });
    }

    let n_samples = (duration_ms * SAMPLE_RATE as u64 / 1000) as usize;
    let mut samples = vec![0.0f32; n_samples];
    for p in &placed {
        let s = &spec.speakers[p.speaker];
        let gain = if s.role == SpeakerRole::PrimaryOfficer { 1.0 } else { s.gain };
        for w in &p.words {
            let at = w.span.sample_range(SAMPLE_RATE).start;
            for (i, v) in pseudo::render_word(&w.word, gain).into_iter().enumerate() {
                samples[at + i] += v;
            }
        }
    }
    if spec.noise_floor > 0.0 {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        noise_rng.set_stream(1);
        let dist = Normal::new(0.0, spec.noise_floor).expect("finite noise floor");
        for v in &mut samples {
            *v += dist.sample(&mut noise_rng);
        }
    }

    let mut primary = BTreeSet::new();
    let mut officers = BTreeSet::new();
    for (k, s) in spec.speakers.iter().enumerate() {
        if s.role.is_officer() {
            officers.insert(spec.officer_id(k));
            if s.role == SpeakerRole::PrimaryOfficer {
                primary.insert(spec.officer_id(k));
            }
        }
    }
    let utterances = placed
        .iter()
        .filter(|p| spec.speakers[p.speaker].transcribed)
        .enumerate()
        .map(|(i, p)| Utterance {
            id: format!("{}-u{i:03}", spec.stop_id),
            speaker_role: spec.speakers[p.speaker].role,
            raw_text: p.words.iter().map(|w| w.word.as_str()).collect::<Vec<_>>().join(" "),
            segment: Some(p.segment),
            raw_start_s: Some((p.segment.start_ms() / 1000) as u32),
            raw_end_s: Some(p.segment.end_ms().div_ceil(1000) as u32),
        })
        .collect();
    let mut truth = StopRecord {
        stop_id: spec.stop_id.clone(),
        audio: audio_path.to_path_buf(),
        primary_officer_ids: primary,
        all_officer_ids: officers,
        driver_race: spec.driver_race,
        driver_gender: spec.driver_gender,
        officer_race: spec.officer_race,
        officer_gender: spec.officer_gender,
        utterances,
    };
    truth.sort_utterances();
    Ok(GeneratedStop { samples, truth, placed })
}

/// The same stop with every segment removed, as a pipeline input.
pub fn strip_segments(stop: &StopRecord) -> StopRecord {
    let mut s = stop.clone();
    for u in &mut s.utterances {
        u.segment = None;
    }
    s
}

/// Settings for a many-stop corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub stops: usize,
    pub seed: u64,
    /// Distinct primary officers; stops are assigned to them round-robin.
    pub officers: usize,
    pub secondary_officer_probability: f64,
    pub secondary_gain: f32,
    pub driver_gain: f32,
    pub utterances_per_speaker: (usize, usize),
    pub words_per_utterance: (usize, usize),
    pub gap_range_s: (f64, f64),
    pub noise_floor: f32,
    pub overlap_probability: f64,
    pub leading_silence_s: f64,
    pub trailing_silence_s: f64,
    pub turn_order: TurnOrder,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            stops: 40,
            seed: 0,
            officers: 40,
            secondary_officer_probability: 0.0,
            secondary_gain: 0.3,
            driver_gain: 0.2,
            utterances_per_speaker: (3, 6),
            words_per_utterance: (3, 6),
            gap_range_s: (0.4, 1.0),
            noise_floor: 0.01,
            overlap_probability: 0.0,
            leading_silence_s: 0.5,
            trailing_silence_s: 0.5,
            turn_order: TurnOrder::Alternate,
        }
    }
}

fn officer_demographics(officer: usize, seed: u64) -> (Race, Gender) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0ff1_ce00_0000 ^ officer as u64);
    let race = if rng.gen_bool(0.5) { Race::Black } else { Race::White };
    let gender = if rng.gen_bool(0.3) { Gender::Female } else { Gender::Male };
    (race, gender)
}

/// Scene specs for every stop of a corpus. Driver race alternates so test
/// splits can be race balanced; officer demographics are fixed per officer.
pub fn corpus_scenes(spec: &CorpusSpec) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let officers = spec.officers.max(1);
    (0..spec.stops)
        .map(|i| {
            let primary = i % officers;
            let (officer_race, officer_gender) = officer_demographics(primary, spec.seed);
            let n = |rng: &mut ChaCha8Rng| rng.gen_range(spec.utterances_per_speaker.0..=spec.utterances_per_speaker.1);
            let n_officer = n(&mut rng);
            let mut speakers = vec![SpeakerSpec {
                role: SpeakerRole::PrimaryOfficer,
                gain: 1.0,
                utterances: n_officer,
                vocabulary: Vec::new(),
                transcribed: true,
                officer_id: Some(format!("officer{primary:03}")),
            }];
            if spec.turn_order == TurnOrder::Alternate {
                speakers.push(SpeakerSpec {
                    role: SpeakerRole::CommunityMember,
                    gain: spec.driver_gain,
                    utterances: n_officer,
                    vocabulary: Vec::new(),
                    transcribed: true,
                    officer_id: None,
                });
            } else {
                let n_driver = n(&mut rng);
                speakers.push(SpeakerSpec {
                    role: SpeakerRole::CommunityMember,
                    gain: spec.driver_gain,
                    utterances: n_driver,
                    vocabulary: Vec::new(),
                    transcribed: true,
                    officer_id: None,
                });
            }
            if rng.gen_bool(spec.secondary_officer_probability) {
                let secondary = (primary + 1 + rng.gen_range(0..officers)) % officers;
                speakers.push(SpeakerSpec {
                    role: SpeakerRole::SecondaryOfficer,
                    gain: spec.secondary_gain,
                    utterances: n(&mut rng),
                    vocabulary: Vec::new(),
                    transcribed: true,
                    officer_id: Some(format!("officer{secondary:03}")),
                });
            }
            let total: usize = speakers.iter().map(|s| s.utterances).sum();
            let longest = pseudo::utterance_ms(spec.words_per_utterance.1) as f64 / 1000.0 + spec.gap_range_s.1;
            let duration_s = spec.leading_silence_s + total as f64 * longest + spec.trailing_silence_s;
            SceneSpec {
                stop_id: format!("stop{i:04}"),
                duration_s: (duration_s * 10.0).ceil() / 10.0,
                speakers,
                noise_floor: spec.noise_floor,
                overlap_probability: spec.overlap_probability,
                seed: rng.gen(),
                turn_order: spec.turn_order,
                gap_range_s: spec.gap_range_s,
                words_per_utterance: spec.words_per_utterance,
                leading_silence_s: spec.leading_silence_s,
                driver_race: if i % 2 == 0 { Race::Black } else { Race::White },
                driver_gender: if rng.gen_bool(0.5) { Gender::Female } else { Gender::Male },
                officer_race,
                officer_gender,
            }
        })
        .collect()
}

/// Paths written by [`write_corpus`], relative to its output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFiles {
    pub truth: PathBuf,
    pub manifest: PathBuf,
    pub words: PathBuf,
    pub audio_dir: PathBuf,
}

impl Default for CorpusFiles {
    fn default() -> Self {
        Self {
            truth: "truth.jsonl".into(),
            manifest: "manifest.jsonl".into(),
            words: "words.jsonl".into(),
            audio_dir: "audio".into(),
        }
    }
}

pub fn words_line(audio_path: &Path, words: &[WordTiming]) -> String {
    let line = WordsLine { audio_path: audio_path.to_path_buf(), words: words.iter().map(WireWord::from).collect() };
    serde_json::to_string(&line).expect("words line serializes")
}

/// Generate every stop and write WAVs, the ground-truth manifest, the
/// segment-free pipeline manifest and reference word timings under `dir`.
/// Audio paths in the manifests are relative to `dir`.
pub fn write_corpus(scenes: &[SceneSpec], dir: &Path) -> Result<(Manifest, CorpusFiles), SynthError> {
    let files = CorpusFiles::default();
    fs::create_dir_all(dir.join(&files.audio_dir))?;
    let mut truth = fs::File::create(dir.join(&files.truth))?;
    let mut pipeline = fs::File::create(dir.join(&files.manifest))?;
    let mut words = fs::File::create(dir.join(&files.words))?;
    let mut stops = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let rel = files.audio_dir.join(format!("{}.wav", scene.stop_id));
        let g = generate_stop(scene, &rel)?;
        write_wav(dir.join(&rel), &g.samples)?;
        writeln!(truth, "{}", stop_to_json_line(&g.truth))?;
        writeln!(pipeline, "{}", stop_to_json_line(&strip_segments(&g.truth)))?;
        writeln!(words, "{}", words_line(&rel, &g.words()))?;
        stops.push(g.truth);
    }
    let manifest = Manifest::new(stops).map_err(|e| SynthError::Spec(e.to_string()))?;
    Ok((manifest, files))
}
