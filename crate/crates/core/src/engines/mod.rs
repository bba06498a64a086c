//! Interfaces to the learned models the pipeline depends on.
//!
//! Three engine kinds exist: transcribers, forced aligners and frame
//! scorers (VAD or officer scorers working on log-mel chunks). Each kind is
//! a trait; in-process mocks live in [`mock`] and remote models are reached
//! through the line-delimited JSON protocol in [`protocol`] via
//! [`subprocess`].

pub mod mock;
pub mod protocol;
pub mod subprocess;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::audio::{AudioCache, AudioError};
use crate::detect::MelFeatures;
use crate::segment::Segment;
use crate::textnorm::normalize;

pub use mock::{
    DropoutTranscriber, EchoTranscriber, EnergyVad, JitteredTableAligner, TableTranscriber, UniformAligner,
};
pub use subprocess::{SubprocessEngine, SubprocessPool};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordTiming {
    pub word: String,
    pub span: Segment,
}

impl WordTiming {
    pub fn start(&self) -> f64 {
        self.span.start()
    }

    pub fn end(&self) -> f64 {
        self.span.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Transcriber,
    ForcedAligner,
    FrameScorer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    InProcessMock,
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineDescriptor {
    pub name: String,
    pub kind: EngineKind,
    pub transport: Transport,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("engine {0} is unavailable: {1}")]
    Unavailable(String, String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("alignment failed: {0}")]
    AlignmentFailure(String),
    #[error("feature shape mismatch: expected {expected_bins} mel bins x {expected_frames} frames, got {bins} x {frames}")]
    Shape { expected_bins: usize, expected_frames: String, bins: usize, frames: usize },
    #[error("request {id} timed out after {timeout:?}")]
    Timeout { id: u64, timeout: Duration },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend error: {0}")]
    Remote(String),
}

pub trait Transcriber: Send + Sync {
    fn name(&self) -> &str;
    fn transcribe(&self, audio: &Path, segment: Segment) -> Result<String, EngineError>;
}

pub trait ForcedAligner: Send + Sync {
    fn name(&self) -> &str;
    /// One timing per normalized transcript token, inside `segment`.
    fn force_align(&self, audio: &Path, segment: Segment, transcript: &str) -> Result<Vec<WordTiming>, EngineError>;
}

pub trait FrameScorer: Send + Sync {
    fn name(&self) -> &str;
    /// Mel bins and, when fixed, the frame count the scorer accepts.
    fn input_shape(&self) -> (usize, Option<usize>);
    /// Score in `[0, 1]` for one feature matrix.
    fn score_frames(&self, features: &MelFeatures) -> Result<f64, EngineError>;
}

pub fn check_shape(scorer: &dyn FrameScorer, features: &MelFeatures) -> Result<(), EngineError> {
    let (bins, frames) = scorer.input_shape();
    if features.n_mels() != bins || frames.is_some_and(|t| t != features.n_frames()) {
        return Err(EngineError::Shape {
            expected_bins: bins,
            expected_frames: frames.map_or("any".into(), |t| t.to_string()),
            bins: features.n_mels(),
            frames: features.n_frames(),
        });
    }
    Ok(())
}

/// Score through any scorer, enforcing the shape contract and the `[0, 1]`
/// output range.
pub fn score_frames(scorer: &dyn FrameScorer, features: &MelFeatures) -> Result<f64, EngineError> {
    check_shape(scorer, features)?;
    let s = scorer.score_frames(features)?;
    if !(0.0..=1.0).contains(&s) {
        return Err(EngineError::Protocol(format!("{} returned score {s} outside [0, 1]", scorer.name())));
    }
    Ok(s)
}

/// Run a forced aligner and verify its output: one timing per normalized
/// token, sorted, non-overlapping and inside the query segment.
pub fn force_align(
    aligner: &dyn ForcedAligner,
    audio: &Path,
    segment: Segment,
    transcript: &str,
) -> Result<Vec<WordTiming>, EngineError> {
    let tokens = normalize(transcript);
    if tokens.is_empty() {
        return Err(EngineError::Precondition("empty transcript".into()));
    }
    let words = aligner.force_align(audio, segment, transcript)?;
    if words.len() != tokens.len() {
        return Err(EngineError::AlignmentFailure(format!(
            "{} returned {} timings for {} tokens",
            aligner.name(),
            words.len(),
            tokens.len()
        )));
    }
    let mut prev_end = segment.start_ms();
    for w in &words {
        if w.span.start_ms() < prev_end || !segment.contains(&w.span) {
            return Err(EngineError::AlignmentFailure(format!(
                "{} returned word {:?} at {} outside {segment} or overlapping its predecessor",
                aligner.name(),
                w.word,
                w.span
            )));
        }
        prev_end = w.span.end_ms();
    }
    Ok(words)
}

/// How to build one engine, as written in the pipeline config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSpec {
    pub name: String,
    pub kind: EngineKind,
    pub transport: Transport,
    /// Mock implementation: `echo`, `table`, `dropout`, `uniform`,
    /// `jittered_table` or `energy_vad`.
    #[serde(default)]
    pub mock: Option<String>,
    /// Table file for `table` and `jittered_table` mocks.
    #[serde(default)]
    pub table: Option<PathBuf>,
    /// Engine wrapped by the `dropout` mock.
    #[serde(default)]
    pub inner: Option<String>,
    #[serde(default)]
    pub dropout: Option<f64>,
    #[serde(default)]
    pub jitter_s: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Program and arguments for subprocess engines.
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default)]
    pub timeout_s: Option<f64>,
    #[serde(default)]
    pub pool: Option<usize>,
}

impl EngineSpec {
    pub fn descriptor(&self) -> EngineDescriptor {
        EngineDescriptor { name: self.name.clone(), kind: self.kind, transport: self.transport }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("duplicate engine name {0}")]
    Duplicate(String),
    #[error("unknown engine {0}")]
    Unknown(String),
    #[error("engine {name} is a {actual:?}, expected {expected:?}")]
    WrongKind { name: String, expected: EngineKind, actual: EngineKind },
    #[error("engine {name}: {message}")]
    Invalid { name: String, message: String },
    #[error("engine {name}: {source}")]
    Spawn {
        name: String,
        #[source]
        source: EngineError,
    },
}

#[derive(Default, Clone)]
pub struct EngineRegistry {
    descriptors: BTreeMap<String, EngineDescriptor>,
    transcribers: BTreeMap<String, Arc<dyn Transcriber>>,
    aligners: BTreeMap<String, Arc<dyn ForcedAligner>>,
    scorers: BTreeMap<String, Arc<dyn FrameScorer>>,
}

impl std::fmt::Debug for EngineRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EngineRegistry").field("engines", &self.descriptors.keys()).finish()
    }
}

impl EngineRegistry {
    /// Build every engine in `specs`. Relative table paths resolve against
    /// `base_dir`; `pool_size` bounds the handle pool of subprocess engines
    /// that do not set their own.
    pub fn build(
        specs: &[EngineSpec],
        audio: Arc<AudioCache>,
        base_dir: &Path,
        pool_size: usize,
    ) -> Result<Self, RegistryError> {
        let mut reg = EngineRegistry::default();
        // Dropout mocks wrap other transcribers, so build those last.
        let (wrappers, plain): (Vec<_>, Vec<_>) = specs.iter().partition(|s| s.mock.as_deref() == Some("dropout"));
        for spec in plain.into_iter().chain(wrappers) {
            if reg.descriptors.contains_key(&spec.name) {
                return Err(RegistryError::Duplicate(spec.name.clone()));
            }
            let invalid = |message: &str| RegistryError::Invalid { name: spec.name.clone(), message: message.into() };
            match spec.transport {
                Transport::Subprocess => {
                    if spec.command.is_empty() {
                        return Err(invalid("subprocess engine needs a command"));
                    }
                    let timeout = Duration::from_secs_f64(spec.timeout_s.unwrap_or(subprocess::DEFAULT_TIMEOUT_S));
                    let pool = SubprocessPool::spawn(
                        &spec.name,
                        spec.kind,
                        &spec.command,
                        timeout,
                        spec.pool.unwrap_or(pool_size).max(1),
                        Arc::clone(&audio),
                    )
                        .map_err(|source| RegistryError::Spawn { name: spec.name.clone(), source })?;
                    let pool = Arc::new(pool);
                    match spec.kind {
                        EngineKind::Transcriber => reg.add_transcriber(spec.descriptor(), pool),
                        EngineKind::ForcedAligner => reg.add_aligner(spec.descriptor(), pool),
                        EngineKind::FrameScorer => reg.add_scorer(spec.descriptor(), pool),
                    }
                }
                Transport::InProcessMock => {
                    let mock = spec.mock.as_deref().ok_or_else(|| invalid("in-process engine needs a `mock` kind"))?;
                    let table = || -> Result<PathBuf, RegistryError> {
                        let t = spec.table.as_ref().ok_or_else(|| invalid("mock needs a `table` file"))?;
                        Ok(if t.is_relative() { base_dir.join(t) } else { t.clone() })
                    };
                    let load_err = |e: std::io::Error| invalid(&e.to_string());
                    match (spec.kind, mock) {
                        (EngineKind::Transcriber, "echo") => {
                            reg.add_transcriber(spec.descriptor(), Arc::new(EchoTranscriber::new(&spec.name, Arc::clone(&audio))))
                        }
                        (EngineKind::Transcriber, "table") => {
                            let t = TableTranscriber::from_file(&spec.name, &table()?, Arc::clone(&audio)).map_err(load_err)?;
                            reg.add_transcriber(spec.descriptor(), Arc::new(t))
                        }
                        (EngineKind::Transcriber, "dropout") => {
                            let inner_name = spec.inner.as_deref().ok_or_else(|| invalid("dropout mock needs `inner`"))?;
                            let inner = reg.transcriber(inner_name)?;
                            let rate = spec.dropout.unwrap_or(0.0);
                            if !(0.0..=1.0).contains(&rate) {
                                return Err(invalid("dropout rate must be in [0, 1]"));
                            }
                            let t = DropoutTranscriber::new(&spec.name, inner, rate, spec.seed.unwrap_or(0))
                                .with_audio(Arc::clone(&audio));
                            reg.add_transcriber(spec.descriptor(), Arc::new(t))
                        }
                        (EngineKind::ForcedAligner, "uniform") => {
                            reg.add_aligner(spec.descriptor(), Arc::new(UniformAligner::new(&spec.name)))
                        }
                        (EngineKind::ForcedAligner, "jittered_table") => {
                            let a = JitteredTableAligner::from_file(
                                &spec.name,
                                &table()?,
                                spec.jitter_s.unwrap_or(0.0),
                                spec.seed.unwrap_or(0),
                            )
                            .map_err(load_err)?
                            .with_audio(Arc::clone(&audio));
                            reg.add_aligner(spec.descriptor(), Arc::new(a))
                        }
                        (EngineKind::FrameScorer, "energy_vad") => {
                            reg.add_scorer(spec.descriptor(), Arc::new(EnergyVad::new(&spec.name)))
                        }
                        (kind, other) => return Err(invalid(&format!("no {kind:?} mock named {other:?}"))),
                    }
                }
            }
        }
        Ok(reg)
    }

    pub fn add_transcriber(&mut self, d: EngineDescriptor, e: Arc<dyn Transcriber>) {
        self.transcribers.insert(d.name.clone(), e);
        self.descriptors.insert(d.name.clone(), d);
    }

    pub fn add_aligner(&mut self, d: EngineDescriptor, e: Arc<dyn ForcedAligner>) {
        self.aligners.insert(d.name.clone(), e);
        self.descriptors.insert(d.name.clone(), d);
    }

    pub fn add_scorer(&mut self, d: EngineDescriptor, e: Arc<dyn FrameScorer>) {
        self.scorers.insert(d.name.clone(), e);
        self.descriptors.insert(d.name.clone(), d);
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &EngineDescriptor> {
        self.descriptors.values()
    }

    fn lookup<T: ?Sized>(
        &self,
        map: &BTreeMap<String, Arc<T>>,
        name: &str,
        expected: EngineKind,
    ) -> Result<Arc<T>, RegistryError> {
        match map.get(name) {
            Some(e) => Ok(Arc::clone(e)),
            None => match self.descriptors.get(name) {
                Some(d) => Err(RegistryError::WrongKind { name: name.into(), expected, actual: d.kind }),
                None => Err(RegistryError::Unknown(name.into())),
            },
        }
    }

    pub fn transcriber(&self, name: &str) -> Result<Arc<dyn Transcriber>, RegistryError> {
        self.lookup(&self.transcribers, name, EngineKind::Transcriber)
    }

    pub fn aligner(&self, name: &str) -> Result<Arc<dyn ForcedAligner>, RegistryError> {
        self.lookup(&self.aligners, name, EngineKind::ForcedAligner)
    }

    pub fn scorer(&self, name: &str) -> Result<Arc<dyn FrameScorer>, RegistryError> {
        self.lookup(&self.scorers, name, EngineKind::FrameScorer)
    }
}

/// FNV-1a over a sequence of byte strings; used to derive per-call seeds
/// that do not depend on the process or platform.
pub(crate) fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for &b in p.iter().chain(&[0xff]) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}
