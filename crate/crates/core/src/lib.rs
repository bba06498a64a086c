//! Corpus preparation, near-field speaker detection and ASR evaluation for
//! noisy multi-speaker recordings.

pub mod align;
pub mod audio;
pub mod corpus;
pub mod detect;
pub mod engines;
pub mod eval;
pub mod filter;
pub mod metrics;
pub mod pseudo;
pub mod segment;
pub mod synthgen;
pub mod textnorm;
pub mod tune;

pub use corpus::{Gender, Manifest, Race, SpeakerRole, StopRecord, Utterance};
pub use engines::{EngineError, ForcedAligner, FrameScorer, Transcriber, WordTiming};
pub use metrics::{EditCounts, WerScore};
pub use segment::Segment;
