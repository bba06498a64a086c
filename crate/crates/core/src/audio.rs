//! 16 kHz mono 16-bit PCM WAV input/output and a shared decoded-audio cache.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::segment::Segment;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: expected {expected}, found {found}")]
    Format { path: PathBuf, expected: &'static str, found: String },
    #[error("segment {segment} is outside the audio ({duration_s:.3}s)")]
    OutOfBounds { segment: Segment, duration_s: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Audio {
    pub fn duration_ms(&self) -> u64 {
        self.samples.len() as u64 * 1000 / self.sample_rate as u64
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn check_bounds(&self, segment: Segment) -> Result<(), AudioError> {
        if segment.end_ms() > self.duration_ms() {
            return Err(AudioError::OutOfBounds { segment, duration_s: self.duration() });
        }
        Ok(())
    }

    pub fn slice(&self, segment: Segment) -> Result<&[f32], AudioError> {
        self.check_bounds(segment)?;
        let r = segment.sample_range(self.sample_rate);
        Ok(&self.samples[r.start..r.end.min(self.samples.len())])
    }
}

fn check_spec(path: &Path, spec: hound::WavSpec) -> Result<(), AudioError> {
    let fail = |expected, found: String| AudioError::Format { path: path.to_path_buf(), expected, found };
    if spec.channels != 1 {
        return Err(fail("mono", format!("{} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(fail("16000 Hz", format!("{} Hz", spec.sample_rate)));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(fail("16-bit PCM", format!("{}-bit {:?}", spec.bits_per_sample, spec.sample_format)));
    }
    Ok(())
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Audio, AudioError> {
    let path = path.as_ref();
    let wav = |source| AudioError::Wav { path: path.to_path_buf(), source };
    let reader = hound::WavReader::open(path).map_err(wav)?;
    check_spec(path, reader.spec())?;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(wav)?;
    Ok(Audio { samples, sample_rate: SAMPLE_RATE })
}

/// Duration in milliseconds from the header alone.
pub fn wav_duration_ms(path: impl AsRef<Path>) -> Result<u64, AudioError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|source| AudioError::Wav { path: path.to_path_buf(), source })?;
    check_spec(path, reader.spec())?;
    Ok(reader.duration() as u64 * 1000 / SAMPLE_RATE as u64)
}

pub fn to_pcm16(x: f32) -> i16 {
    (x * 32767.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f32]) -> Result<(), AudioError> {
    let path = path.as_ref();
    let wav = |source| AudioError::Wav { path: path.to_path_buf(), source };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav)?;
    for &s in samples {
        w.write_sample(to_pcm16(s)).map_err(wav)?;
    }
    w.finalize().map_err(wav)
}

/// Decoded audio shared across engines, keyed by resolved path.
#[derive(Debug, Default)]
pub struct AudioCache {
    root: Option<PathBuf>,
    loaded: Mutex<HashMap<PathBuf, Arc<Audio>>>,
}

impl AudioCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Relative manifest paths are resolved against `root`.
    pub fn with_root(root: impl Into<PathBuf>) -> Self {
        Self { root: Some(root.into()), loaded: Mutex::default() }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.root {
            Some(root) if path.is_relative() => root.join(path),
            _ => path.to_path_buf(),
        }
    }

    /// A path with the root prefix removed, so that absolute and
    /// root-relative spellings of the same file compare equal.
    pub fn key(&self, path: &Path) -> PathBuf {
        match &self.root {
            Some(root) => path.strip_prefix(root).unwrap_or(path).to_path_buf(),
            None => path.to_path_buf(),
        }
    }

    pub fn get(&self, path: &Path) -> Result<Arc<Audio>, AudioError> {
        let key = self.resolve(path);
        if let Some(a) = self.loaded.lock().unwrap().get(&key) {
            return Ok(Arc::clone(a));
        }
        let audio = Arc::new(read_wav(&key)?);
        self.loaded.lock().unwrap().insert(key, Arc::clone(&audio));
        Ok(audio)
    }
}
