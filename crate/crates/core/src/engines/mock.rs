//! Deterministic in-process engines.
//!
//! These stand in for real models so the whole pipeline runs offline:
//! an echo transcriber that decodes pseudo-speech, a lookup-table
//! transcriber, a seeded word-dropout wrapper, a uniform aligner, an aligner
//! backed by a table of reference word timings with seeded jitter, and an
//! energy VAD.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::protocol::WireWord;
use super::{stable_hash, EngineError, ForcedAligner, FrameScorer, Transcriber, WordTiming};
use crate::audio::AudioCache;
use crate::detect::mel::{LOG_FLOOR, N_MELS};
use crate::detect::MelFeatures;
use crate::pseudo;
use crate::segment::Segment;
use crate::textnorm::normalize;

fn call_seed(seed: u64, audio: &Path, segment: Segment, extra: &str) -> u64 {
    stable_hash(&[
        &seed.to_le_bytes(),
        audio.to_string_lossy().as_bytes(),
        &segment.start_ms().to_le_bytes(),
        &segment.end_ms().to_le_bytes(),
        extra.as_bytes(),
    ])
}

/// Transcribes synthetic pseudo-speech exactly.
pub struct EchoTranscriber {
    name: String,
    audio: Arc<AudioCache>,
}

impl EchoTranscriber {
    pub fn new(name: &str, audio: Arc<AudioCache>) -> Self {
        Self { name: name.into(), audio }
    }
}

impl Transcriber for EchoTranscriber {
    fn name(&self) -> &str {
        &self.name
    }

    fn transcribe(&self, audio: &Path, segment: Segment) -> Result<String, EngineError> {
        let a = self.audio.get(audio)?;
        Ok(pseudo::decode(a.slice(segment)?).join(" "))
    }
}

#[derive(Deserialize)]
struct TableLine {
    audio_path: PathBuf,
    start_s: f64,
    end_s: f64,
    text: String,
}

/// Returns the text stored for an exact `(audio, segment)` key and the
/// empty string for anything else.
pub struct TableTranscriber {
    name: String,
    entries: HashMap<(PathBuf, Segment), String>,
    audio: Arc<AudioCache>,
}

impl TableTranscriber {
    pub fn new(name: &str, entries: HashMap<(PathBuf, Segment), String>, audio: Arc<AudioCache>) -> Self {
        Self { name: name.into(), entries, audio }
    }

    /// Load JSONL lines of `{"audio_path", "start_s", "end_s", "text"}`.
    pub fn from_file(name: &str, path: &Path, audio: Arc<AudioCache>) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TableLine = serde_json::from_str(&line).map_err(std::io::Error::other)?;
            let seg = Segment::from_secs(t.start_s, t.end_s).map_err(std::io::Error::other)?;
            entries.insert((audio.key(&t.audio_path), seg), t.text);
        }
        Ok(Self::new(name, entries, audio))
    }
}

impl Transcriber for TableTranscriber {
    fn name(&self) -> &str {
        &self.name
    }

    fn transcribe(&self, audio: &Path, segment: Segment) -> Result<String, EngineError> {
        let duration_ms = crate::audio::wav_duration_ms(self.audio.resolve(audio))?;
        if segment.end_ms() > duration_ms {
            return Err(crate::audio::AudioError::OutOfBounds { segment, duration_s: duration_ms as f64 / 1000.0 }.into());
        }
        Ok(self.entries.get(&(self.audio.key(audio), segment)).cloned().unwrap_or_default())
    }
}

/// Drops each word of the wrapped transcriber's output with a fixed
/// probability. The draw is seeded by `(seed, audio, segment)`, so the same
/// query always degrades the same way.
pub struct DropoutTranscriber {
    name: String,
    inner: Arc<dyn Transcriber>,
    rate: f64,
    seed: u64,
    audio: Option<Arc<AudioCache>>,
}

impl DropoutTranscriber {
    pub fn new(name: &str, inner: Arc<dyn Transcriber>, rate: f64, seed: u64) -> Self {
        Self { name: name.into(), inner, rate, seed, audio: None }
    }

    /// Seed draws from paths relative to the cache root.
    pub fn with_audio(mut self, audio: Arc<AudioCache>) -> Self {
        self.audio = Some(audio);
        self
    }
}

impl Transcriber for DropoutTranscriber {
    fn name(&self) -> &str {
        &self.name
    }

    fn transcribe(&self, audio: &Path, segment: Segment) -> Result<String, EngineError> {
        let text = self.inner.transcribe(audio, segment)?;
        let key = self.audio.as_ref().map_or_else(|| audio.to_path_buf(), |c| c.key(audio));
        let mut rng = ChaCha8Rng::seed_from_u64(call_seed(self.seed, &key, segment, ""));
        Ok(text
            .split_whitespace()
            .filter(|_| rng.gen::<f64>() >= self.rate)
            .collect::<Vec<_>>()
            .join(" "))
    }
}

/// Spreads the transcript's tokens evenly over the query segment.
pub struct UniformAligner {
    name: String,
}

impl UniformAligner {
    pub fn new(name: &str) -> Self {
        Self { name: name.into() }
    }
}

pub fn uniform_timings(segment: Segment, tokens: &[String]) -> Result<Vec<WordTiming>, EngineError> {
    let n = tokens.len() as u64;
    if n == 0 {
        return Err(EngineError::Precondition("empty transcript".into()));
    }
    let dur = segment.duration_ms();
    if dur < n {
        return Err(EngineError::AlignmentFailure(format!("{n} words do not fit in {dur} ms")));
    }
    let at = |k: u64| segment.start_ms() + (k * dur + n / 2) / n;
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(k, w)| WordTiming {
            word: w.clone(),
            span: Segment::from_ms(at(k as u64), at(k as u64 + 1)).expect("positive width"),
        })
        .collect())
}

impl ForcedAligner for UniformAligner {
    fn name(&self) -> &str {
        &self.name
    }

    fn force_align(&self, _audio: &Path, segment: Segment, transcript: &str) -> Result<Vec<WordTiming>, EngineError> {
        uniform_timings(segment, normalize(transcript).tokens())
    }
}

/// One line of a reference word-timing file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordsLine {
    pub audio_path: PathBuf,
    pub words: Vec<WireWord>,
}

/// Aligner backed by reference word timings (for example those emitted by
/// the synthetic-corpus generator).
///
/// For a query it takes the reference words overlapping the segment, finds
/// the transcript as a contiguous run among them, perturbs each boundary by
/// a seeded uniform offset of at most `jitter_s`, and clips the result back
/// into the segment. If the transcript is not found the alignment fails.
pub struct JitteredTableAligner {
    name: String,
    words: HashMap<PathBuf, Vec<WordTiming>>,
    jitter_ms: u64,
    seed: u64,
    audio: Option<Arc<AudioCache>>,
}

impl JitteredTableAligner {
    pub fn new(name: &str, words: HashMap<PathBuf, Vec<WordTiming>>, jitter_s: f64, seed: u64) -> Self {
        let mut words = words;
        for w in words.values_mut() {
            w.sort_by_key(|t| (t.span.start_ms(), t.span.end_ms()));
        }
        Self { name: name.into(), words, jitter_ms: (jitter_s.max(0.0) * 1000.0).round() as u64, seed, audio: None }
    }

    /// Match table paths and seed jitter relative to the cache root, so a
    /// query by absolute path behaves like one by manifest path.
    pub fn with_audio(mut self, audio: Arc<AudioCache>) -> Self {
        self.words = std::mem::take(&mut self.words).into_iter().map(|(k, v)| (audio.key(&k), v)).collect();
        self.audio = Some(audio);
        self
    }

    /// Load JSONL lines of `{"audio_path", "words": [{"w", "s", "e"}]}`.
    pub fn from_file(name: &str, path: &Path, jitter_s: f64, seed: u64) -> std::io::Result<Self> {
        let mut words: HashMap<PathBuf, Vec<WordTiming>> = HashMap::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: WordsLine = serde_json::from_str(&line).map_err(std::io::Error::other)?;
            let entry = words.entry(l.audio_path).or_default();
            for w in l.words {
                entry.push(w.to_timing().map_err(std::io::Error::other)?);
            }
        }
        Ok(Self::new(name, words, jitter_s, seed))
    }
}

impl ForcedAligner for JitteredTableAligner {
    fn name(&self) -> &str {
        &self.name
    }

    fn force_align(&self, audio: &Path, segment: Segment, transcript: &str) -> Result<Vec<WordTiming>, EngineError> {
        let tokens = normalize(transcript).into_tokens();
        if tokens.is_empty() {
            return Err(EngineError::Precondition("empty transcript".into()));
        }
        let key = self.audio.as_ref().map_or_else(|| audio.to_path_buf(), |c| c.key(audio));
        let all = self
            .words
            .get(&key)
            .ok_or_else(|| EngineError::AlignmentFailure(format!("no reference timings for {}", audio.display())))?;
        let inside: Vec<&WordTiming> = all.iter().filter(|w| w.span.overlaps(&segment)).collect();
        let n = tokens.len();
        let found = (0..inside.len().saturating_sub(n - 1))
            .find(|&k| inside[k..k + n].iter().zip(&tokens).all(|(w, t)| &w.word == t))
            .ok_or_else(|| EngineError::AlignmentFailure("transcript not found in segment".into()))?;

        let mut rng = ChaCha8Rng::seed_from_u64(call_seed(self.seed, &key, segment, transcript));
        let j = self.jitter_ms as i64;
        let mut jit = |v: u64| -> i64 {
            let d = if j > 0 { rng.gen_range(-j..=j) } else { 0 };
            v as i64 + d
        };
        let (lo, hi) = (segment.start_ms() as i64, segment.end_ms() as i64);
        let mut out = Vec::with_capacity(n);
        let mut prev_end = lo;
        for (k, w) in inside[found..found + n].iter().enumerate() {
            let remaining = (n - k - 1) as i64;
            let s = jit(w.span.start_ms()).clamp(prev_end, hi - 1 - remaining);
            let e = jit(w.span.end_ms()).clamp(s + 1, hi - remaining);
            if s < lo || e > hi || e <= s {
                return Err(EngineError::AlignmentFailure("words do not fit in segment".into()));
            }
            out.push(WordTiming { word: tokens[k].clone(), span: Segment::from_ms(s as u64, e as u64).expect("e > s") });
            prev_end = e;
        }
        Ok(out)
    }
}

/// Energy voice-activity scorer over log-mel features.
///
/// Per frame the mel energies are summed and logged; the mean of those
/// log-energies goes through a logistic centred at [`EnergyVad::CENTER`].
/// Digital silence (every value on the log floor) scores exactly 0.
pub struct EnergyVad {
    name: String,
}

impl EnergyVad {
    /// Mean frame log-energy that scores 0.5.
    pub const CENTER: f64 = 3.0;
    /// Logistic slope denominator, in natural-log energy units.
    pub const SCALE: f64 = 0.5;

    pub fn new(name: &str) -> Self {
        Self { name: name.into() }
    }

    pub fn mean_log_energy(features: &MelFeatures) -> f64 {
        let t = features.n_frames().max(1) as f64;
        features.frames().map(|f| f.iter().map(|v| v.exp()).sum::<f64>().ln()).sum::<f64>() / t
    }
}

impl FrameScorer for EnergyVad {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_shape(&self) -> (usize, Option<usize>) {
        (N_MELS, None)
    }

    fn score_frames(&self, features: &MelFeatures) -> Result<f64, EngineError> {
        let floor = LOG_FLOOR.ln();
        if features.n_frames() == 0 || features.frames().flatten().all(|&v| v <= floor) {
            return Ok(0.0);
        }
        let l = Self::mean_log_energy(features);
        Ok(1.0 / (1.0 + (-(l - Self::CENTER) / Self::SCALE).exp()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::write_wav;
    use crate::detect::mel::mel_from_samples;
    use rand::distributions::{Distribution, Uniform};

    fn seg(a: u64, b: u64) -> Segment {
        Segment::from_ms(a, b).unwrap()
    }

    #[test]
    fn uniform_examples() {
        let t = uniform_timings(seg(0, 2000), &["a", "b", "c", "d"].map(String::from)).unwrap();
        let spans: Vec<_> = t.iter().map(|w| (w.start(), w.end())).collect();
        assert_eq!(spans, [(0.0, 0.5), (0.5, 1.0), (1.0, 1.5), (1.5, 2.0)]);
        let t = uniform_timings(seg(1000, 2500), &["a", "b", "c"].map(String::from)).unwrap();
        let spans: Vec<_> = t.iter().map(|w| (w.start(), w.end())).collect();
        assert_eq!(spans, [(1.0, 1.5), (1.5, 2.0), (2.0, 2.5)]);
        let a = UniformAligner::new("u");
        assert!(matches!(a.force_align(Path::new("x"), seg(0, 10), ""), Err(EngineError::Precondition(_))));
    }

    #[test]
    fn table_lookup_and_bounds() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(dir.path().join("a.wav"), &vec![0.0; 32_000]).unwrap();
        let cache = Arc::new(AudioCache::with_root(dir.path()));
        let mut e = HashMap::new();
        e.insert((PathBuf::from("a.wav"), seg(500, 1500)), "license please".to_string());
        let t = TableTranscriber::new("t", e, cache);
        assert_eq!(t.transcribe(Path::new("a.wav"), seg(500, 1500)).unwrap(), "license please");
        assert_eq!(t.transcribe(Path::new("a.wav"), seg(0, 1500)).unwrap(), "");
        assert!(matches!(t.transcribe(Path::new("a.wav"), seg(1500, 2500)), Err(EngineError::Audio(_))));
    }

    struct Constant(&'static str);
    impl Transcriber for Constant {
        fn name(&self) -> &str {
            "c"
        }
        fn transcribe(&self, _: &Path, _: Segment) -> Result<String, EngineError> {
            Ok(self.0.into())
        }
    }

    #[test]
    fn dropout_is_reproducible_and_matches_its_generator() {
        let text = "one two three four five six seven eight nine ten";
        let d = DropoutTranscriber::new("d", Arc::new(Constant(text)), 0.5, 42);
        let p = Path::new("s.wav");
        let a = d.transcribe(p, seg(0, 1000)).unwrap();
        assert_eq!(a, d.transcribe(p, seg(0, 1000)).unwrap());
        // Oracle: replay the documented draw sequence.
        let mut rng = ChaCha8Rng::seed_from_u64(call_seed(42, p, seg(0, 1000), ""));
        let expect: Vec<&str> = text.split_whitespace().filter(|_| rng.gen::<f64>() >= 0.5).collect();
        assert_eq!(a, expect.join(" "));
        assert!(a.split_whitespace().count() < 10);
        assert_eq!(DropoutTranscriber::new("d", Arc::new(Constant(text)), 0.0, 1).transcribe(p, seg(0, 5)).unwrap(), text);
    }

    #[test]
    fn jittered_aligner_finds_transcript_and_stays_inside() {
        let words = vec![
            WordTiming { word: "hello".into(), span: seg(1000, 1200) },
            WordTiming { word: "there".into(), span: seg(1280, 1480) },
            WordTiming { word: "sir".into(), span: seg(2000, 2200) },
        ];
        let mut table = HashMap::new();
        table.insert(PathBuf::from("s.wav"), words);
        let a = JitteredTableAligner::new("j", table, 0.03, 7);
        let q = seg(900, 1500);
        let out = super::super::force_align(&a, Path::new("s.wav"), q, "Hello there.").unwrap();
        assert_eq!(out.len(), 2);
        for (w, truth) in out.iter().zip([1000u64, 1280]) {
            assert!(w.span.start_ms().abs_diff(truth) <= 30);
        }
        assert!(matches!(a.force_align(Path::new("s.wav"), q, "sir"), Err(EngineError::AlignmentFailure(_))));
        let exact = JitteredTableAligner::new("j0", a.words.clone(), 0.0, 0);
        let out = exact.force_align(Path::new("s.wav"), seg(0, 3000), "hello there sir").unwrap();
        assert_eq!(out[2].span, seg(2000, 2200));
    }

    #[test]
    fn absolute_and_root_relative_queries_agree() {
        let words = vec![WordTiming { word: "hello".into(), span: seg(1000, 1200) }];
        let mut table = HashMap::new();
        table.insert(PathBuf::from("audio/s.wav"), words);
        let cache = Arc::new(AudioCache::with_root("/data/corpus"));
        let a = JitteredTableAligner::new("j", table, 0.05, 3).with_audio(Arc::clone(&cache));
        let rel = a.force_align(Path::new("audio/s.wav"), seg(0, 2000), "hello").unwrap();
        let abs = a.force_align(Path::new("/data/corpus/audio/s.wav"), seg(0, 2000), "hello").unwrap();
        assert_eq!(rel, abs);

        let text = "one two three four five six";
        let d = DropoutTranscriber::new("d", Arc::new(Constant(text)), 0.5, 9).with_audio(cache);
        assert_eq!(
            d.transcribe(Path::new("audio/s.wav"), seg(0, 10)).unwrap(),
            d.transcribe(Path::new("/data/corpus/audio/s.wav"), seg(0, 10)).unwrap()
        );
    }

    #[test]
    fn energy_vad_silence_and_noise() {
        let vad = EnergyVad::new("vad");
        let silence = mel_from_samples(&vec![0.0; 4000]);
        assert_eq!(vad.score_frames(&silence).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Uniform::new_inclusive(-1.0f32, 1.0);
        let noise: Vec<f32> = (0..4000).map(|_| u.sample(&mut rng)).collect();
        assert!(vad.score_frames(&mel_from_samples(&noise)).unwrap() >= 0.99);
    }

    #[test]
    fn echo_decodes_rendered_words() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = vec![0.0f32; 3200];
        samples.extend(pseudo::render_word("license", 1.0));
        samples.extend(vec![0.0; 1280]);
        samples.extend(pseudo::render_word("please", 1.0));
        samples.extend(vec![0.0; 3200]);
        write_wav(dir.path().join("e.wav"), &samples).unwrap();
        let echo = EchoTranscriber::new("echo", Arc::new(AudioCache::with_root(dir.path())));
        let total = samples.len() as u64 / 16;
        assert_eq!(echo.transcribe(Path::new("e.wav"), seg(0, total)).unwrap(), "license please");
        assert_eq!(echo.transcribe(Path::new("e.wav"), seg(0, 100)).unwrap(), "");
        assert!(echo.transcribe(Path::new("e.wav"), seg(0, total + 1)).is_err());
    }
}
