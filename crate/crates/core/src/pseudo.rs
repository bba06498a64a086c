//! Pseudo-speech: a reversible audio code for words.
//!
//! Each lexicon word is rendered as a 200 ms amplitude-modulated pair of
//! tones, one from a low band and one from a high band, so 8 x 8 tone pairs
//! cover the 64-word lexicon. Words inside an utterance are separated by
//! 80 ms of silence. [`decode`] finds energy bursts and recovers the tone
//! pair of each one, which is what the echo transcriber uses to "hear" the
//! synthetic recordings.

use std::f32::consts::PI;

use crate::audio::SAMPLE_RATE;

pub const WORD_MS: u64 = 200;
pub const WORD_GAP_MS: u64 = 80;

const LOW_BAND: [f32; 8] = [300.0, 380.0, 460.0, 540.0, 620.0, 700.0, 780.0, 860.0];
const HIGH_BAND: [f32; 8] = [1100.0, 1300.0, 1500.0, 1700.0, 1900.0, 2100.0, 2300.0, 2500.0];
const TONE_AMPLITUDE: f32 = 0.45;
const RAMP_MS: u64 = 10;

// Decoder settings: 10 ms frames, a burst needs 50 ms of frames above the
// activity threshold, and gaps of up to two quiet frames are bridged.
const FRAME: usize = 160;
const ACTIVE_RMS: f32 = 0.03;
const MIN_BURST_FRAMES: usize = 5;
const MAX_BRIDGE_FRAMES: usize = 2;

pub const LEXICON: [&str; 64] = [
    "yes", "no", "okay", "sir", "ma'am", "license", "registration", "insurance",
    "please", "thank", "you", "stop", "car", "vehicle", "speed", "limit",
    "mile", "hour", "light", "red", "green", "lane", "turn", "signal",
    "step", "out", "hands", "wheel", "keep", "where", "going", "today",
    "home", "work", "know", "why", "pulled", "over", "ticket", "warning",
    "citation", "address", "name", "date", "birth", "current", "expired", "plate",
    "window", "door", "trunk", "search", "right", "left", "here", "there",
    "back", "minute", "safe", "drive", "have", "good", "night", "officer",
];

pub fn word_index(word: &str) -> Option<usize> {
    LEXICON.iter().position(|w| *w == word)
}

pub fn word_samples() -> usize {
    (WORD_MS * SAMPLE_RATE as u64 / 1000) as usize
}

/// Render one lexicon word at the given gain. Panics on unknown words.
pub fn render_word(word: &str, gain: f32) -> Vec<f32> {
    let k = word_index(word).unwrap_or_else(|| panic!("{word:?} is not in the pseudo-speech lexicon"));
    let (f1, f2) = (LOW_BAND[k / 8], HIGH_BAND[k % 8]);
    let n = word_samples();
    let ramp = (RAMP_MS * SAMPLE_RATE as u64 / 1000) as usize;
    let sr = SAMPLE_RATE as f32;
    (0..n)
        .map(|i| {
            let t = i as f32 / sr;
            let edge = i.min(n - 1 - i);
            let env = if edge < ramp { 0.5 - 0.5 * (PI * edge as f32 / ramp as f32).cos() } else { 1.0 };
            let am = 0.9 + 0.1 * (2.0 * PI * 4.0 * t).sin();
            gain * env * am * TONE_AMPLITUDE * ((2.0 * PI * f1 * t).sin() + (2.0 * PI * f2 * t).sin())
        })
        .collect()
}

/// Duration in ms of an utterance of `n_words` words.
pub fn utterance_ms(n_words: usize) -> u64 {
    if n_words == 0 {
        return 0;
    }
    n_words as u64 * WORD_MS + (n_words as u64 - 1) * WORD_GAP_MS
}

fn goertzel_power(x: &[f32], freq: f32) -> f32 {
    let w = 2.0 * PI * freq / SAMPLE_RATE as f32;
    let coeff = 2.0 * w.cos();
    let (mut s1, mut s2) = (0.0f32, 0.0f32);
    for &v in x {
        let s0 = v + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    s1 * s1 + s2 * s2 - coeff * s1 * s2
}

fn strongest(x: &[f32], band: &[f32; 8]) -> usize {
    let mut best = 0;
    let mut best_p = f32::MIN;
    for (i, &f) in band.iter().enumerate() {
        let p = goertzel_power(x, f);
        if p > best_p {
            best_p = p;
            best = i;
        }
    }
    best
}

/// Sample ranges of energy bursts long enough to carry a word.
pub fn bursts(samples: &[f32]) -> Vec<std::ops::Range<usize>> {
    let active: Vec<bool> = samples
        .chunks(FRAME)
        .map(|f| {
            let e = f.iter().map(|v| v * v).sum::<f32>() / f.len() as f32;
            f.len() == FRAME && e.sqrt() > ACTIVE_RMS
        })
        .collect();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < active.len() {
        if !active[i] {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < active.len() && active[j] {
            j += 1;
        }
        match runs.last_mut() {
            Some(last) if i - last.1 <= MAX_BRIDGE_FRAMES => last.1 = j,
            _ => runs.push((i, j)),
        }
        i = j;
    }
    runs.into_iter()
        .filter(|(a, b)| b - a >= MIN_BURST_FRAMES)
        .map(|(a, b)| a * FRAME..b * FRAME)
        .collect()
}

/// Recover the words present in a stretch of pseudo-speech.
pub fn decode(samples: &[f32]) -> Vec<&'static str> {
    bursts(samples)
        .into_iter()
        .map(|r| {
            let x = &samples[r];
            LEXICON[strongest(x, &LOW_BAND) * 8 + strongest(x, &HIGH_BAND)]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textnorm::normalize;

    fn utterance(words: &[&str], gain: f32) -> Vec<f32> {
        let gap = vec![0.0; (WORD_GAP_MS * 16) as usize];
        let mut out = vec![0.0; 1600];
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                out.extend_from_slice(&gap);
            }
            out.extend(render_word(w, gain));
        }
        out.extend(vec![0.0; 1600]);
        out
    }

    #[test]
    fn lexicon_is_distinct_and_normalized() {
        let mut seen = std::collections::HashSet::new();
        for w in LEXICON {
            assert!(seen.insert(w), "duplicate {w}");
            assert_eq!(normalize(w).tokens(), [w.to_string()]);
        }
    }

    #[test]
    fn every_word_round_trips() {
        for gain in [1.0, 0.2] {
            let words: Vec<&str> = LEXICON.to_vec();
            let audio = utterance(&words, gain);
            assert_eq!(decode(&audio), words, "gain {gain}");
        }
    }

    #[test]
    fn partial_word_still_decodes() {
        let w = render_word("license", 1.0);
        assert_eq!(decode(&w[..1200]), ["license"]);
        assert!(decode(&w[..480]).is_empty());
    }

    #[test]
    fn silence_decodes_to_nothing() {
        assert!(decode(&vec![0.0; 16_000]).is_empty());
    }

    #[test]
    fn utterance_length() {
        assert_eq!(utterance_ms(1), 200);
        assert_eq!(utterance_ms(3), 760);
    }
}
