//! Log-mel spectrogram: 64 triangular filters over 0-8000 Hz, 25 ms Hann
//! window, 10 ms hop, 512-point FFT, power spectrum, natural log with a
//! 1e-10 floor. No padding, so a 250 ms chunk yields 23 frames.

use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{Audio, AudioError, SAMPLE_RATE};
use crate::segment::Segment;

pub const N_MELS: usize = 64;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const LOG_FLOOR: f64 = 1e-10;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8000.0;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Frame count for `n` samples.
pub fn frame_count(n: usize) -> usize {
    if n < WINDOW {
        0
    } else {
        (n - WINDOW) / HOP + 1
    }
}

/// Log-mel energies, stored frame-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelFeatures {
    n_mels: usize,
    n_frames: usize,
    data: Vec<f64>,
}

impl MelFeatures {
    pub fn new(n_mels: usize, n_frames: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_mels * n_frames, "feature data size mismatch");
        Self { n_mels, n_frames, data }
    }

    /// Build from rows of `[frame][bin]`. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Self> {
        let n_mels = rows.first().map_or(N_MELS, Vec::len);
        if rows.iter().any(|r| r.len() != n_mels) {
            return None;
        }
        Some(Self::new(n_mels, rows.len(), rows.concat()))
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.data[frame * self.n_mels + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.n_mels..(frame + 1) * self.n_mels]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_mels.max(1)).take(self.n_frames)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.frames().map(<[f64]>::to_vec).collect()
    }

    /// Per-bin mean followed by per-bin standard deviation over frames.
    pub fn pooled_mean_std(&self) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.n_mels];
        if self.n_frames == 0 {
            return out;
        }
        let t = self.n_frames as f64;
        for f in self.frames() {
            for (b, v) in f.iter().enumerate() {
                out[b] += v / t;
            }
        }
        for f in self.frames() {
            for (b, v) in f.iter().enumerate() {
                let d = v - out[b];
                out[self.n_mels + b] += d * d / t;
            }
        }
        for v in &mut out[self.n_mels..] {
            *v = v.sqrt();
        }
        out
    }
}

struct Frontend {
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
}

/// Filter centre frequencies in Hz.
pub fn mel_centers() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
    (1..=N_MELS).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64)).collect()
}

fn frontend() -> &'static Frontend {
    static FRONTEND: OnceLock<Frontend> = OnceLock::new();
    FRONTEND.get_or_init(|| {
        // Periodic Hann.
        let window = (0..WINDOW)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / WINDOW as f64).cos())
            .collect();
        let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
        let filters = (0..N_MELS)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..=N_FFT / 2)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > l && f <= c {
                            (f - l) / (c - l)
                        } else if f > c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Frontend { window, filters, fft }
    })
}

/// Sum of weights for each filter; every filter must cover at least one bin.
pub fn filter_weight_sums() -> Vec<f64> {
    frontend().filters.iter().map(|f| f.iter().map(|(_, w)| w).sum()).collect()
}

pub fn mel_from_samples(samples: &[f32]) -> MelFeatures {
    let fe = frontend();
    let n_frames = frame_count(samples.len());
    let mut data = Vec::with_capacity(n_frames * N_MELS);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut power = vec![0.0f64; N_FFT / 2 + 1];
    for t in 0..n_frames {
        let frame = &samples[t * HOP..t * HOP + WINDOW];
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < WINDOW { Complex::new(frame[i] as f64 * fe.window[i], 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fe.fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for filt in &fe.filters {
            let e: f64 = filt.iter().map(|&(k, w)| w * power[k]).sum();
            data.push(e.max(LOG_FLOOR).ln());
        }
    }
    MelFeatures::new(N_MELS, n_frames, data)
}

pub fn frame_mel(audio: &Audio, segment: Segment) -> Result<MelFeatures, AudioError> {
    Ok(mel_from_samples(audio.slice(segment)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_sits_on_the_floor() {
        let m = mel_from_samples(&vec![0.0; 4000]);
        assert_eq!(m.n_frames(), 23);
        assert!(m.frames().flatten().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn frame_count_formula() {
        for ms in [25u64, 100, 250, 333, 1000] {
            let n = (ms * 16) as usize;
            let expected = ((ms - 25) / 10 + 1) as usize;
            assert_eq!(frame_count(n), expected, "{ms} ms");
            assert_eq!(mel_from_samples(&vec![0.1; n]).n_frames(), expected);
        }
        assert_eq!(frame_count(399), 0);
    }

    #[test]
    fn every_filter_covers_a_bin() {
        assert!(filter_weight_sums().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn tone_peaks_in_nearest_filter() {
        for hz in [250.0f64, 1000.0, 3000.0] {
            let tone: Vec<f32> = (0..4000)
                .map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / 16000.0).sin() as f32 * 0.5)
                .collect();
            let m = mel_from_samples(&tone);
            let mean: Vec<f64> = m.pooled_mean_std()[..N_MELS].to_vec();
            let argmax = (0..N_MELS).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
            // Independent oracle: centres on the HTK mel scale, spaced
            // uniformly between 0 and 8 kHz with 64 filters.
            let top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
            let nearest = (0..N_MELS)
                .min_by(|&a, &b| {
                    let c = |i: usize| 700.0 * (10f64.powf(top * (i + 1) as f64 / 65.0 / 2595.0) - 1.0);
                    (c(a) - hz).abs().total_cmp(&(c(b) - hz).abs())
                })
                .unwrap();
            assert_eq!(argmax, nearest, "{hz} Hz");
        }
    }

    #[test]
    fn pooled_vector_has_mean_then_std() {
        let m = MelFeatures::from_rows(&[vec![1.0, 2.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(m.pooled_mean_std(), vec![2.0, 2.0, 1.0, 0.0]);
    }
}
