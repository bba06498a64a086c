//! Black-box minimization over a box, and threshold tuning for the detector.
//!
//! The default strategy evaluates a shifted Halton design, then picks each
//! further point by maximizing expected improvement under a Gaussian-process
//! surrogate with a fixed squared-exponential kernel (length scale 0.2 of the
//! box width per dimension, noise variance 1e-4 on standardized costs).

use std::collections::HashMap;
use std::fmt::Display;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::audio::AudioCache;
use crate::corpus::Manifest;
use crate::detect::{gate_and_merge, score_chunks, score_transcripts, DetectorThresholds, ScoredChunk};
use crate::engines::{FrameScorer, Transcriber};
use crate::segment::Segment;

pub const LENGTH_SCALE: f64 = 0.2;
pub const NOISE_VARIANCE: f64 = 1e-4;
const PRIMES: [u32; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];
const GLOBAL_CANDIDATES: usize = 2048;
const LOCAL_CANDIDATES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    #[default]
    Gp,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneSpec {
    pub bounds: Vec<(f64, f64)>,
    pub budget: usize,
    pub init_samples: usize,
    pub seed: u64,
    pub mode: TuneMode,
}

impl Default for TuneSpec {
    fn default() -> Self {
        Self {
            bounds: vec![(0.0, 1.0), (0.0, 1.0), (DetectorThresholds::T_SMOOTH_MIN, DetectorThresholds::T_SMOOTH_MAX)],
            budget: 20,
            init_samples: 5,
            seed: 0,
            mode: TuneMode::Gp,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TuneError {
    #[error("invalid tuning spec: {0}")]
    Spec(String),
    #[error("objective failed at {point:?}: {message}")]
    Objective { point: Vec<f64>, message: String },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error(transparent)]
    Detect(#[from] crate::detect::DetectError),
}

impl TuneSpec {
    pub fn validate(&self) -> Result<(), TuneError> {
        if self.bounds.is_empty() || self.bounds.len() > PRIMES.len() {
            return Err(TuneError::Spec(format!("need 1 to {} dimensions", PRIMES.len())));
        }
        if let Some((lo, hi)) = self.bounds.iter().find(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && hi > lo)) {
            return Err(TuneError::Spec(format!("empty bound [{lo}, {hi}]")));
        }
        if !(self.budget >= self.init_samples && self.init_samples >= 1) {
            return Err(TuneError::Spec(format!(
                "need budget >= init_samples >= 1, got {} and {}",
                self.budget, self.init_samples
            )));
        }
        Ok(())
    }

    fn to_box(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.bounds).map(|(v, (lo, hi))| (lo + v * (hi - lo)).clamp(*lo, *hi)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub point: Vec<f64>,
    pub cost: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best_point: Vec<f64>,
    pub best_cost: f64,
    pub trace: Vec<TracePoint>,
}

/// Radical inverse of `i` in base `b`.
fn halton(mut i: u64, b: u32) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    let b = u64::from(b);
    while i > 0 {
        f /= b as f64;
        r += f * (i % b) as f64;
        i /= b;
    }
    r
}

/// Gaussian-process posterior over the unit cube.
struct Surrogate {
    xs: Vec<Vec<f64>>,
    alpha: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    y_mean: f64,
    y_std: f64,
}

fn kernel(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * d2 / (LENGTH_SCALE * LENGTH_SCALE)).exp()
}

impl Surrogate {
    fn fit(xs: &[Vec<f64>], ys: &[f64]) -> Self {
        let n = ys.len();
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = if var > 1e-24 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(n, ys.iter().map(|v| (v - y_mean) / y_std));
        let mut jitter = NOISE_VARIANCE;
        loop {
            let k = DMatrix::from_fn(n, n, |i, j| kernel(&xs[i], &xs[j]) + if i == j { jitter } else { 0.0 });
            if let Some(chol) = k.cholesky() {
                let alpha = chol.solve(&y);
                return Self { xs: xs.to_vec(), alpha, chol, y_mean, y_std };
            }
            jitter *= 10.0;
        }
    }

    /// Posterior mean and standard deviation in standardized units.
    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| kernel(xi, x)));
        let mu = k.dot(&self.alpha);
        let v = self.chol.solve(&k);
        let var = (1.0 - k.dot(&v)).max(0.0);
        (mu, var.sqrt())
    }

    fn expected_improvement(&self, x: &[f64], best: f64) -> f64 {
        let (mu, sd) = self.predict(x);
        if sd < 1e-12 {
            return (best - mu).max(0.0);
        }
        let n = StdNormal::standard();
        let z = (best - mu) / sd;
        (best - mu) * n.cdf(z) + sd * n.pdf(z)
    }

    fn standardize(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }
}

fn next_point(rng: &mut ChaCha8Rng, xs: &[Vec<f64>], ys: &[f64], dims: usize) -> Vec<f64> {
    let gp = Surrogate::fit(xs, ys);
    let best = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let best_z = gp.standardize(best);
    let mut candidates: Vec<Vec<f64>> = (0..GLOBAL_CANDIDATES).map(|_| (0..dims).map(|_| rng.gen::<f64>()).collect()).collect();
    let mut ranked: Vec<usize> = (0..ys.len()).collect();
    ranked.sort_by(|&a, &b| ys[a].total_cmp(&ys[b]).then(a.cmp(&b)));
    for &i in ranked.iter().take(3) {
        for scale in [0.1, 0.03] {
            let step = Normal::new(0.0, scale).expect("positive scale");
            for _ in 0..LOCAL_CANDIDATES / 2 {
                candidates.push(xs[i].iter().map(|v| (v + step.sample(rng)).clamp(0.0, 1.0)).collect());
            }
        }
    }
    let score = |c: &Vec<f64>| gp.expected_improvement(c, best_z);
    let mut top = candidates[0].clone();
    let mut top_ei = score(&top);
    for c in &candidates[1..] {
        let ei = score(c);
        if ei > top_ei {
            top_ei = ei;
            top = c.clone();
        }
    }
    // Shrinking local search around the winner.
    let mut scale = 0.05;
    for _ in 0..4 {
        let step = Normal::new(0.0, scale).expect("positive scale");
        for _ in 0..64 {
            let c: Vec<f64> = top.iter().map(|v| (v + step.sample(rng)).clamp(0.0, 1.0)).collect();
            let ei = score(&c);
            if ei > top_ei {
                top_ei = ei;
                top = c;
            }
        }
        scale /= 3.0;
    }
    top
}

/// Minimize `objective` over the box in `spec.budget` evaluations and return
/// the best evaluated point.
pub fn optimize<F, E>(mut objective: F, spec: &TuneSpec) -> Result<TuneResult, TuneError>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
    E: Display,
{
    spec.validate()?;
    let dims = spec.bounds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shift: Vec<f64> = (0..dims).map(|_| rng.gen::<f64>()).collect();
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(spec.budget);
    let mut ys: Vec<f64> = Vec::with_capacity(spec.budget);
    let mut trace = Vec::with_capacity(spec.budget);
    for iteration in 0..spec.budget {
        let u: Vec<f64> = if spec.mode == TuneMode::Random {
            (0..dims).map(|_| rng.gen::<f64>()).collect()
        } else if iteration < spec.init_samples {
            (0..dims).map(|d| (halton(iteration as u64 + 1, PRIMES[d]) + shift[d]).fract()).collect()
        } else {
            next_point(&mut rng, &xs, &ys, dims)
        };
        let point = spec.to_box(&u);
        let cost = objective(&point).map_err(|e| TuneError::Objective { point: point.clone(), message: e.to_string() })?;
        if !cost.is_finite() {
            return Err(TuneError::Objective { point, message: format!("non-finite cost {cost}") });
        }
        xs.push(u);
        ys.push(cost);
        trace.push(TracePoint { point, cost, iteration });
    }
    let best = trace
        .iter()
        .min_by(|a, b| a.cost.total_cmp(&b.cost).then(a.iteration.cmp(&b.iteration)))
        .expect("budget >= 1");
    Ok(TuneResult { best_point: best.point.clone(), best_cost: best.cost, trace })
}

pub fn thresholds_from_point(p: &[f64]) -> DetectorThresholds {
    DetectorThresholds { t_vad: p[0], t_officer: p[1], t_smooth: p[2] }
}

/// One validation stop with its chunk scores computed once.
pub struct ScoredStop<'a> {
    pub stop: &'a crate::corpus::StopRecord,
    pub chunks: Vec<ScoredChunk>,
}

/// Mean detection WER over stops for given thresholds. Transcripts are cached
/// by segment, since many threshold settings produce the same segments.
pub struct DetectionObjective<'a> {
    stops: Vec<ScoredStop<'a>>,
    transcriber: &'a dyn Transcriber,
    cache: HashMap<(usize, Segment), Option<String>>,
}

impl<'a> DetectionObjective<'a> {
    pub fn new(stops: Vec<ScoredStop<'a>>, transcriber: &'a dyn Transcriber) -> Self {
        Self { stops, transcriber, cache: HashMap::new() }
    }

    pub fn cost(&mut self, th: &DetectorThresholds) -> f64 {
        let mut total = 0.0;
        for (k, s) in self.stops.iter().enumerate() {
            let detected = gate_and_merge(&s.chunks, th);
            let mut hyps = Vec::with_capacity(detected.len());
            let mut failed = Vec::new();
            for d in detected {
                let text = self
                    .cache
                    .entry((k, d.segment))
                    .or_insert_with(|| self.transcriber.transcribe(&s.stop.audio, d.segment).ok())
                    .clone();
                if text.is_none() {
                    failed.push(d.segment);
                }
                hyps.push((d.segment, text.unwrap_or_default()));
            }
            total += score_transcripts(s.stop, &hyps, failed).wer.value;
        }
        total / self.stops.len().max(1) as f64
    }
}

/// Tune `(t_vad, t_officer, t_smooth)` to minimize mean detection WER over
/// the validation stops.
pub fn tune_detector(
    validation: &Manifest,
    audio: &AudioCache,
    vad: &dyn FrameScorer,
    officer: &dyn FrameScorer,
    transcriber: &dyn Transcriber,
    spec: &TuneSpec,
) -> Result<(DetectorThresholds, TuneResult), TuneError> {
    if validation.stops.is_empty() {
        return Err(TuneError::EmptyValidation);
    }
    let mut stops = Vec::with_capacity(validation.stops.len());
    for stop in &validation.stops {
        let a = audio.get(&stop.audio).map_err(crate::detect::DetectError::from)?;
        stops.push(ScoredStop { stop, chunks: score_chunks(&a, vad, officer)? });
    }
    let mut obj = DetectionObjective::new(stops, transcriber);
    let result = optimize(|p| Ok::<f64, String>(obj.cost(&thresholds_from_point(p))), spec)?;
    Ok((thresholds_from_point(&result.best_point), result))
}
