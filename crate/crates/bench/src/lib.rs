//! Deterministic inputs shared by the benchmarks.

use std::path::Path;

use fieldasr_core::audio::{Audio, SAMPLE_RATE};
use fieldasr_core::eval::EvalRow;
use fieldasr_core::synthgen::{generate_stop, SceneSpec};
use fieldasr_core::{Gender, Race, SpeakerRole};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two token sequences of length `n` over a small vocabulary.
pub fn token_pair(n: usize, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || (0..n).map(|_| rng.gen_range(0..50)).collect();
    (draw(), draw())
}

/// A generated 30 s stop with two speakers.
pub fn stop_audio(seed: u64) -> Audio {
    let spec = SceneSpec { seed, ..SceneSpec::default() };
    let stop = generate_stop(&spec, Path::new("bench.wav")).expect("default scene fits");
    Audio { samples: stop.samples, sample_rate: SAMPLE_RATE }
}

/// Rows with random-intercept structure, `stops` x `per_stop`.
pub fn eval_rows(stops: usize, per_stop: usize, seed: u64) -> Vec<EvalRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(stops * per_stop);
    for s in 0..stops {
        let b: f64 = rng.gen_range(-0.3..0.3);
        for u in 0..per_stop {
            let (officer, black, female) = (rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5));
            let wer = 0.5 - 0.4 * f64::from(u8::from(officer)) + 0.1 * f64::from(u8::from(female)) + b + rng.gen_range(-0.5..0.5);
            rows.push(EvalRow {
                stop_id: format!("s{s}"),
                utt_id: format!("s{s}-{u}"),
                wer,
                role: if officer { SpeakerRole::PrimaryOfficer } else { SpeakerRole::CommunityMember },
                race: if black { Race::Black } else { Race::White },
                gender: if female { Gender::Female } else { Gender::Male },
                degenerate: false,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(token_pair(10, 1), token_pair(10, 1));
        assert_eq!(eval_rows(3, 4, 2).len(), 12);
        assert_eq!(stop_audio(0).samples, stop_audio(0).samples);
    }
}
