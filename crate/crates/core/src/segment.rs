//! Time spans inside a recording, stored at millisecond resolution.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Half-open time span `[start, end)` in a recording.
///
/// Boundaries are kept as integer milliseconds so that durations, chunk
/// grids and padding arithmetic are exact. Conversions to and from seconds
/// round to the nearest millisecond.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    start_ms: u64,
    end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SegmentError {
    #[error("segment end {end_s}s is not after start {start_s}s")]
    Empty { start_s: f64, end_s: f64 },
    #[error("segment boundary {0}s is negative or not finite")]
    BadBoundary(f64),
}

pub(crate) fn secs_to_ms(s: f64) -> Result<u64, SegmentError> {
    if !s.is_finite() || s < -0.0005 {
        return Err(SegmentError::BadBoundary(s));
    }
    Ok((s * 1000.0).round().max(0.0) as u64)
}

impl Segment {
    pub fn from_ms(start_ms: u64, end_ms: u64) -> Result<Self, SegmentError> {
        if end_ms <= start_ms {
            return Err(SegmentError::Empty {
                start_s: start_ms as f64 / 1000.0,
                end_s: end_ms as f64 / 1000.0,
            });
        }
        Ok(Self { start_ms, end_ms })
    }

    pub fn from_secs(start: f64, end: f64) -> Result<Self, SegmentError> {
        Self::from_ms(secs_to_ms(start)?, secs_to_ms(end)?)
    }

    pub fn start_ms(&self) -> u64 {
        self.start_ms
    }

    pub fn end_ms(&self) -> u64 {
        self.end_ms
    }

    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }

    pub fn start(&self) -> f64 {
        self.start_ms as f64 / 1000.0
    }

    pub fn end(&self) -> f64 {
        self.end_ms as f64 / 1000.0
    }

    pub fn duration(&self) -> f64 {
        self.duration_ms() as f64 / 1000.0
    }

    pub fn midpoint(&self) -> f64 {
        (self.start_ms + self.end_ms) as f64 / 2000.0
    }

    /// Length of the intersection in milliseconds (0 when disjoint).
    pub fn overlap_ms(&self, other: &Segment) -> u64 {
        let lo = self.start_ms.max(other.start_ms);
        let hi = self.end_ms.min(other.end_ms);
        hi.saturating_sub(lo)
    }

    pub fn overlaps(&self, other: &Segment) -> bool {
        self.overlap_ms(other) > 0
    }

    pub fn contains(&self, other: &Segment) -> bool {
        self.start_ms <= other.start_ms && other.end_ms <= self.end_ms
    }

    /// Smallest segment covering both.
    pub fn hull(&self, other: &Segment) -> Segment {
        Segment {
            start_ms: self.start_ms.min(other.start_ms),
            end_ms: self.end_ms.max(other.end_ms),
        }
    }

    /// Sample index range for a given sample rate.
    pub fn sample_range(&self, sample_rate: u32) -> std::ops::Range<usize> {
        let sr = sample_rate as u64;
        let a = (self.start_ms * sr / 1000) as usize;
        let b = (self.end_ms * sr / 1000) as usize;
        a..b
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:.3}, {:.3}]", self.start(), self.end())
    }
}
