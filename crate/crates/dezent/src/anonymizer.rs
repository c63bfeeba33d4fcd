//! z-anonymity semantics: measurement bucketing, the per-gateway sliding
//! window, publishable-count arithmetic, and the sequential centralized
//! reference implementation.
//!
//! A value may be published in a cycle only if at least `z` reports of the
//! same bucket fall inside the window of the last `delta_t` cycles. Time is
//! discretized to clock-cycle indices; an entry with timestamp `ts` is inside
//! the window at time `now` iff `now - ts < delta_t` (strict).

use std::collections::{BTreeMap, VecDeque};

#[derive(Debug, thiserror::Error)]
pub enum AnonymizerError {
    #[error("measurement value must be finite and non-negative, got {0}")]
    InvalidValue(f64),
    #[error("tuples must arrive in nondecreasing timestamp order ({arrived} after {last})")]
    OutOfOrder { arrived: u64, last: u64 },
}

/// Geometric bucketing: `v0` is the minimum resolution and `q` the number of
/// buckets per octave, so absolute rounding coarsens with magnitude.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BucketConfig {
    pub v0: f64,
    pub q: u32,
}

impl Default for BucketConfig {
    fn default() -> Self {
        Self { v0: 0.01, q: 8 }
    }
}

/// Discretized measurement value. Index 0 collects everything at or below
/// `v0`; bucket `i >= 1` covers `v0 * 2^((i-1)/q) < v <= v0 * 2^(i/q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BucketId(pub u64);

/// Map a measurement to its bucket. Total and deterministic for finite
/// non-negative input; monotone in the value.
pub fn bucketize(value: f64, cfg: &BucketConfig) -> Result<BucketId, AnonymizerError> {
    if !value.is_finite() || value < 0.0 {
        return Err(AnonymizerError::InvalidValue(value));
    }
    if value <= cfg.v0 {
        return Ok(BucketId(0));
    }
    let index = (cfg.q as f64 * (value / cfg.v0).log2()).floor() as u64 + 1;
    Ok(BucketId(index))
}

/// Representative value of a bucket (geometric midpoint), for reporting.
pub fn bucket_representative(bucket: BucketId, cfg: &BucketConfig) -> f64 {
    if bucket.0 == 0 {
        cfg.v0
    } else {
        cfg.v0 * ((bucket.0 as f64 - 0.5) / cfg.q as f64).exp2()
    }
}

/// A measurement as observed or published: bucketed value, reporter
/// identifier (sensor id, or gateway id once masked), and the cycle it was
/// measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct MeasurementTuple {
    pub bucket: BucketId,
    pub reporter: u64,
    pub cycle: u64,
}

/// Wire encoding of a published tuple: bucket index, reporter id and cycle
/// index as little-endian u64s.
pub fn encode_tuple(t: &MeasurementTuple) -> [u8; 24] {
    let mut out = [0u8; 24];
    out[0..8].copy_from_slice(&t.bucket.0.to_le_bytes());
    out[8..16].copy_from_slice(&t.reporter.to_le_bytes());
    out[16..24].copy_from_slice(&t.cycle.to_le_bytes());
    out
}

pub fn decode_tuple(bytes: &[u8; 24]) -> MeasurementTuple {
    MeasurementTuple {
        bucket: BucketId(u64::from_le_bytes(bytes[0..8].try_into().unwrap())),
        reporter: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
        cycle: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
    }
}

/// One window entry: who reported which bucket in which cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowEntry {
    pub bucket: BucketId,
    pub sensor: u64,
    pub cycle: u64,
}

/// Per-gateway memory of reports inside the sliding window, append-ordered
/// by timestamp.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WindowLog {
    entries: VecDeque<WindowEntry>,
}

impl WindowLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &WindowEntry> {
        self.entries.iter()
    }

    pub fn push(&mut self, entry: WindowEntry) {
        if let Some(last) = self.entries.back() {
            assert!(
                entry.cycle >= last.cycle,
                "window entries must be appended in timestamp order"
            );
        }
        self.entries.push_back(entry);
    }

    /// Drop entries older than the window: retains exactly those with
    /// `now - cycle < delta_t`. Idempotent for a fixed `now`.
    pub fn apply_delta_t(&mut self, now: u64, delta_t: u64) {
        if let Some(back) = self.entries.back() {
            assert!(now >= back.cycle, "now precedes logged entries");
        }
        while let Some(front) = self.entries.front() {
            if now - front.cycle >= delta_t {
                self.entries.pop_front();
            } else {
                break;
            }
        }
    }

    /// Exact per-bucket counts over the whole window.
    pub fn window_counts(&self) -> BTreeMap<BucketId, u64> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.bucket).or_insert(0) += 1;
        }
        counts
    }
}

/// How many current-cycle occurrences of a value z-anonymity permits
/// publishing this cycle: `min(c_current, max(0, c_window - (z - 1)))`.
///
/// # Panics
/// If `c_current > c_window` or `z == 0`.
pub fn publishable_count(c_window: u64, c_current: u64, z: u64) -> u64 {
    assert!(z >= 1, "z must be at least 1");
    assert!(
        c_current <= c_window,
        "current-cycle count cannot exceed the window count"
    );
    c_current.min(c_window.saturating_sub(z - 1))
}

/// Publish-or-suppress decision of the sequential anonymizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Publish,
    Suppress,
}

/// Sequential centralized z-anonymity: processes one tuple at a time in
/// timestamp order and publishes it immediately iff its bucket has reached
/// `z` occurrences within the window. This is the reference oracle the
/// ring protocol is checked against.
#[derive(Debug, Clone)]
pub struct CentralizedZAnon {
    z: u64,
    delta_t: u64,
    windows: BTreeMap<BucketId, VecDeque<u64>>,
    last_cycle: Option<u64>,
}

impl CentralizedZAnon {
    pub fn new(z: u64, delta_t: u64) -> Self {
        assert!(z >= 1 && delta_t >= 1);
        Self {
            z,
            delta_t,
            windows: BTreeMap::new(),
            last_cycle: None,
        }
    }

    pub fn step(&mut self, tuple: &MeasurementTuple) -> Result<Decision, AnonymizerError> {
        if let Some(last) = self.last_cycle {
            if tuple.cycle < last {
                return Err(AnonymizerError::OutOfOrder {
                    arrived: tuple.cycle,
                    last,
                });
            }
        }
        self.last_cycle = Some(tuple.cycle);
        let window = self.windows.entry(tuple.bucket).or_default();
        while let Some(&front) = window.front() {
            if tuple.cycle - front >= self.delta_t {
                window.pop_front();
            } else {
                break;
            }
        }
        window.push_back(tuple.cycle);
        Ok(if window.len() as u64 >= self.z {
            Decision::Publish
        } else {
            Decision::Suppress
        })
    }
}
