//! Counting structures exchanged around the gateway ring.
//!
//! Two interchangeable backends implement [`CountingStructure`]:
//!
//! * [`CountingFilter`] — a counting Bloom filter with `m` counters of `b`
//!   bits each and `k` double-hashing index functions. Counter arithmetic is
//!   modulo `2^b` (wrap-around, not saturating) so that additive masking by a
//!   perturbation vector cancels exactly; `b` must be sized so true counts
//!   never reach `2^b`.
//! * [`ExactCounter`] — a plain multiset. Used as the oracle backend and for
//!   scenario runs that need exact counts.
//!
//! The filter wire format is fixed: a 28-byte little-endian header
//! `(m: u64, k: u64, b: u32, hash_seed: u64)` followed by the counters packed
//! at `b` bits each, padded with zero bits to a byte boundary.

use std::collections::BTreeMap;

use crate::anonymizer::BucketId;
use crate::rng::splitmix64;

/// Errors from counting-structure construction and decoding.
#[derive(Debug, thiserror::Error)]
pub enum SketchError {
    #[error("invalid filter parameters: {0}")]
    InvalidParams(String),
    #[error("target false-positive probability must lie in (0, 1), got {0}")]
    InvalidTargetFp(f64),
    #[error("expected_elements must be at least 1")]
    InvalidExpectedElements,
    #[error("payload truncated: need {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload has {actual} bytes but header implies {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("nonzero padding bits in packed counter block")]
    InvalidPadding,
    #[error("counter value {value} out of range for b = {b}")]
    CounterOutOfRange { value: u64, b: u32 },
    #[error("unknown backend tag {0}")]
    UnknownBackendTag(u8),
}

/// Parameters of a counting Bloom filter: counter-array length `m`, number of
/// hash functions `k`, bits per counter `b`, and the seed the hash family is
/// derived from.
///
/// The `k` index functions use double hashing,
/// `h_j(x) = (g1(x) + j * g2(x)) mod m`, where `g1`, `g2` are splitmix64-based
/// hashes of the bucket id keyed off `hash_seed` and `g2` is reduced into
/// `[1, m - 1]` so consecutive probes never degenerate. The whole family is
/// determined by `(hash_seed, k, m)` and is portable across platforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterParams {
    pub m: usize,
    pub k: usize,
    pub b: u32,
    pub hash_seed: u64,
}

impl FilterParams {
    pub fn new(m: usize, k: usize, b: u32, hash_seed: u64) -> Result<Self, SketchError> {
        if m < 1 {
            return Err(SketchError::InvalidParams("m must be at least 1".into()));
        }
        if k < 1 {
            return Err(SketchError::InvalidParams("k must be at least 1".into()));
        }
        if !(1..=64).contains(&b) {
            return Err(SketchError::InvalidParams(format!(
                "b must lie in [1, 64], got {b}"
            )));
        }
        Ok(Self { m, k, b, hash_seed })
    }

    /// Counter indices probed for `bucket`, one per hash function.
    ///
    /// Duplicates are kept: if two hash functions collide on an index for
    /// this bucket, additions hit that counter once per function.
    pub fn indices(&self, bucket: BucketId) -> Vec<usize> {
        let key1 = splitmix64(self.hash_seed);
        let key2 = splitmix64(key1);
        let g1 = splitmix64(bucket.0 ^ key1);
        let g2 = splitmix64(bucket.0 ^ key2);
        let m = self.m as u128;
        let step = if self.m > 1 {
            1 + (g2 % (self.m as u64 - 1))
        } else {
            0
        };
        (0..self.k)
            .map(|j| ((g1 as u128 + j as u128 * step as u128) % m) as usize)
            .collect()
    }

    /// Mask selecting the low `b` bits; counter arithmetic is modulo `2^b`.
    fn counter_mask(&self) -> u64 {
        if self.b == 64 {
            u64::MAX
        } else {
            (1u64 << self.b) - 1
        }
    }

    /// Size in bytes of the serialized filter with these parameters.
    pub fn serialized_size(&self) -> usize {
        HEADER_LEN + packed_len(self.m, self.b)
    }
}

/// Optimal sizing from the expected element count and the accepted
/// false-positive probability.
///
/// `m = X * -ln(p) / (ln 2)^2` rounded to the nearest integer (minimum 2, so
/// the double-hashing step is well defined), and `k = m / X * ln 2` rounded to
/// the nearest integer (minimum 1). The unrounded `k` is returned alongside
/// for reporting.
pub fn size_parameters(
    expected_elements: u64,
    target_fp: f64,
) -> Result<(usize, usize, f64), SketchError> {
    if expected_elements < 1 {
        return Err(SketchError::InvalidExpectedElements);
    }
    if !(target_fp > 0.0 && target_fp < 1.0) {
        return Err(SketchError::InvalidTargetFp(target_fp));
    }
    let x = expected_elements as f64;
    let ln2 = std::f64::consts::LN_2;
    let m_raw = -x * target_fp.ln() / (ln2 * ln2);
    let m = (m_raw.round() as usize).max(2);
    let k_raw = m as f64 / x * ln2;
    let k = (k_raw.round() as usize).max(1);
    Ok((m, k, k_raw))
}

/// Estimated false-positive probability of a filter with `m` counters and
/// `k` hash functions holding `x` elements: `(1 - e^(-kx/m))^k`.
pub fn estimated_fp(m: usize, k: usize, x: u64) -> f64 {
    let fill = 1.0 - (-(k as f64) * x as f64 / m as f64).exp();
    fill.powi(k as i32)
}

/// Common interface of the counting backends.
///
/// `remove` reports whether its precondition held (the element had a
/// positive count); the operation is still applied with the backend's own
/// arithmetic, so callers in validation mode can flag the violation.
pub trait CountingStructure {
    fn add(&mut self, bucket: BucketId) {
        self.add_n(bucket, 1);
    }
    fn add_n(&mut self, bucket: BucketId, amount: u64);
    fn count(&self, bucket: BucketId) -> u64;
    fn remove(&mut self, bucket: BucketId) -> bool;
    fn subtract_clamp(&mut self, delta: u64);
}

/// Counting Bloom filter over `m` counters of `b` bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountingFilter {
    params: FilterParams,
    counters: Vec<u64>,
    masked: bool,
}

impl CountingFilter {
    pub fn new(params: FilterParams) -> Self {
        Self {
            counters: vec![0; params.m],
            params,
            masked: false,
        }
    }

    /// Rebuild a filter from raw counter values (all must fit in `b` bits).
    pub fn from_parts(params: FilterParams, counters: Vec<u64>) -> Result<Self, SketchError> {
        if counters.len() != params.m {
            return Err(SketchError::InvalidParams(format!(
                "expected {} counters, got {}",
                params.m,
                counters.len()
            )));
        }
        let mask = params.counter_mask();
        if let Some(&value) = counters.iter().find(|&&c| c & !mask != 0) {
            return Err(SketchError::CounterOutOfRange { value, b: params.b });
        }
        Ok(Self {
            params,
            counters,
            masked: false,
        })
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    pub(crate) fn counters_mut(&mut self) -> &mut [u64] {
        &mut self.counters
    }

    /// Whether a perturbation is currently applied. Counting or thresholding
    /// a masked filter is a contract violation and panics.
    pub fn is_masked(&self) -> bool {
        self.masked
    }

    pub(crate) fn set_masked(&mut self, masked: bool) {
        self.masked = masked;
    }

    pub fn is_empty(&self) -> bool {
        self.counters.iter().all(|&c| c == 0)
    }

    /// Serialize to the fixed wire format (28-byte header + packed counters).
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(p.serialized_size());
        out.extend_from_slice(&(p.m as u64).to_le_bytes());
        out.extend_from_slice(&(p.k as u64).to_le_bytes());
        out.extend_from_slice(&p.b.to_le_bytes());
        out.extend_from_slice(&p.hash_seed.to_le_bytes());
        out.extend_from_slice(&pack_counters(&self.counters, p.b));
        out
    }

    /// Decode the wire format. The masked flag does not travel on the wire;
    /// decoded filters start unmasked.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SketchError> {
        if bytes.len() < HEADER_LEN {
            return Err(SketchError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let m64 = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let k64 = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let b = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let hash_seed = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        if m64 == 0 || m64 > usize::MAX as u64 || k64 == 0 || k64 > usize::MAX as u64 {
            return Err(SketchError::InvalidParams(format!(
                "bad header: m = {m64}, k = {k64}"
            )));
        }
        let params = FilterParams::new(m64 as usize, k64 as usize, b, hash_seed)?;
        let expected = params.serialized_size();
        if bytes.len() < expected {
            return Err(SketchError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() != expected {
            return Err(SketchError::LengthMismatch {
                expected,
                actual: bytes.len(),
            });
        }
        let counters = unpack_counters(&bytes[HEADER_LEN..], params.m, params.b)?;
        Ok(Self {
            params,
            counters,
            masked: false,
        })
    }
}

impl CountingStructure for CountingFilter {
    fn add_n(&mut self, bucket: BucketId, amount: u64) {
        let mask = self.params.counter_mask();
        for idx in self.params.indices(bucket) {
            self.counters[idx] = self.counters[idx].wrapping_add(amount) & mask;
        }
    }

    fn count(&self, bucket: BucketId) -> u64 {
        assert!(
            !self.masked,
            "count on a masked filter is meaningless; unmask first"
        );
        self.params
            .indices(bucket)
            .into_iter()
            .map(|idx| self.counters[idx])
            .min()
            .expect("k >= 1")
    }

    fn remove(&mut self, bucket: BucketId) -> bool {
        let mask = self.params.counter_mask();
        let mut ok = true;
        for idx in self.params.indices(bucket) {
            if !self.masked && self.counters[idx] == 0 {
                ok = false;
            }
            self.counters[idx] = self.counters[idx].wrapping_sub(1) & mask;
        }
        ok
    }

    fn subtract_clamp(&mut self, delta: u64) {
        assert!(
            !self.masked,
            "subtract_clamp on a masked filter is meaningless; unmask first"
        );
        for c in &mut self.counters {
            *c = c.saturating_sub(delta);
        }
    }
}

/// Exact multiset counter: the oracle backend.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExactCounter {
    counts: BTreeMap<u64, u64>,
}

impl ExactCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Distinct elements with positive count.
    pub fn support(&self) -> impl Iterator<Item = (BucketId, u64)> + '_ {
        self.counts.iter().map(|(&b, &c)| (BucketId(b), c))
    }

    /// Wire encoding: entry count (u32) then (bucket: u64, count: u64) pairs
    /// in ascending bucket order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.counts.len() * 16);
        out.extend_from_slice(&(self.counts.len() as u32).to_le_bytes());
        for (&bucket, &count) in &self.counts {
            out.extend_from_slice(&bucket.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SketchError> {
        if bytes.len() < 4 {
            return Err(SketchError::Truncated {
                expected: 4,
                actual: bytes.len(),
            });
        }
        let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let expected = 4 + n * 16;
        if bytes.len() < expected {
            return Err(SketchError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() != expected {
            return Err(SketchError::LengthMismatch {
                expected,
                actual: bytes.len(),
            });
        }
        let mut counts = BTreeMap::new();
        for i in 0..n {
            let off = 4 + i * 16;
            let bucket = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            let count = u64::from_le_bytes(bytes[off + 8..off + 16].try_into().unwrap());
            counts.insert(bucket, count);
        }
        Ok(Self { counts })
    }
}

impl CountingStructure for ExactCounter {
    fn add_n(&mut self, bucket: BucketId, amount: u64) {
        if amount > 0 {
            *self.counts.entry(bucket.0).or_insert(0) += amount;
        }
    }

    fn count(&self, bucket: BucketId) -> u64 {
        self.counts.get(&bucket.0).copied().unwrap_or(0)
    }

    fn remove(&mut self, bucket: BucketId) -> bool {
        match self.counts.get_mut(&bucket.0) {
            Some(c) if *c > 1 => {
                *c -= 1;
                true
            }
            Some(_) => {
                self.counts.remove(&bucket.0);
                true
            }
            None => false,
        }
    }

    fn subtract_clamp(&mut self, delta: u64) {
        self.counts.retain(|_, c| {
            *c = c.saturating_sub(delta);
            *c > 0
        });
    }
}

/// Which backend a scenario runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Cbf,
    Exact,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendKind::Cbf => write!(f, "cbf"),
            BackendKind::Exact => write!(f, "exact"),
        }
    }
}

/// Backend constructor: the filter parameters when the scenario runs on the
/// counting Bloom filter, or the exact multiset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendSpec {
    Cbf(FilterParams),
    Exact,
}

impl BackendSpec {
    pub fn kind(&self) -> BackendKind {
        match self {
            BackendSpec::Cbf(_) => BackendKind::Cbf,
            BackendSpec::Exact => BackendKind::Exact,
        }
    }

    pub fn empty(&self) -> CountingBackend {
        match self {
            BackendSpec::Cbf(params) => CountingBackend::Cbf(CountingFilter::new(*params)),
            BackendSpec::Exact => CountingBackend::Exact(ExactCounter::new()),
        }
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<CountingBackend, SketchError> {
        match self {
            BackendSpec::Cbf(_) => Ok(CountingBackend::Cbf(CountingFilter::from_bytes(bytes)?)),
            BackendSpec::Exact => Ok(CountingBackend::Exact(ExactCounter::from_bytes(bytes)?)),
        }
    }
}

/// A counting structure of either backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CountingBackend {
    Cbf(CountingFilter),
    Exact(ExactCounter),
}

impl CountingBackend {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            CountingBackend::Cbf(f) => f.to_bytes(),
            CountingBackend::Exact(e) => e.to_bytes(),
        }
    }

    pub fn as_filter(&self) -> Option<&CountingFilter> {
        match self {
            CountingBackend::Cbf(f) => Some(f),
            CountingBackend::Exact(_) => None,
        }
    }

    pub fn as_filter_mut(&mut self) -> Option<&mut CountingFilter> {
        match self {
            CountingBackend::Cbf(f) => Some(f),
            CountingBackend::Exact(_) => None,
        }
    }
}

impl CountingStructure for CountingBackend {
    fn add_n(&mut self, bucket: BucketId, amount: u64) {
        match self {
            CountingBackend::Cbf(f) => f.add_n(bucket, amount),
            CountingBackend::Exact(e) => e.add_n(bucket, amount),
        }
    }

    fn count(&self, bucket: BucketId) -> u64 {
        match self {
            CountingBackend::Cbf(f) => f.count(bucket),
            CountingBackend::Exact(e) => e.count(bucket),
        }
    }

    fn remove(&mut self, bucket: BucketId) -> bool {
        match self {
            CountingBackend::Cbf(f) => f.remove(bucket),
            CountingBackend::Exact(e) => e.remove(bucket),
        }
    }

    fn subtract_clamp(&mut self, delta: u64) {
        match self {
            CountingBackend::Cbf(f) => f.subtract_clamp(delta),
            CountingBackend::Exact(e) => e.subtract_clamp(delta),
        }
    }
}

const HEADER_LEN: usize = 28;

fn packed_len(m: usize, b: u32) -> usize {
    ((m as u128 * b as u128).div_ceil(8)) as usize
}

/// Pack counters at `b` bits each, LSB-first within the bit stream.
fn pack_counters(counters: &[u64], b: u32) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(counters.len(), b)];
    let mut bit_pos: usize = 0;
    for &c in counters {
        for j in 0..b {
            if (c >> j) & 1 == 1 {
                out[bit_pos / 8] |= 1 << (bit_pos % 8);
            }
            bit_pos += 1;
        }
    }
    out
}

fn unpack_counters(bytes: &[u8], m: usize, b: u32) -> Result<Vec<u64>, SketchError> {
    let mut counters = vec![0u64; m];
    let mut bit_pos: usize = 0;
    for c in counters.iter_mut() {
        for j in 0..b {
            if (bytes[bit_pos / 8] >> (bit_pos % 8)) & 1 == 1 {
                *c |= 1 << j;
            }
            bit_pos += 1;
        }
    }
    // padding bits beyond m*b must be zero so encoding is canonical
    while bit_pos < bytes.len() * 8 {
        if (bytes[bit_pos / 8] >> (bit_pos % 8)) & 1 == 1 {
            return Err(SketchError::InvalidPadding);
        }
        bit_pos += 1;
    }
    Ok(counters)
}
