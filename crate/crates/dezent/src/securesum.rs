//! Ring secure summation over the counter array.
//!
//! The cycle coordinator samples a random perturbation vector, adds it
//! counter-wise (mod `2^b`) to the empty filter before the collection round,
//! and subtracts it again when the filter returns. Intermediate nodes only
//! ever see masked partial sums; the perturbation cancels exactly at
//! finalization because all counter arithmetic lives in the group `Z_{2^b}`.
//!
//! The perturbation never travels on the wire and the masked flag is
//! cycle-local bookkeeping: on the wire, masked and unmasked filters are
//! indistinguishable, which is the point.

use rand::Rng;

use crate::sketch::CountingFilter;

#[derive(Debug, thiserror::Error)]
pub enum SecureSumError {
    #[error("perturbation sampled for (m = {pert_m}, b = {pert_b}) cannot mask filter with (m = {filter_m}, b = {filter_b})")]
    FingerprintMismatch {
        pert_m: usize,
        pert_b: u32,
        filter_m: usize,
        filter_b: u32,
    },
    #[error("unmasking a filter that is not masked")]
    NotMasked,
    #[error(
        "headroom violation: counter {index} holds {value} after unmasking, above the plausibility ceiling {ceiling}"
    )]
    HeadroomViolation { index: usize, value: u64, ceiling: u64 },
}

/// How perturbation components are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationPolicy {
    /// Uniform over the whole group `[0, 2^b)`: perfect per-counter hiding.
    FullGroup,
    /// Uniform over `[1, max]`, for deployments that bound the noise to
    /// shrink `b`.
    Bounded { max: u64 },
    /// Zero noise (test and oracle mode).
    Disabled,
}

/// The random vector the coordinator holds for one cycle. Length and counter
/// width are recorded so it can only mask the filter it was sampled for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationVector {
    values: Vec<u64>,
    m: usize,
    b: u32,
}

impl PerturbationVector {
    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    fn matches(&self, filter: &CountingFilter) -> bool {
        self.m == filter.params().m && self.b == filter.params().b
    }
}

/// Sample a perturbation for an `m`-counter, `b`-bit filter.
pub fn sample_perturbation<R: Rng>(
    m: usize,
    b: u32,
    policy: PerturbationPolicy,
    rng: &mut R,
) -> PerturbationVector {
    let values = match policy {
        PerturbationPolicy::FullGroup => {
            if b == 64 {
                (0..m).map(|_| rng.random::<u64>()).collect()
            } else {
                (0..m).map(|_| rng.random_range(0..(1u64 << b))).collect()
            }
        }
        PerturbationPolicy::Bounded { max } => {
            let cap = if b == 64 {
                max.max(1)
            } else {
                max.clamp(1, (1u64 << b) - 1)
            };
            (0..m).map(|_| rng.random_range(1..=cap)).collect()
        }
        PerturbationPolicy::Disabled => vec![0; m],
    };
    PerturbationVector { values, m, b }
}

/// Add the perturbation counter-wise (mod `2^b`) and flag the filter masked.
pub fn mask(filter: &mut CountingFilter, r: &PerturbationVector) -> Result<(), SecureSumError> {
    if !r.matches(filter) {
        return Err(SecureSumError::FingerprintMismatch {
            pert_m: r.m,
            pert_b: r.b,
            filter_m: filter.params().m,
            filter_b: filter.params().b,
        });
    }
    let b = filter.params().b;
    let modulus_mask = if b == 64 { u64::MAX } else { (1u64 << b) - 1 };
    for (c, &off) in filter.counters_mut().iter_mut().zip(&r.values) {
        *c = c.wrapping_add(off) & modulus_mask;
    }
    filter.set_masked(true);
    Ok(())
}

/// Subtract the perturbation counter-wise (mod `2^b`) and clear the masked
/// flag. With `ceiling` set, any resulting counter above it flags the cycle
/// invalid: true aggregated counts must fit well below `2^b` for the group
/// arithmetic to be lossless, so an implausibly large unmasked counter means
/// the headroom contract was broken.
pub fn unmask(
    filter: &mut CountingFilter,
    r: &PerturbationVector,
    ceiling: Option<u64>,
) -> Result<(), SecureSumError> {
    if !filter.is_masked() {
        return Err(SecureSumError::NotMasked);
    }
    if !r.matches(filter) {
        return Err(SecureSumError::FingerprintMismatch {
            pert_m: r.m,
            pert_b: r.b,
            filter_m: filter.params().m,
            filter_b: filter.params().b,
        });
    }
    let b = filter.params().b;
    let modulus_mask = if b == 64 { u64::MAX } else { (1u64 << b) - 1 };
    for (c, &off) in filter.counters_mut().iter_mut().zip(&r.values) {
        *c = c.wrapping_sub(off) & modulus_mask;
    }
    filter.set_masked(false);
    if let Some(ceiling) = ceiling {
        if let Some((index, &value)) = filter
            .counters()
            .iter()
            .enumerate()
            .find(|&(_, &c)| c > ceiling)
        {
            return Err(SecureSumError::HeadroomViolation { index, value, ceiling });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anonymizer::BucketId;
    use crate::sketch::{CountingStructure, FilterParams};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn params(m: usize, b: u32) -> FilterParams {
        FilterParams::new(m, 3, b, 7).unwrap()
    }

    #[test]
    fn sampling_is_reproducible_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r1 = sample_perturbation(4, 8, PerturbationPolicy::FullGroup, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r2 = sample_perturbation(4, 8, PerturbationPolicy::FullGroup, &mut rng);
        assert_eq!(r1, r2);
        assert!(r1.values().iter().all(|&v| v < 256));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r3 = sample_perturbation(4, 8, PerturbationPolicy::FullGroup, &mut rng);
        assert_ne!(r1, r3);
    }

    #[test]
    fn bounded_policy_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = sample_perturbation(100, 8, PerturbationPolicy::Bounded { max: 10 }, &mut rng);
        assert!(r.values().iter().all(|&v| (1..=10).contains(&v)));

        let z = sample_perturbation(5, 8, PerturbationPolicy::Disabled, &mut rng);
        assert!(z.is_zero());
    }

    #[test]
    fn component_distribution_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut histogram = [0u64; 256];
        let samples = 100_000;
        for _ in 0..samples {
            let r = sample_perturbation(1, 8, PerturbationPolicy::FullGroup, &mut rng);
            histogram[r.values()[0] as usize] += 1;
        }
        let expected = samples as f64 / 256.0;
        let stat: f64 = histogram
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let p = 1.0 - ChiSquared::new(255.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square p = {p}, stat = {stat}");
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let mut f = CountingFilter::new(params(8, 8));
        f.add(BucketId(3));
        let before = f.clone();
        let r = PerturbationVector { values: vec![0; 8], m: 8, b: 8 };
        mask(&mut f, &r).unwrap();
        assert!(f.is_masked());
        assert_eq!(f.counters(), before.counters());
        unmask(&mut f, &r, None).unwrap();
        assert_eq!(f, before);
    }

    #[test]
    fn masking_wraps_mod_two_b() {
        let p = params(1, 8);
        let mut f = CountingFilter::from_parts(p, vec![250]).unwrap();
        let r = PerturbationVector { values: vec![10], m: 1, b: 8 };
        mask(&mut f, &r).unwrap();
        assert_eq!(f.counters(), &[4]);

        let mut f = CountingFilter::from_parts(p, vec![4]).unwrap();
        f.set_masked(true);
        let r = PerturbationVector { values: vec![250], m: 1, b: 8 };
        unmask(&mut f, &r, None).unwrap();
        assert_eq!(f.counters(), &[10]);
    }

    #[test]
    fn mask_unmask_round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = params(32, 8);
            let mut f = CountingFilter::new(p);
            use rand::Rng;
            for _ in 0..rng.random_range(0..40) {
                f.add(BucketId(rng.random_range(0..10)));
            }
            let before = f.clone();
            let r = sample_perturbation(32, 8, PerturbationPolicy::FullGroup, &mut rng);
            mask(&mut f, &r).unwrap();
            unmask(&mut f, &r, None).unwrap();
            assert_eq!(f, before);
        }
    }

    #[test]
    fn ring_aggregate_equals_unmasked_path() {
        // contributions folded into a masked filter equal the filter built
        // without masking once the perturbation is removed
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        use rand::Rng;
        for _ in 0..100 {
            let m = rng.random_range(16..64);
            let p = FilterParams::new(m, 3, 8, rng.random()).unwrap();
            let n_nodes = rng.random_range(3..=20);

            let r = sample_perturbation(m, 8, PerturbationPolicy::FullGroup, &mut rng);
            let mut masked = CountingFilter::new(p);
            mask(&mut masked, &r).unwrap();
            let mut plain = CountingFilter::new(p);

            for _ in 0..n_nodes {
                for _ in 0..rng.random_range(0..8) {
                    let x = BucketId(rng.random_range(0..30));
                    masked.add(x);
                    plain.add(x);
                }
            }
            unmask(&mut masked, &r, None).unwrap();
            assert_eq!(masked, plain);
        }
    }

    #[test]
    fn empty_round_trip_stays_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params(16, 8);
        let mut f = CountingFilter::new(p);
        let r = sample_perturbation(16, 8, PerturbationPolicy::FullGroup, &mut rng);
        mask(&mut f, &r).unwrap();
        unmask(&mut f, &r, None).unwrap();
        assert!(f.is_empty());
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut f = CountingFilter::new(params(8, 8));
        let r = sample_perturbation(9, 8, PerturbationPolicy::FullGroup, &mut rng);
        assert!(mask(&mut f, &r).is_err());
        let r = sample_perturbation(8, 16, PerturbationPolicy::FullGroup, &mut rng);
        assert!(mask(&mut f, &r).is_err());
    }

    #[test]
    fn headroom_violation_is_flagged() {
        let p = params(4, 8);
        let mut f = CountingFilter::from_parts(p, vec![1, 2, 200, 0]).unwrap();
        let r = PerturbationVector { values: vec![0; 4], m: 4, b: 8 };
        mask(&mut f, &r).unwrap();
        let err = unmask(&mut f, &r, Some(100)).unwrap_err();
        match err {
            SecureSumError::HeadroomViolation { index, value, ceiling } => {
                assert_eq!((index, value, ceiling), (2, 200, 100));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unmask_requires_masked_filter() {
        let mut f = CountingFilter::new(params(4, 8));
        let r = PerturbationVector { values: vec![0; 4], m: 4, b: 8 };
        assert!(matches!(
            unmask(&mut f, &r, None),
            Err(SecureSumError::NotMasked)
        ));
    }
}
