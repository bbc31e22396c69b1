//! Factor aggregation.
//!
//! The exact aggregator is weighted geometric pooling,
//! `P(y) ∝ exp(Σ_i w_i · ln Φ_i(y))`, evaluated in log space with
//! max-subtraction. Every reduction over evidence items sums its terms in
//! sorted order so the result is bitwise independent of item order.

use serde::{Deserialize, Serialize};

use crate::error::{LpfError, Result};
use crate::factor::SoftFactor;
use crate::prob::{effective_sample_size, normalize, LabelDist, WeightVector};

/// Default constant for the calibration and robustness bounds.
pub const DEFAULT_BOUND_CONSTANT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Spn,
    Learned,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationResult {
    pub dist: LabelDist,
    pub k_eff: f64,
    pub weights_used: WeightVector,
    pub method: Method,
}

/// Sum that does not depend on the order of `values`.
pub(crate) fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn check_factors(factors: &[SoftFactor]) -> Result<usize> {
    let first = factors
        .first()
        .ok_or_else(|| LpfError::Range("need at least one factor".into()))?;
    let n = first.dist.len();
    for f in factors {
        if f.dist.len() != n {
            return Err(LpfError::Dimension {
                expected: n,
                got: f.dist.len(),
            });
        }
    }
    Ok(n)
}

fn k_eff_of(weights: &[f64]) -> Result<f64> {
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    effective_sample_size(&WeightVector::new(sorted)?)
}

/// Weighted log-linear pooling of the factors with their own confidence weights.
pub fn spn_aggregate(factors: &[SoftFactor]) -> Result<AggregationResult> {
    let weights: Vec<f64> = factors.iter().map(|f| f.weight).collect();
    spn_aggregate_weighted(factors, &weights)
}

/// Log-linear pooling with explicit weights (ignores the factors' own).
pub fn spn_aggregate_weighted(
    factors: &[SoftFactor],
    weights: &[f64],
) -> Result<AggregationResult> {
    let n = check_factors(factors)?;
    if weights.len() != factors.len() {
        return Err(LpfError::Dimension {
            expected: factors.len(),
            got: weights.len(),
        });
    }
    let weights_used = WeightVector::new(weights.to_vec())?;
    let mut scores = vec![0.0; n];
    let mut terms = Vec::with_capacity(factors.len());
    for (y, score) in scores.iter_mut().enumerate() {
        terms.clear();
        for (f, &w) in factors.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let p = f.dist.get(y);
            if p <= 0.0 {
                return Err(LpfError::Support(format!(
                    "factor {} has zero mass on label {y}",
                    f.source_id
                )));
            }
            terms.push(w * p.ln());
        }
        *score = order_free_sum(&mut terms);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnormalized: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    Ok(AggregationResult {
        dist: normalize(&unnormalized)?,
        k_eff: k_eff_of(weights)?,
        weights_used,
        method: Method::Spn,
    })
}

/// Arithmetic mean of the factor distributions.
pub fn uniform_aggregate(factors: &[SoftFactor]) -> Result<AggregationResult> {
    let n = check_factors(factors)?;
    let k = factors.len() as f64;
    let mut terms = Vec::with_capacity(factors.len());
    let mean: Vec<f64> = (0..n)
        .map(|y| {
            terms.clear();
            terms.extend(factors.iter().map(|f| f.dist.get(y)));
            order_free_sum(&mut terms) / k
        })
        .collect();
    Ok(AggregationResult {
        dist: normalize(&mean)?,
        k_eff: k,
        weights_used: WeightVector::ones(factors.len()),
        method: Method::Uniform,
    })
}

/// Worst-case L1 shift under corruption: `C · ε · δ · √K`.
pub fn robustness_bound(epsilon: f64, delta_item: f64, k: usize, c: f64) -> f64 {
    c * epsilon * delta_item * (k as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn factor(p: &[f64], w: f64) -> SoftFactor {
        SoftFactor {
            dist: LabelDist::new(p.to_vec()).unwrap(),
            weight: w,
            source_id: 0,
            m_used: 1,
        }
    }

    #[test]
    fn single_factor_identity() {
        let f = factor(&[0.2, 0.5, 0.3], 1.0);
        let r = spn_aggregate(std::slice::from_ref(&f)).unwrap();
        for (a, b) in r.dist.probs().iter().zip(f.dist.probs()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
        assert_eq!(r.k_eff, 1.0);
        assert_eq!(r.method, Method::Spn);
        assert_eq!(uniform_aggregate(&[f.clone()]).unwrap().dist, f.dist);
    }

    #[test]
    fn uniform_factors_pool_to_uniform() {
        let u = 1.0 / 3.0;
        let fs = vec![
            factor(&[u, u, u], 0.3),
            factor(&[u, u, u], 0.9),
            factor(&[u, u, u], 0.1),
        ];
        for &p in spn_aggregate(&fs).unwrap().dist.probs() {
            assert_abs_diff_eq!(p, u, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_factor_product() {
        let fs = vec![factor(&[0.8, 0.1, 0.1], 1.0), factor(&[0.1, 0.8, 0.1], 1.0)];
        let r = spn_aggregate(&fs).unwrap();
        assert_abs_diff_eq!(r.dist.get(0), 0.08 / 0.17, epsilon = 1e-12);
        assert_abs_diff_eq!(r.dist.get(1), 0.08 / 0.17, epsilon = 1e-12);
        assert_abs_diff_eq!(r.dist.get(2), 0.01 / 0.17, epsilon = 1e-12);
        assert_eq!(r.k_eff, 2.0);
    }

    #[test]
    fn zero_entry_is_a_support_error() {
        let fs = vec![factor(&[1.0, 0.0, 0.0], 1.0), factor(&[0.2, 0.4, 0.4], 1.0)];
        assert!(matches!(spn_aggregate(&fs), Err(LpfError::Support(_))));
        assert!(matches!(spn_aggregate(&[]), Err(LpfError::Range(_))));
    }

    #[test]
    fn uniform_examples() {
        let fs = vec![factor(&[1.0, 0.0, 0.0], 1.0), factor(&[0.0, 1.0, 0.0], 1.0)];
        let r = uniform_aggregate(&fs).unwrap();
        assert_eq!(r.dist.probs(), &[0.5, 0.5, 0.0]);
        assert_eq!(r.method, Method::Uniform);
    }

    #[test]
    fn robustness_bound_table() {
        for (eps, expected) in [
            (0.05, 0.316),
            (0.1, 0.632),
            (0.2, 1.265),
            (0.3, 1.897),
            (0.5, 3.162),
        ] {
            assert_abs_diff_eq!(
                robustness_bound(eps, 1.0, 10, 2.0),
                expected,
                epsilon = 1e-3
            );
        }
        assert_eq!(robustness_bound(0.0, 1.0, 10, 2.0), 0.0);
    }

    fn random_factor(rng: &mut Stream, n: usize) -> SoftFactor {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        SoftFactor {
            dist: normalize(&raw).unwrap(),
            weight: rng.random_range(0.0..=1.0),
            source_id: 0,
            m_used: 16,
        }
    }

    #[test]
    fn weight_scaling_preserves_argmax() {
        let mut rng = Stream::new(4);
        for _ in 0..1000 {
            let k = rng.random_range(1..8);
            let fs: Vec<_> = (0..k).map(|_| random_factor(&mut rng, 3)).collect();
            let w: Vec<f64> = fs.iter().map(|f| f.weight.max(0.05)).collect();
            let c = rng.random_range(0.05..1.0);
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            let a = spn_aggregate_weighted(&fs, &w).unwrap();
            let b = spn_aggregate_weighted(&fs, &scaled).unwrap();
            let (top_a, top_b) = (a.dist.argmax(), b.dist.argmax());
            if top_a != top_b {
                // Only exact ties may differ.
                assert_abs_diff_eq!(a.dist.get(top_a), a.dist.get(top_b), epsilon = 1e-12);
            }
            // Scaling is a temperature change on the pooled log-scores.
            let ratio_a = (a.dist.get(0) / a.dist.get(1)).ln();
            let ratio_b = (b.dist.get(0) / b.dist.get(1)).ln();
            assert_abs_diff_eq!(ratio_b, c * ratio_a, epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn outputs_are_distributions_and_order_free(seed in any::<u64>(), k in 1usize..12, n in 2usize..6) {
            let mut rng = Stream::new(seed);
            let mut fs: Vec<_> = (0..k).map(|_| random_factor(&mut rng, n)).collect();
            if fs.iter().all(|f| f.weight == 0.0) {
                fs[0].weight = 1.0;
            }
            let spn = spn_aggregate(&fs).unwrap();
            let uni = uniform_aggregate(&fs).unwrap();
            for r in [&spn, &uni] {
                prop_assert!(r.dist.probs().iter().all(|p| *p >= 0.0));
                prop_assert!((r.dist.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(r.k_eff >= 1.0 - 1e-12 && r.k_eff <= k as f64 + 1e-9);
            }
            fs.shuffle(&mut rng);
            prop_assert_eq!(spn_aggregate(&fs).unwrap().dist, spn.dist);
            prop_assert_eq!(uniform_aggregate(&fs).unwrap().dist, uni.dist);
        }
    }
}
