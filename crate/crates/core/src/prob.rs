//! Probability primitives shared by every other module.
//!
//! [`LabelDist`] is the common output currency: a probability vector over a
//! finite label space. All entropies and divergences are reported in bits.

use serde::{Deserialize, Serialize};

use crate::error::{LpfError, Result};

/// Tolerance on `Σp = 1` accepted by [`LabelDist::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Inputs whose sum is already this close to one are returned unchanged by
/// [`normalize`], which makes normalization exactly idempotent.
const FIXED_POINT_TOLERANCE: f64 = 1e-12;

/// A probability vector over `|Y|` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDist {
    probs: Vec<f64>,
}

impl LabelDist {
    /// Wraps an already-normalized vector, checking the simplex invariants.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(LpfError::Normalization("empty label space".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(LpfError::Normalization(format!("invalid entry {bad}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(LpfError::Normalization(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Uniform distribution over `n` labels.
    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "label space must be non-empty");
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// Point mass on `label`.
    pub fn one_hot(n: usize, label: usize) -> Self {
        assert!(label < n, "label {label} out of range for {n} labels");
        let mut probs = vec![0.0; n];
        probs[label] = 1.0;
        Self { probs }
    }

    pub(crate) fn from_raw_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, label: usize) -> f64 {
        self.probs[label]
    }

    /// Largest probability; the "confidence" used for calibration.
    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn argmax(&self) -> usize {
        argmax_label(self)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

impl TryFrom<Vec<f64>> for LabelDist {
    type Error = LpfError;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<LabelDist> for Vec<f64> {
    fn from(value: LabelDist) -> Self {
        value.probs
    }
}

/// Confidence weights in `[0, 1]`, one per evidence item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(bad) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(LpfError::Range(format!("weight {bad} outside [0, 1]")));
        }
        Ok(Self { weights })
    }

    pub fn ones(k: usize) -> Self {
        Self {
            weights: vec![1.0; k],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = LpfError;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(value: WeightVector) -> Self {
        value.weights
    }
}

/// Diagonal-covariance Gaussian over the latent space, one per evidence item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    #[serde(default)]
    pub source_id: u64,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, source_id: u64) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(LpfError::Dimension {
                expected: mean.len(),
                got: var.len(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(LpfError::Numeric("posterior mean".into()));
        }
        if let Some(bad) = var.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(LpfError::Range(format!(
                "posterior variance {bad} must be positive"
            )));
        }
        Ok(Self {
            mean,
            var,
            source_id,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Frobenius norm of the diagonal covariance, `sqrt(Σ var_j²)`.
    pub fn frobenius_norm(&self) -> f64 {
        self.var.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Divides a nonnegative vector by its sum.
pub fn normalize(raw: &[f64]) -> Result<LabelDist> {
    if raw.is_empty() {
        return Err(LpfError::Normalization("empty vector".into()));
    }
    if let Some(bad) = raw.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(LpfError::Normalization(format!("invalid entry {bad}")));
    }
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return Err(LpfError::Normalization("all entries are zero".into()));
    }
    if !sum.is_finite() {
        return Err(LpfError::Normalization("sum overflowed".into()));
    }
    if (sum - 1.0).abs() <= FIXED_POINT_TOLERANCE {
        return Ok(LabelDist {
            probs: raw.to_vec(),
        });
    }
    Ok(LabelDist {
        probs: raw.iter().map(|x| x / sum).collect(),
    })
}

/// Shannon entropy in bits with `0·log 0 = 0`.
pub fn entropy_bits(p: &LabelDist) -> f64 {
    let h: f64 = p
        .probs
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.log2())
        .sum();
    h.max(0.0)
}

/// `KL(p ‖ q)` in bits.
pub fn kl_bits(p: &LabelDist, q: &LabelDist) -> Result<f64> {
    check_same_len(p.len(), q.len())?;
    let mut kl = 0.0;
    for (label, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(LpfError::Support(format!(
                "q has zero mass on label {label} where p > 0"
            )));
        }
        kl += pi * (pi / qi).log2();
    }
    Ok(kl.max(0.0))
}

/// `Σ |p_i − q_i|`, in `[0, 2]`.
pub fn l1_distance(p: &LabelDist, q: &LabelDist) -> Result<f64> {
    check_same_len(p.len(), q.len())?;
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Kish effective sample size `(Σw)² / Σw²`.
pub fn effective_sample_size(w: &WeightVector) -> Result<f64> {
    let sum: f64 = w.weights.iter().sum();
    let sum_sq: f64 = w.weights.iter().map(|x| x * x).sum();
    if sum_sq == 0.0 {
        return Err(LpfError::DegenerateWeights);
    }
    Ok(sum * sum / sum_sq)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax_label(p: &LabelDist) -> usize {
    let mut best = 0;
    for (i, &x) in p.probs.iter().enumerate().skip(1) {
        if x > p.probs[best] {
            best = i;
        }
    }
    best
}

fn check_same_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(LpfError::Dimension { expected, got });
    }
    Ok(())
}
