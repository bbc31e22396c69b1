//! Decoder and factor conversion.
//!
//! A [`Decoder`] maps a latent point to a label distribution. Each evidence
//! posterior is turned into a [`SoftFactor`] by Monte Carlo marginalization of
//! the decoder over reparameterized draws `z = μ + √var ⊙ ε`. A tensor-grid
//! Gauss–Hermite rule gives a deterministic reference for low dimensions.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LpfError, Result};
use crate::prob::{normalize, GaussianPosterior, LabelDist};
use crate::quadrature::GaussHermite;
use crate::rng::Stream;

/// Production Monte Carlo sample count.
pub const DEFAULT_MC_SAMPLES: usize = 16;

/// Largest latent dimension accepted by [`oracle_factor`].
pub const ORACLE_MAX_DIM: usize = 3;

/// Minimum quadrature order accepted by [`oracle_factor`].
pub const ORACLE_MIN_ORDER: usize = 20;

/// Order used wherever the oracle serves as ground truth.
pub const ORACLE_DEFAULT_ORDER: usize = 64;

/// Linear-softmax decoder mixed with a uniform floor:
/// `p(y|z) = (1 − floor)·softmax((Wz + b)/T)_y + floor/|Y|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DecoderSpec", into = "DecoderSpec")]
pub struct Decoder {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    temperature: f64,
    floor: f64,
}

#[derive(Serialize, Deserialize)]
struct DecoderSpec {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    temperature: f64,
    floor: f64,
}

impl TryFrom<DecoderSpec> for Decoder {
    type Error = LpfError;

    fn try_from(s: DecoderSpec) -> Result<Self> {
        Decoder::new(s.weight, s.bias, s.temperature, s.floor)
    }
}

impl From<Decoder> for DecoderSpec {
    fn from(d: Decoder) -> Self {
        DecoderSpec {
            weight: d.weight,
            bias: d.bias,
            temperature: d.temperature,
            floor: d.floor,
        }
    }
}

impl Decoder {
    pub fn new(
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
        temperature: f64,
        floor: f64,
    ) -> Result<Self> {
        if weight.len() < 2 || weight.len() != bias.len() {
            return Err(LpfError::Config(format!(
                "decoder needs at least two labels and matching bias ({} rows, {} biases)",
                weight.len(),
                bias.len()
            )));
        }
        let d = weight[0].len();
        if d == 0 || weight.iter().any(|row| row.len() != d) {
            return Err(LpfError::Config(
                "decoder weight rows must share a nonzero width".into(),
            ));
        }
        if weight.iter().flatten().chain(&bias).any(|x| !x.is_finite()) {
            return Err(LpfError::Config("decoder parameters must be finite".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(LpfError::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if !(0.0..1.0).contains(&floor) {
            return Err(LpfError::Config(format!("floor {floor} outside [0, 1)")));
        }
        Ok(Self {
            weight,
            bias,
            temperature,
            floor,
        })
    }

    /// Bayes decoder for isotropic class-conditional Gaussians centered on
    /// `prototypes` with standard deviation `noise`.
    pub fn matched(prototypes: &[Vec<f64>], noise: f64, floor: f64) -> Result<Self> {
        let bias = prototypes
            .iter()
            .map(|p| -0.5 * p.iter().map(|x| x * x).sum::<f64>())
            .collect();
        Self::new(prototypes.to_vec(), bias, noise * noise, floor)
    }

    pub fn num_labels(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weight[0].len()
    }

    pub fn weight(&self) -> &[Vec<f64>] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn with_floor(&self, floor: f64) -> Result<Self> {
        Self::new(
            self.weight.clone(),
            self.bias.clone(),
            self.temperature,
            floor,
        )
    }

    /// Softmax part only, written into `out`. Assumes `z.len() == dim()`.
    pub(crate) fn softmax_into(&self, z: &[f64], out: &mut [f64]) {
        let mut max = f64::NEG_INFINITY;
        for (o, (row, b)) in out.iter_mut().zip(self.weight.iter().zip(&self.bias)) {
            let dot: f64 = row.iter().zip(z).map(|(w, x)| w * x).sum();
            *o = (dot + b) / self.temperature;
            max = max.max(*o);
        }
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    /// Full floored distribution written into `out`.
    pub(crate) fn decode_into(&self, z: &[f64], out: &mut [f64]) {
        self.softmax_into(z, out);
        let uniform = self.floor / out.len() as f64;
        for o in out.iter_mut() {
            *o = (1.0 - self.floor) * *o + uniform;
        }
    }
}

/// Label distribution at latent point `z`.
pub fn decode(decoder: &Decoder, z: &[f64]) -> Result<LabelDist> {
    if z.len() != decoder.dim() {
        return Err(LpfError::Dimension {
            expected: decoder.dim(),
            got: z.len(),
        });
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(LpfError::Numeric("latent point".into()));
    }
    let mut out = vec![0.0; decoder.num_labels()];
    decoder.decode_into(z, &mut out);
    Ok(LabelDist::from_raw_unchecked(out))
}

fn draw_latent(posterior: &GaussianPosterior, stream: &mut Stream, z: &mut [f64]) {
    for ((zj, m), v) in z.iter_mut().zip(&posterior.mean).zip(&posterior.var) {
        let eps: f64 = StandardNormal.sample(stream);
        *zj = m + v.sqrt() * eps;
    }
}

/// `M` reparameterized draws from the posterior.
pub fn sample_latents(
    posterior: &GaussianPosterior,
    m: usize,
    stream: &mut Stream,
) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            let mut z = vec![0.0; posterior.dim()];
            draw_latent(posterior, stream, &mut z);
            z
        })
        .collect()
}

/// A marginalized evidence factor with its confidence weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftFactor {
    pub dist: LabelDist,
    pub weight: f64,
    pub source_id: u64,
    pub m_used: usize,
}

/// `w = 1 / (1 + ‖Σ‖_F)`.
pub fn confidence_weight(posterior: &GaussianPosterior) -> f64 {
    1.0 / (1.0 + posterior.frobenius_norm())
}

/// Monte Carlo soft factor from `m` draws.
pub fn estimate_factor(
    decoder: &Decoder,
    posterior: &GaussianPosterior,
    m: usize,
    stream: &mut Stream,
) -> Result<SoftFactor> {
    if m == 0 {
        return Err(LpfError::Range(
            "need at least one Monte Carlo sample".into(),
        ));
    }
    if posterior.dim() != decoder.dim() {
        return Err(LpfError::Dimension {
            expected: decoder.dim(),
            got: posterior.dim(),
        });
    }
    let n = decoder.num_labels();
    let mut z = vec![0.0; posterior.dim()];
    let mut p = vec![0.0; n];
    let mut acc = vec![0.0; n];
    for _ in 0..m {
        draw_latent(posterior, stream, &mut z);
        decoder.decode_into(&z, &mut p);
        for (a, x) in acc.iter_mut().zip(&p) {
            *a += x;
        }
    }
    for a in acc.iter_mut() {
        *a /= m as f64;
    }
    Ok(SoftFactor {
        dist: normalize(&acc)?,
        weight: confidence_weight(posterior),
        source_id: posterior.source_id,
        m_used: m,
    })
}

/// Factors for every item of an entity, item `i` drawing from `stream.child(i)`.
pub fn estimate_factors(
    decoder: &Decoder,
    evidence: &[GaussianPosterior],
    m: usize,
    stream: &Stream,
) -> Result<Vec<SoftFactor>> {
    evidence
        .iter()
        .enumerate()
        .map(|(i, p)| estimate_factor(decoder, p, m, &mut stream.child(i as u64)))
        .collect()
}

/// Gauss–Hermite tensor-grid value of `E_z[decode(z)]`.
pub fn oracle_factor(
    decoder: &Decoder,
    posterior: &GaussianPosterior,
    order: usize,
) -> Result<LabelDist> {
    let d = posterior.dim();
    if d > ORACLE_MAX_DIM {
        return Err(LpfError::UnsupportedDimension {
            max: ORACLE_MAX_DIM,
            got: d,
        });
    }
    if order < ORACLE_MIN_ORDER {
        return Err(LpfError::Range(format!(
            "quadrature order {order} below {ORACLE_MIN_ORDER}"
        )));
    }
    if d != decoder.dim() {
        return Err(LpfError::Dimension {
            expected: decoder.dim(),
            got: d,
        });
    }
    let rule = GaussHermite::new(order)?;
    let sd: Vec<f64> = posterior.var.iter().map(|v| v.sqrt()).collect();
    let n = decoder.num_labels();
    let mut acc = vec![0.0; n];
    let mut z = vec![0.0; d];
    let mut p = vec![0.0; n];
    for (x, w) in rule.standard_normal_grid(d) {
        for j in 0..d {
            z[j] = posterior.mean[j] + sd[j] * x[j];
        }
        decoder.decode_into(&z, &mut p);
        for (a, pi) in acc.iter_mut().zip(&p) {
            *a += w * pi;
        }
    }
    normalize(&acc)
}

/// Hoeffding plus union bound on the max-class Monte Carlo error:
/// `sqrt(ln(2|Y|/δ) / (2M))`.
pub fn mc_error_bound(m: usize, num_labels: usize, delta: f64) -> f64 {
    ((2.0 * num_labels as f64 / delta).ln() / (2.0 * m as f64)).sqrt()
}
