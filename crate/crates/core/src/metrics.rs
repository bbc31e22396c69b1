//! Calibration, information and uncertainty measurements, and the closed-form
//! bound calculators that accompany them.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregate::order_free_sum;
use crate::error::{LpfError, Result};
use crate::factor::{Decoder, SoftFactor};
use crate::prob::{entropy_bits, kl_bits, GaussianPosterior, LabelDist};
use crate::rng::Stream;

pub const DEFAULT_BINS: usize = 10;

/// Constant of the `C/√K` curve reported next to the sample-complexity sweep.
pub const SAMPLE_COMPLEXITY_CONSTANT: f64 = 24.28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
    pub total: usize,
}

#[derive(Serialize)]
struct BinRow {
    bin_lo: f64,
    bin_hi: f64,
    mean_conf: f64,
    accuracy: f64,
    count: usize,
}

impl ReliabilityTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for b in &self.bins {
            w.serialize(BinRow {
                bin_lo: b.lo,
                bin_hi: b.hi,
                mean_conf: b.mean_confidence,
                accuracy: b.accuracy,
                count: b.count,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Index of the right-inclusive bin holding `conf`: `[0, 1/B]`, `(1/B, 2/B]`, ...
pub fn bin_index(conf: f64, bins: usize) -> usize {
    (0..bins)
        .find(|&k| conf <= (k + 1) as f64 / bins as f64)
        .unwrap_or(bins - 1)
}

/// Expected calibration error with equal-width bins on max-probability confidence.
pub fn ece(predictions: &[LabelDist], labels: &[usize], bins: usize) -> Result<ReliabilityTable> {
    if predictions.len() != labels.len() {
        return Err(LpfError::Dimension {
            expected: predictions.len(),
            got: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(LpfError::InsufficientData("no predictions".into()));
    }
    if bins == 0 {
        return Err(LpfError::Range("bin count must be positive".into()));
    }
    let mut conf: Vec<Vec<f64>> = vec![Vec::new(); bins];
    let mut hits = vec![0usize; bins];
    for (p, &y) in predictions.iter().zip(labels) {
        if y >= p.len() {
            return Err(LpfError::Range(format!("label {y} outside 0..{}", p.len())));
        }
        let c = p.max_prob();
        let k = bin_index(c, bins);
        conf[k].push(c);
        hits[k] += usize::from(p.argmax() == y);
    }
    let total = predictions.len();
    let mut table = Vec::with_capacity(bins);
    let mut gaps = Vec::with_capacity(bins);
    for (k, (mut c, h)) in conf.into_iter().zip(hits).enumerate() {
        let count = c.len();
        let (mean_confidence, accuracy) = if count == 0 {
            (0.0, 0.0)
        } else {
            (
                order_free_sum(&mut c) / count as f64,
                h as f64 / count as f64,
            )
        };
        if count > 0 {
            gaps.push(count as f64 / total as f64 * (accuracy - mean_confidence).abs());
        }
        table.push(ReliabilityBin {
            lo: k as f64 / bins as f64,
            hi: (k + 1) as f64 / bins as f64,
            mean_confidence,
            accuracy,
            count,
        });
    }
    let ece = gaps.iter().sum::<f64>().clamp(0.0, 1.0);
    Ok(ReliabilityTable {
        bins: table,
        ece,
        total,
    })
}

/// `ε + C / √K_eff`.
pub fn calibration_bound(epsilon_individual: f64, k_eff: f64, c: f64) -> f64 {
    epsilon_individual + c / k_eff.sqrt()
}

/// `sqrt(2 ln(2|Y|/δ))`, the constant the concentration argument yields.
pub fn theoretical_calibration_constant(delta: f64, num_labels: usize) -> f64 {
    (2.0 * (2.0 * num_labels as f64 / delta).ln()).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBreakdown {
    pub total: f64,
    pub epistemic: f64,
    pub aleatoric: f64,
    pub decomposition_error: f64,
}

/// Splits predictive variance under a Gaussian mixture over latents.
///
/// Draws `m` latents (component chosen by `weights`), then
/// aleatoric = mean of `Σ_y p(1−p)`, epistemic = `Σ_y` population variance of `p_y`,
/// total = `Σ_y p̄(1−p̄)`.
pub fn uncertainty_decomposition(
    decoder: &Decoder,
    mixture: &[GaussianPosterior],
    weights: &[f64],
    m: usize,
    stream: &mut Stream,
) -> Result<UncertaintyBreakdown> {
    if m < 2 {
        return Err(LpfError::Range("need at least two latent samples".into()));
    }
    if mixture.is_empty() || mixture.len() != weights.len() {
        return Err(LpfError::Dimension {
            expected: mixture.len().max(1),
            got: weights.len(),
        });
    }
    for p in mixture {
        if p.dim() != decoder.dim() {
            return Err(LpfError::Dimension {
                expected: decoder.dim(),
                got: p.dim(),
            });
        }
    }
    let pick = WeightedIndex::new(weights).map_err(|_| LpfError::DegenerateWeights)?;
    let n = decoder.num_labels();
    let mut samples = vec![vec![0.0; n]; m];
    let mut z = vec![0.0; decoder.dim()];
    for row in samples.iter_mut() {
        let post = &mixture[pick.sample(stream)];
        for ((zj, mu), v) in z.iter_mut().zip(&post.mean).zip(&post.var) {
            let eps: f64 = StandardNormal.sample(stream);
            *zj = mu + v.sqrt() * eps;
        }
        decoder.decode_into(&z, row);
    }
    let mf = m as f64;
    let mean: Vec<f64> = (0..n)
        .map(|y| samples.iter().map(|s| s[y]).sum::<f64>() / mf)
        .collect();
    let aleatoric = samples
        .iter()
        .map(|s| s.iter().map(|p| p * (1.0 - p)).sum::<f64>())
        .sum::<f64>()
        / mf;
    let epistemic: f64 = (0..n)
        .map(|y| {
            samples
                .iter()
                .map(|s| (s[y] - mean[y]).powi(2))
                .sum::<f64>()
                / mf
        })
        .sum();
    let total: f64 = mean.iter().map(|p| p * (1.0 - p)).sum();
    Ok(UncertaintyBreakdown {
        total,
        epistemic,
        aleatoric,
        decomposition_error: (total - (epistemic + aleatoric)).abs() / total.max(1e-12),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoBoundReport {
    pub h_y: f64,
    pub h_y_given_e: f64,
    pub noise: f64,
    pub lower_bound: f64,
    pub achievable_bound: f64,
    pub empirical_ece: f64,
    pub ratio: f64,
}

/// `(max(H̄, noise/2), max(H̄, noise/2) + 1/(2√K))`.
pub fn info_bounds(h_y_given_e: f64, noise: f64, k_avg: f64) -> (f64, f64) {
    let lower = h_y_given_e.max(0.5 * noise);
    (lower, lower + 0.5 / k_avg.sqrt())
}

/// Label entropy, mean factor entropy, mean pairwise factor KL and the
/// resulting calibration floor for a set of entities.
pub fn info_bound_report(
    factors_per_entity: &[Vec<SoftFactor>],
    predictions: &[LabelDist],
    labels: &[usize],
    k_avg: f64,
) -> Result<InfoBoundReport> {
    if labels.len() < 2 {
        return Err(LpfError::InsufficientData(
            "need at least two entities".into(),
        ));
    }
    let table = ece(predictions, labels, DEFAULT_BINS)?;
    let n = predictions[0].len();
    let mut freq = vec![0.0; n];
    for &y in labels {
        freq[y] += 1.0;
    }
    let label_dist = crate::prob::normalize(&freq)?;
    let h_y = entropy_bits(&label_dist);

    let pooled: Vec<&LabelDist> = factors_per_entity
        .iter()
        .flatten()
        .map(|f| &f.dist)
        .collect();
    if pooled.is_empty() {
        return Err(LpfError::InsufficientData("no factors".into()));
    }
    let h_y_given_e = pooled.iter().map(|p| entropy_bits(p)).sum::<f64>() / pooled.len() as f64;
    let mut kl_total = 0.0;
    let mut pairs = 0usize;
    for (i, p) in pooled.iter().enumerate() {
        for (j, q) in pooled.iter().enumerate() {
            if i != j {
                kl_total += kl_bits(p, q)?;
                pairs += 1;
            }
        }
    }
    let noise = if pairs == 0 {
        0.0
    } else {
        kl_total / pairs as f64
    };
    let (lower_bound, achievable_bound) = info_bounds(h_y_given_e, noise, k_avg);
    Ok(InfoBoundReport {
        h_y,
        h_y_given_e,
        noise,
        lower_bound,
        achievable_bound,
        empirical_ece: table.ece,
        ratio: table.ece / achievable_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseSqrtFit {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
}

impl InverseSqrtFit {
    pub fn predict(&self, k: f64) -> f64 {
        self.a / k.sqrt() + self.b
    }
}

/// Least squares fit of `ece ≈ a/√K + b`.
pub fn fit_inverse_sqrt(k_values: &[f64], ece_values: &[f64]) -> Result<InverseSqrtFit> {
    if k_values.len() != ece_values.len() {
        return Err(LpfError::Dimension {
            expected: k_values.len(),
            got: ece_values.len(),
        });
    }
    if k_values.iter().any(|k| !(*k > 0.0)) {
        return Err(LpfError::Range("K values must be positive".into()));
    }
    let mut distinct = k_values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(LpfError::SingularFit("all K values are equal".into()));
    }
    if distinct.len() < 3 {
        return Err(LpfError::InsufficientData(
            "need at least three distinct K values".into(),
        ));
    }
    let x: Vec<f64> = k_values.iter().map(|k| 1.0 / k.sqrt()).collect();
    let n = x.len() as f64;
    let x_bar = x.iter().sum::<f64>() / n;
    let y_bar = ece_values.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|xi| (xi - x_bar).powi(2)).sum();
    let sxy: f64 = x
        .iter()
        .zip(ece_values)
        .map(|(xi, yi)| (xi - x_bar) * (yi - y_bar))
        .sum();
    let a = sxy / sxx;
    let b = y_bar - a * x_bar;
    let ss_res: f64 = x
        .iter()
        .zip(ece_values)
        .map(|(xi, yi)| (yi - a * xi - b).powi(2))
        .sum();
    let ss_tot: f64 = ece_values.iter().map(|yi| (yi - y_bar).powi(2)).sum();
    // Constant responses: treat rounding-level spread as none.
    let r2 = if ss_tot <= 1e-28 * n * (1.0 + y_bar * y_bar) {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(InverseSqrtFit { a, b, r2 })
}

/// Smallest `K` with `C/√K ≤ ε`: `⌈C²/ε²⌉`.
pub fn sample_complexity(epsilon_target: f64, c: f64) -> Result<u64> {
    if !(epsilon_target > 0.0) {
        return Err(LpfError::Range(format!(
            "target {epsilon_target} must be positive"
        )));
    }
    Ok(((c * c) / (epsilon_target * epsilon_target))
        .ceil()
        .max(1.0) as u64)
}

/// `C/√K` at each `K`.
pub fn inverse_sqrt_curve(c: f64, k_values: &[f64]) -> Vec<f64> {
    k_values.iter().map(|k| c / k.sqrt()).collect()
}
