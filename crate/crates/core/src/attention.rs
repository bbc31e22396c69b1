//! Learned latent-space aggregator.
//!
//! Each evidence item is scored by a two-layer perceptron (tanh hidden layer)
//! on per-item posterior statistics plus its offset from the set's mean
//! location. Scores are softmaxed into attention weights `α`, the means are
//! combined as `z = Σ α_i μ_i`, and `z` is decoded with the shared decoder.
//!
//! Per-item input (length `3d + 2`):
//! `μ_i ⊕ var_i ⊕ ‖Σ_i‖_F ⊕ (μ_i − μ̄) ⊕ ‖μ_i − μ̄‖`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{order_free_sum, AggregationResult, Method};
use crate::error::{LpfError, Result};
use crate::factor::{decode, Decoder};
use crate::prob::{effective_sample_size, GaussianPosterior, WeightVector};
use crate::rng::Stream;
use crate::world::Entity;

pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AttentionSpec", into = "AttentionSpec")]
pub struct AttentionAggregator {
    decoder: Decoder,
    hidden: usize,
    /// `hidden × input_dim`, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    pub l2_lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct AttentionSpec {
    latent_dim: usize,
    input_dim: usize,
    hidden: usize,
    l2_lambda: f64,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    decoder: Decoder,
}

impl TryFrom<AttentionSpec> for AttentionAggregator {
    type Error = LpfError;

    fn try_from(s: AttentionSpec) -> Result<Self> {
        let input = input_dim(s.decoder.dim());
        if s.latent_dim != s.decoder.dim() || s.input_dim != input {
            return Err(LpfError::Config(
                "attention shape metadata disagrees with decoder".into(),
            ));
        }
        if s.w1.len() != s.hidden
            || s.w1.iter().any(|r| r.len() != input)
            || s.b1.len() != s.hidden
            || s.w2.len() != s.hidden
        {
            return Err(LpfError::Config(
                "attention parameter shapes disagree with metadata".into(),
            ));
        }
        Ok(Self {
            decoder: s.decoder,
            hidden: s.hidden,
            w1: s.w1.into_iter().flatten().collect(),
            b1: s.b1,
            w2: s.w2,
            l2_lambda: s.l2_lambda,
        })
    }
}

impl From<AttentionAggregator> for AttentionSpec {
    fn from(a: AttentionAggregator) -> Self {
        let input = a.input_dim();
        AttentionSpec {
            latent_dim: a.decoder.dim(),
            input_dim: input,
            hidden: a.hidden,
            l2_lambda: a.l2_lambda,
            w1: a.w1.chunks(input).map(<[f64]>::to_vec).collect(),
            b1: a.b1,
            w2: a.w2,
            decoder: a.decoder,
        }
    }
}

fn input_dim(d: usize) -> usize {
    3 * d + 2
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Forward {
    features: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    z: Vec<f64>,
}

impl AttentionAggregator {
    /// Xavier-uniform initialization from `stream`.
    pub fn new(decoder: Decoder, hidden: usize, l2_lambda: f64, stream: &mut Stream) -> Self {
        let input = input_dim(decoder.dim());
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        let w1 = (0..hidden * input)
            .map(|_| stream.random_range(-a1..a1))
            .collect();
        let w2 = (0..hidden).map(|_| stream.random_range(-a2..a2)).collect();
        Self {
            decoder,
            hidden,
            w1,
            b1: vec![0.0; hidden],
            w2,
            l2_lambda,
        }
    }

    /// All-zero scorer: uniform attention.
    pub fn zeroed(decoder: Decoder, hidden: usize, l2_lambda: f64) -> Self {
        let input = input_dim(decoder.dim());
        Self {
            decoder,
            hidden,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            l2_lambda,
        }
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        input_dim(self.decoder.dim())
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len()
    }

    /// Flattened parameters in `w1, b1, w2` order.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(LpfError::Dimension {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let (w1, rest) = params.split_at(self.w1.len());
        let (b1, w2) = rest.split_at(self.b1.len());
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .map(|x| x * x)
            .sum()
    }

    fn check(&self, evidence: &[GaussianPosterior]) -> Result<()> {
        if evidence.is_empty() {
            return Err(LpfError::Range("need at least one evidence item".into()));
        }
        for p in evidence {
            if p.dim() != self.decoder.dim() {
                return Err(LpfError::Dimension {
                    expected: self.decoder.dim(),
                    got: p.dim(),
                });
            }
        }
        Ok(())
    }

    fn features(&self, evidence: &[GaussianPosterior]) -> Vec<Vec<f64>> {
        let d = self.decoder.dim();
        let k = evidence.len() as f64;
        let mut column = Vec::with_capacity(evidence.len());
        let center: Vec<f64> = (0..d)
            .map(|j| {
                column.clear();
                column.extend(evidence.iter().map(|p| p.mean[j]));
                order_free_sum(&mut column) / k
            })
            .collect();
        evidence
            .iter()
            .map(|p| {
                let mut x = Vec::with_capacity(input_dim(d));
                x.extend_from_slice(&p.mean);
                x.extend_from_slice(&p.var);
                x.push(p.frobenius_norm());
                let offset: Vec<f64> = p.mean.iter().zip(&center).map(|(m, c)| m - c).collect();
                let dist = offset.iter().map(|o| o * o).sum::<f64>().sqrt();
                x.extend_from_slice(&offset);
                x.push(dist);
                x
            })
            .collect()
    }

    fn forward(&self, evidence: &[GaussianPosterior]) -> Forward {
        let input = self.input_dim();
        let features = self.features(evidence);
        let mut hidden = Vec::with_capacity(features.len());
        let mut scores = Vec::with_capacity(features.len());
        for x in &features {
            let h: Vec<f64> = (0..self.hidden)
                .map(|u| {
                    let row = &self.w1[u * input..(u + 1) * input];
                    let a: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + self.b1[u];
                    a.tanh()
                })
                .collect();
            scores.push(h.iter().zip(&self.w2).map(|(hi, w)| hi * w).sum::<f64>());
            hidden.push(h);
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total = order_free_sum(&mut exps.clone());
        let alpha: Vec<f64> = exps.iter().map(|e| e / total).collect();

        let d = self.decoder.dim();
        let mut terms = Vec::with_capacity(evidence.len());
        let z = (0..d)
            .map(|j| {
                terms.clear();
                terms.extend(evidence.iter().zip(&alpha).map(|(p, a)| a * p.mean[j]));
                order_free_sum(&mut terms)
            })
            .collect();
        Forward {
            features,
            hidden,
            alpha,
            z,
        }
    }

    /// Cross-entropy of one entity and its gradient, accumulated into `grad`
    /// (regularization excluded).
    fn backward_into(&self, entity: &Entity, grad: &mut [f64]) -> f64 {
        let fwd = self.forward(&entity.evidence);
        let n = self.decoder.num_labels();
        let d = self.decoder.dim();
        let input = self.input_dim();
        let floor = self.decoder.floor();

        let mut q = vec![0.0; n];
        self.decoder.softmax_into(&fwd.z, &mut q);
        let y = entity.label;
        let p_y = (1.0 - floor) * q[y] + floor / n as f64;
        let loss = -p_y.ln();

        // dL/du_k for logits u = (Wz + b)/T.
        let scale = -(1.0 - floor) * q[y] / p_y;
        let du: Vec<f64> = (0..n)
            .map(|k| scale * (f64::from(u8::from(k == y)) - q[k]))
            .collect();
        let mut dz = vec![0.0; d];
        for (row, g) in self.decoder.weight().iter().zip(&du) {
            for (dzj, w) in dz.iter_mut().zip(row) {
                *dzj += g * w / self.decoder.temperature();
            }
        }
        let c: Vec<f64> = entity
            .evidence
            .iter()
            .map(|p| p.mean.iter().zip(&dz).map(|(m, g)| m * g).sum())
            .collect();
        let c_bar: f64 = fwd.alpha.iter().zip(&c).map(|(a, ci)| a * ci).sum();

        let (g_w1, rest) = grad.split_at_mut(self.w1.len());
        let (g_b1, g_w2) = rest.split_at_mut(self.b1.len());
        for (i, (x, h)) in fwd.features.iter().zip(&fwd.hidden).enumerate() {
            let ds = fwd.alpha[i] * (c[i] - c_bar);
            for u in 0..self.hidden {
                g_w2[u] += ds * h[u];
                let da = ds * self.w2[u] * (1.0 - h[u] * h[u]);
                g_b1[u] += da;
                let row = &mut g_w1[u * input..(u + 1) * input];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += da * xi;
                }
            }
        }
        loss
    }

    /// Mean cross-entropy over `batch` and its gradient, without the L2 term.
    pub fn loss_and_grad(&self, batch: &[Entity]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        for e in batch {
            loss += self.backward_into(e, &mut grad);
        }
        let n = batch.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    /// `mean CE + λ‖θ‖²` and its gradient.
    pub fn objective_and_grad(&self, batch: &[Entity]) -> (f64, Vec<f64>) {
        let (loss, mut grad) = self.loss_and_grad(batch);
        for (g, p) in grad.iter_mut().zip(self.params()) {
            *g += 2.0 * self.l2_lambda * p;
        }
        (loss + self.l2_lambda * self.squared_norm(), grad)
    }

    /// Mean cross-entropy of `batch` under the current parameters.
    pub fn mean_loss(&self, batch: &[Entity]) -> f64 {
        let total: f64 = batch
            .iter()
            .map(|e| {
                let fwd = self.forward(&e.evidence);
                let mut p = vec![0.0; self.decoder.num_labels()];
                self.decoder.decode_into(&fwd.z, &mut p);
                -p[e.label].ln()
            })
            .sum();
        total / batch.len().max(1) as f64
    }
}

/// Softmax attention over the evidence items.
pub fn attention_weights(
    agg: &AttentionAggregator,
    evidence: &[GaussianPosterior],
) -> Result<Vec<f64>> {
    agg.check(evidence)?;
    Ok(agg.forward(evidence).alpha)
}

/// Decodes the attention-weighted mean location.
pub fn learned_aggregate(
    agg: &AttentionAggregator,
    evidence: &[GaussianPosterior],
) -> Result<AggregationResult> {
    agg.check(evidence)?;
    let fwd = agg.forward(evidence);
    let mut sorted = fwd.alpha.clone();
    sorted.sort_by(f64::total_cmp);
    let k_eff = effective_sample_size(&WeightVector::new(sorted)?)?;
    Ok(AggregationResult {
        dist: decode(&agg.decoder, &fwd.z)?,
        k_eff,
        weights_used: WeightVector::new(fwd.alpha.iter().map(|a| a.clamp(0.0, 1.0)).collect())?,
        method: Method::Learned,
    })
}
