//! Regularized gradient descent for the attention aggregator, plus the
//! generalization bounds used to audit it.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::{learned_aggregate, AttentionAggregator};
use crate::error::{LpfError, Result};
use crate::rng::Stream;
use crate::world::{AggDataset, Entity};

pub const DEFAULT_L2_LAMBDA: f64 = 1e-4;
pub const DEFAULT_ACTIVE_THRESHOLD: f64 = 1e-3;
pub const DEFAULT_DELTA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2_lambda: f64,
    /// Zero means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 30,
            l2_lambda: DEFAULT_L2_LAMBDA,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: f64,
    pub test_loss: f64,
    pub gap: f64,
    pub d_eff: usize,
    pub param_count: usize,
    /// `None` when the training set is not larger than `d_eff`.
    pub bound: Option<f64>,
    pub test_accuracy: f64,
    pub n_train: usize,
    /// Regularized training objective after each epoch, starting at initialization.
    pub objective_history: Vec<f64>,
    pub config: TrainConfig,
}

fn accuracy(agg: &AttentionAggregator, entities: &[Entity]) -> Result<f64> {
    if entities.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for e in entities {
        if learned_aggregate(agg, &e.evidence)?.dist.argmax() == e.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / entities.len() as f64)
}

/// Trains a copy of `arch` on `dataset.train` and evaluates on `dataset.test`.
pub fn train(
    dataset: &AggDataset,
    arch: &AttentionAggregator,
    config: &TrainConfig,
) -> Result<(AttentionAggregator, TrainReport)> {
    if dataset.train.is_empty() {
        return Err(LpfError::InsufficientData("training split is empty".into()));
    }
    if !(config.learning_rate > 0.0) || !(config.l2_lambda >= 0.0) {
        return Err(LpfError::Config(
            "learning_rate must be positive and l2_lambda nonnegative".into(),
        ));
    }
    let mut agg = arch.clone();
    agg.l2_lambda = config.l2_lambda;
    let mut rng = Stream::new(config.seed);
    let n = dataset.train.len();
    let batch = if config.batch_size == 0 {
        n
    } else {
        config.batch_size.min(n)
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut theta = agg.params();
    let mut history = Vec::with_capacity(config.epochs + 1);
    history.push(agg.objective_and_grad(&dataset.train).0);

    let mut chunk = Vec::with_capacity(batch);
    for epoch in 0..config.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        for idx in order.chunks(batch) {
            chunk.clear();
            chunk.extend(idx.iter().map(|&i| dataset.train[i].clone()));
            let (obj, grad) = agg.objective_and_grad(&chunk);
            if !obj.is_finite() {
                return Err(LpfError::TrainingDiverged { epoch, loss: obj });
            }
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= config.learning_rate * g;
            }
            agg.set_params(&theta)?;
        }
        let obj = agg.objective_and_grad(&dataset.train).0;
        if !obj.is_finite() {
            return Err(LpfError::TrainingDiverged { epoch, loss: obj });
        }
        history.push(obj);
    }

    let train_loss = agg.mean_loss(&dataset.train);
    let test_loss = if dataset.test.is_empty() {
        train_loss
    } else {
        agg.mean_loss(&dataset.test)
    };
    let d_eff = effective_dimension(&agg, DEFAULT_ACTIVE_THRESHOLD);
    let report = TrainReport {
        train_loss,
        test_loss,
        gap: test_loss - train_loss,
        d_eff,
        param_count: agg.param_count(),
        bound: if n > d_eff {
            Some(pac_bayes_bound(train_loss, n, d_eff, DEFAULT_DELTA)?)
        } else {
            None
        },
        test_accuracy: accuracy(&agg, &dataset.test)?,
        n_train: n,
        objective_history: history,
        config: config.clone(),
    };
    Ok((agg, report))
}

/// Number of parameters with magnitude above `threshold`.
pub fn effective_dimension(agg: &AttentionAggregator, threshold: f64) -> usize {
    agg.params().iter().filter(|p| p.abs() > threshold).count()
}

/// `sqrt(2(L̂ + 1/N)(d ln(eN/d) + ln(2/δ)) / N)` with natural logarithms.
pub fn pac_bayes_bound(train_loss: f64, n: usize, d_eff: usize, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(LpfError::Range("sample count must be positive".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(LpfError::Range(format!("delta {delta} outside (0, 1)")));
    }
    let nf = n as f64;
    let complexity = if d_eff == 0 {
        0.0
    } else {
        let d = d_eff as f64;
        d * (std::f64::consts::E * nf / d).ln()
    };
    Ok((2.0 * (train_loss + 1.0 / nf) * (complexity + (2.0 / delta).ln()) / nf).sqrt())
}

/// Uniform stability of regularized ERM: `2L / (λN)`.
pub fn stability_bound(lipschitz: f64, lambda: f64, n: usize) -> f64 {
    2.0 * lipschitz / (lambda * n as f64)
}
