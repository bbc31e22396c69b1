//! Latent posterior factor models: turning per-item Gaussian latent posteriors
//! into soft label factors, aggregating them, and auditing the result against
//! closed-form calibration, robustness and generalization bounds.

pub mod aggregate;
pub mod attention;
pub mod error;
pub mod factor;
pub mod harness;
pub mod metrics;
pub mod prob;
pub mod quadrature;
pub mod rng;
pub mod train;
pub mod world;

pub use aggregate::{
    robustness_bound, spn_aggregate, spn_aggregate_weighted, uniform_aggregate, AggregationResult,
    Method,
};
pub use attention::{attention_weights, learned_aggregate, AttentionAggregator};
pub use error::{LpfError, Result};
pub use factor::{
    confidence_weight, decode, estimate_factor, estimate_factors, mc_error_bound, oracle_factor,
    sample_latents, Decoder, SoftFactor,
};
pub use metrics::{
    calibration_bound, ece, fit_inverse_sqrt, info_bound_report, sample_complexity,
    uncertainty_decomposition, InfoBoundReport, InverseSqrtFit, ReliabilityTable,
    UncertaintyBreakdown,
};
pub use prob::{
    effective_sample_size, entropy_bits, kl_bits, l1_distance, normalize, GaussianPosterior,
    LabelDist, WeightVector,
};
pub use rng::Stream;
pub use train::{
    effective_dimension, pac_bayes_bound, stability_bound, train, TrainConfig, TrainReport,
};
pub use world::{build_world, AggDataset, Entity, World, WorldConfig};
