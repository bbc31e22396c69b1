//! Synthetic generative world with known ground truth.
//!
//! Stands in for a trained variational encoder: each entity has a label, and
//! each of its evidence items is a diagonal Gaussian posterior whose mean sits
//! near a class prototype. Evidence quality, conflict and cross-item
//! correlation are independent knobs.
//!
//! Item mean for an entity with shared jitter `g` and per-item jitter `h_i`:
//!
//! ```text
//! mean_i = prototype[source_i] + noise · (√c·g + √(1−c)·h_i)
//! ```
//!
//! where `source_i` is the entity label, or with probability `conflict_rate`
//! a uniformly drawn wrong label.

use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LpfError, Result};
use crate::factor::Decoder;
use crate::prob::GaussianPosterior;
use crate::rng::Stream;

/// Upper bound on encoder covariance norm assumed by the calibration and
/// Monte Carlo bounds.
pub const SIGMA_MAX: f64 = 2.5;

const TRAIN_STREAM: u64 = 0x0074_7261_696e;
const TEST_STREAM: u64 = 0x7465_7374;
const CORRELATION_STREAM: u64 = 0x636f_7272;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Latent dimension.
    pub d: usize,
    pub num_labels: usize,
    /// Distance of each class prototype from the origin.
    pub prototype_scale: f64,
    /// Explicit class centers; computed from `prototype_scale` when `None`.
    pub prototypes: Option<Vec<Vec<f64>>>,
    pub evidence_noise: f64,
    pub var_low: f64,
    pub var_high: f64,
    pub conflict_rate: f64,
    pub correlation: f64,
    /// Label prior; uniform when `None`.
    pub label_prior: Option<Vec<f64>>,
    pub k_max: usize,
    pub sigma_max: f64,
    /// Uniform-mixing floor of the matched decoder.
    pub decoder_floor: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d: 8,
            num_labels: 3,
            prototype_scale: 3.0,
            prototypes: None,
            evidence_noise: 1.0,
            var_low: 0.1,
            var_high: 0.5,
            conflict_rate: 0.15,
            correlation: 0.12,
            label_prior: None,
            k_max: 5,
            sigma_max: SIGMA_MAX,
            decoder_floor: 0.5,
            seed: 42,
        }
    }
}

/// Default class centers: `s·e_y` when `d ≥ |Y|`, otherwise a regular
/// polygon of radius `s` in the first two coordinates (a line for `d = 1`).
pub fn default_prototypes(d: usize, num_labels: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..num_labels)
        .map(|y| {
            let mut p = vec![0.0; d];
            if d >= num_labels {
                p[y] = scale;
            } else if d >= 2 {
                let angle = std::f64::consts::TAU * y as f64 / num_labels as f64;
                p[0] = scale * angle.cos();
                p[1] = scale * angle.sin();
            } else {
                p[0] = scale * (y as f64 - (num_labels as f64 - 1.0) / 2.0);
            }
            p
        })
        .collect()
}

/// A labelled entity with its evidence posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub label: usize,
    pub evidence: Vec<GaussianPosterior>,
}

impl Entity {
    pub fn k(&self) -> usize {
        self.evidence.len()
    }
}

/// Independent train and test entities with a fixed evidence count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggDataset {
    pub k: usize,
    pub train: Vec<Entity>,
    pub test: Vec<Entity>,
}

/// Entity plus the generating details hidden from consumers.
#[derive(Debug, Clone)]
pub(crate) struct TracedEntity {
    pub entity: Entity,
    #[cfg_attr(not(test), allow(dead_code))]
    pub sources: Vec<usize>,
    pub jitters: Vec<Vec<f64>>,
}

/// An immutable, validated world.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    prototypes: Vec<Vec<f64>>,
    prior: WeightedIndex<f64>,
    root: Stream,
}

impl World {
    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn num_labels(&self) -> usize {
        self.config.num_labels
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    pub fn k_max(&self) -> usize {
        self.config.k_max
    }

    /// Root stream of the world; every sampling path descends from it.
    pub fn stream(&self) -> &Stream {
        &self.root
    }

    /// The Bayes decoder for this world's prototypes and noise level, mixed
    /// with the configured uniform floor.
    pub fn decoder(&self) -> Decoder {
        Decoder::matched(
            &self.prototypes,
            self.config.evidence_noise,
            self.config.decoder_floor,
        )
        .expect("world configuration already validated")
    }

    /// `sqrt(d · E[v²])` for `v ~ U[var_low, var_high]`; an upper bound on
    /// `E‖Σ‖_F` by Jensen's inequality.
    pub fn expected_cov_norm_bound(&self) -> f64 {
        let (a, b) = (self.config.var_low, self.config.var_high);
        let second_moment = if b > a {
            (b.powi(3) - a.powi(3)) / (3.0 * (b - a))
        } else {
            a * a
        };
        (self.config.d as f64 * second_moment).sqrt()
    }

    /// Samples an entity on the substream `stream_id` of the world seed.
    pub fn sample_entity(&self, k: usize, stream_id: u64) -> Result<Entity> {
        self.sample_entity_with(k, &mut self.root.child(stream_id))
    }

    pub fn sample_entity_with(&self, k: usize, rng: &mut Stream) -> Result<Entity> {
        Ok(self.sample_traced(k, rng)?.entity)
    }

    pub(crate) fn sample_traced(&self, k: usize, rng: &mut Stream) -> Result<TracedEntity> {
        if k == 0 || k > self.config.k_max {
            return Err(LpfError::Range(format!(
                "K = {k} outside [1, {}]",
                self.config.k_max
            )));
        }
        let cfg = &self.config;
        let d = cfg.d;
        let label = self.prior.sample(rng);
        let shared: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let (shared_coef, own_coef) = (cfg.correlation.sqrt(), (1.0 - cfg.correlation).sqrt());

        let mut evidence = Vec::with_capacity(k);
        let mut sources = Vec::with_capacity(k);
        let mut jitters = Vec::with_capacity(k);
        for item in 0..k {
            let source = if rng.random::<f64>() < cfg.conflict_rate {
                self.random_wrong_label(label, rng)
            } else {
                label
            };
            let jitter: Vec<f64> = shared
                .iter()
                .map(|g| {
                    let h: f64 = StandardNormal.sample(rng);
                    shared_coef * g + own_coef * h
                })
                .collect();
            let mean: Vec<f64> = self.prototypes[source]
                .iter()
                .zip(&jitter)
                .map(|(p, j)| p + cfg.evidence_noise * j)
                .collect();
            let var: Vec<f64> = (0..d)
                .map(|_| {
                    if cfg.var_high > cfg.var_low {
                        rng.random_range(cfg.var_low..cfg.var_high)
                    } else {
                        cfg.var_low
                    }
                })
                .collect();
            evidence.push(GaussianPosterior {
                mean,
                var,
                source_id: item as u64,
            });
            sources.push(source);
            jitters.push(jitter);
        }
        Ok(TracedEntity {
            entity: Entity { label, evidence },
            sources,
            jitters,
        })
    }

    fn random_wrong_label(&self, label: usize, rng: &mut Stream) -> usize {
        let offset = rng.random_range(1..self.config.num_labels);
        (label + offset) % self.config.num_labels
    }

    /// Replaces `⌊fraction·K⌋` items, chosen without replacement, by the
    /// prototype of a uniformly drawn wrong label. Labels and variances are
    /// left untouched.
    pub fn corrupt_entity(
        &self,
        entity: &Entity,
        fraction: f64,
        rng: &mut Stream,
    ) -> Result<Entity> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(LpfError::Range(format!(
                "corruption fraction {fraction} outside [0, 1]"
            )));
        }
        let k = entity.k();
        let n_corrupt = corrupted_count(fraction, k);
        let mut out = entity.clone();
        if n_corrupt == 0 {
            return Ok(out);
        }
        for item in index::sample(rng, k, n_corrupt).into_iter() {
            let wrong = self.random_wrong_label(entity.label, rng);
            out.evidence[item].mean = self.prototypes[wrong].clone();
        }
        Ok(out)
    }

    /// Mean over entities of the mean pairwise Pearson correlation between
    /// the items' jitter vectors (mean minus generating prototype).
    pub fn measure_correlation(&self, n_entities: usize) -> Result<f64> {
        if n_entities < 30 {
            return Err(LpfError::Range(format!(
                "need at least 30 entities, got {n_entities}"
            )));
        }
        let base = self.root.child(CORRELATION_STREAM);
        let k = self.config.k_max;
        let mut per_entity = Vec::new();
        for e in 0..n_entities {
            let traced = self.sample_traced(k, &mut base.child(e as u64))?;
            if traced.jitters.len() < 2 {
                continue;
            }
            let mut total = 0.0;
            let mut pairs = 0usize;
            for a in 0..traced.jitters.len() {
                for b in a + 1..traced.jitters.len() {
                    if let Some(r) = pearson(&traced.jitters[a], &traced.jitters[b]) {
                        total += r;
                        pairs += 1;
                    }
                }
            }
            if pairs > 0 {
                per_entity.push(total / pairs as f64);
            }
        }
        if per_entity.is_empty() {
            return Err(LpfError::InsufficientData(
                "no entity with at least two evidence items".into(),
            ));
        }
        Ok(per_entity.iter().sum::<f64>() / per_entity.len() as f64)
    }

    /// Independent train and test entities, each with exactly `k` items.
    pub fn make_agg_dataset(&self, n_train: usize, n_test: usize, k: usize) -> Result<AggDataset> {
        if n_train == 0 || n_test == 0 {
            return Err(LpfError::Range("dataset sizes must be at least 1".into()));
        }
        let draw = |tag: u64, n: usize| -> Result<Vec<Entity>> {
            let base = self.root.child(tag);
            (0..n)
                .map(|i| self.sample_entity_with(k, &mut base.child(i as u64)))
                .collect()
        };
        Ok(AggDataset {
            k,
            train: draw(TRAIN_STREAM, n_train)?,
            test: draw(TEST_STREAM, n_test)?,
        })
    }
}

/// `⌊fraction·K⌋`, robust to representation error such as `0.3·10`.
pub fn corrupted_count(fraction: f64, k: usize) -> usize {
    ((fraction * k as f64) + 1e-9).floor() as usize
}

/// Validates a configuration and builds the world.
pub fn build_world(config: WorldConfig) -> Result<World> {
    let c = &config;
    let bad = |msg: String| Err(LpfError::Config(msg));
    if c.d == 0 {
        return bad("latent dimension must be at least 1".into());
    }
    if c.num_labels < 2 {
        return bad("need at least two labels".into());
    }
    if !(c.var_low > 0.0 && c.var_low.is_finite() && c.var_high.is_finite()) {
        return bad(format!(
            "var_low must be positive and finite, got {}",
            c.var_low
        ));
    }
    if c.var_low > c.var_high {
        return bad(format!(
            "var_low {} exceeds var_high {}",
            c.var_low, c.var_high
        ));
    }
    if !(c.evidence_noise > 0.0 && c.evidence_noise.is_finite()) {
        return bad(format!(
            "evidence_noise must be positive, got {}",
            c.evidence_noise
        ));
    }
    if !(0.0..=1.0).contains(&c.conflict_rate) {
        return bad(format!("conflict_rate {} outside [0, 1]", c.conflict_rate));
    }
    if !(0.0..=1.0).contains(&c.correlation) {
        return bad(format!("correlation {} outside [0, 1]", c.correlation));
    }
    if c.k_max == 0 {
        return bad("k_max must be at least 1".into());
    }
    if !(c.sigma_max > 0.0) {
        return bad("sigma_max must be positive".into());
    }
    if !(0.0..1.0).contains(&c.decoder_floor) {
        return bad(format!("decoder_floor {} outside [0, 1)", c.decoder_floor));
    }

    let prototypes = match &c.prototypes {
        Some(p) => p.clone(),
        None => default_prototypes(c.d, c.num_labels, c.prototype_scale),
    };
    if prototypes.len() != c.num_labels || prototypes.iter().any(|p| p.len() != c.d) {
        return bad(format!(
            "expected {} prototypes of dimension {}",
            c.num_labels, c.d
        ));
    }
    for a in 0..prototypes.len() {
        for b in a + 1..prototypes.len() {
            if prototypes[a] == prototypes[b] {
                return bad(format!("prototypes {a} and {b} coincide"));
            }
        }
    }

    let prior_weights = c
        .label_prior
        .clone()
        .unwrap_or_else(|| vec![1.0; c.num_labels]);
    if prior_weights.len() != c.num_labels {
        return bad("label_prior length must equal num_labels".into());
    }
    let prior = WeightedIndex::new(&prior_weights)
        .map_err(|e| LpfError::Config(format!("label_prior: {e}")))?;

    let root = Stream::new(c.seed);
    Ok(World {
        config,
        prototypes,
        prior,
        root,
    })
}

pub(crate) fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let denom = (saa * sbb).sqrt();
    (denom > 0.0).then(|| sab / denom)
}

#[derive(Serialize, Deserialize)]
struct EvidenceRecord {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EntityRecord {
    label: usize,
    evidence: Vec<EvidenceRecord>,
}

/// Writes one entity per line: `{"label": int, "evidence": [{"mean": [...], "var": [...]}]}`.
pub fn write_jsonl<W: Write>(entities: &[Entity], mut out: W) -> Result<()> {
    for e in entities {
        let record = EntityRecord {
            label: e.label,
            evidence: e
                .evidence
                .iter()
                .map(|p| EvidenceRecord {
                    mean: p.mean.clone(),
                    var: p.var.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads the format produced by [`write_jsonl`]; source ids are the item
/// positions.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Entity>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EntityRecord = serde_json::from_str(&line)?;
        let evidence = record
            .evidence
            .into_iter()
            .enumerate()
            .map(|(i, r)| GaussianPosterior::new(r.mean, r.var, i as u64))
            .collect::<Result<Vec<_>>>()?;
        out.push(Entity {
            label: record.label,
            evidence,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::estimate_factor;

    fn world(f: impl FnOnce(&mut WorldConfig)) -> World {
        let mut c = WorldConfig::default();
        f(&mut c);
        build_world(c).unwrap()
    }

    #[test]
    fn deterministic_entities() {
        let a = world(|_| {});
        let b = world(|_| {});
        assert_eq!(
            a.sample_entity(5, 0).unwrap(),
            b.sample_entity(5, 0).unwrap()
        );
        assert_ne!(
            a.sample_entity(5, 0).unwrap(),
            a.sample_entity(5, 1).unwrap()
        );
    }

    #[test]
    fn rejects_invalid_configs() {
        let cases: Vec<Box<dyn Fn(&mut WorldConfig)>> = vec![
            Box::new(|c| c.var_low = 0.6),
            Box::new(|c| c.var_low = 0.0),
            Box::new(|c| c.conflict_rate = 1.5),
            Box::new(|c| c.correlation = -0.1),
            Box::new(|c| c.prototypes = Some(vec![vec![0.0; 8]; 3])),
            Box::new(|c| c.num_labels = 1),
            Box::new(|c| c.k_max = 0),
            Box::new(|c| c.decoder_floor = 1.0),
            Box::new(|c| c.label_prior = Some(vec![1.0, 1.0])),
        ];
        for f in cases {
            let mut c = WorldConfig::default();
            f(&mut c);
            assert!(matches!(build_world(c), Err(LpfError::Config(_))));
        }
    }

    #[test]
    fn k_out_of_range() {
        let w = world(|_| {});
        assert!(matches!(w.sample_entity(0, 0), Err(LpfError::Range(_))));
        assert!(matches!(w.sample_entity(6, 0), Err(LpfError::Range(_))));
        assert_eq!(w.sample_entity(1, 0).unwrap().k(), 1);
    }

    #[test]
    fn zero_conflict_means_true_prototype_sources() {
        let w = world(|c| c.conflict_rate = 0.0);
        let mut rng = Stream::new(3);
        for _ in 0..200 {
            let t = w.sample_traced(5, &mut rng).unwrap();
            assert!(t.sources.iter().all(|&s| s == t.entity.label));
        }
    }

    #[test]
    fn full_conflict_means_wrong_prototype_sources() {
        let w = world(|c| c.conflict_rate = 1.0);
        let mut rng = Stream::new(3);
        for _ in 0..200 {
            let t = w.sample_traced(5, &mut rng).unwrap();
            assert!(t.sources.iter().all(|&s| s != t.entity.label));
        }
    }

    #[test]
    fn covariance_norm_regime() {
        let w = world(|_| {});
        let mut norms = Vec::new();
        for i in 0..1000 {
            for p in w.sample_entity(1, i).unwrap().evidence {
                norms.push(p.frobenius_norm());
            }
        }
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let max = norms.iter().copied().fold(0.0, f64::max);
        assert!((0.5..=1.5).contains(&mean), "mean {mean}");
        assert!(max <= SIGMA_MAX, "max {max}");
    }

    #[test]
    fn corruption_changes_exactly_floor_items() {
        let w = world(|_| {});
        let e = w.sample_entity(5, 11).unwrap();
        let mut rng = Stream::new(1);
        assert_eq!(w.corrupt_entity(&e, 0.0, &mut rng).unwrap(), e);
        for (fraction, expected) in [(0.5, 2usize), (0.2, 1), (1.0, 5), (0.19, 0)] {
            let c = w.corrupt_entity(&e, fraction, &mut rng).unwrap();
            assert_eq!(c.label, e.label);
            let changed = c
                .evidence
                .iter()
                .zip(&e.evidence)
                .filter(|(a, b)| a.mean != b.mean)
                .count();
            assert_eq!(changed, expected, "fraction {fraction}");
            for (a, b) in c.evidence.iter().zip(&e.evidence) {
                assert_eq!(a.var, b.var);
                if a.mean != b.mean {
                    let target = w.prototypes().iter().position(|p| *p == a.mean).unwrap();
                    assert_ne!(target, e.label);
                }
            }
        }
        assert_eq!(corrupted_count(0.3, 10), 3);
        assert_eq!(corrupted_count(0.1, 10), 1);
    }

    #[test]
    fn full_corruption_flips_aggregate() {
        use crate::aggregate::spn_aggregate;
        let w = world(|c| c.k_max = 10);
        let dec = w.decoder();
        let mut rng = Stream::new(5);
        let mut wrong = 0;
        for i in 0..100 {
            let e = w.sample_entity(10, i).unwrap();
            let c = w.corrupt_entity(&e, 1.0, &mut rng).unwrap();
            let factors: Vec<_> = c
                .evidence
                .iter()
                .map(|p| estimate_factor(&dec, p, 16, &mut rng.child(i)).unwrap())
                .collect();
            if spn_aggregate(&factors).unwrap().dist.argmax() != e.label {
                wrong += 1;
            }
        }
        assert!(wrong >= 90, "only {wrong} of 100 flipped");
    }

    #[test]
    fn correlation_tracks_mixing_coefficient() {
        let r0 = world(|c| c.correlation = 0.0)
            .measure_correlation(1000)
            .unwrap();
        assert!(r0.abs() < 0.05, "rho {r0}");
        let r1 = world(|c| c.correlation = 1.0)
            .measure_correlation(1000)
            .unwrap();
        assert!(r1 > 0.9, "rho {r1}");
        let rd = world(|_| {}).measure_correlation(1000).unwrap();
        assert!((rd - 0.12).abs() < 0.05, "rho {rd}");
    }

    #[test]
    fn correlation_needs_enough_entities() {
        assert!(world(|_| {}).measure_correlation(10).is_err());
        assert!(matches!(
            world(|c| c.k_max = 1).measure_correlation(50),
            Err(LpfError::InsufficientData(_))
        ));
    }

    #[test]
    fn low_noise_factors_concentrate_on_truth() {
        let w = world(|c| {
            c.conflict_rate = 0.0;
            c.correlation = 0.0;
            c.evidence_noise = 0.01;
        });
        let dec = w.decoder();
        let mut hits = 0;
        for i in 0..1000 {
            let e = w.sample_entity(1, i).unwrap();
            let f = estimate_factor(&dec, &e.evidence[0], 16, &mut Stream::new(i)).unwrap();
            if f.dist.argmax() == e.label {
                hits += 1;
            }
        }
        assert!(hits >= 990, "{hits}");
    }

    #[test]
    fn datasets() {
        let w = world(|_| {});
        let ds = w.make_agg_dataset(4200, 900, 5).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (4200, 900));
        assert!(ds.train.iter().chain(&ds.test).all(|e| e.k() == 5));
        let tiny = w.make_agg_dataset(1, 1, 1).unwrap();
        assert_eq!((tiny.train.len(), tiny.test.len()), (1, 1));
        assert_eq!(
            w.make_agg_dataset(50, 10, 3).unwrap(),
            w.make_agg_dataset(50, 10, 3).unwrap()
        );
        assert_ne!(tiny.train[0], tiny.test[0]);
    }

    #[test]
    fn small_dimension_prototypes_are_distinct() {
        for d in 1..4 {
            let p = default_prototypes(d, 3, 3.0);
            assert!(p[0] != p[1] && p[1] != p[2] && p[0] != p[2]);
        }
        assert!(build_world(WorldConfig {
            d: 2,
            ..Default::default()
        })
        .is_ok());
    }

    #[test]
    fn jsonl_round_trip() {
        let w = world(|_| {});
        let entities: Vec<_> = (0..3).map(|i| w.sample_entity(3, i).unwrap()).collect();
        let mut buf = Vec::new();
        write_jsonl(&entities, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first["label"].is_u64());
        assert_eq!(first["evidence"][0].as_object().unwrap().len(), 2);
        assert_eq!(read_jsonl(&buf[..]).unwrap(), entities);
    }
}
