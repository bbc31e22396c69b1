//! Empirical checks of the six modelling assumptions behind the bounds.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde_json::json;

use super::{json, Check, ExperimentConfig, ExperimentId, ExperimentReport, Relation, Table};
use crate::aggregate::{spn_aggregate, uniform_aggregate};
use crate::error::Result;
use crate::factor::{decode, estimate_factors, sample_latents, SoftFactor};
use crate::metrics::{ece, DEFAULT_BINS};
use crate::prob::{normalize, LabelDist, SUM_TOLERANCE};
use crate::rng::Stream;

fn is_valid(d: &LabelDist) -> bool {
    d.probs().iter().all(|p| *p >= 0.0 && p.is_finite())
        && (d.probs().iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE
}

/// Random factor sets checked for closure and order independence; returns the violation count.
fn closure_violations(cases: usize, k_max: usize, num_labels: usize, s: &Stream) -> usize {
    (0..cases)
        .into_par_iter()
        .map(|case| {
            let mut rng = s.child(case as u64);
            let k = rng.random_range(1..=k_max);
            let mut factors: Vec<SoftFactor> = (0..k)
                .map(|i| {
                    let raw: Vec<f64> = (0..num_labels)
                        .map(|_| rng.random_range(0.01..1.0))
                        .collect();
                    SoftFactor {
                        dist: normalize(&raw).unwrap_or_else(|_| LabelDist::uniform(num_labels)),
                        weight: rng.random_range(0.05..=1.0),
                        source_id: i as u64,
                        m_used: 1,
                    }
                })
                .collect();
            let (Ok(a), Ok(b)) = (spn_aggregate(&factors), uniform_aggregate(&factors)) else {
                return 1;
            };
            factors.shuffle(&mut rng);
            let (Ok(a2), Ok(b2)) = (spn_aggregate(&factors), uniform_aggregate(&factors)) else {
                return 1;
            };
            let ok =
                is_valid(&a.dist) && is_valid(&b.dist) && a.dist == a2.dist && b.dist == b2.dist;
            usize::from(!ok)
        })
        .sum()
}

pub fn validate_assumptions(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let id = ExperimentId::Assumptions;
    let c = &config.assumptions;
    let k = &config.constants;
    let world = config.world_for(0, |_| {})?;
    let dec = world.decoder();
    let s = config.stream(id);
    let k_max = world.k_max();

    let rho = world.measure_correlation(c.correlation_entities)?;

    let sampled: Vec<(crate::world::Entity, Vec<SoftFactor>)> = (0..c.entities)
        .into_par_iter()
        .map(|j| {
            let e = world.sample_entity_with(k_max, &mut s.descend(&[0, j as u64]))?;
            let f = estimate_factors(&dec, &e.evidence, c.mc_samples, &s.descend(&[1, j as u64]))?;
            Ok((e, f))
        })
        .collect::<Result<_>>()?;
    let norms: Vec<f64> = sampled
        .iter()
        .flat_map(|(e, _)| e.evidence.iter().map(|p| p.frobenius_norm()))
        .collect();
    let max_norm = norms.iter().copied().fold(0.0, f64::max);
    let mean_norm = super::mean(&norms);
    let (preds, ys): (Vec<LabelDist>, Vec<usize>) = sampled
        .iter()
        .flat_map(|(e, f)| f.iter().map(move |x| (x.dist.clone(), e.label)))
        .unzip();
    let individual = ece(&preds, &ys, DEFAULT_BINS)?.ece;
    let max_k = sampled.iter().map(|(e, _)| e.k()).max().unwrap_or(0);

    let violations = closure_violations(c.closure_cases, k_max, world.num_labels(), &s.child(2));

    let per_latent = c.latent_samples.div_ceil(sampled.len().max(1)).max(1);
    let mut min_prob = f64::INFINITY;
    let mut drawn = 0usize;
    'outer: for (j, (e, _)) in sampled.iter().enumerate() {
        let mut rng = s.descend(&[3, j as u64]);
        let item = &e.evidence[rng.random_range(0..e.k())];
        for z in sample_latents(item, per_latent, &mut rng) {
            min_prob = min_prob.min(decode(&dec, &z)?.min_prob());
            drawn += 1;
            if drawn >= c.latent_samples {
                break 'outer;
            }
        }
    }
    let support_floor = 1.0 / (2.0 * world.num_labels() as f64);

    let checks = vec![
        Check::new(
            "A1 evidence correlation |rho|",
            rho.abs(),
            Relation::Le,
            k.max_correlation,
        ),
        Check::new(
            "A2 max covariance Frobenius norm",
            max_norm,
            Relation::Le,
            world.config().sigma_max,
        ),
        Check::new(
            "A3 individual factor ece",
            individual,
            Relation::Le,
            k.max_individual_ece,
        ),
        Check::new(
            "A4 closure or order violations",
            violations as f64,
            Relation::Eq,
            0.0,
        ),
        Check::new(
            "A5 evidence count",
            max_k as f64,
            Relation::Le,
            k_max as f64,
        )
        .auxiliary(),
        Check::new(
            "A6 min decoder probability",
            min_prob,
            Relation::Ge,
            support_floor - 1e-9,
        ),
    ];
    let mut table = Table::new(&["assumption", "statistic", "relation", "threshold", "status"]);
    for ch in &checks {
        table.push(vec![
            json(ch.name.split_whitespace().next().unwrap_or_default()),
            json(ch.statistic),
            json(ch.relation),
            json(ch.threshold),
            json(if ch.passed { "pass" } else { "flagged" }),
        ]);
    }
    let details = json!({
        "correlation": rho,
        "mean_covariance_norm": mean_norm,
        "max_covariance_norm": max_norm,
        "individual_ece": individual,
        "closure_cases": c.closure_cases,
        "latent_samples": drawn,
        "min_decoder_probability": min_prob,
        "support_floor": support_floor,
    });
    let notes = vec![format!(
        "the support floor is 1/(2|Y|) = {support_floor:.4}; a stated empirical minimum of 0.01 would not satisfy it"
    )];
    Ok(ExperimentReport::assemble(
        id, config, checks, table, details, notes,
    ))
}
