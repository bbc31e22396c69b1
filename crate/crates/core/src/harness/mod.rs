//! Seeded verification experiments.
//!
//! Each experiment draws every random quantity from a stream derived from the
//! experiment seed and the job's coordinates (sweep point, trial, entity), so
//! reports are bitwise reproducible regardless of thread count.

mod assumptions;
mod experiments;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LpfError, Result};
use crate::rng::Stream;
use crate::train::TrainConfig;
use crate::world::{build_world, World, WorldConfig};

pub use assumptions::validate_assumptions;
pub use experiments::{run_t1, run_t2, run_t3, run_t4, run_t5, run_t6, run_t7, REFERENCE_SWEEP};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
    T7,
    Assumptions,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 8] = [
        ExperimentId::T1,
        ExperimentId::T2,
        ExperimentId::T3,
        ExperimentId::T4,
        ExperimentId::T5,
        ExperimentId::T6,
        ExperimentId::T7,
        ExperimentId::Assumptions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::T1 => "t1",
            ExperimentId::T2 => "t2",
            ExperimentId::T3 => "t3",
            ExperimentId::T4 => "t4",
            ExperimentId::T5 => "t5",
            ExperimentId::T6 => "t6",
            ExperimentId::T7 => "t7",
            ExperimentId::Assumptions => "assumptions",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ExperimentId::T1 => "aggregate calibration",
            ExperimentId::T2 => "Monte Carlo factor error",
            ExperimentId::T3 => "learned aggregator generalization",
            ExperimentId::T4 => "information-theoretic calibration floor",
            ExperimentId::T5 => "robustness to corrupted evidence",
            ExperimentId::T6 => "calibration versus evidence count",
            ExperimentId::T7 => "uncertainty decomposition",
            ExperimentId::Assumptions => "modelling assumptions",
        }
    }

    fn stream_tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = LpfError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|id| id.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| LpfError::Config(format!("unknown experiment '{s}'")))
    }
}

/// Bound constants shared by every experiment and echoed into each report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Constants {
    pub calibration_c: f64,
    pub robustness_c: f64,
    pub sample_complexity_c: f64,
    pub delta: f64,
    /// Parameter count quoted for the reference aggregator, used for a
    /// second, fixed-dimension generalization bound.
    pub reference_d_eff: usize,
    pub max_individual_ece: f64,
    pub max_correlation: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            calibration_c: crate::aggregate::DEFAULT_BOUND_CONSTANT,
            robustness_c: crate::aggregate::DEFAULT_BOUND_CONSTANT,
            sample_complexity_c: crate::metrics::SAMPLE_COMPLEXITY_CONSTANT,
            delta: 0.05,
            reference_d_eff: 1335,
            max_individual_ece: 0.25,
            max_correlation: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T1Config {
    pub entities: usize,
    pub k: usize,
    pub mc_samples: usize,
    pub train_entities: usize,
}

impl Default for T1Config {
    fn default() -> Self {
        Self {
            entities: 300,
            k: 10,
            mc_samples: 16,
            train_entities: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T2Config {
    pub m_values: Vec<usize>,
    pub trials: usize,
    pub posteriors: usize,
    pub dim: usize,
    pub oracle_order: usize,
    pub min_trial_pass_rate: f64,
    pub slope_range: (f64, f64),
}

impl Default for T2Config {
    fn default() -> Self {
        Self {
            m_values: vec![4, 8, 16, 32, 64],
            trials: 50,
            posteriors: 20,
            dim: 2,
            oracle_order: crate::factor::ORACLE_DEFAULT_ORDER,
            min_trial_pass_rate: 0.95,
            slope_range: (-0.65, -0.35),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T3Config {
    pub n_values: Vec<usize>,
    pub n_test: usize,
    pub seeds: usize,
    pub k: usize,
    pub hidden: usize,
    pub min_accuracy: f64,
    pub train: TrainConfig,
}

impl Default for T3Config {
    fn default() -> Self {
        Self {
            n_values: vec![2002, 3003, 4200],
            n_test: 900,
            seeds: 5,
            k: 5,
            hidden: crate::attention::DEFAULT_HIDDEN,
            min_accuracy: 0.90,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T4Config {
    pub entities: usize,
    pub k: usize,
    pub mc_samples: usize,
    pub slack: f64,
}

impl Default for T4Config {
    fn default() -> Self {
        Self {
            entities: 100,
            k: 10,
            mc_samples: 16,
            slack: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T5Config {
    pub epsilons: Vec<f64>,
    pub trials: usize,
    pub entities: usize,
    pub k: usize,
    pub mc_samples: usize,
    pub delta_item: f64,
    pub monotone_tolerance: f64,
}

impl Default for T5Config {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.5],
            trials: 10,
            entities: 100,
            k: 10,
            mc_samples: 16,
            delta_item: 1.0,
            monotone_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T6Config {
    pub k_values: Vec<usize>,
    pub trials: usize,
    pub entities: usize,
    pub mc_samples: usize,
    pub min_r2: f64,
}

impl Default for T6Config {
    fn default() -> Self {
        Self {
            k_values: vec![1, 2, 3, 5, 7, 10, 15, 20],
            trials: 20,
            entities: 100,
            mc_samples: 16,
            min_r2: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T7Config {
    pub k_values: Vec<usize>,
    pub mc_samples: usize,
    pub entities: usize,
    pub max_decomposition_error: f64,
    pub max_aleatoric_cv: f64,
    /// Conflict rate of the extra world used to compare epistemic variance.
    pub high_conflict_rate: f64,
}

impl Default for T7Config {
    fn default() -> Self {
        Self {
            k_values: vec![1, 2, 3, 5],
            mc_samples: 100,
            entities: 50,
            max_decomposition_error: 1e-6,
            max_aleatoric_cv: 0.5,
            high_conflict_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssumptionConfig {
    pub correlation_entities: usize,
    pub entities: usize,
    pub mc_samples: usize,
    pub closure_cases: usize,
    pub latent_samples: usize,
}

impl Default for AssumptionConfig {
    fn default() -> Self {
        Self {
            correlation_entities: 300,
            entities: 300,
            mc_samples: 16,
            closure_cases: 1000,
            latent_samples: 1000,
        }
    }
}

/// Everything an experiment run depends on. `seed` overrides `world.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub constants: Constants,
    pub t1: T1Config,
    pub t2: T2Config,
    pub t3: T3Config,
    pub t4: T4Config,
    pub t5: T5Config,
    pub t6: T6Config,
    pub t7: T7Config,
    pub assumptions: AssumptionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            world: WorldConfig::default(),
            constants: Constants::default(),
            t1: T1Config::default(),
            t2: T2Config::default(),
            t3: T3Config::default(),
            t4: T4Config::default(),
            t5: T5Config::default(),
            t6: T6Config::default(),
            t7: T7Config::default(),
            assumptions: AssumptionConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// The configured world, seeded from `seed`, with `k_max` raised to at
    /// least `k`.
    pub(crate) fn world_for(&self, k: usize, edit: impl FnOnce(&mut WorldConfig)) -> Result<World> {
        let mut cfg = self.world.clone();
        cfg.seed = self.seed;
        cfg.k_max = cfg.k_max.max(k);
        edit(&mut cfg);
        build_world(cfg)
    }

    pub(crate) fn stream(&self, id: ExperimentId) -> Stream {
        Stream::new(self.seed).child(id.stream_tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn glyph(self) -> &'static str {
        match self {
            Verdict::Pass => "✓",
            Verdict::Fail => "✗",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
}

impl Relation {
    pub fn holds(self, statistic: f64, threshold: f64) -> bool {
        match self {
            Relation::Le => statistic <= threshold,
            Relation::Lt => statistic < threshold,
            Relation::Ge => statistic >= threshold,
            Relation::Eq => statistic == threshold,
        }
    }
}

/// One statistic compared against its bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub passed: bool,
    /// Whether the check contributes to the report margin.
    pub headline: bool,
}

impl Check {
    pub fn new(
        name: impl Into<String>,
        statistic: f64,
        relation: Relation,
        threshold: f64,
    ) -> Self {
        Self {
            name: name.into(),
            statistic,
            relation,
            threshold,
            passed: statistic.is_finite() && relation.holds(statistic, threshold),
            headline: true,
        }
    }

    /// Sanity check: still part of the verdict, but excluded from the margin.
    pub fn auxiliary(mut self) -> Self {
        self.headline = false;
        self
    }

    /// Relative distance to the threshold on the passing side; `None` for equalities.
    pub fn slack(&self) -> Option<f64> {
        let scale = self.threshold.abs().max(1e-12);
        match self.relation {
            Relation::Le | Relation::Lt => Some((self.threshold - self.statistic) / scale),
            Relation::Ge => Some((self.statistic - self.threshold) / scale),
            Relation::Eq => None,
        }
    }
}

/// Rectangular table written as CSV and embedded in the JSON report.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<serde_json::Value>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<serde_json::Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Null => String::new(),
                other => other.to_string(),
            }))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub id: ExperimentId,
    pub title: String,
    pub seed: u64,
    pub verdict: Verdict,
    /// Smallest relative slack over the headline inequality checks.
    pub margin: f64,
    pub constants: Constants,
    pub checks: Vec<Check>,
    pub table: Table,
    pub details: serde_json::Value,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub(crate) fn assemble(
        id: ExperimentId,
        config: &ExperimentConfig,
        checks: Vec<Check>,
        table: Table,
        details: serde_json::Value,
        notes: Vec<String>,
    ) -> Self {
        let verdict = if !checks.is_empty() && checks.iter().all(|c| c.passed) {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        let margin = checks
            .iter()
            .filter(|c| c.headline)
            .filter_map(Check::slack)
            .fold(f64::INFINITY, f64::min);
        Self {
            id,
            title: id.title().to_string(),
            seed: config.seed,
            verdict,
            margin: if margin.is_finite() { margin } else { 0.0 },
            constants: config.constants.clone(),
            checks,
            table,
            details,
            notes,
        }
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run_experiment(id: ExperimentId, config: &ExperimentConfig) -> Result<ExperimentReport> {
    log::info!("running {id} ({})", id.title());
    match id {
        ExperimentId::T1 => run_t1(config),
        ExperimentId::T2 => run_t2(config),
        ExperimentId::T3 => run_t3(config),
        ExperimentId::T4 => run_t4(config),
        ExperimentId::T5 => run_t5(config),
        ExperimentId::T6 => run_t6(config),
        ExperimentId::T7 => run_t7(config),
        ExperimentId::Assumptions => validate_assumptions(config),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub id: ExperimentId,
    pub title: String,
    pub status: String,
    pub verdict: Verdict,
    pub margin: f64,
    pub failed_checks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub verdict: Verdict,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn from_reports(seed: u64, reports: &[ExperimentReport]) -> Self {
        let rows: Vec<SummaryRow> = reports
            .iter()
            .map(|r| SummaryRow {
                id: r.id,
                title: r.title.clone(),
                status: r.verdict.glyph().to_string(),
                verdict: r.verdict,
                margin: r.margin,
                failed_checks: r.failed_checks().map(|c| c.name.clone()).collect(),
            })
            .collect();
        let verdict = if rows.iter().all(|r| r.verdict == Verdict::Pass) {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        Self {
            seed,
            verdict,
            rows,
        }
    }

    pub fn failing(&self) -> impl Iterator<Item = ExperimentId> + '_ {
        self.rows
            .iter()
            .filter(|r| r.verdict == Verdict::Fail)
            .map(|r| r.id)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "experiment",
            "claim",
            "status",
            "verdict",
            "margin",
            "failed_checks",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.id.as_str().to_string(),
                r.title.clone(),
                r.status.clone(),
                serde_json::to_value(r.verdict)?
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
                serde_json::Value::from(r.margin).to_string(),
                r.failed_checks.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every experiment in the canonical order.
pub fn run_all(config: &ExperimentConfig) -> Result<(Vec<ExperimentReport>, Summary)> {
    let reports = ExperimentId::ALL
        .into_iter()
        .map(|id| run_experiment(id, config))
        .collect::<Result<Vec<_>>>()?;
    let summary = Summary::from_reports(config.seed, &reports);
    Ok((reports, summary))
}

/// Runs `f` on a pool with `jobs` workers (all cores when `None`).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| LpfError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
    Both,
}

impl OutputFormat {
    fn json(self) -> bool {
        matches!(self, OutputFormat::Json | OutputFormat::Both)
    }

    fn csv(self) -> bool {
        matches!(self, OutputFormat::Csv | OutputFormat::Both)
    }
}

/// Writes `<id>_report.json` and/or `<id>_table.csv`; returns the paths written.
pub fn write_report(
    report: &ExperimentReport,
    dir: &Path,
    format: OutputFormat,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if format.json() {
        let path = dir.join(format!("{}_report.json", report.id));
        fs::write(&path, serde_json::to_string_pretty(report)? + "\n")?;
        written.push(path);
    }
    if format.csv() {
        let path = dir.join(format!("{}_table.csv", report.id));
        report.table.write_csv(fs::File::create(&path)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes `summary.csv`, plus `summary.json` when JSON output is requested.
pub fn write_summary(summary: &Summary, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let path = dir.join("summary.csv");
    summary.write_csv(fs::File::create(&path)?)?;
    let mut written = vec![path];
    if format.json() {
        let path = dir.join("summary.json");
        fs::write(&path, serde_json::to_string_pretty(summary)? + "\n")?;
        written.push(path);
    }
    Ok(written)
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub(crate) fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Nearest-rank percentile, `q` in (0, 1].
pub(crate) fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Least-squares slope of `ln y` on `ln x`.
pub(crate) fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub(crate) fn json<T: Serialize>(value: T) -> serde_json::Value {
    serde_json::to_value(value).unwrap_or(serde_json::Value::Null)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ids_round_trip() {
        for id in ExperimentId::ALL {
            assert_eq!(id.as_str().parse::<ExperimentId>().unwrap(), id);
        }
        assert!("t9".parse::<ExperimentId>().is_err());
    }

    #[test]
    fn stats_helpers() {
        let xs: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&xs, 0.95), 19.0);
        assert_eq!(percentile(&xs, 1.0), 20.0);
        assert_abs_diff_eq!(mean(&xs), 10.5);
        assert_abs_diff_eq!(std_dev(&[1.0, 3.0]), 2f64.sqrt(), epsilon = 1e-15);
        let y: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(-0.5)).collect();
        assert_abs_diff_eq!(log_log_slope(&xs, &y), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn check_semantics() {
        assert!(Check::new("a", 1.0, Relation::Le, 1.0).passed);
        assert!(!Check::new("a", 1.0, Relation::Lt, 1.0).passed);
        assert!(!Check::new("a", f64::NAN, Relation::Le, 1.0).passed);
        assert_eq!(Check::new("a", 0.5, Relation::Le, 1.0).slack(), Some(0.5));
        assert_eq!(Check::new("a", 0.0, Relation::Eq, 0.0).slack(), None);
    }

    #[test]
    fn empty_checks_fail() {
        let r = ExperimentReport::assemble(
            ExperimentId::T1,
            &ExperimentConfig::default(),
            vec![],
            Table::default(),
            serde_json::Value::Null,
            vec![],
        );
        assert_eq!(r.verdict, Verdict::Fail);
    }
}
