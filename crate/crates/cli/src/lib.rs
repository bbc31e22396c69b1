//! Argument parsing, configuration loading and dispatch for the `lpf` binary.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lpf_core::harness::{
    run_all, run_experiment, with_jobs, write_report, write_summary, ExperimentConfig,
    ExperimentId, ExperimentReport, OutputFormat, Verdict,
};
use lpf_core::world::{read_jsonl, write_jsonl};
use lpf_core::{
    build_world, estimate_factors, learned_aggregate, spn_aggregate, train, uniform_aggregate,
    AttentionAggregator, Decoder, Entity, Stream, TrainConfig,
};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "lpf",
    version,
    about = "Latent posterior factor aggregation and bound verification"
)]
pub struct Cli {
    /// TOML file overriding the built-in experiment defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "DIR", default_value = "./lpf-out")]
    pub out: PathBuf,

    /// Root seed; falls back to LPF_SEED, then the config file, then 42.
    #[arg(long, global = true, env = "LPF_SEED", value_name = "U64")]
    pub seed: Option<u64>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Both)]
    pub format: Format,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Both,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => OutputFormat::Json,
            Format::Csv => OutputFormat::Csv,
            Format::Both => OutputFormat::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    All,
    One(ExperimentId),
}

fn parse_target(s: &str) -> Result<Target, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Target::All);
    }
    s.parse::<ExperimentId>()
        .map(Target::One)
        .map_err(|_| format!("expected one of t1..t7, all, assumptions; got '{s}'"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggMethod {
    Spn,
    Uniform,
    Learned,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run verification experiments and write their reports.
    Verify {
        #[arg(value_parser = parse_target, value_name = "t1..t7|all|assumptions")]
        target: Target,
    },
    /// Estimate soft factors for every item of every entity in a JSONL file.
    Factor {
        #[arg(long)]
        input: PathBuf,
        /// Decoder JSON; the configured world's matched decoder otherwise.
        #[arg(long)]
        decoder: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Aggregate the evidence of every entity in a JSONL file.
    Aggregate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = AggMethod::Spn)]
        method: AggMethod,
        /// Trained aggregator JSON, required for `--method learned`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        decoder: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the attention aggregator on a synthetic dataset.
    Train {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Evidence items per entity.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Synthetic world utilities.
    World {
        #[command(subcommand)]
        action: WorldAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum WorldAction {
    /// Sample entities and write them as JSONL.
    Export {
        #[arg(long, default_value_t = 100)]
        entities: usize,
        /// Evidence items per entity; the world's `k_max` when omitted.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// A parsed configuration plus the keys that were not recognized.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub unknown_keys: Vec<String>,
}

/// Reads a TOML file whose sections override the built-in defaults.
pub fn load_config(path: &Path) -> anyhow::Result<LoadedConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    parse_config(&text).with_context(|| format!("invalid config file {}", path.display()))
}

pub fn parse_config(text: &str) -> anyhow::Result<LoadedConfig> {
    let mut unknown_keys = Vec::new();
    let de = toml::Deserializer::new(text);
    let config: ExperimentConfig =
        serde_ignored::deserialize(de, |p| unknown_keys.push(p.to_string()))
            .map_err(|e| anyhow!("{e}"))?;
    Ok(LoadedConfig {
        config,
        unknown_keys,
    })
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_PASS
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let loaded = load_config(path)?;
            for key in &loaded.unknown_keys {
                log::warn!("{}: ignoring unknown key '{key}'", path.display());
            }
            loaded.config
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.world.seed = config.seed;
    Ok(config)
}

pub fn dispatch(cli: &Cli) -> anyhow::Result<i32> {
    let config = resolve_config(cli)?;
    let format = OutputFormat::from(cli.format);
    match &cli.command {
        Command::Verify { target } => {
            let reports = with_jobs(cli.jobs, || verify(*target, &config, &cli.out, format))??;
            let failed = reports.iter().any(|r| r.verdict == Verdict::Fail);
            Ok(if failed { EXIT_FAIL } else { EXIT_PASS })
        }
        Command::Factor {
            input,
            decoder,
            samples,
            output,
        } => {
            let decoder = load_decoder(decoder.as_deref(), &config)?;
            let entities = read_entities(input)?;
            let root = Stream::new(config.seed);
            let mut out = open_output(output.as_deref())?;
            for (j, e) in entities.iter().enumerate() {
                let factors =
                    estimate_factors(&decoder, &e.evidence, *samples, &root.child(j as u64))?;
                write_line(
                    &mut out,
                    &FactorRecord {
                        entity: j,
                        label: e.label,
                        factors,
                    },
                )?;
            }
            out.flush()?;
            Ok(EXIT_PASS)
        }
        Command::Aggregate {
            input,
            method,
            model,
            decoder,
            samples,
            output,
        } => {
            let entities = read_entities(input)?;
            let mut out = open_output(output.as_deref())?;
            match method {
                AggMethod::Learned => {
                    let path = model
                        .as_deref()
                        .ok_or_else(|| anyhow!("--method learned requires --model PATH"))?;
                    let agg: AttentionAggregator = read_json(path)?;
                    for (j, e) in entities.iter().enumerate() {
                        let result = learned_aggregate(&agg, &e.evidence)?;
                        write_line(
                            &mut out,
                            &AggregateRecord {
                                entity: j,
                                label: e.label,
                                result,
                            },
                        )?;
                    }
                }
                AggMethod::Spn | AggMethod::Uniform => {
                    let decoder = load_decoder(decoder.as_deref(), &config)?;
                    let root = Stream::new(config.seed);
                    for (j, e) in entities.iter().enumerate() {
                        let factors = estimate_factors(
                            &decoder,
                            &e.evidence,
                            *samples,
                            &root.child(j as u64),
                        )?;
                        let result = if *method == AggMethod::Spn {
                            spn_aggregate(&factors)?
                        } else {
                            uniform_aggregate(&factors)?
                        };
                        write_line(
                            &mut out,
                            &AggregateRecord {
                                entity: j,
                                label: e.label,
                                result,
                            },
                        )?;
                    }
                }
            }
            out.flush()?;
            Ok(EXIT_PASS)
        }
        Command::Train { n_train, n_test, k } => {
            with_jobs(cli.jobs, || {
                train_command(&config, *n_train, *n_test, *k, &cli.out)
            })??;
            Ok(EXIT_PASS)
        }
        Command::World {
            action:
                WorldAction::Export {
                    entities,
                    k,
                    output,
                },
        } => {
            let world = build_world(config.world.clone())?;
            let k = k.unwrap_or(world.k_max());
            let sampled = (0..*entities as u64)
                .map(|j| world.sample_entity(k, j))
                .collect::<Result<Vec<_>, _>>()?;
            let mut out = open_output(output.as_deref())?;
            write_jsonl(&sampled, &mut out)?;
            out.flush()?;
            Ok(EXIT_PASS)
        }
    }
}

fn verify(
    target: Target,
    config: &ExperimentConfig,
    out: &Path,
    format: OutputFormat,
) -> anyhow::Result<Vec<ExperimentReport>> {
    let reports = match target {
        Target::One(id) => vec![run_experiment(id, config)?],
        Target::All => {
            let (reports, summary) = run_all(config)?;
            write_summary(&summary, out, format)?;
            reports
        }
    };
    for r in &reports {
        write_report(r, out, format)?;
        println!(
            "{:<12} {} {:<4} margin {:>8.4}  {}",
            r.id.as_str(),
            r.verdict.glyph(),
            verdict_word(r.verdict),
            r.margin,
            r.title
        );
        for c in r.failed_checks() {
            println!(
                "    failed: {} = {} (needs {} {})",
                c.name,
                c.statistic,
                relation_str(c),
                c.threshold
            );
        }
    }
    Ok(reports)
}

fn verdict_word(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "FAIL",
    }
}

fn relation_str(c: &lpf_core::harness::Check) -> String {
    serde_json::to_value(c.relation)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    n_train: usize,
    n_test: usize,
    k: usize,
    report: &'a lpf_core::TrainReport,
}

fn train_command(
    config: &ExperimentConfig,
    n_train: Option<usize>,
    n_test: Option<usize>,
    k: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    let t3 = &config.t3;
    let n_train = n_train
        .or_else(|| t3.n_values.last().copied())
        .unwrap_or(1000);
    let n_test = n_test.unwrap_or(t3.n_test);
    let k = k.unwrap_or(t3.k);
    let mut world_cfg = config.world.clone();
    world_cfg.k_max = world_cfg.k_max.max(k);
    let world = build_world(world_cfg)?;
    let dataset = world.make_agg_dataset(n_train, n_test, k)?;
    let train_cfg = TrainConfig {
        seed: config.seed,
        ..t3.train.clone()
    };
    let arch = AttentionAggregator::new(
        world.decoder(),
        t3.hidden,
        train_cfg.l2_lambda,
        &mut Stream::new(config.seed).child(1),
    );
    let (model, report) = train(&dataset, &arch, &train_cfg)?;
    fs::create_dir_all(out)?;
    fs::write(
        out.join("aggregator.json"),
        serde_json::to_string_pretty(&model)? + "\n",
    )?;
    let summary = TrainOutput {
        n_train,
        n_test,
        k,
        report: &report,
    };
    fs::write(
        out.join("train_report.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    let bound = report
        .bound
        .map_or_else(|| "n/a".to_string(), |b| format!("{b:.4}"));
    println!(
        "train loss {:.4}  test loss {:.4}  gap {:.4}  bound {bound}  d_eff {}  accuracy {:.3}",
        report.train_loss, report.test_loss, report.gap, report.d_eff, report.test_accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct FactorRecord {
    entity: usize,
    label: usize,
    factors: Vec<lpf_core::SoftFactor>,
}

#[derive(Serialize)]
struct AggregateRecord {
    entity: usize,
    label: usize,
    result: lpf_core::AggregationResult,
}

fn load_decoder(path: Option<&Path>, config: &ExperimentConfig) -> anyhow::Result<Decoder> {
    match path {
        Some(p) => read_json(p),
        None => Ok(build_world(config.world.clone())?.decoder()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("cannot parse {}", path.display()))
}

fn read_entities(path: &Path) -> anyhow::Result<Vec<Entity>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let entities = read_jsonl(BufReader::new(file))
        .with_context(|| format!("cannot parse {}", path.display()))?;
    if entities.is_empty() {
        bail!("{} contains no entities", path.display());
    }
    Ok(entities)
}

fn open_output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
            ))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_line<T: Serialize>(out: &mut dyn Write, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}
