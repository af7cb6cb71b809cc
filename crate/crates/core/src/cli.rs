//! Command-line driver: config loading, experiment dispatch and output files.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis;
use crate::config::{parse_config, FederationConfig, FreeRiderConfig};
use crate::federation::{self, PhaseTimings, RunLog};
use crate::linalg::{mean, std_dev};
use crate::{Error, Result};

/// Environment variable overriding the default output directory.
pub const OUT_DIR_ENV: &str = "FEDSPECTRA_OUT";
pub const DEFAULT_OUT_DIR: &str = "fedspectra-out";

#[derive(Debug, Parser)]
#[command(name = "fedspectra", version, about = "Data-free client contribution estimation for federated learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run one experiment per seed; writes rounds.jsonl and summary.csv.
    Run(CommonArgs),
    /// Sweep Kalman Q and ε; writes grid.csv.
    Sweep(CommonArgs),
    /// Inject a free-rider and track detections; writes detection.csv.
    Freerider(CommonArgs),
    /// Per-layer entropy correlation study; writes layers.csv.
    Layerwise(CommonArgs),
}

#[derive(Debug, Clone, PartialEq, Eq, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory [default: $FEDSPECTRA_OUT or ./fedspectra-out]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds; defaults to the config's seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Worker threads, overriding the config (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Run(_) => "run",
            Command::Sweep(_) => "sweep",
            Command::Freerider(_) => "freerider",
            Command::Layerwise(_) => "layerwise",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Run(a) | Command::Sweep(a) | Command::Freerider(a) | Command::Layerwise(a) => a,
        }
    }
}

/// Mean and population standard deviation of one phase, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseStat {
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl PhaseStat {
    fn of(xs: &[f64]) -> Self {
        Self {
            mean_ms: mean(xs),
            std_ms: std_dev(xs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingReport {
    pub rounds: usize,
    pub scoring: PhaseStat,
    pub fusion: PhaseStat,
    pub aggregation: PhaseStat,
    /// Sum of the three phases per round.
    pub total: PhaseStat,
}

/// Server-side phase statistics over the rounds of a run.
pub fn timing_report(timings: &[PhaseTimings]) -> Result<TimingReport> {
    if timings.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "timing report needs at least 2 rounds, got {}",
            timings.len()
        )));
    }
    let col = |f: fn(&PhaseTimings) -> f64| timings.iter().map(f).collect::<Vec<_>>();
    Ok(TimingReport {
        rounds: timings.len(),
        scoring: PhaseStat::of(&col(|t| t.scoring_ms)),
        fusion: PhaseStat::of(&col(|t| t.fusion_ms)),
        aggregation: PhaseStat::of(&col(|t| t.aggregation_ms)),
        total: PhaseStat::of(&col(|t| t.scoring_ms + t.fusion_ms + t.aggregation_ms)),
    })
}

#[derive(Debug, Clone, Serialize)]
struct SeedSummary {
    seed: u64,
    standalone: Vec<f64>,
    final_accuracy: f64,
    timings: Vec<PhaseTimings>,
    timing_report: Option<TimingReport>,
}

/// Written before the first round and rewritten once the command finishes.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: FederationConfig,
    pub seeds: Vec<u64>,
    pub outputs: Vec<PathBuf>,
    pub complete: bool,
    runs: Vec<SeedSummary>,
}

impl RunManifest {
    fn new(command: &str, config: &FederationConfig, seeds: &[u64]) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config: config.clone(),
            seeds: seeds.to_vec(),
            outputs: Vec::new(),
            complete: false,
            runs: Vec::new(),
        }
    }

    fn record_run(&mut self, seed: u64, log: &RunLog) {
        self.runs.push(SeedSummary {
            seed,
            standalone: log.standalone.clone(),
            final_accuracy: log.final_accuracy,
            timings: log.timings.clone(),
            timing_report: timing_report(&log.timings).ok(),
        });
    }

    fn write(&self, out: &Path) -> Result<()> {
        let path = out.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// `--out`, else `$FEDSPECTRA_OUT`, else `./fedspectra-out`.
pub fn resolve_out_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes `rounds.jsonl` and `summary.csv` for one run into `dir`.
pub fn write_run_outputs(dir: &Path, log: &RunLog) -> Result<Vec<PathBuf>> {
    let rounds = dir.join("rounds.jsonl");
    fs::write(&rounds, log.to_jsonl()?).map_err(|e| Error::io(&rounds, e))?;

    let summary = dir.join("summary.csv");
    let mut w = csv_writer(&summary)?;
    let n = log.records.first().map_or(0, |r| r.weights.len());
    let mut header = vec!["round".to_string()];
    header.extend((0..n).map(|i| format!("weight_{i}")));
    header.extend(["pearson", "spearman", "global_acc"].map(String::from));
    w.write_record(&header)?;
    for r in &log.records {
        let mut row = vec![r.round.to_string()];
        row.extend(r.weights.iter().map(f64::to_string));
        row.extend([r.pearson, r.spearman, r.global_accuracy].map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&summary, e))?;
    Ok(vec![rounds, summary])
}

fn seeded(config: &FederationConfig, seed: u64) -> FederationConfig {
    FederationConfig {
        seed,
        ..config.clone()
    }
}

/// Executes `command` with an already-parsed config.
pub fn run_command(
    command: &str,
    config: &FederationConfig,
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let seeds: Vec<u64> = if seeds.is_empty() {
        vec![config.seed]
    } else {
        seeds.to_vec()
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut config = config.clone();
    if command == "freerider" && config.free_rider.is_none() {
        config.free_rider = Some(FreeRiderConfig {
            client: config.n_clients - 1,
            pool_size: None,
        });
    }
    let mut manifest = RunManifest::new(command, &config, &seeds);
    manifest.write(out)?;

    let outputs = match command {
        "run" => {
            let mut outputs = Vec::new();
            for &seed in &seeds {
                let dir = if seeds.len() == 1 {
                    out.to_path_buf()
                } else {
                    out.join(format!("seed_{seed}"))
                };
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let log = federation::run_experiment(&seeded(&config, seed))?;
                outputs.extend(write_run_outputs(&dir, &log)?);
                manifest.record_run(seed, &log);
                log::info!("seed {seed}: final accuracy {:.4}, final pearson {:.4}", log.final_accuracy, log.final_pearson());
            }
            outputs
        }
        "sweep" => {
            let grid = analysis::sweep(&config, &config.sweep.q, &config.sweep.epsilon, &seeds)?;
            let path = out.join("grid.csv");
            let mut w = csv_writer(&path)?;
            w.write_record(["q", "epsilon", "mean_pearson", "std_pearson", "seeds"])?;
            for c in &grid.cells {
                w.write_record([
                    c.q.to_string(),
                    c.epsilon.to_string(),
                    c.mean.to_string(),
                    c.std.to_string(),
                    c.per_seed.len().to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            log::info!("sweep spread {:.4}", grid.spread());
            vec![path]
        }
        "freerider" => {
            let path = out.join("detection.csv");
            let mut w = csv_writer(&path)?;
            w.write_record(["seed", "interval_start", "interval_end", "client", "free_rider", "flag_rate"])?;
            for &seed in &seeds {
                let cfg = seeded(&config, seed);
                let (log, rates) = analysis::free_rider_experiment(&cfg)?;
                let fr = log.free_rider.unwrap_or(usize::MAX);
                for r in &rates {
                    for (client, fp) in r.false_positive.iter().enumerate() {
                        let is_fr = client == fr;
                        let rate = if is_fr { r.true_positive } else { *fp };
                        w.write_record([
                            seed.to_string(),
                            r.start.to_string(),
                            r.end.to_string(),
                            client.to_string(),
                            is_fr.to_string(),
                            rate.to_string(),
                        ])?;
                    }
                }
                manifest.record_run(seed, &log);
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            vec![path]
        }
        "layerwise" => {
            let studies = analysis::layerwise_over_seeds(&config, &seeds)?;
            let path = out.join("layers.csv");
            let mut w = csv_writer(&path)?;
            w.write_record(["seed", "layer", "mean_pearson"])?;
            for s in &studies {
                for (k, v) in s.per_layer.iter().enumerate() {
                    w.write_record([s.seed.to_string(), k.to_string(), v.to_string()])?;
                }
            }
            for (k, v) in analysis::mean_per_layer(&studies).iter().enumerate() {
                w.write_record(["mean".to_string(), k.to_string(), v.to_string()])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            vec![path]
        }
        other => {
            return Err(Error::invalid(
                "command",
                format!("unknown subcommand `{other}` (run, sweep, freerider, layerwise)"),
            ))
        }
    };

    manifest.outputs = outputs.clone();
    manifest.outputs.push(out.join("manifest.json"));
    manifest.complete = true;
    manifest.write(out)?;
    Ok(manifest.outputs)
}

/// Parses the config named on the command line and runs the subcommand.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let args = cli.command.args();
    let mut config = parse_config(&args.config)?;
    if let Some(w) = args.workers {
        config.workers = w;
    }
    let out = resolve_out_dir(args.out.as_deref());
    run_command(cli.command.name(), &config, &args.seeds, &out)
}
