use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fedshield::checkpoint::read_probe;
use fedshield::config::load_config;
use fedshield::core::defense::DefenseMode;
use fedshield::core::simulator::{AggregatorKind, ExperimentConfig};
use fedshield::error::{exit, CliError, Result};
use fedshield::format::{read_round_log, summary_json};
use fedshield::manifest::{unix_ms, RunManifest};
use fedshield::report::{windowed, write_report};
use fedshield::run::{run_to_dir, train_probe_to, ProbeSource, CACHE_DIR, MANIFEST_FILE};
use fedshield::sweep::{cells, run_sweep, thread_count, write_table, write_table_file, SweepOptions};

/// Probe-gated secure aggregation for federated LoRA, at desk scale.
///
/// Exit codes: 0 ok, 1 I/O or file-format error, 2 bad config,
/// 3 single-class probe data, 4 probe/feature length mismatch,
/// 5 numeric failure, 6 round log without probe scores.
#[derive(Parser, Debug)]
#[command(name = "fedshield", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key=value` config file, or a run manifest to replay.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "fedshield-out")]
    out_dir: PathBuf,
    /// Overrides `seeds.data` (`seeds.probe` for train-probe).
    #[arg(long)]
    seed: Option<u64>,
    /// Only machine-readable output on stdout; no progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the probe phase and write a probe checkpoint.
    TrainProbe {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (default: <out-dir>/probe.json).
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Run one experiment; prints the summary as JSON.
    Run {
        #[command(flatten)]
        common: Common,
        /// Probe checkpoint (default: train or reuse from the cache).
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Ratio x rule cross-product; prints a CSV table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.3, 0.4, 0.5])]
        ratios: Vec<f64>,
        /// none, step, client, shadow.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        /// fedavg, krum, trimmed_mean, foolsgold, residual, safe_step, safe_client, safe_shadow.
        #[arg(long, value_delimiter = ',')]
        aggregators: Vec<String>,
    },
    /// Per-window and cumulative detection metrics of a round log (CSV).
    DetectReport {
        /// Round log (`rounds.jsonl`).
        log: PathBuf,
        /// Rounds per window.
        #[arg(long, default_value_t = 1)]
        window: usize,
        #[arg(long)]
        quiet: bool,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => load_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn progress(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn stdout_line(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(CliError::io("<stdout>"))
}

fn probe_source(probe: Option<PathBuf>, out_dir: &Path) -> ProbeSource {
    probe.map_or_else(|| ProbeSource::Cache(out_dir.join(CACHE_DIR)), ProbeSource::File)
}

fn parse_list<T>(items: &[String], what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    items
        .iter()
        .map(|s| parse(s.trim()).ok_or_else(|| CliError::Config(format!("unknown {what} {s:?}"))))
        .collect()
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainProbe { common, probe } => {
            let mut config = load(&common)?;
            if let Some(s) = common.seed {
                config.seeds.probe = s;
            }
            progress(common.quiet, format!("training probe ({} rounds)", config.probe.rounds));
            let report = train_probe_to(&config, &common.out_dir, probe.as_deref())?;
            progress(
                common.quiet,
                format!(
                    "{} features, training accuracy {:.4}",
                    report.features, report.training_accuracy
                ),
            );
            stdout_line(&report.path.display().to_string())
        }
        Command::Run { common, probe } => {
            let mut config = load(&common)?;
            if let Some(s) = common.seed {
                config.seeds.data = s;
            }
            progress(
                common.quiet,
                format!(
                    "run: {} rounds, ratio {}, {}",
                    config.rounds,
                    config.malicious_ratio,
                    config.aggregator.as_str()
                ),
            );
            let source = probe_source(probe, &common.out_dir);
            let result = run_to_dir(&config, &source, &common.out_dir)?;
            progress(common.quiet, format!("wrote {}", result.out_dir.display()));
            stdout_line(&summary_json(&result.outcome.summary))
        }
        Command::Sweep {
            common,
            probe,
            ratios,
            modes,
            aggregators,
        } => {
            let started = unix_ms();
            let mut config = load(&common)?;
            if let Some(s) = common.seed {
                config.seeds.data = s;
            }
            let mut modes = parse_list(&modes, "mode", DefenseMode::parse)?;
            let aggregators = parse_list(&aggregators, "aggregator", AggregatorKind::parse)?;
            if modes.is_empty() && aggregators.is_empty() {
                modes = vec![DefenseMode::None, DefenseMode::Step, DefenseMode::Client, DefenseMode::Shadow];
            }
            if let Some(bad) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return Err(CliError::Config(format!("ratio {bad} outside [0, 1]")));
            }
            let cells = cells(&ratios, &modes, &aggregators);
            let opts = SweepOptions {
                threads: thread_count(),
                cache_dir: common.out_dir.join(CACHE_DIR),
                probe: probe.as_deref().map(read_probe).transpose()?,
            };
            progress(common.quiet, format!("sweep: {} cells on {} threads", cells.len(), opts.threads));
            let rows = run_sweep(&config, &cells, &opts);
            std::fs::create_dir_all(&common.out_dir).map_err(CliError::io(&common.out_dir))?;
            let table = common.out_dir.join("sweep.csv");
            write_table_file(&table, &rows)?;
            let mut manifest = RunManifest::new("sweep", fedshield::config::render_map(&config), started);
            manifest.artifacts.table = Some("sweep.csv".into());
            manifest.finished_unix_ms = unix_ms();
            manifest.write(&common.out_dir.join(MANIFEST_FILE))?;
            for r in rows.iter().filter(|r| r.result.is_err()) {
                progress(common.quiet, format!("cell {:?} failed", r.cell));
            }
            write_table(std::io::stdout().lock(), &rows).map_err(|e| CliError::Format {
                path: "<stdout>".into(),
                message: e.to_string(),
            })
        }
        Command::DetectReport { log, window, quiet } => {
            let logs = read_round_log(&log)?;
            if !logs.iter().any(|l| l.has_scores()) {
                return Err(CliError::NoScores(log));
            }
            let rows = windowed(&logs, window);
            for r in rows.iter().filter(|r| r.has_undefined()) {
                progress(
                    quiet,
                    format!("rounds {}..={}: some metrics undefined (NA)", r.first_round, r.last_round),
                );
            }
            write_report(std::io::stdout().lock(), &rows).map_err(|e| CliError::Format {
                path: "<stdout>".into(),
                message: e.to_string(),
            })
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => std::process::exit(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
