//! `train-probe` and `run`: execute one configuration and write its
//! artifacts.

use std::path::{Path, PathBuf};

use fedshield_core::defense::DefenseMode;
use fedshield_core::probe::{classify, predict, train_probe, ProbeModel};
use fedshield_core::simulator::{build_probe_dataset, run_experiment, ExperimentConfig, ExperimentOutcome};

use crate::cache::{obtain_probe, probe_cache_key};
use crate::checkpoint::{read_probe, write_adapter, write_probe};
use crate::config::render_map;
use crate::error::{CliError, Result};
use crate::format::{write_round_log, write_summary};
use crate::manifest::{unix_ms, RunManifest};

pub const ROUND_LOG_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ADAPTER_FILE: &str = "adapter.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROBE_FILE: &str = "probe.json";
pub const CACHE_DIR: &str = "probe-cache";

/// Where a run gets its probe from.
#[derive(Clone, Debug)]
pub enum ProbeSource {
    /// Fixed checkpoint file.
    File(PathBuf),
    /// Train on demand, cached under this directory.
    Cache(PathBuf),
}

#[derive(Clone, Debug)]
pub struct ResolvedProbe {
    pub model: ProbeModel,
    pub path: PathBuf,
    pub cache_hit: bool,
}

pub fn resolve_probe(config: &ExperimentConfig, source: &ProbeSource) -> Result<ResolvedProbe> {
    match source {
        ProbeSource::File(path) => Ok(ResolvedProbe {
            model: read_probe(path)?,
            path: path.clone(),
            cache_hit: true,
        }),
        ProbeSource::Cache(dir) => {
            let c = obtain_probe(config, dir)?;
            Ok(ResolvedProbe {
                model: c.model,
                path: c.path,
                cache_hit: c.hit,
            })
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn relative(path: &Path, dir: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).to_string_lossy().into_owned()
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub path: PathBuf,
    pub features: usize,
    pub training_accuracy: f64,
}

/// Probe phase on its own; writes `probe.json` (or `out`) and a manifest.
pub fn train_probe_to(config: &ExperimentConfig, out_dir: &Path, out: Option<&Path>) -> Result<ProbeReport> {
    let started = unix_ms();
    create_dir(out_dir)?;
    let data = build_probe_dataset(config)?;
    let mut hyper = config.probe.hyper.clone();
    hyper.seed = config.seeds.probe;
    let model = train_probe(&data, &hyper)?;
    let correct = data
        .iter()
        .filter(|f| Some(classify(predict(&model, f).unwrap_or(0.5), 0.5)) == f.label)
        .count();
    let path = out.map_or_else(|| out_dir.join(PROBE_FILE), Path::to_path_buf);
    let key = probe_cache_key(config);
    write_probe(&path, &model, Some(&key))?;
    let mut manifest = RunManifest::new("train-probe", render_map(config), started);
    manifest.artifacts.probe = Some(relative(&path, out_dir));
    manifest.finished_unix_ms = unix_ms();
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(ProbeReport {
        path,
        features: data.len(),
        training_accuracy: correct as f64 / data.len() as f64,
    })
}

/// Probe for the run: required for defended modes; for `none` only when a
/// checkpoint is given explicitly (then step scores are logged too).
fn probe_for_run(config: &ExperimentConfig, source: &ProbeSource) -> Result<Option<ResolvedProbe>> {
    match (config.defense.mode, source) {
        (DefenseMode::None, ProbeSource::Cache(_)) => Ok(None),
        _ => resolve_probe(config, source).map(Some),
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub outcome: ExperimentOutcome,
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

pub fn run_one(config: &ExperimentConfig, source: &ProbeSource) -> Result<(ExperimentOutcome, Option<ResolvedProbe>)> {
    let probe = probe_for_run(config, source)?;
    let outcome = run_experiment(config, probe.as_ref().map(|p| p.model.clone()))?;
    Ok((outcome, probe))
}

/// Runs the experiment and writes round log, summary, final adapter and
/// manifest into `out_dir`.
pub fn run_to_dir(config: &ExperimentConfig, source: &ProbeSource, out_dir: &Path) -> Result<RunResult> {
    let started = unix_ms();
    create_dir(out_dir)?;
    let (outcome, probe) = run_one(config, source)?;
    let log_path = out_dir.join(ROUND_LOG_FILE);
    let summary_path = out_dir.join(SUMMARY_FILE);
    let adapter_path = out_dir.join(ADAPTER_FILE);
    write_round_log(&log_path, &outcome.logs)?;
    write_summary(&summary_path, &outcome.summary)?;
    write_adapter(&adapter_path, &outcome.global)?;

    let mut manifest = RunManifest::new("run", render_map(config), started);
    manifest.artifacts.probe = probe.as_ref().map(|p| relative(&p.path, out_dir));
    manifest.artifacts.round_log = Some(ROUND_LOG_FILE.to_string());
    manifest.artifacts.summary = Some(SUMMARY_FILE.to_string());
    manifest.artifacts.adapter = Some(ADAPTER_FILE.to_string());
    manifest.finished_unix_ms = unix_ms();
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(RunResult {
        outcome,
        manifest,
        out_dir: out_dir.to_path_buf(),
    })
}
