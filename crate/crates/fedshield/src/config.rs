//! Flat `key=value` experiment configuration with dotted section keys.
//!
//! ```text
//! # comment
//! malicious_ratio = 0.3
//! aggregator = safe_shadow
//! defense.gamma = 0.95
//! ```
//!
//! Unset keys keep their defaults. `shadow_lr` follows `lora.learning_rate`
//! unless given, and `defense.mode` alone selects the matching rule.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use fedshield_core::defense::DefenseMode;
use fedshield_core::simulator::{AggregatorKind, ExperimentConfig};

use crate::error::{CliError, Result};

/// Every accepted key, in rendering order.
pub const KEYS: &[&str] = &[
    "n_clients",
    "malicious_ratio",
    "rounds",
    "clients_per_round",
    "samples_per_client",
    "aggregator",
    "shadow_lr",
    "lora.rank",
    "lora.alpha",
    "lora.learning_rate",
    "lora.local_steps",
    "lora.batch_size",
    "defense.mode",
    "defense.tau_cls",
    "defense.tau_skip",
    "defense.gamma",
    "defense.eta",
    "defense.freeze_round",
    "defense.calibration_k",
    "seeds.global",
    "seeds.data",
    "seeds.probe",
    "task.d_in",
    "task.d_hidden",
    "task.n_classes",
    "task.class_sep",
    "task.noise_std",
    "task.target_class",
    "task.head_std",
    "task.test_samples",
    "probe.rounds",
    "probe.malicious_ratio",
    "probe.epochs",
    "probe.learning_rate",
    "probe.l2",
    "probe.share_lora_init",
    "baselines.krum_f",
    "baselines.trim_count",
];

fn num<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

fn optional(value: &str) -> std::result::Result<Option<usize>, String> {
    if value == "auto" {
        Ok(None)
    } else {
        num(value).map(Some)
    }
}

fn boolean(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true/false, got {value:?}")),
    }
}

/// Parsed settings plus which of the linked keys were set explicitly.
#[derive(Clone, Debug, Default)]
struct Builder {
    config: ExperimentConfig,
    shadow_lr: Option<f64>,
    aggregator: Option<AggregatorKind>,
    mode: Option<DefenseMode>,
}

impl Builder {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let c = &mut self.config;
        match key {
            "n_clients" => c.n_clients = num(value)?,
            "malicious_ratio" => c.malicious_ratio = num(value)?,
            "rounds" => c.rounds = num(value)?,
            "clients_per_round" => c.clients_per_round = num(value)?,
            "samples_per_client" => c.samples_per_client = num(value)?,
            "aggregator" => {
                self.aggregator =
                    Some(AggregatorKind::parse(value).ok_or_else(|| format!("unknown aggregator {value:?}"))?)
            }
            "shadow_lr" => self.shadow_lr = Some(num(value)?),
            "lora.rank" => c.lora.rank = num(value)?,
            "lora.alpha" => c.lora.alpha = num(value)?,
            "lora.learning_rate" => c.lora.learning_rate = num(value)?,
            "lora.local_steps" => c.lora.local_steps = num(value)?,
            "lora.batch_size" => c.lora.batch_size = num(value)?,
            "defense.mode" => {
                self.mode = Some(DefenseMode::parse(value).ok_or_else(|| format!("unknown defense mode {value:?}"))?)
            }
            "defense.tau_cls" => c.defense.tau_cls = num(value)?,
            "defense.tau_skip" => c.defense.tau_skip = num(value)?,
            "defense.gamma" => c.defense.gamma = num(value)?,
            "defense.eta" => c.defense.eta = num(value)?,
            "defense.freeze_round" => c.defense.freeze_round = num(value)?,
            "defense.calibration_k" => c.defense.calibration_k = num(value)?,
            "seeds.global" => c.seeds.global = num(value)?,
            "seeds.data" => c.seeds.data = num(value)?,
            "seeds.probe" => c.seeds.probe = num(value)?,
            "task.d_in" => c.task.shape.d_in = num(value)?,
            "task.d_hidden" => c.task.shape.d_hidden = num(value)?,
            "task.n_classes" => c.task.shape.n_classes = num(value)?,
            "task.class_sep" => c.task.class_sep = num(value)?,
            "task.noise_std" => c.task.noise_std = num(value)?,
            "task.target_class" => c.task.target_class = num(value)?,
            "task.head_std" => c.task.head_std = num(value)?,
            "task.test_samples" => c.task.test_samples = num(value)?,
            "probe.rounds" => c.probe.rounds = num(value)?,
            "probe.malicious_ratio" => c.probe.malicious_ratio = num(value)?,
            "probe.epochs" => c.probe.hyper.epochs = num(value)?,
            "probe.learning_rate" => c.probe.hyper.learning_rate = num(value)?,
            "probe.l2" => c.probe.hyper.l2 = num(value)?,
            "probe.share_lora_init" => c.probe.share_lora_init = boolean(value)?,
            "baselines.krum_f" => c.baselines.krum_f = optional(value)?,
            "baselines.trim_count" => c.baselines.trim_count = optional(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn finish(self) -> Result<ExperimentConfig> {
        let mut c = self.config;
        c.shadow_lr = self.shadow_lr.unwrap_or(c.lora.learning_rate);
        let aggregator = match (self.aggregator, self.mode) {
            (Some(a), Some(m)) if a.defense_mode() != m => {
                return Err(CliError::Config(format!(
                    "aggregator {} conflicts with defense.mode {}",
                    a.as_str(),
                    m.as_str()
                )))
            }
            (Some(a), _) => a,
            (None, Some(m)) => AggregatorKind::for_mode(m),
            (None, None) => c.aggregator,
        };
        c = c.with_aggregator(aggregator);
        c.validate()?;
        Ok(c)
    }
}

/// Parses config text; `origin` labels error messages.
pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentConfig> {
    let mut b = Builder::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let syntax = |message: String| CliError::ConfigSyntax {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(format!("expected key=value, got {line:?}")))?;
        b.set(key.trim(), value.trim()).map_err(syntax)?;
    }
    b.finish()
}

/// Builds a config from an already-split key/value map (manifest snapshots).
pub fn from_map(map: &BTreeMap<String, String>) -> Result<ExperimentConfig> {
    let mut b = Builder::default();
    for (k, v) in map {
        b.set(k, v).map_err(|m| CliError::Config(format!("{k}: {m}")))?;
    }
    b.finish()
}

/// Reads a config file, or the config snapshot of a run manifest.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    if text.trim_start().starts_with('{') {
        let manifest: crate::manifest::RunManifest = serde_json::from_str(&text).map_err(CliError::json(path))?;
        return from_map(&manifest.config);
    }
    parse_config(&text, path)
}

/// Every key with its resolved value.
pub fn render_map(c: &ExperimentConfig) -> BTreeMap<String, String> {
    let opt = |v: Option<usize>| v.map_or_else(|| "auto".to_string(), |x| x.to_string());
    let values: Vec<String> = vec![
        c.n_clients.to_string(),
        c.malicious_ratio.to_string(),
        c.rounds.to_string(),
        c.clients_per_round.to_string(),
        c.samples_per_client.to_string(),
        c.aggregator.as_str().to_string(),
        c.shadow_lr.to_string(),
        c.lora.rank.to_string(),
        c.lora.alpha.to_string(),
        c.lora.learning_rate.to_string(),
        c.lora.local_steps.to_string(),
        c.lora.batch_size.to_string(),
        c.defense.mode.as_str().to_string(),
        c.defense.tau_cls.to_string(),
        c.defense.tau_skip.to_string(),
        c.defense.gamma.to_string(),
        c.defense.eta.to_string(),
        c.defense.freeze_round.to_string(),
        c.defense.calibration_k.to_string(),
        c.seeds.global.to_string(),
        c.seeds.data.to_string(),
        c.seeds.probe.to_string(),
        c.task.shape.d_in.to_string(),
        c.task.shape.d_hidden.to_string(),
        c.task.shape.n_classes.to_string(),
        c.task.class_sep.to_string(),
        c.task.noise_std.to_string(),
        c.task.target_class.to_string(),
        c.task.head_std.to_string(),
        c.task.test_samples.to_string(),
        c.probe.rounds.to_string(),
        c.probe.malicious_ratio.to_string(),
        c.probe.hyper.epochs.to_string(),
        c.probe.hyper.learning_rate.to_string(),
        c.probe.hyper.l2.to_string(),
        c.probe.share_lora_init.to_string(),
        opt(c.baselines.krum_f),
        opt(c.baselines.trim_count),
    ];
    KEYS.iter().map(|k| k.to_string()).zip(values).collect()
}

/// `key=value` text in [`KEYS`] order; parses back to the same config.
pub fn render_config(c: &ExperimentConfig) -> String {
    let map = render_map(c);
    KEYS.iter().map(|k| format!("{k}={}\n", map[*k])).collect()
}
