//! Probe cache keyed by the settings that determine the trained probe.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use fedshield_core::probe::ProbeModel;
use fedshield_core::simulator::{train_probe_for, ExperimentConfig};

use crate::checkpoint::{read_probe, write_probe};
use crate::config::render_map;
use crate::error::{CliError, Result};

/// Keys whose values feed the probe-phase simulation or the trainer.
const PROBE_INPUTS: &[&str] = &[
    "n_clients",
    "clients_per_round",
    "samples_per_client",
    "lora.rank",
    "lora.alpha",
    "lora.learning_rate",
    "lora.local_steps",
    "lora.batch_size",
    "seeds.global",
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
];

/// Hex SHA-256 of the probe inputs. Exact float values are hashed via
/// their bit patterns.
pub fn probe_cache_key(config: &ExperimentConfig) -> String {
    let map = render_map(config);
    let mut h = Sha256::new();
    h.update(b"fedshield.probe-cache/1\n");
    for k in PROBE_INPUTS {
        h.update(format!("{k}={}\n", map[*k]).as_bytes());
    }
    for (k, v) in [
        ("bits.lora.alpha", config.lora.alpha),
        ("bits.lora.learning_rate", config.lora.learning_rate),
        ("bits.task.class_sep", config.task.class_sep),
        ("bits.task.noise_std", config.task.noise_std),
        ("bits.task.head_std", config.task.head_std),
        ("bits.probe.malicious_ratio", config.probe.malicious_ratio),
        ("bits.probe.learning_rate", config.probe.hyper.learning_rate),
        ("bits.probe.l2", config.probe.hyper.l2),
    ] {
        h.update(format!("{k}={:016x}\n", v.to_bits()).as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("probe-{key}.json"))
}

#[derive(Clone, Debug)]
pub struct CachedProbe {
    pub model: ProbeModel,
    pub key: String,
    pub path: PathBuf,
    pub hit: bool,
}

/// Loads the cached probe for `config`, or trains and stores it.
pub fn obtain_probe(config: &ExperimentConfig, dir: &Path) -> Result<CachedProbe> {
    let key = probe_cache_key(config);
    let path = cache_path(dir, &key);
    if path.exists() {
        let model = read_probe(&path)?;
        return Ok(CachedProbe { model, key, path, hit: true });
    }
    let model = train_probe_for(config)?;
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    // Write-then-rename so concurrent readers never see a partial file.
    let tmp = dir.join(format!(".probe-{key}.{}.tmp", std::process::id()));
    write_probe(&tmp, &model, Some(&key))?;
    std::fs::rename(&tmp, &path).map_err(CliError::io(&path))?;
    Ok(CachedProbe { model, key, path, hit: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedshield_core::simulator::AggregatorKind;

    #[test]
    fn key_ignores_experiment_only_settings() {
        let base = ExperimentConfig::default();
        let mut other = base.clone().with_aggregator(AggregatorKind::SafeStep);
        other.malicious_ratio = 0.5;
        other.rounds = 7;
        other.seeds.data = 99;
        other.defense.gamma = 0.5;
        assert_eq!(probe_cache_key(&base), probe_cache_key(&other));
    }

    #[test]
    fn key_tracks_probe_inputs() {
        let base = ExperimentConfig::default();
        let k = probe_cache_key(&base);
        let mut c = base.clone();
        c.seeds.probe += 1;
        assert_ne!(probe_cache_key(&c), k);
        let mut c = base.clone();
        c.seeds.global += 1;
        assert_ne!(probe_cache_key(&c), k);
        let mut c = base.clone();
        c.probe.hyper.epochs = 10;
        assert_ne!(probe_cache_key(&c), k);
        let mut c = base;
        c.probe.share_lora_init = false;
        assert_ne!(probe_cache_key(&c), k);
        assert_eq!(k.len(), 64);
    }
}
