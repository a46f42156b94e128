//! Adapter and probe checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use fedshield_core::lora::LoraAdapter;
use fedshield_core::probe::{ProbeHyper, ProbeModel};
use fedshield_core::substrate::Matrix;

use crate::error::{CliError, Result};
use crate::format::F17;

pub const ADAPTER_SCHEMA: &str = "fedshield.adapter/1";
pub const PROBE_SCHEMA: &str = "fedshield.probe/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub values: Vec<F17>,
}

impl From<&Matrix> for MatrixRecord {
    fn from(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            values: m.as_slice().iter().copied().map(F17).collect(),
        }
    }
}

impl MatrixRecord {
    fn to_matrix(&self) -> fedshield_core::Result<Matrix> {
        Matrix::from_vec(self.rows, self.cols, self.values.iter().map(|v| v.0).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRecord {
    pub schema: String,
    pub scaling: F17,
    /// Module 1 then module 2.
    pub a: [MatrixRecord; 2],
    pub b: [MatrixRecord; 2],
}

pub fn adapter_json(adapter: &LoraAdapter) -> String {
    let rec = AdapterRecord {
        schema: ADAPTER_SCHEMA.to_string(),
        scaling: F17(adapter.scaling),
        a: [(&adapter.a[0]).into(), (&adapter.a[1]).into()],
        b: [(&adapter.b[0]).into(), (&adapter.b[1]).into()],
    };
    serde_json::to_string(&rec).expect("adapters hold finite values")
}

pub fn parse_adapter(text: &str, path: &Path) -> Result<LoraAdapter> {
    let rec: AdapterRecord = serde_json::from_str(text).map_err(CliError::json(path))?;
    if rec.schema != ADAPTER_SCHEMA {
        return Err(CliError::Format {
            path: path.to_path_buf(),
            message: format!("unsupported schema {:?}", rec.schema),
        });
    }
    Ok(LoraAdapter {
        a: [rec.a[0].to_matrix()?, rec.a[1].to_matrix()?],
        b: [rec.b[0].to_matrix()?, rec.b[1].to_matrix()?],
        scaling: rec.scaling.0,
    })
}

pub fn write_adapter(path: &Path, adapter: &LoraAdapter) -> Result<()> {
    std::fs::write(path, adapter_json(adapter) + "\n").map_err(CliError::io(path))
}

pub fn read_adapter(path: &Path) -> Result<LoraAdapter> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_adapter(&text, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRecord {
    pub schema: String,
    pub weights: Vec<F17>,
    pub bias: F17,
    pub epochs: usize,
    pub learning_rate: F17,
    pub l2: F17,
    pub seed: u64,
    /// Probe-cache key the model was trained under, if any.
    pub cache_key: Option<String>,
}

pub fn probe_json(probe: &ProbeModel, cache_key: Option<&str>) -> String {
    let h = probe.hyper();
    let rec = ProbeRecord {
        schema: PROBE_SCHEMA.to_string(),
        weights: probe.weights().iter().copied().map(F17).collect(),
        bias: F17(probe.bias()),
        epochs: h.epochs,
        learning_rate: F17(h.learning_rate),
        l2: F17(h.l2),
        seed: h.seed,
        cache_key: cache_key.map(str::to_string),
    };
    serde_json::to_string_pretty(&rec).expect("probes hold finite values")
}

pub fn write_probe(path: &Path, probe: &ProbeModel, cache_key: Option<&str>) -> Result<()> {
    std::fs::write(path, probe_json(probe, cache_key) + "\n").map_err(CliError::io(path))
}

pub fn read_probe(path: &Path) -> Result<ProbeModel> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let rec: ProbeRecord = serde_json::from_str(&text).map_err(CliError::json(path))?;
    if rec.schema != PROBE_SCHEMA {
        return Err(CliError::Format {
            path: path.to_path_buf(),
            message: format!("unsupported schema {:?}", rec.schema),
        });
    }
    let hyper = ProbeHyper {
        epochs: rec.epochs,
        learning_rate: rec.learning_rate.0,
        l2: rec.l2.0,
        seed: rec.seed,
    };
    Ok(ProbeModel::new(rec.weights.iter().map(|w| w.0).collect(), rec.bias.0, hyper)?)
}
