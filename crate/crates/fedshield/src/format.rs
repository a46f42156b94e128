//! On-disk records: one JSON object per round (JSONL) and a summary
//! document. Floats are written with 17 significant digits so every value
//! reads back bit-identical.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

use fedshield_core::defense::DefenseMode;
use fedshield_core::probe::{DetectionMetrics, Role};
use fedshield_core::simulator::{AggregatorKind, ClientRecord, Evaluation, RoundLog, Summary, Warning};

use crate::error::{CliError, Result};

pub const ROUND_LOG_SCHEMA: &str = "fedshield.round/1";
pub const SUMMARY_SCHEMA: &str = "fedshield.summary/1";

/// `f64` written as `d.dddddddddddddddde±x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F17(pub f64);

impl fmt::Display for F17 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.16e}", self.0)
    }
}

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom(format!("non-finite value {}", self.0)));
        }
        let raw = RawValue::from_string(self.to_string()).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for F17 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(d).map(F17)
    }
}

fn f17s(v: &[f64]) -> Vec<F17> {
    v.iter().copied().map(F17).collect()
}

fn unf17s(v: &[F17]) -> Vec<f64> {
    v.iter().map(|x| x.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub benign_accuracy: F17,
    pub attack_success: F17,
}

impl From<Evaluation> for EvaluationRecord {
    fn from(e: Evaluation) -> Self {
        Self {
            benign_accuracy: F17(e.benign_accuracy),
            attack_success: F17(e.attack_success),
        }
    }
}

impl From<&EvaluationRecord> for Evaluation {
    fn from(e: &EvaluationRecord) -> Self {
        Evaluation {
            benign_accuracy: e.benign_accuracy.0,
            attack_success: e.attack_success.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WarningRecord {
    DegenerateFeature { client: usize, step: usize, shadow: bool },
    ForcedSkip,
    NeutralAfterFreeze { client: usize },
    ZeroHistory { client: usize },
}

impl From<Warning> for WarningRecord {
    fn from(w: Warning) -> Self {
        match w {
            Warning::DegenerateFeature { client, step, shadow } => WarningRecord::DegenerateFeature { client, step, shadow },
            Warning::ForcedSkip => WarningRecord::ForcedSkip,
            Warning::NeutralAfterFreeze { client } => WarningRecord::NeutralAfterFreeze { client },
            Warning::ZeroHistory { client } => WarningRecord::ZeroHistory { client },
        }
    }
}

impl From<&WarningRecord> for Warning {
    fn from(w: &WarningRecord) -> Self {
        match *w {
            WarningRecord::DegenerateFeature { client, step, shadow } => Warning::DegenerateFeature { client, step, shadow },
            WarningRecord::ForcedSkip => Warning::ForcedSkip,
            WarningRecord::NeutralAfterFreeze { client } => Warning::NeutralAfterFreeze { client },
            WarningRecord::ZeroHistory { client } => Warning::ZeroHistory { client },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub client: usize,
    pub role: String,
    pub n_samples: usize,
    pub step_scores: Vec<F17>,
    pub final_score: Option<F17>,
    pub shadow_scores: Vec<F17>,
    pub rho: Option<F17>,
    pub weight: F17,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub schema: String,
    pub round: usize,
    pub aggregator: String,
    pub mode: String,
    pub tau_cls: F17,
    pub sampled: Vec<usize>,
    pub clients: Vec<ClientEntry>,
    pub factors: Vec<F17>,
    pub frozen: bool,
    pub skipped: bool,
    pub evaluation: EvaluationRecord,
    pub warnings: Vec<WarningRecord>,
}

impl From<&RoundLog> for RoundRecord {
    fn from(l: &RoundLog) -> Self {
        Self {
            schema: ROUND_LOG_SCHEMA.to_string(),
            round: l.round,
            aggregator: l.aggregator.as_str().to_string(),
            mode: l.mode.as_str().to_string(),
            tau_cls: F17(l.tau_cls),
            sampled: l.sampled.clone(),
            clients: l
                .clients
                .iter()
                .map(|c| ClientEntry {
                    client: c.client,
                    role: c.role.as_str().to_string(),
                    n_samples: c.n_samples,
                    step_scores: f17s(&c.step_scores),
                    final_score: c.final_score.map(F17),
                    shadow_scores: f17s(&c.shadow_scores),
                    rho: c.rho.map(F17),
                    weight: F17(c.weight),
                })
                .collect(),
            factors: f17s(&l.factors),
            frozen: l.frozen,
            skipped: l.skipped,
            evaluation: l.evaluation.into(),
            warnings: l.warnings.iter().copied().map(Into::into).collect(),
        }
    }
}

fn parse_role(s: &str) -> std::result::Result<Role, String> {
    match s {
        "benign" => Ok(Role::Benign),
        "malicious" => Ok(Role::Malicious),
        _ => Err(format!("unknown role {s:?}")),
    }
}

impl RoundRecord {
    pub fn to_log(&self) -> std::result::Result<RoundLog, String> {
        if self.schema != ROUND_LOG_SCHEMA {
            return Err(format!("unsupported schema {:?}", self.schema));
        }
        let clients = self
            .clients
            .iter()
            .map(|c| {
                Ok(ClientRecord {
                    client: c.client,
                    role: parse_role(&c.role)?,
                    n_samples: c.n_samples,
                    step_scores: unf17s(&c.step_scores),
                    final_score: c.final_score.map(|x| x.0),
                    shadow_scores: unf17s(&c.shadow_scores),
                    rho: c.rho.map(|x| x.0),
                    weight: c.weight.0,
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        Ok(RoundLog {
            round: self.round,
            aggregator: AggregatorKind::parse(&self.aggregator)
                .ok_or_else(|| format!("unknown aggregator {:?}", self.aggregator))?,
            mode: DefenseMode::parse(&self.mode).ok_or_else(|| format!("unknown mode {:?}", self.mode))?,
            tau_cls: self.tau_cls.0,
            sampled: self.sampled.clone(),
            clients,
            factors: unf17s(&self.factors),
            frozen: self.frozen,
            skipped: self.skipped,
            evaluation: (&self.evaluation).into(),
            warnings: self.warnings.iter().map(Into::into).collect(),
        })
    }
}

/// One line of JSON, no trailing newline.
pub fn round_line(log: &RoundLog) -> String {
    serde_json::to_string(&RoundRecord::from(log)).expect("round records hold finite values")
}

pub fn write_round_log(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(CliError::io(path))?;
    let mut w = std::io::BufWriter::new(file);
    for log in logs {
        writeln!(w, "{}", round_line(log)).map_err(CliError::io(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn read_round_log(path: &Path) -> Result<Vec<RoundLog>> {
    let file = std::fs::File::open(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| CliError::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {message}", i + 1),
        };
        let rec: RoundRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        out.push(rec.to_log().map_err(bad)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tpr: Option<F17>,
    pub fpr: Option<F17>,
    pub precision: Option<F17>,
    pub mcc: Option<F17>,
}

impl From<&DetectionMetrics> for MetricsRecord {
    fn from(m: &DetectionMetrics) -> Self {
        Self {
            tp: m.tp,
            fp: m.fp,
            tn: m.tn,
            fn_: m.fn_,
            tpr: m.tpr.map(F17),
            fpr: m.fpr.map(F17),
            precision: m.precision.map(F17),
            mcc: m.mcc.map(F17),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRecord {
    pub schema: String,
    pub rounds: usize,
    pub aggregator: String,
    pub mode: String,
    pub malicious_ratio: F17,
    pub initial: EvaluationRecord,
    #[serde(rename = "final")]
    pub final_eval: EvaluationRecord,
    /// Detector quality pooled over rounds `1..=freeze_round`.
    pub detection: MetricsRecord,
    pub skip_count: usize,
}

impl SummaryRecord {
    pub fn new(s: &Summary) -> Self {
        Self {
            schema: SUMMARY_SCHEMA.to_string(),
            rounds: s.rounds,
            aggregator: s.aggregator.as_str().to_string(),
            mode: s.aggregator.defense_mode().as_str().to_string(),
            malicious_ratio: F17(s.malicious_ratio),
            initial: s.initial.into(),
            final_eval: s.final_eval.into(),
            detection: (&s.detection).into(),
            skip_count: s.skip_count,
        }
    }
}

pub fn summary_json(s: &Summary) -> String {
    serde_json::to_string_pretty(&SummaryRecord::new(s)).expect("summaries hold finite values")
}

pub fn write_summary(path: &Path, s: &Summary) -> Result<()> {
    std::fs::write(path, summary_json(s) + "\n").map_err(CliError::io(path))
}

pub fn read_summary(path: &Path) -> Result<SummaryRecord> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(CliError::json(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f17_roundtrips_bit_exactly() {
        for x in [0.1 + 0.2, 1.0 / 3.0, -0.0, 5e-324, f64::MAX, 0.8807970779778823, 1e300, -2.5e-17] {
            let s = serde_json::to_string(&F17(x)).unwrap();
            let back: F17 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.0.to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(serde_json::to_string(&F17(0.5)).unwrap(), "5.0000000000000000e-1");
    }

    #[test]
    fn non_finite_values_refuse_to_serialize() {
        assert!(serde_json::to_string(&F17(f64::NAN)).is_err());
    }

    fn sample_log() -> RoundLog {
        RoundLog {
            round: 3,
            aggregator: AggregatorKind::SafeShadow,
            mode: DefenseMode::Shadow,
            tau_cls: 0.8,
            sampled: vec![1, 4],
            clients: vec![
                ClientRecord {
                    client: 1,
                    role: Role::Malicious,
                    n_samples: 500,
                    step_scores: vec![0.91, 0.97],
                    final_score: Some(0.97),
                    shadow_scores: vec![0.99, 0.1],
                    rho: Some(0.5),
                    weight: 0.0078125,
                },
                ClientRecord {
                    client: 4,
                    role: Role::Benign,
                    n_samples: 500,
                    step_scores: vec![],
                    final_score: None,
                    shadow_scores: vec![],
                    rho: None,
                    weight: 1.0,
                },
            ],
            factors: vec![1.0, 0.0078125, 1.0, 1.0, 1.0],
            frozen: false,
            skipped: false,
            evaluation: Evaluation {
                benign_accuracy: 0.9835,
                attack_success: 1.0 / 3.0,
            },
            warnings: vec![Warning::DegenerateFeature { client: 4, step: 2, shadow: true }, Warning::ForcedSkip],
        }
    }

    #[test]
    fn round_record_roundtrips() {
        let log = sample_log();
        let line = round_line(&log);
        assert!(!line.contains('\n'));
        let rec: RoundRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(rec.to_log().unwrap(), log);
        assert_eq!(round_line(&rec.to_log().unwrap()), line);
    }

    #[test]
    fn unknown_fields_and_schemas_are_rejected() {
        let line = round_line(&sample_log());
        let extra = line.replacen('{', "{\"wall_ms\":3,", 1);
        assert!(serde_json::from_str::<RoundRecord>(&extra).is_err());
        let other = line.replace(ROUND_LOG_SCHEMA, "fedshield.round/0");
        let rec: RoundRecord = serde_json::from_str(&other).unwrap();
        assert!(rec.to_log().is_err());
    }
}
