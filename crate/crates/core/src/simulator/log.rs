use alloc::vec::Vec;

use super::config::AggregatorKind;
use super::data::Evaluation;
use crate::defense::DefenseMode;
use crate::probe::{classify, DetectionMetrics, Role};

/// Non-fatal conditions observed during a round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Warning {
    /// A probe feature came from an all-zero delta.
    DegenerateFeature { client: usize, step: usize, shadow: bool },
    /// `Σ n_j w_j` vanished and aggregation was skipped.
    ForcedSkip,
    /// Client first sampled after the freeze round; neutral factor used.
    NeutralAfterFreeze { client: usize },
    /// FoolsGold history had zero norm.
    ZeroHistory { client: usize },
}

/// Per-client slice of a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientRecord {
    pub client: usize,
    /// Ground truth; for evaluation only.
    pub role: Role,
    pub n_samples: usize,
    /// Probe score of each main-branch step.
    pub step_scores: Vec<f64>,
    /// Score of the round's full B delta (`t = T`).
    pub final_score: Option<f64>,
    /// Probe score of each shadow-branch step (shadow mode only).
    pub shadow_scores: Vec<f64>,
    pub rho: Option<f64>,
    /// Weight the aggregation rule gave this client before normalization.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub aggregator: AggregatorKind,
    pub mode: DefenseMode,
    pub tau_cls: f64,
    pub sampled: Vec<usize>,
    pub clients: Vec<ClientRecord>,
    /// Security-factor map over all clients (defended modes only).
    pub factors: Vec<f64>,
    pub frozen: bool,
    pub skipped: bool,
    pub evaluation: Evaluation,
    pub warnings: Vec<Warning>,
}

impl RoundLog {
    /// Detector verdicts against ground truth for `mode`:
    /// step/none use every main-branch step, client the final score,
    /// shadow every shadow step.
    pub fn detection(&self, mode: DefenseMode) -> DetectionMetrics {
        let mut m = DetectionMetrics::default();
        for c in &self.clients {
            let scores: &[f64] = match mode {
                DefenseMode::Step | DefenseMode::None => &c.step_scores,
                DefenseMode::Client => c.final_score.as_slice(),
                DefenseMode::Shadow => &c.shadow_scores,
            };
            for &s in scores {
                m.record(classify(s, self.tau_cls), c.role);
            }
        }
        m
    }

    pub fn has_scores(&self) -> bool {
        self.clients
            .iter()
            .any(|c| !c.step_scores.is_empty() || !c.shadow_scores.is_empty())
    }
}

/// Pools detection over rounds `first..=last`.
pub fn pooled_detection(logs: &[RoundLog], mode: DefenseMode, first: usize, last: usize) -> DetectionMetrics {
    logs.iter()
        .filter(|l| (first..=last).contains(&l.round))
        .fold(DetectionMetrics::default(), |acc, l| acc.merge(&l.detection(mode)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub rounds: usize,
    pub aggregator: AggregatorKind,
    pub malicious_ratio: f64,
    pub initial: Evaluation,
    pub final_eval: Evaluation,
    /// Detector quality over rounds `1..=R_f`.
    pub detection: DetectionMetrics,
    pub skip_count: usize,
}
