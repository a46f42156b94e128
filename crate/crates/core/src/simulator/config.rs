use alloc::format;

use crate::baselines::{default_krum_f, default_trim_count};
use crate::defense::{DefenseConfig, DefenseMode};
use crate::error::{Error, Result};
use crate::lora::{LoraConfig, ModelShape};
use crate::probe::ProbeHyper;

/// Server-side aggregation rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggregatorKind {
    FedAvg,
    Krum,
    TrimmedMean,
    FoolsGold,
    Residual,
    SafeStep,
    SafeClient,
    SafeShadow,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 8] = [
        AggregatorKind::FedAvg,
        AggregatorKind::Krum,
        AggregatorKind::TrimmedMean,
        AggregatorKind::FoolsGold,
        AggregatorKind::Residual,
        AggregatorKind::SafeStep,
        AggregatorKind::SafeClient,
        AggregatorKind::SafeShadow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregatorKind::FedAvg => "fedavg",
            AggregatorKind::Krum => "krum",
            AggregatorKind::TrimmedMean => "trimmed_mean",
            AggregatorKind::FoolsGold => "foolsgold",
            AggregatorKind::Residual => "residual",
            AggregatorKind::SafeStep => "safe_step",
            AggregatorKind::SafeClient => "safe_client",
            AggregatorKind::SafeShadow => "safe_shadow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }

    /// Defense level implied by the rule; baselines run undefended.
    pub fn defense_mode(self) -> DefenseMode {
        match self {
            AggregatorKind::SafeStep => DefenseMode::Step,
            AggregatorKind::SafeClient => DefenseMode::Client,
            AggregatorKind::SafeShadow => DefenseMode::Shadow,
            _ => DefenseMode::None,
        }
    }

    /// Rule used for a given defense mode when no baseline is requested.
    pub fn for_mode(mode: DefenseMode) -> Self {
        match mode {
            DefenseMode::None => AggregatorKind::FedAvg,
            DefenseMode::Step => AggregatorKind::SafeStep,
            DefenseMode::Client => AggregatorKind::SafeClient,
            DefenseMode::Shadow => AggregatorKind::SafeShadow,
        }
    }
}

/// Synthetic classification task and frozen backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskParams {
    pub shape: ModelShape,
    /// Norm of every class mean.
    pub class_sep: f64,
    /// Per-coordinate noise standard deviation.
    pub noise_std: f64,
    /// Class that malicious clients relabel everything to.
    pub target_class: usize,
    /// Standard deviation of the frozen head entries.
    pub head_std: f64,
    pub test_samples: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            shape: ModelShape::default(),
            class_sep: 2.0,
            noise_std: 0.5,
            target_class: 0,
            head_std: 1.0,
            test_samples: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    /// Backbone, task geometry and the shared LoRA initialization.
    pub global: u64,
    /// Roles, client data, test set, sampling and batch order.
    pub data: u64,
    /// Replaces `data` during probe-training simulation.
    pub probe: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            global: 2024,
            data: 7,
            probe: 1_000_003,
        }
    }
}

/// Offline probe-training protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSetup {
    pub rounds: usize,
    pub malicious_ratio: f64,
    pub hyper: ProbeHyper,
    /// Use the experiment's LoRA initialization in the probe simulation.
    pub share_lora_init: bool,
}

impl Default for ProbeSetup {
    fn default() -> Self {
        Self {
            rounds: 10,
            malicious_ratio: 0.5,
            hyper: ProbeHyper::default(),
            share_lora_init: true,
        }
    }
}

/// Optional overrides of the baseline hyperparameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaselineParams {
    pub krum_f: Option<usize>,
    pub trim_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    pub malicious_ratio: f64,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub samples_per_client: usize,
    pub lora: LoraConfig,
    pub defense: DefenseConfig,
    pub aggregator: AggregatorKind,
    pub seeds: Seeds,
    pub shadow_lr: f64,
    pub task: TaskParams,
    pub probe: ProbeSetup,
    pub baselines: BaselineParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let lora = LoraConfig::default();
        Self {
            n_clients: 10,
            malicious_ratio: 0.3,
            rounds: 100,
            clients_per_round: 3,
            samples_per_client: 500,
            shadow_lr: lora.learning_rate,
            lora,
            defense: DefenseConfig::default(),
            aggregator: AggregatorKind::FedAvg,
            seeds: Seeds::default(),
            task: TaskParams::default(),
            probe: ProbeSetup::default(),
            baselines: BaselineParams::default(),
        }
    }
}

impl ExperimentConfig {
    /// Switches the aggregation rule and the matching defense mode together.
    pub fn with_aggregator(mut self, aggregator: AggregatorKind) -> Self {
        self.aggregator = aggregator;
        self.defense.mode = aggregator.defense_mode();
        self
    }

    pub fn malicious_count(&self) -> usize {
        libm::round(self.malicious_ratio * self.n_clients as f64) as usize
    }

    pub fn krum_f(&self) -> usize {
        self.baselines
            .krum_f
            .unwrap_or_else(|| default_krum_f(self.clients_per_round))
    }

    pub fn trim_count(&self) -> usize {
        self.baselines
            .trim_count
            .unwrap_or_else(|| default_trim_count(self.malicious_ratio, self.clients_per_round))
    }

    /// Length of a probe feature: `2 · d_h · r`.
    pub fn feature_len(&self) -> usize {
        crate::lora::N_MODULES * self.task.shape.d_hidden * self.lora.rank
    }

    pub fn validate(&self) -> Result<()> {
        self.lora.validate()?;
        self.defense.validate()?;
        let bad = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.n_clients == 0 {
            return bad("n_clients must be positive".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return bad(format!(
                "clients_per_round must be in 1..={}, got {}",
                self.n_clients, self.clients_per_round
            ));
        }
        if !(0.0..=1.0).contains(&self.malicious_ratio) {
            return bad(format!("malicious_ratio {} outside [0, 1]", self.malicious_ratio));
        }
        if !(0.0..=1.0).contains(&self.probe.malicious_ratio) {
            return bad(format!("probe.malicious_ratio {} outside [0, 1]", self.probe.malicious_ratio));
        }
        if self.samples_per_client < self.lora.batch_size {
            return bad(format!(
                "samples_per_client {} below batch size {}",
                self.samples_per_client, self.lora.batch_size
            ));
        }
        if !(self.shadow_lr > 0.0 && self.shadow_lr.is_finite()) {
            return bad(format!("shadow_lr must be positive, got {}", self.shadow_lr));
        }
        let t = &self.task;
        if t.shape.d_in == 0 || t.shape.d_hidden == 0 || t.shape.n_classes < 2 {
            return bad("model shape needs d_in, d_hidden >= 1 and n_classes >= 2".into());
        }
        if t.target_class >= t.shape.n_classes {
            return bad(format!("target_class {} >= n_classes {}", t.target_class, t.shape.n_classes));
        }
        if t.test_samples == 0 {
            return bad("test_samples must be positive".into());
        }
        if !(t.noise_std >= 0.0 && t.class_sep >= 0.0 && t.head_std > 0.0) {
            return bad("task scales must be non-negative (head_std positive)".into());
        }
        if self.aggregator.defense_mode() != self.defense.mode {
            return bad(format!(
                "aggregator {} conflicts with defense.mode {}",
                self.aggregator.as_str(),
                self.defense.mode.as_str()
            ));
        }
        if self.aggregator == AggregatorKind::Krum && self.clients_per_round < self.krum_f() + 3 {
            return bad(format!("krum needs clients_per_round >= f + 3 (f = {})", self.krum_f()));
        }
        if self.aggregator == AggregatorKind::TrimmedMean && self.clients_per_round <= 2 * self.trim_count() {
            return bad(format!(
                "trimmed_mean needs clients_per_round > 2 * trim ({})",
                self.trim_count()
            ));
        }
        if self.aggregator == AggregatorKind::Residual && self.clients_per_round < 3 {
            return bad("residual needs clients_per_round >= 3".into());
        }
        Ok(())
    }
}
