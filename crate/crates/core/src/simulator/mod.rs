//! Federated experiment driver: probe phase, client sampling, local and
//! shadow training, defense, aggregation, evaluation and logging.

mod config;
mod data;
mod log;

pub use config::{AggregatorKind, BaselineParams, ExperimentConfig, ProbeSetup, Seeds, TaskParams};
pub use data::{
    assign_roles, evaluate_global, generate_client_data, generate_test_set, ClientSpec, Evaluation, Task,
};
pub use log::{pooled_detection, ClientRecord, RoundLog, Summary, Warning};

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::baselines::{self, ClientUpdate};
use crate::defense::{
    aggregation_coefficients, combine_deltas, shadow_level_weight, should_skip, ClientLevelState,
    DefenseMode, FreezeGate, SecurityFactors, StepLevelState, NEUTRAL_FACTOR,
};
use crate::error::{Error, Result};
use crate::lora::{init_adapter, local_train, AdapterDelta, BaseModel, Dataset, LoraAdapter, LoraConfig, LocalTrainTrace};
use crate::probe::{classify, extract_feature, predict, train_probe, FeatureOrigin, ProbeFeature, ProbeModel, Role};
use crate::substrate::rng::stream;
use crate::substrate::Rng;

/// Frozen backbone shared by every run with the same global seed.
pub fn build_base_model(config: &ExperimentConfig) -> BaseModel {
    let mut rng = Rng::derive(config.seeds.global, &[stream::BASE_MODEL]);
    BaseModel::random(config.task.shape, config.task.head_std, &mut rng)
}

/// The LoRA initialization every client starts from.
pub fn build_initial_adapter(config: &ExperimentConfig, seed: u64) -> LoraAdapter {
    let mut rng = Rng::derive(seed, &[stream::LORA_INIT]);
    init_adapter(&config.lora, config.task.shape, &mut rng)
}

/// Decoupled detection branch: a fixed shadow adapter trained against the
/// round-0 reference with a constant learning rate.
#[derive(Clone, Debug)]
pub struct ShadowBranch {
    pub reference: BaseModel,
    pub initial: LoraAdapter,
    pub config: LoraConfig,
}

impl ShadowBranch {
    pub fn new(reference: BaseModel, initial: LoraAdapter, lora: &LoraConfig, shadow_lr: f64) -> Self {
        let config = LoraConfig {
            learning_rate: shadow_lr,
            ..lora.clone()
        };
        Self { reference, initial, config }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowOutcome {
    pub rho: f64,
    pub scores: Vec<f64>,
    pub degenerate_steps: Vec<usize>,
}

/// Malicious-step ratio of a client's shadow run. The shadow batch stream
/// depends only on `(data_seed, client)`, so the result does not change
/// from round to round.
pub fn run_shadow(
    spec: &ClientSpec,
    data: &Dataset,
    shadow: &ShadowBranch,
    probe: &ProbeModel,
    tau_cls: f64,
) -> Result<ShadowOutcome> {
    let mut rng = Rng::derive(spec.data_seed, &[stream::SHADOW_BATCHES, spec.id as u64]);
    let trace = local_train(&shadow.reference, &shadow.initial, data, &shadow.config, &mut rng)?;
    let (scores, degenerate_steps) = score_trace(&trace, probe)?;
    Ok(ShadowOutcome {
        rho: malicious_ratio(&scores, tau_cls),
        scores,
        degenerate_steps,
    })
}

/// `(#steps with s >= tau) / T`
pub fn malicious_ratio(scores: &[f64], tau_cls: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let m = scores.iter().filter(|&&s| classify(s, tau_cls) == Role::Malicious).count();
    m as f64 / scores.len() as f64
}

fn score_trace(trace: &LocalTrainTrace, probe: &ProbeModel) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut scores = Vec::with_capacity(trace.steps());
    let mut degenerate = Vec::new();
    for t in 1..=trace.steps() {
        let f = extract_feature(trace, t, &trace.initial_b)?;
        if f.degenerate {
            degenerate.push(t);
        }
        scores.push(predict(probe, &f)?);
    }
    Ok((scores, degenerate))
}

/// Complete federated run state.
#[derive(Clone, Debug)]
pub struct Simulation {
    config: ExperimentConfig,
    base: BaseModel,
    clients: Vec<ClientSpec>,
    datasets: Vec<Dataset>,
    test: Dataset,
    probe: Option<ProbeModel>,
    global: LoraAdapter,
    shadow: ShadowBranch,
    step_state: StepLevelState,
    client_state: ClientLevelState,
    shadow_factors: Vec<f64>,
    freeze: FreezeGate,
    histories: Vec<Vec<f64>>,
    next_round: usize,
}

impl Simulation {
    /// Sets up clients, data and the round-0 global state. Defended modes
    /// require a probe.
    pub fn new(config: ExperimentConfig, probe: Option<ProbeModel>) -> Result<Self> {
        config.validate()?;
        if let Some(p) = &probe {
            if p.feature_len() != config.feature_len() {
                return Err(Error::FeatureLength {
                    expected: config.feature_len(),
                    found: p.feature_len(),
                });
            }
        } else if config.defense.mode != DefenseMode::None {
            return Err(Error::Config("defended aggregation requires a trained probe".into()));
        }
        let base = build_base_model(&config);
        let task = Task::new(config.task.clone(), config.seeds.global);
        let clients = assign_roles(config.n_clients, config.malicious_count(), config.seeds.data);
        let datasets = clients
            .iter()
            .map(|c| generate_client_data(c, &task, config.samples_per_client))
            .collect();
        let test = generate_test_set(&task, config.seeds.data);
        let global = build_initial_adapter(&config, config.seeds.global);
        let shadow = ShadowBranch::new(base.clone(), global.clone(), &config.lora, config.shadow_lr);
        let n = config.n_clients;
        Ok(Self {
            base,
            clients,
            datasets,
            test,
            probe,
            global,
            shadow,
            step_state: StepLevelState::new(n),
            client_state: ClientLevelState::new(n),
            shadow_factors: vec![NEUTRAL_FACTOR; n],
            freeze: FreezeGate::new(),
            histories: Vec::new(),
            next_round: 1,
            config,
        })
    }

    /// Same as [`Simulation::new`] but with an explicit initial adapter
    /// (probe phase without a shared LoRA init).
    fn with_initial_adapter(config: ExperimentConfig, adapter: LoraAdapter) -> Result<Self> {
        let mut sim = Self::new(config, None)?;
        sim.shadow.initial = adapter.clone();
        sim.global = adapter;
        Ok(sim)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    pub fn global(&self) -> &LoraAdapter {
        &self.global
    }

    /// Replaces the global adapter (used to construct specific rounds).
    pub fn set_global(&mut self, adapter: LoraAdapter) {
        self.global = adapter;
    }

    pub fn clients(&self) -> &[ClientSpec] {
        &self.clients
    }

    pub fn dataset(&self, client: usize) -> &Dataset {
        &self.datasets[client]
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn shadow(&self) -> &ShadowBranch {
        &self.shadow
    }

    pub fn probe(&self) -> Option<&ProbeModel> {
        self.probe.as_ref()
    }

    pub fn next_round(&self) -> usize {
        self.next_round
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        evaluate_global(&self.base, Some(&self.global), &self.test, self.config.task.target_class)
    }

    /// Clients drawn for round `r`, sorted by id.
    pub fn sample_clients(&self, round: usize) -> Vec<usize> {
        let mut rng = Rng::derive(self.config.seeds.data, &[stream::SAMPLING, round as u64]);
        let mut s = rng.sample_indices(self.config.n_clients, self.config.clients_per_round);
        s.sort_unstable();
        s
    }

    fn train_client(&self, client: usize, round: usize) -> Result<LocalTrainTrace> {
        let mut rng = Rng::derive(
            self.config.seeds.data,
            &[stream::LOCAL_BATCHES, client as u64, round as u64],
        );
        local_train(&self.base, &self.global, &self.datasets[client], &self.config.lora, &mut rng)
            .map_err(|e| Error::Client {
                round,
                client,
                source: Box::new(e),
            })
    }

    /// Probe features of every sampled client's steps for the next round,
    /// then FedAvg; used by the probe-training simulation.
    fn run_feature_round(&mut self) -> Result<Vec<ProbeFeature>> {
        let round = self.next_round;
        let sampled = self.sample_clients(round);
        let mut features = Vec::new();
        let mut traces = Vec::with_capacity(sampled.len());
        for &c in &sampled {
            let trace = self.train_client(c, round)?;
            for t in 1..=trace.steps() {
                let f = extract_feature(&trace, t, &trace.initial_b)?
                    .with_label(self.clients[c].role)
                    .with_origin(FeatureOrigin { client: c, round, step: t });
                features.push(f);
            }
            traces.push(trace);
        }
        let samples: Vec<usize> = traces.iter().map(|t| t.n_samples).collect();
        let ones = vec![1.0; traces.len()];
        if let Some(coef) = aggregation_coefficients(&samples, &ones)? {
            let deltas: Vec<&AdapterDelta> = traces.iter().map(|t| &t.delta).collect();
            self.global.apply(&combine_deltas(&deltas, &coef)?)?;
        }
        self.next_round += 1;
        Ok(features)
    }

    /// Runs the next round and returns its record.
    pub fn run_round(&mut self) -> Result<RoundLog> {
        let round = self.next_round;
        let cfg = &self.config;
        let mode = cfg.defense.mode;
        let tau = cfg.defense.tau_cls;
        let sampled = self.sample_clients(round);
        let mut warnings = Vec::new();

        let mut traces = Vec::with_capacity(sampled.len());
        let mut records = Vec::with_capacity(sampled.len());
        for &c in &sampled {
            let trace = self.train_client(c, round)?;
            let mut rec = ClientRecord {
                client: c,
                role: self.clients[c].role,
                n_samples: trace.n_samples,
                step_scores: Vec::new(),
                final_score: None,
                shadow_scores: Vec::new(),
                rho: None,
                weight: NEUTRAL_FACTOR,
            };
            if let Some(probe) = &self.probe {
                let (scores, degenerate) = score_trace(&trace, probe)?;
                for step in degenerate {
                    warnings.push(Warning::DegenerateFeature { client: c, step, shadow: false });
                }
                rec.final_score = scores.last().copied();
                rec.step_scores = scores;
                if mode == DefenseMode::Shadow {
                    let out = run_shadow(&self.clients[c], &self.datasets[c], &self.shadow, probe, tau)
                        .map_err(|e| Error::Client { round, client: c, source: Box::new(e) })?;
                    for step in out.degenerate_steps {
                        warnings.push(Warning::DegenerateFeature { client: c, step, shadow: true });
                    }
                    rec.rho = Some(out.rho);
                    rec.shadow_scores = out.scores;
                }
            }
            traces.push(trace);
            records.push(rec);
        }

        let frozen = self.freeze.is_frozen(round, cfg.defense.freeze_round, mode);
        let factors = self.update_factors(round, &mut records, frozen, &mut warnings)?;

        let (skipped, weights) = self.aggregate(&sampled, &traces, &records, factors.as_ref(), &mut warnings)?;
        for (rec, w) in records.iter_mut().zip(weights) {
            rec.weight = w;
        }

        let evaluation = self.evaluate()?;
        self.next_round += 1;
        Ok(RoundLog {
            round,
            aggregator: self.config.aggregator,
            mode,
            tau_cls: tau,
            sampled,
            clients: records,
            factors: factors.map(|f| f.values).unwrap_or_default(),
            frozen,
            skipped,
            evaluation,
            warnings,
        })
    }

    /// Commits defense state (client-id order) and returns the factor map
    /// for this round, or `None` for undefended rules.
    fn update_factors(
        &mut self,
        round: usize,
        records: &mut [ClientRecord],
        frozen: bool,
        warnings: &mut Vec<Warning>,
    ) -> Result<Option<SecurityFactors>> {
        let cfg = &self.config.defense;
        let n = self.config.n_clients;
        let values: Vec<f64> = match cfg.mode {
            DefenseMode::None => return Ok(None),
            DefenseMode::Step => {
                if !frozen {
                    for rec in records.iter() {
                        let m = rec.step_scores.iter().filter(|&&s| s >= cfg.tau_cls).count() as u32;
                        let b = rec.step_scores.len() as u32 - m;
                        self.step_state.update(rec.client, b, m, cfg.gamma);
                    }
                }
                (0..n).map(|i| self.step_state.factor(i)).collect()
            }
            DefenseMode::Client => {
                if !frozen {
                    for rec in records.iter() {
                        let s = rec.final_score.ok_or(Error::EmptyInput("final probe score"))?;
                        self.client_state.update(rec.client, s, cfg.calibration_k)?;
                    }
                }
                (0..n).map(|i| self.client_state.factor(i)).collect()
            }
            DefenseMode::Shadow => {
                for rec in records.iter() {
                    let rho = rec.rho.ok_or(Error::EmptyInput("shadow ratio"))?;
                    self.shadow_factors[rec.client] = shadow_level_weight(rho, cfg.eta);
                }
                self.shadow_factors.clone()
            }
        };
        if frozen {
            for rec in records.iter() {
                let never_seen = match cfg.mode {
                    DefenseMode::Step => !self.step_state.has_evidence(rec.client),
                    DefenseMode::Client => self.client_state.history(rec.client).is_empty(),
                    _ => false,
                };
                if never_seen {
                    warnings.push(Warning::NeutralAfterFreeze { client: rec.client });
                }
            }
        }
        let current = SecurityFactors { round, values, frozen: false };
        Ok(Some(self.freeze.apply(current, round, cfg.freeze_round, cfg.mode)))
    }

    /// Applies the configured rule. Returns the skip flag and each sampled
    /// client's raw weight.
    fn aggregate(
        &mut self,
        sampled: &[usize],
        traces: &[LocalTrainTrace],
        records: &[ClientRecord],
        factors: Option<&SecurityFactors>,
        warnings: &mut Vec<Warning>,
    ) -> Result<(bool, Vec<f64>)> {
        let samples: Vec<usize> = traces.iter().map(|t| t.n_samples).collect();
        let template = &traces[0].delta;
        let flat_updates = || -> Vec<ClientUpdate> {
            sampled
                .iter()
                .zip(traces)
                .map(|(&c, t)| ClientUpdate { client: c, flat: t.delta.flatten(), n_samples: t.n_samples })
                .collect()
        };

        let apply_flat = |global: &mut LoraAdapter, flat: &[f64]| -> Result<()> {
            global.apply(&AdapterDelta::unflatten(flat, template)?)
        };

        let weights: Vec<f64> = match self.config.aggregator {
            AggregatorKind::FedAvg => {
                let agg = baselines::fedavg(&flat_updates())?;
                apply_flat(&mut self.global, &agg)?;
                return Ok((false, vec![1.0; sampled.len()]));
            }
            AggregatorKind::Krum => {
                let updates = flat_updates();
                let chosen = baselines::krum(&updates, self.config.krum_f())?;
                let weights = sampled.iter().map(|&c| if c == chosen.client { 1.0 } else { 0.0 }).collect();
                apply_flat(&mut self.global, &chosen.flat)?;
                return Ok((false, weights));
            }
            AggregatorKind::TrimmedMean => {
                let agg = baselines::trimmed_mean(&flat_updates(), self.config.trim_count())?;
                apply_flat(&mut self.global, &agg)?;
                return Ok((false, vec![1.0; sampled.len()]));
            }
            AggregatorKind::FoolsGold => {
                if self.histories.is_empty() {
                    self.histories = vec![vec![0.0; template.len()]; self.config.n_clients];
                }
                for (&c, t) in sampled.iter().zip(traces) {
                    for (h, d) in self.histories[c].iter_mut().zip(t.delta.flatten()) {
                        *h += d;
                    }
                }
                let hist: Vec<Vec<f64>> = sampled.iter().map(|&c| self.histories[c].clone()).collect();
                let fg = baselines::foolsgold(&hist)?;
                for &i in &fg.zero_norm {
                    warnings.push(Warning::ZeroHistory { client: sampled[i] });
                }
                fg.weights
            }
            AggregatorKind::Residual => baselines::residual_weights(&flat_updates())?,
            AggregatorKind::SafeStep | AggregatorKind::SafeClient | AggregatorKind::SafeShadow => {
                let map = factors.ok_or(Error::Config("defended rule without factors".into()))?;
                let w: Vec<f64> = records.iter().map(|r| map.values[r.client]).collect();
                if should_skip(&w, self.config.defense.tau_skip)? {
                    return Ok((true, w));
                }
                w
            }
        };

        match aggregation_coefficients(&samples, &weights)? {
            None => {
                warnings.push(Warning::ForcedSkip);
                Ok((true, weights))
            }
            Some(coef) => {
                let deltas: Vec<&AdapterDelta> = traces.iter().map(|t| &t.delta).collect();
                self.global.apply(&combine_deltas(&deltas, &coef)?)?;
                Ok((false, weights))
            }
        }
    }
}

/// Collects one labeled feature per (client, round, step) from a short
/// FedAvg simulation at the probe-phase malicious ratio, with `data_seed`
/// standing in for the experiment's data seed.
pub fn build_probe_dataset_with_seed(config: &ExperimentConfig, data_seed: u64) -> Result<Vec<ProbeFeature>> {
    let mut phase = config.clone().with_aggregator(AggregatorKind::FedAvg);
    phase.malicious_ratio = config.probe.malicious_ratio;
    phase.seeds.data = data_seed;
    phase.rounds = config.probe.rounds;
    let init_seed = if config.probe.share_lora_init {
        config.seeds.global
    } else {
        config.seeds.probe
    };
    let adapter = build_initial_adapter(&phase, init_seed);
    let mut sim = Simulation::with_initial_adapter(phase, adapter)?;
    let mut out = Vec::new();
    for _ in 0..config.probe.rounds {
        out.extend(sim.run_feature_round()?);
    }
    Ok(out)
}

/// Probe-training features built from the probe seed.
pub fn build_probe_dataset(config: &ExperimentConfig) -> Result<Vec<ProbeFeature>> {
    build_probe_dataset_with_seed(config, config.seeds.probe)
}

/// Offline probe phase: simulate, then fit.
pub fn train_probe_for(config: &ExperimentConfig) -> Result<ProbeModel> {
    let data = build_probe_dataset(config)?;
    let mut hyper = config.probe.hyper.clone();
    hyper.seed = config.seeds.probe;
    train_probe(&data, &hyper)
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub logs: Vec<RoundLog>,
    pub summary: Summary,
    /// Global adapter after the last round.
    pub global: LoraAdapter,
}

/// Probe phase (unless `probe` is given and the mode needs one), then all
/// rounds, then the summary.
pub fn run_experiment(config: &ExperimentConfig, probe: Option<ProbeModel>) -> Result<ExperimentOutcome> {
    let probe = match probe {
        Some(p) => Some(p),
        None if config.defense.mode != DefenseMode::None => Some(train_probe_for(config)?),
        None => None,
    };
    let mut sim = Simulation::new(config.clone(), probe)?;
    let initial = sim.evaluate()?;
    let mut logs = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        logs.push(sim.run_round()?);
    }
    let final_eval = logs.last().map_or(initial, |l| l.evaluation);
    let summary = Summary {
        rounds: config.rounds,
        aggregator: config.aggregator,
        malicious_ratio: config.malicious_ratio,
        initial,
        final_eval,
        detection: pooled_detection(&logs, config.defense.mode, 1, config.defense.freeze_round),
        skip_count: logs.iter().filter(|l| l.skipped).count(),
    };
    Ok(ExperimentOutcome {
        logs,
        summary,
        global: sim.global.clone(),
    })
}
