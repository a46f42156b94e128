//! Security factors from probe outputs, early-stage freezing, gated round
//! skipping and security-weighted aggregation.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lora::{AdapterDelta, LoraAdapter, N_MODULES};
use crate::substrate::{sigmoid, Matrix, EPS_NORM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DefenseMode {
    None,
    Step,
    Client,
    Shadow,
}

impl DefenseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DefenseMode::None => "none",
            DefenseMode::Step => "step",
            DefenseMode::Client => "client",
            DefenseMode::Shadow => "shadow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => DefenseMode::None,
            "step" => DefenseMode::Step,
            "client" => DefenseMode::Client,
            "shadow" => DefenseMode::Shadow,
            _ => return None,
        })
    }

    /// Modes whose factors come from the main training branch and are
    /// frozen after `R_f`.
    pub fn freezes(self) -> bool {
        matches!(self, DefenseMode::Step | DefenseMode::Client)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefenseConfig {
    pub tau_cls: f64,
    pub tau_skip: f64,
    pub gamma: f64,
    pub eta: f64,
    pub freeze_round: usize,
    pub calibration_k: f64,
    pub mode: DefenseMode,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            tau_cls: 0.8,
            tau_skip: 0.2,
            gamma: 0.95,
            eta: 7.0,
            freeze_round: 20,
            calibration_k: 10.0,
            mode: DefenseMode::None,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |what, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(Error::OutOfRange { what, value, range: "[0, 1]" })
            }
        };
        unit("defense.tau_cls", self.tau_cls)?;
        unit("defense.tau_skip", self.tau_skip)?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::OutOfRange { what: "defense.gamma", value: self.gamma, range: "(0, 1)" });
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::OutOfRange { what: "defense.eta", value: self.eta, range: "> 0" });
        }
        if !(self.calibration_k > 0.0 && self.calibration_k.is_finite()) {
            return Err(Error::OutOfRange {
                what: "defense.k",
                value: self.calibration_k,
                range: "> 0",
            });
        }
        Ok(())
    }
}

/// Factor reported for a client with no evidence yet.
pub const NEUTRAL_FACTOR: f64 = 1.0;

/// Decayed Beta pseudo-counts per client, prior `(1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLevelState {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    seen: Vec<bool>,
}

impl StepLevelState {
    pub const PRIOR: (f64, f64) = (1.0, 1.0);

    pub fn new(n_clients: usize) -> Self {
        Self {
            alpha: vec![Self::PRIOR.0; n_clients],
            beta: vec![Self::PRIOR.1; n_clients],
            seen: vec![false; n_clients],
        }
    }

    pub fn with_prior(n_clients: usize, alpha: f64, beta: f64) -> Self {
        Self {
            alpha: vec![alpha; n_clients],
            beta: vec![beta; n_clients],
            seen: vec![false; n_clients],
        }
    }

    pub fn pseudo_counts(&self, client: usize) -> (f64, f64) {
        (self.alpha[client], self.beta[client])
    }

    /// `α ← γα + b`, `β ← γβ + m`, then `α / (α + β)`. A round with no
    /// evidence (`b = m = 0`) leaves the state untouched.
    pub fn update(&mut self, client: usize, benign: u32, malicious: u32, gamma: f64) -> f64 {
        if benign + malicious > 0 {
            self.alpha[client] = gamma * self.alpha[client] + f64::from(benign);
            self.beta[client] = gamma * self.beta[client] + f64::from(malicious);
            self.seen[client] = true;
        }
        self.posterior_mean(client)
    }

    fn posterior_mean(&self, client: usize) -> f64 {
        self.alpha[client] / (self.alpha[client] + self.beta[client])
    }

    pub fn has_evidence(&self, client: usize) -> bool {
        self.seen[client]
    }

    /// Current factor; clients without evidence get [`NEUTRAL_FACTOR`].
    pub fn factor(&self, client: usize) -> f64 {
        if self.seen[client] {
            self.posterior_mean(client)
        } else {
            NEUTRAL_FACTOR
        }
    }
}

/// Two-stage sigmoid calibration; the first branch is closed at `s = 0.8`.
pub fn calibrate(score: f64, k: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::OutOfRange {
            what: "calibrate score",
            value: score,
            range: "[0, 1]",
        });
    }
    Ok(if score <= 0.8 {
        0.5 * sigmoid(k * (score - 0.4))
    } else {
        0.5 * (1.0 + sigmoid(k * (score - 0.9)))
    })
}

/// Participation-averaged instantaneous factors `1 − g(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientLevelState {
    history: Vec<Vec<f64>>,
}

impl ClientLevelState {
    pub fn new(n_clients: usize) -> Self {
        Self {
            history: vec![Vec::new(); n_clients],
        }
    }

    pub fn history(&self, client: usize) -> &[f64] {
        &self.history[client]
    }

    pub fn update(&mut self, client: usize, final_score: f64, k: f64) -> Result<f64> {
        let instant = 1.0 - calibrate(final_score, k)?;
        self.history[client].push(instant);
        Ok(self.factor(client))
    }

    pub fn factor(&self, client: usize) -> f64 {
        let h = &self.history[client];
        if h.is_empty() {
            NEUTRAL_FACTOR
        } else {
            h.iter().sum::<f64>() / h.len() as f64
        }
    }
}

/// `(1 − ρ)^η`
pub fn shadow_level_weight(rho: f64, eta: f64) -> f64 {
    libm::pow(1.0 - rho.clamp(0.0, 1.0), eta)
}

/// Factor map over all clients at one round.
#[derive(Clone, Debug, PartialEq)]
pub struct SecurityFactors {
    pub round: usize,
    pub values: Vec<f64>,
    pub frozen: bool,
}

impl SecurityFactors {
    pub fn neutral(round: usize, n_clients: usize) -> Self {
        Self {
            round,
            values: vec![NEUTRAL_FACTOR; n_clients],
            frozen: false,
        }
    }

    pub fn bit_eq_values(&self, other: &SecurityFactors) -> bool {
        self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Holds the round-`R_f` factor map for freezing modes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FreezeGate {
    snapshot: Option<SecurityFactors>,
}

impl FreezeGate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_frozen(&self, round: usize, freeze_round: usize, mode: DefenseMode) -> bool {
        mode.freezes() && round > freeze_round
    }

    /// See [`apply_freezing`]. Remembers the last map seen at or before
    /// `freeze_round`.
    pub fn apply(
        &mut self,
        factors: SecurityFactors,
        round: usize,
        freeze_round: usize,
        mode: DefenseMode,
    ) -> SecurityFactors {
        if !self.is_frozen(round, freeze_round, mode) {
            if mode.freezes() {
                self.snapshot = Some(factors.clone());
            }
            return factors;
        }
        let n = factors.values.len();
        let frozen = self
            .snapshot
            .get_or_insert_with(|| SecurityFactors::neutral(freeze_round, n));
        apply_freezing(factors, frozen, round, freeze_round, mode)
    }
}

/// For step/client modes past `freeze_round`, returns the frozen map
/// (values bit-identical to `at_freeze_round`); otherwise passes through.
pub fn apply_freezing(
    factors: SecurityFactors,
    at_freeze_round: &SecurityFactors,
    round: usize,
    freeze_round: usize,
    mode: DefenseMode,
) -> SecurityFactors {
    if mode.freezes() && round > freeze_round {
        SecurityFactors {
            round,
            values: at_freeze_round.values.clone(),
            frozen: true,
        }
    } else {
        factors
    }
}

/// True iff the mean factor of the sampled clients is strictly below
/// `tau_skip`.
pub fn should_skip(sampled_factors: &[f64], tau_skip: f64) -> Result<bool> {
    if sampled_factors.is_empty() {
        return Err(Error::EmptyInput("should_skip"));
    }
    let mean = sampled_factors.iter().sum::<f64>() / sampled_factors.len() as f64;
    Ok(mean < tau_skip)
}

/// `n_i w_i / Σ n_j w_j`, or `None` when the denominator is at most
/// [`EPS_NORM`].
pub fn aggregation_coefficients(samples: &[usize], factors: &[f64]) -> Result<Option<Vec<f64>>> {
    if samples.len() != factors.len() {
        return Err(Error::Shape {
            context: "aggregation_coefficients",
            expected: (samples.len(), 1),
            found: (factors.len(), 1),
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("aggregation_coefficients"));
    }
    let raw: Vec<f64> = samples.iter().zip(factors).map(|(&n, &w)| n as f64 * w).collect();
    let total: f64 = raw.iter().sum();
    if total <= EPS_NORM {
        return Ok(None);
    }
    Ok(Some(raw.into_iter().map(|x| x / total).collect()))
}

/// `Σ coef_i · Δ_i`, factor by factor, accumulated in input order.
pub fn combine_deltas(deltas: &[&AdapterDelta], coefficients: &[f64]) -> Result<AdapterDelta> {
    let first = deltas.first().ok_or(Error::EmptyInput("combine_deltas"))?;
    if deltas.len() != coefficients.len() {
        return Err(Error::Shape {
            context: "combine_deltas",
            expected: (deltas.len(), 1),
            found: (coefficients.len(), 1),
        });
    }
    let zero = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
    let mut out = AdapterDelta {
        a: [zero(&first.a[0]), zero(&first.a[1])],
        b: [zero(&first.b[0]), zero(&first.b[1])],
    };
    for (d, &c) in deltas.iter().zip(coefficients) {
        for m in 0..N_MODULES {
            out.a[m].axpy(c, &d.a[m])?;
            out.b[m].axpy(c, &d.b[m])?;
        }
    }
    Ok(out)
}

/// One client's contribution to an aggregation round.
#[derive(Clone, Copy, Debug)]
pub struct ClientUpdateRef<'a> {
    pub delta: &'a AdapterDelta,
    pub n_samples: usize,
}

#[derive(Clone, Debug)]
pub enum Aggregated {
    Applied {
        adapter: LoraAdapter,
        coefficients: Vec<f64>,
    },
    /// `Σ n_j w_j` vanished; the global state is retained.
    ForcedSkip,
}

/// Security-weighted aggregation of adapter deltas onto `global`.
pub fn secure_aggregate(
    global: &LoraAdapter,
    updates: &[ClientUpdateRef<'_>],
    factors: &[f64],
) -> Result<Aggregated> {
    let samples: Vec<usize> = updates.iter().map(|u| u.n_samples).collect();
    let Some(coefficients) = aggregation_coefficients(&samples, factors)? else {
        return Ok(Aggregated::ForcedSkip);
    };
    let deltas: Vec<&AdapterDelta> = updates.iter().map(|u| u.delta).collect();
    let step = combine_deltas(&deltas, &coefficients)?;
    let mut adapter = global.clone();
    adapter.apply(&step)?;
    Ok(Aggregated::Applied { adapter, coefficients })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn step_level_examples() {
        let mut s = StepLevelState::new(1);
        assert!(close(s.update(0, 8, 2, 0.95), 8.95 / 11.90, 1e-12));
        assert_eq!(s.pseudo_counts(0), (0.95 + 8.0, 0.95 + 2.0));

        let mut s = StepLevelState::new(1);
        assert!(close(s.update(0, 0, 10, 0.95), 0.95 / 11.90, 1e-12));
        assert!(close(s.factor(0), 0.079_831_932_773_109_24, 1e-12));

        let before = s.clone();
        let w = s.factor(0);
        assert_eq!(s.update(0, 0, 0, 0.95), w);
        assert_eq!(s, before);
    }

    #[test]
    fn unseen_step_client_is_neutral() {
        let s = StepLevelState::new(3);
        assert_eq!(s.factor(2), NEUTRAL_FACTOR);
    }

    #[test]
    fn calibration_closed_forms() {
        assert!(close(calibrate(0.4, 10.0).unwrap(), 0.25, 1e-15));
        assert!(close(calibrate(0.9, 10.0).unwrap(), 0.75, 1e-15));
        assert!(close(calibrate(0.8, 10.0).unwrap(), 0.5 * 0.982_013_790_037_908_5, 1e-15));
        assert!(close(calibrate(1.0, 10.0).unwrap(), 0.5 * (1.0 + 0.731_058_578_630_004_9), 1e-15));
        assert!(calibrate(-0.01, 10.0).is_err());
        assert!(calibrate(1.01, 10.0).is_err());
    }

    #[test]
    fn client_level_examples() {
        let mut c = ClientLevelState::new(2);
        assert_eq!(c.factor(0), NEUTRAL_FACTOR);
        assert!(close(c.update(0, 0.4, 10.0).unwrap(), 0.75, 1e-15));
        assert!(close(c.update(0, 0.9, 10.0).unwrap(), 0.5, 1e-15));
        for _ in 0..3 {
            // 1 - ½σ(−4)
            assert!(close(c.update(1, 0.0, 10.0).unwrap(), 0.991_006_895_018_954_2, 1e-12));
        }
        assert_eq!(c.history(1).len(), 3);
    }

    #[test]
    fn shadow_weight_examples() {
        assert_eq!(shadow_level_weight(0.0, 7.0), 1.0);
        assert_eq!(shadow_level_weight(1.0, 7.0), 0.0);
        assert!(close(shadow_level_weight(0.3, 7.0), 0.082_354_3, 1e-12));
    }

    #[test]
    fn freezing_replays_round_rf() {
        let mut gate = FreezeGate::new();
        let at = |r: usize, v: f64| SecurityFactors { round: r, values: vec![v, 1.0 - v], frozen: false };
        for r in 1..=20 {
            let out = gate.apply(at(r, r as f64 / 100.0), r, 20, DefenseMode::Step);
            assert!(!out.frozen);
        }
        let out = gate.apply(at(21, 0.9), 21, 20, DefenseMode::Step);
        assert!(out.frozen);
        assert!(out.bit_eq_values(&at(20, 0.2)));

        let mut shadow = FreezeGate::new();
        let out = shadow.apply(at(30, 0.9), 30, 20, DefenseMode::Shadow);
        assert!(!out.frozen && out.values[0] == 0.9);
    }

    #[test]
    fn freezing_without_history_is_neutral() {
        let mut gate = FreezeGate::new();
        let f = SecurityFactors { round: 1, values: vec![0.1, 0.2], frozen: false };
        let out = gate.apply(f, 1, 0, DefenseMode::Client);
        assert_eq!(out.values, vec![1.0, 1.0]);
    }

    #[test]
    fn skip_boundaries() {
        assert!(should_skip(&[0.1, 0.2, 0.2], 0.2).unwrap());
        assert!(!should_skip(&[1.0, 1.0, 1.0], 0.2).unwrap());
        assert!(!should_skip(&[0.2, 0.2, 0.2], 0.2).unwrap());
        assert!(should_skip(&[], 0.2).is_err());
    }

    fn scalar_delta(v: f64) -> AdapterDelta {
        let one = |x: f64| Matrix::from_vec(1, 1, vec![x]).unwrap();
        AdapterDelta {
            a: [one(v), one(0.0)],
            b: [one(v), one(-v)],
        }
    }

    fn scalar_adapter() -> LoraAdapter {
        let z = Matrix::zeros(1, 1);
        LoraAdapter { a: [z.clone(), z.clone()], b: [z.clone(), z], scaling: 2.0 }
    }

    #[test]
    fn zero_factor_client_is_excluded() {
        let deltas = [scalar_delta(2.0), scalar_delta(4.0), scalar_delta(100.0)];
        let updates: Vec<ClientUpdateRef> = deltas.iter().map(|d| ClientUpdateRef { delta: d, n_samples: 500 }).collect();
        let Aggregated::Applied { adapter, coefficients } =
            secure_aggregate(&scalar_adapter(), &updates, &[1.0, 1.0, 0.0]).unwrap()
        else {
            panic!("expected aggregation")
        };
        assert_eq!(coefficients, vec![0.5, 0.5, 0.0]);
        assert_eq!(adapter.a[0].as_slice(), &[3.0]);
        assert_eq!(adapter.b[1].as_slice(), &[-3.0]);
    }

    #[test]
    fn single_client_applied_verbatim() {
        let d = scalar_delta(0.125);
        let updates = [ClientUpdateRef { delta: &d, n_samples: 7 }];
        let Aggregated::Applied { adapter, .. } = secure_aggregate(&scalar_adapter(), &updates, &[0.3]).unwrap() else {
            panic!()
        };
        assert_eq!(adapter.a[0].as_slice(), &[0.125]);
    }

    #[test]
    fn all_zero_factors_force_a_skip() {
        let d = scalar_delta(1.0);
        let updates = [ClientUpdateRef { delta: &d, n_samples: 500 }];
        assert!(matches!(secure_aggregate(&scalar_adapter(), &updates, &[0.0]).unwrap(), Aggregated::ForcedSkip));
    }
}
