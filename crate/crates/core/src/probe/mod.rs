//! LoRA-Probe: a frozen logistic classifier over L2-normalized B-matrix
//! deltas.

mod metrics;
mod projection;

pub use metrics::{compute_metrics, DetectionMetrics};
pub use projection::{project_2d, Projection};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lora::{delta_b, LocalTrainTrace, N_MODULES};
use crate::substrate::{dot, l2_normalize, sigmoid, Matrix};

/// Ground-truth role of a client, or the probe's verdict on an update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Benign,
    Malicious,
}

impl Role {
    pub fn is_malicious(self) -> bool {
        matches!(self, Role::Malicious)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Benign => "benign",
            Role::Malicious => "malicious",
        }
    }
}

/// Where a feature came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FeatureOrigin {
    pub client: usize,
    pub round: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFeature {
    /// Unit-norm feature, or the raw all-zero vector when `degenerate`.
    pub values: Vec<f64>,
    pub degenerate: bool,
    pub label: Option<Role>,
    pub origin: FeatureOrigin,
}

impl ProbeFeature {
    /// Concatenates the per-module deltas (module order, row-major) and
    /// normalizes.
    pub fn from_delta(delta: &[Matrix; N_MODULES]) -> Result<Self> {
        let raw: Vec<f64> = delta.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        Self::from_raw(&raw)
    }

    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        let n = l2_normalize(raw)?;
        Ok(Self {
            values: n.values,
            degenerate: n.degenerate,
            label: None,
            origin: FeatureOrigin::default(),
        })
    }

    pub fn with_label(mut self, label: Role) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_origin(mut self, origin: FeatureOrigin) -> Self {
        self.origin = origin;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Feature for step `t` of a local-training trace.
pub fn extract_feature(
    trace: &LocalTrainTrace,
    step: usize,
    initial_b: &[Matrix; N_MODULES],
) -> Result<ProbeFeature> {
    ProbeFeature::from_delta(&delta_b(trace, step, initial_b)?)
}

/// Full-batch gradient-descent settings for [`train_probe`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.1,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Linear maliciousness classifier `s = σ(aᵀx̃ + c)`. Immutable once trained.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    weights: Vec<f64>,
    bias: f64,
    hyper: ProbeHyper,
}

impl ProbeModel {
    pub fn new(weights: Vec<f64>, bias: f64, hyper: ProbeHyper) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyInput("ProbeModel weights"));
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("ProbeModel"));
        }
        Ok(Self { weights, bias, hyper })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn hyper(&self) -> &ProbeHyper {
        &self.hyper
    }

    pub fn feature_len(&self) -> usize {
        self.weights.len()
    }

    /// `aᵀx̃ + c`
    pub fn logit(&self, feature: &ProbeFeature) -> Result<f64> {
        if feature.len() != self.weights.len() {
            return Err(Error::FeatureLength {
                expected: self.weights.len(),
                found: feature.len(),
            });
        }
        Ok(dot(&self.weights, &feature.values) + self.bias)
    }
}

pub fn train_probe(dataset: &[ProbeFeature], hyper: &ProbeHyper) -> Result<ProbeModel> {
    let first = dataset.first().ok_or(Error::EmptyInput("train_probe dataset"))?;
    let dim = first.len();
    let mut targets = Vec::with_capacity(dataset.len());
    for f in dataset {
        if f.len() != dim {
            return Err(Error::FeatureLength { expected: dim, found: f.len() });
        }
        let label = f.label.ok_or(Error::EmptyInput("train_probe label"))?;
        targets.push(if label.is_malicious() { 1.0 } else { 0.0 });
    }
    let positives = targets.iter().filter(|&&t| t == 1.0).count();
    if positives == 0 || positives == targets.len() {
        return Err(Error::SingleClass);
    }

    let n = dataset.len() as f64;
    let mut a = vec![0.0; dim];
    let mut c = 0.0;
    let mut grad = vec![0.0; dim];
    for _ in 0..hyper.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_c = 0.0;
        for (f, &y) in dataset.iter().zip(&targets) {
            let err = sigmoid(dot(&a, &f.values) + c) - y;
            for (g, &x) in grad.iter_mut().zip(&f.values) {
                *g += err * x;
            }
            grad_c += err;
        }
        for (w, g) in a.iter_mut().zip(&grad) {
            *w -= hyper.learning_rate * (g / n + 2.0 * hyper.l2 * *w);
        }
        c -= hyper.learning_rate * grad_c / n;
    }
    ProbeModel::new(a, c, hyper.clone())
}

/// Maliciousness probability of one feature.
pub fn predict(model: &ProbeModel, feature: &ProbeFeature) -> Result<f64> {
    Ok(sigmoid(model.logit(feature)?))
}

/// Malicious iff `s >= tau_cls`.
pub fn classify(score: f64, tau_cls: f64) -> Role {
    if score >= tau_cls {
        Role::Malicious
    } else {
        Role::Benign
    }
}
