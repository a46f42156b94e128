//! Desk-scale fine-tuning target: a frozen two-layer classifier whose first
//! layer holds two LoRA-adapted projections.
//!
//! ```text
//! logits = H · tanh(concat_m((M_m + (alpha/r)·B_m·A_m) · x))
//! ```
//!
//! Only `A_m` and `B_m` are trained; `M_m` and `H` stay frozen.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::substrate::{Matrix, Rng};

/// Number of adapted first-layer modules.
pub const N_MODULES: usize = 2;

/// Standard deviation of the Gaussian `A` initialization.
pub const LORA_A_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub local_steps: usize,
    pub batch_size: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            learning_rate: 0.025,
            local_steps: 10,
            batch_size: 50,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::OutOfRange { what: "lora.rank", value: 0.0, range: ">= 1" });
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::OutOfRange { what: "lora.alpha", value: self.alpha, range: "> 0" });
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::OutOfRange {
                what: "lora.learning_rate",
                value: self.learning_rate,
                range: ">= 0",
            });
        }
        if self.local_steps == 0 {
            return Err(Error::OutOfRange { what: "lora.local_steps", value: 0.0, range: ">= 1" });
        }
        if self.batch_size == 0 {
            return Err(Error::OutOfRange { what: "lora.batch_size", value: 0.0, range: ">= 1" });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub d_in: usize,
    pub d_hidden: usize,
    pub n_classes: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_hidden: 8,
            n_classes: 4,
        }
    }
}

/// Frozen backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub modules: [Matrix; N_MODULES],
    pub head: Matrix,
}

impl BaseModel {
    /// Random frozen backbone: module entries `N(0, 1/d_in)`, head entries
    /// `N(0, head_std²)`.
    pub fn random(shape: ModelShape, head_std: f64, rng: &mut Rng) -> Self {
        let w_std = 1.0 / libm::sqrt(shape.d_in as f64);
        let modules = core::array::from_fn(|_| {
            Matrix::from_fn(shape.d_hidden, shape.d_in, |_, _| rng.normal(0.0, w_std))
        });
        let head = Matrix::from_fn(shape.n_classes, N_MODULES * shape.d_hidden, |_, _| {
            rng.normal(0.0, head_std)
        });
        Self { modules, head }
    }

    pub fn from_parts(modules: [Matrix; N_MODULES], head: Matrix) -> Result<Self> {
        let (d_h, d_in) = modules[0].shape();
        if modules.iter().any(|m| m.shape() != (d_h, d_in)) || head.cols() != N_MODULES * d_h {
            return Err(Error::Shape {
                context: "BaseModel::from_parts",
                expected: (d_h, d_in),
                found: modules[1].shape(),
            });
        }
        Ok(Self { modules, head })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            d_in: self.modules[0].cols(),
            d_hidden: self.modules[0].rows(),
            n_classes: self.head.rows(),
        }
    }
}

/// Trainable low-rank factors for both first-layer modules.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: [Matrix; N_MODULES],
    pub b: [Matrix; N_MODULES],
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a[0].rows()
    }

    /// `(alpha/r) · B_m · A_m`.
    pub fn delta_weight(&self, module: usize) -> Matrix {
        self.b[module]
            .matmul(&self.a[module])
            .expect("adapter factors are shape-consistent")
            .scale(self.scaling)
    }

    /// Flattened B entries, module 1 then module 2, row-major.
    pub fn flat_b(&self) -> Vec<f64> {
        self.b.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn bit_eq(&self, other: &LoraAdapter) -> bool {
        self.scaling.to_bits() == other.scaling.to_bits()
            && self.a.iter().zip(&other.a).all(|(x, y)| x.bit_eq(y))
            && self.b.iter().zip(&other.b).all(|(x, y)| x.bit_eq(y))
    }

    /// Applies `self += delta` factor by factor.
    pub fn apply(&mut self, delta: &AdapterDelta) -> Result<()> {
        for m in 0..N_MODULES {
            self.a[m].axpy(1.0, &delta.a[m])?;
            self.b[m].axpy(1.0, &delta.b[m])?;
        }
        Ok(())
    }

    fn check_compatible(&self, base: &BaseModel) -> Result<()> {
        let s = base.shape();
        let r = self.rank();
        for m in 0..N_MODULES {
            if self.a[m].shape() != (r, s.d_in) || self.b[m].shape() != (s.d_hidden, r) {
                return Err(Error::Shape {
                    context: "adapter vs base",
                    expected: (s.d_hidden, s.d_in),
                    found: (self.b[m].rows(), self.a[m].cols()),
                });
            }
        }
        Ok(())
    }
}

/// Zero `B`, Gaussian `A`; same rng state gives a bit-identical adapter.
pub fn init_adapter(config: &LoraConfig, shape: ModelShape, rng: &mut Rng) -> LoraAdapter {
    let a = core::array::from_fn(|_| {
        Matrix::from_fn(config.rank, shape.d_in, |_, _| rng.normal(0.0, LORA_A_INIT_STD))
    });
    let b = core::array::from_fn(|_| Matrix::zeros(shape.d_hidden, config.rank));
    LoraAdapter {
        a,
        b,
        scaling: config.scaling(),
    }
}

/// Difference between two adapter states, per factor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterDelta {
    pub a: [Matrix; N_MODULES],
    pub b: [Matrix; N_MODULES],
}

impl AdapterDelta {
    pub fn zeros_like(adapter: &LoraAdapter) -> Self {
        Self {
            a: core::array::from_fn(|m| Matrix::zeros(adapter.a[m].rows(), adapter.a[m].cols())),
            b: core::array::from_fn(|m| Matrix::zeros(adapter.b[m].rows(), adapter.b[m].cols())),
        }
    }

    pub fn between(after: &LoraAdapter, before: &LoraAdapter) -> Result<Self> {
        Ok(Self {
            a: [after.a[0].sub(&before.a[0])?, after.a[1].sub(&before.a[1])?],
            b: [after.b[0].sub(&before.b[0])?, after.b[1].sub(&before.b[1])?],
        })
    }

    /// Flat layout: `A_1, B_1, A_2, B_2`, each row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for m in 0..N_MODULES {
            out.extend_from_slice(self.a[m].as_slice());
            out.extend_from_slice(self.b[m].as_slice());
        }
        out
    }

    pub fn len(&self) -> usize {
        (0..N_MODULES)
            .map(|m| self.a[m].as_slice().len() + self.b[m].as_slice().len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inverse of [`AdapterDelta::flatten`] using `template`'s shapes.
    pub fn unflatten(flat: &[f64], template: &AdapterDelta) -> Result<Self> {
        if flat.len() != template.len() {
            return Err(Error::Shape {
                context: "AdapterDelta::unflatten",
                expected: (template.len(), 1),
                found: (flat.len(), 1),
            });
        }
        let mut offset = 0;
        let mut take = |m: &Matrix| {
            let n = m.rows() * m.cols();
            let out = Matrix::from_vec(m.rows(), m.cols(), flat[offset..offset + n].to_vec());
            offset += n;
            out
        };
        let a0 = take(&template.a[0])?;
        let b0 = take(&template.b[0])?;
        let a1 = take(&template.a[1])?;
        let b1 = take(&template.b[1])?;
        Ok(Self { a: [a0, a1], b: [b0, b1] })
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().chain(&self.b).all(Matrix::is_zero)
    }
}

/// Labeled inputs, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape {
                context: "Dataset::new",
                expected: (features.rows(), 1),
                found: (labels.len(), 1),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.features.cols();
        let features = Matrix::from_fn(indices.len(), d, |i, j| self.features.get(indices[i], j));
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset { features, labels }
    }
}

struct Activations {
    /// `X · A_mᵀ` per module (n × r)
    xa: [Matrix; N_MODULES],
    /// `tanh` outputs concatenated (n × 2·d_h)
    hidden: Matrix,
    logits: Matrix,
}

fn activations(base: &BaseModel, adapter: Option<&LoraAdapter>, x: &Matrix) -> Result<Activations> {
    let shape = base.shape();
    if x.cols() != shape.d_in {
        return Err(Error::Shape {
            context: "forward input",
            expected: (x.rows(), shape.d_in),
            found: x.shape(),
        });
    }
    if let Some(ad) = adapter {
        ad.check_compatible(base)?;
    }
    let n = x.rows();
    let d_h = shape.d_hidden;
    let mut hidden = Matrix::zeros(n, N_MODULES * d_h);
    let mut xa: [Matrix; N_MODULES] = core::array::from_fn(|_| Matrix::zeros(n, 1));
    for m in 0..N_MODULES {
        let mut pre = x.matmul_t(&base.modules[m])?;
        if let Some(ad) = adapter {
            let proj = x.matmul_t(&ad.a[m])?;
            let lifted = proj.matmul_t(&ad.b[m])?;
            pre.axpy(ad.scaling, &lifted)?;
            xa[m] = proj;
        }
        for i in 0..n {
            for j in 0..d_h {
                hidden.set(i, m * d_h + j, libm::tanh(pre.get(i, j)));
            }
        }
    }
    let logits = hidden.matmul_t(&base.head)?;
    Ok(Activations { xa, hidden, logits })
}

/// Class logits for every row of `x` (n × n_classes).
pub fn forward(base: &BaseModel, adapter: Option<&LoraAdapter>, x: &Matrix) -> Result<Matrix> {
    Ok(activations(base, adapter, x)?.logits)
}

/// Row-wise argmax of the logits.
pub fn predict_classes(base: &BaseModel, adapter: Option<&LoraAdapter>, x: &Matrix) -> Result<Vec<usize>> {
    let logits = forward(base, adapter, x)?;
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Gradients of the mean cross-entropy with respect to the adapter factors.
#[derive(Clone, Debug)]
pub struct AdapterGrads {
    pub a: [Matrix; N_MODULES],
    pub b: [Matrix; N_MODULES],
}

/// Mean softmax cross-entropy over the batch and its analytic gradient.
pub fn loss_and_grads(
    base: &BaseModel,
    adapter: &LoraAdapter,
    x: &Matrix,
    labels: &[usize],
) -> Result<(f64, AdapterGrads)> {
    let act = activations(base, Some(adapter), x)?;
    let n = x.rows();
    let n_classes = base.head.rows();
    if labels.len() != n {
        return Err(Error::Shape {
            context: "loss labels",
            expected: (n, 1),
            found: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::OutOfRange {
            what: "label",
            value: bad as f64,
            range: "0..n_classes",
        });
    }

    // dL/dlogits = (softmax - onehot) / n
    let mut loss = 0.0;
    let mut g_logits = Matrix::zeros(n, n_classes);
    for i in 0..n {
        let row = act.logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
        let log_z = max + libm::log(sum_exp);
        loss += log_z - row[labels[i]];
        for k in 0..n_classes {
            let p = libm::exp(row[k] - log_z);
            let t = if k == labels[i] { 1.0 } else { 0.0 };
            g_logits.set(i, k, (p - t) / n as f64);
        }
    }
    loss /= n as f64;

    let g_hidden = g_logits.matmul(&base.head)?;
    let d_h = base.shape().d_hidden;
    let mut grads_a: [Matrix; N_MODULES] = core::array::from_fn(|_| Matrix::zeros(1, 1));
    let mut grads_b: [Matrix; N_MODULES] = core::array::from_fn(|_| Matrix::zeros(1, 1));
    for m in 0..N_MODULES {
        let g_pre = Matrix::from_fn(n, d_h, |i, j| {
            let z = act.hidden.get(i, m * d_h + j);
            g_hidden.get(i, m * d_h + j) * (1.0 - z * z)
        });
        // dB = s · g_preᵀ · (X Aᵀ);   dA = s · (g_pre · B)ᵀ · X
        grads_b[m] = g_pre.t_matmul(&act.xa[m])?.scale(adapter.scaling);
        grads_a[m] = g_pre.matmul(&adapter.b[m])?.t_matmul(x)?.scale(adapter.scaling);
    }
    Ok((loss, AdapterGrads { a: grads_a, b: grads_b }))
}

pub fn mean_loss(base: &BaseModel, adapter: &LoraAdapter, data: &Dataset) -> Result<f64> {
    Ok(loss_and_grads(base, adapter, &data.features, &data.labels)?.0)
}

/// Record of one client's local round.
#[derive(Clone, Debug)]
pub struct LocalTrainTrace {
    /// B-matrices at the start of the round.
    pub initial_b: [Matrix; N_MODULES],
    /// B-matrices after each step `t = 1..=T` (index `t - 1`).
    pub b_snapshots: Vec<[Matrix; N_MODULES]>,
    /// End-of-round minus round-start, for both factors.
    pub delta: AdapterDelta,
    /// Training-batch loss before each step.
    pub losses: Vec<f64>,
    pub n_samples: usize,
}

impl LocalTrainTrace {
    pub fn steps(&self) -> usize {
        self.b_snapshots.len()
    }
}

/// Runs `T` plain-SGD steps from `adapter`, which is left untouched.
///
/// Batches are drawn without replacement from a per-pass shuffle of the
/// data; `n_samples` counts distinct samples seen.
pub fn local_train(
    base: &BaseModel,
    adapter: &LoraAdapter,
    data: &Dataset,
    config: &LoraConfig,
    rng: &mut Rng,
) -> Result<LocalTrainTrace> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("local_train dataset"));
    }
    let mut current = adapter.clone();
    let batch = config.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0;
    let mut seen = 0usize;

    let mut snapshots = Vec::with_capacity(config.local_steps);
    let mut losses = Vec::with_capacity(config.local_steps);
    let mut idx = vec![0usize; batch];
    for step in 1..=config.local_steps {
        for slot in idx.iter_mut() {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            *slot = order[cursor];
            cursor += 1;
        }
        seen = (seen + batch).min(data.len());
        let sub = data.subset(&idx);
        let (loss, grads) = loss_and_grads(base, &current, &sub.features, &sub.labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        for m in 0..N_MODULES {
            current.a[m].axpy(-config.learning_rate, &grads.a[m])?;
            current.b[m].axpy(-config.learning_rate, &grads.b[m])?;
        }
        if !current.a.iter().chain(&current.b).all(Matrix::is_finite) {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(loss);
        snapshots.push(current.b.clone());
    }
    Ok(LocalTrainTrace {
        initial_b: adapter.b.clone(),
        b_snapshots: snapshots,
        delta: AdapterDelta::between(&current, adapter)?,
        losses,
        n_samples: seen,
    })
}

/// `B_t − B_0` per module for `1 ≤ t ≤ T`.
pub fn delta_b(
    trace: &LocalTrainTrace,
    step: usize,
    initial_b: &[Matrix; N_MODULES],
) -> Result<[Matrix; N_MODULES]> {
    if step == 0 || step > trace.steps() {
        return Err(Error::StepOutOfRange {
            step,
            steps: trace.steps(),
        });
    }
    let snap = &trace.b_snapshots[step - 1];
    Ok([snap[0].sub(&initial_b[0])?, snap[1].sub(&initial_b[1])?])
}
