use alloc::vec::Vec;

use super::config::TaskParams;
use crate::error::{Error, Result};
use crate::lora::{predict_classes, BaseModel, Dataset, LoraAdapter};
use crate::probe::Role;
use crate::substrate::rng::stream;
use crate::substrate::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClientSpec {
    pub id: usize,
    pub role: Role,
    pub data_seed: u64,
}

/// Class means of the synthetic task, each of norm `class_sep`.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub params: TaskParams,
    pub means: Matrix,
}

impl Task {
    pub fn new(params: TaskParams, global_seed: u64) -> Self {
        let mut rng = Rng::derive(global_seed, &[stream::TASK]);
        let (k, d) = (params.shape.n_classes, params.shape.d_in);
        let mut means = Matrix::from_fn(k, d, |_, _| rng.standard_normal());
        for c in 0..k {
            let norm = libm::sqrt(means.row(c).iter().map(|v| v * v).sum::<f64>());
            for j in 0..d {
                let v = means.get(c, j) * params.class_sep / norm;
                means.set(c, j, v);
            }
        }
        Self { params, means }
    }

    /// `n` samples with true labels.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Dataset {
        let d = self.params.shape.d_in;
        let mut labels = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n {
            let y = rng.below(self.params.shape.n_classes);
            labels.push(y);
            for j in 0..d {
                values.push(self.means.get(y, j) + rng.normal(0.0, self.params.noise_std));
            }
        }
        let features = Matrix::from_vec(n, d, values).expect("finite synthetic samples");
        Dataset { features, labels }
    }
}

/// Local dataset of one client. Malicious clients see the same inputs with
/// every label replaced by the attacker's target class.
pub fn generate_client_data(spec: &ClientSpec, task: &Task, n_samples: usize) -> Dataset {
    let mut rng = Rng::derive(spec.data_seed, &[stream::CLIENT_DATA, spec.id as u64]);
    let mut data = task.sample(n_samples, &mut rng);
    if spec.role.is_malicious() {
        data.labels.iter_mut().for_each(|y| *y = task.params.target_class);
    }
    data
}

/// Held-out evaluation set.
pub fn generate_test_set(task: &Task, data_seed: u64) -> Dataset {
    let mut rng = Rng::derive(data_seed, &[stream::TEST_DATA]);
    task.sample(task.params.test_samples, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Fraction of test points classified correctly.
    pub benign_accuracy: f64,
    /// Fraction of non-target test points classified as the target class.
    pub attack_success: f64,
}

pub fn evaluate_global(
    base: &BaseModel,
    adapter: Option<&LoraAdapter>,
    test: &Dataset,
    target_class: usize,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptyInput("evaluate_global test set"));
    }
    let predicted = predict_classes(base, adapter, &test.features)?;
    let correct = predicted.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
    let (mut non_target, mut hijacked) = (0usize, 0usize);
    for (p, &y) in predicted.iter().zip(&test.labels) {
        if y != target_class {
            non_target += 1;
            if *p == target_class {
                hijacked += 1;
            }
        }
    }
    Ok(Evaluation {
        benign_accuracy: correct as f64 / test.len() as f64,
        attack_success: if non_target == 0 { 0.0 } else { hijacked as f64 / non_target as f64 },
    })
}

/// Deterministic role assignment: `malicious` clients chosen by a seeded
/// shuffle.
pub fn assign_roles(n_clients: usize, malicious: usize, data_seed: u64) -> Vec<ClientSpec> {
    let mut ids: Vec<usize> = (0..n_clients).collect();
    Rng::derive(data_seed, &[stream::ROLES]).shuffle(&mut ids);
    let mut specs: Vec<ClientSpec> = (0..n_clients)
        .map(|id| ClientSpec {
            id,
            role: Role::Benign,
            data_seed,
        })
        .collect();
    for &id in ids.iter().take(malicious.min(n_clients)) {
        specs[id].role = Role::Malicious;
    }
    specs
}
