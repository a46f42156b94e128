//! Dense linear algebra, numerics and deterministic randomness shared by the
//! rest of the crate.

mod linalg;
mod matrix;
pub mod rng;

pub use linalg::{cholesky_solve, symmetric_eigen, SymmetricEigen};
pub use matrix::Matrix;
pub use rng::Rng;

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Norm below which a vector is treated as the zero vector.
pub const EPS_NORM: f64 = 1e-12;

/// Logistic function, stable for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    libm::sqrt(dot(v, v))
}

/// Result of [`l2_normalize`]; `degenerate` marks an input whose norm was at
/// or below [`EPS_NORM`] and which was returned unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

pub fn l2_normalize(v: &[f64]) -> Result<Normalized> {
    if v.is_empty() {
        return Err(Error::EmptyInput("l2_normalize"));
    }
    let norm = l2_norm(v);
    if norm <= EPS_NORM {
        return Ok(Normalized {
            values: v.to_vec(),
            degenerate: true,
        });
    }
    Ok(Normalized {
        values: v.iter().map(|x| x / norm).collect(),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // 1 / (1 + e^-4)
        assert!((sigmoid(4.0) - 0.982_013_790_037_908_5).abs() < 1e-15);
        assert!((sigmoid(-4.0) - 0.017_986_209_962_091_56).abs() < 1e-15);
        assert!(sigmoid(700.0) <= 1.0 && sigmoid(-700.0) >= 0.0);
        assert!(sigmoid(-700.0).is_finite() && sigmoid(700.0).is_finite());
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!(!n.degenerate);
        assert!((n.values[0] - 0.6).abs() < 1e-15 && (n.values[1] - 0.8).abs() < 1e-15);

        let z = l2_normalize(&[0.0, 0.0]).unwrap();
        assert!(z.degenerate);
        assert_eq!(z.values, [0.0, 0.0]);

        assert_eq!(l2_normalize(&[5.0]).unwrap().values, [1.0]);
        assert!(matches!(l2_normalize(&[]), Err(Error::EmptyInput(_))));
    }
}
