//! Diagnostic 2-D view of labeled probe features.
//!
//! Axis `u` is the Fisher discriminant between the two classes; axis `v` is
//! the leading principal component of what remains after removing `u`.
//! Each axis is sign-normalized so its largest-magnitude loading is positive.

use alloc::vec;
use alloc::vec::Vec;

use super::{ProbeFeature, Role};
use crate::error::{Error, Result};
use crate::substrate::{cholesky_solve, dot, l2_norm, symmetric_eigen, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub points: Vec<(f64, f64)>,
    pub axis_u: Vec<f64>,
    pub axis_v: Vec<f64>,
    /// Within-class scatter was singular; both axes are principal
    /// components instead.
    pub pca_fallback: bool,
}

const SINGULAR_RTOL: f64 = 1e-10;

fn orient(mut axis: Vec<f64>) -> Vec<f64> {
    let mut lead = 0;
    for (i, v) in axis.iter().enumerate() {
        if v.abs() > axis[lead].abs() {
            lead = i;
        }
    }
    if axis[lead] < 0.0 {
        axis.iter_mut().for_each(|v| *v = -*v);
    }
    axis
}

fn covariance(rows: &[Vec<f64>]) -> Matrix {
    let dim = rows[0].len();
    let mut c = Matrix::zeros(dim, dim);
    for r in rows {
        for i in 0..dim {
            for j in i..dim {
                let v = c.get(i, j) + r[i] * r[j];
                c.set(i, j, v);
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            let v = c.get(j, i);
            c.set(i, j, v);
        }
    }
    c
}

pub fn project_2d(features: &[ProbeFeature]) -> Result<Projection> {
    if features.len() < 3 {
        return Err(Error::TooFewClients {
            context: "project_2d features",
            needed: 3,
            found: features.len(),
        });
    }
    let dim = features[0].len();
    let mut labels = Vec::with_capacity(features.len());
    for f in features {
        if f.len() != dim {
            return Err(Error::FeatureLength { expected: dim, found: f.len() });
        }
        labels.push(f.label.ok_or(Error::EmptyInput("project_2d label"))?);
    }
    let n_mal = labels.iter().filter(|l| l.is_malicious()).count();
    if n_mal == 0 || n_mal == labels.len() {
        return Err(Error::SingleClass);
    }

    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut class_mean = [vec![0.0; dim], vec![0.0; dim]];
    let class_n = [(labels.len() - n_mal) as f64, n_mal as f64];
    for (f, l) in features.iter().zip(&labels) {
        let c = usize::from(l.is_malicious());
        for k in 0..dim {
            mean[k] += f.values[k] / n;
            class_mean[c][k] += f.values[k] / class_n[c];
        }
    }
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.values.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let within: Vec<Vec<f64>> = features
        .iter()
        .zip(&labels)
        .map(|(f, l)| {
            let c = usize::from(*l == Role::Malicious);
            f.values.iter().zip(&class_mean[c]).map(|(x, m)| x - m).collect()
        })
        .collect();
    let s_w = covariance(&within);
    let mean_gap: Vec<f64> = class_mean[1].iter().zip(&class_mean[0]).map(|(a, b)| a - b).collect();

    let lda = cholesky_solve(&s_w, &mean_gap, SINGULAR_RTOL)
        .ok()
        .filter(|u| l2_norm(u) > 0.0);

    let (axis_u, axis_v, pca_fallback) = match lda {
        Some(u) => {
            let norm = l2_norm(&u);
            let u = orient(u.iter().map(|x| x / norm).collect());
            let residual: Vec<Vec<f64>> = centered
                .iter()
                .map(|x| {
                    let t = dot(x, &u);
                    x.iter().zip(&u).map(|(xi, ui)| xi - t * ui).collect()
                })
                .collect();
            let eig = symmetric_eigen(&covariance(&residual))?;
            let v = orient(eig.vectors[0].clone());
            (u, v, false)
        }
        None => {
            let eig = symmetric_eigen(&covariance(&centered))?;
            let u = orient(eig.vectors[0].clone());
            let v = if dim > 1 { orient(eig.vectors[1].clone()) } else { vec![0.0] };
            (u, v, true)
        }
    };

    let points = centered.iter().map(|x| (dot(x, &axis_u), dot(x, &axis_v))).collect();
    Ok(Projection {
        points,
        axis_u,
        axis_v,
        pca_fallback,
    })
}
