//! Reference robust aggregators over flattened adapter deltas.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::substrate::{dot, l2_norm};

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub flat: Vec<f64>,
    pub n_samples: usize,
}

fn check_dims(updates: &[ClientUpdate], context: &'static str) -> Result<usize> {
    let first = updates.first().ok_or(Error::EmptyInput(context))?;
    let dim = first.flat.len();
    if let Some(bad) = updates.iter().find(|u| u.flat.len() != dim) {
        return Err(Error::Shape {
            context,
            expected: (dim, 1),
            found: (bad.flat.len(), 1),
        });
    }
    Ok(dim)
}

/// Sample-weighted mean.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let dim = check_dims(updates, "fedavg")?;
    let total: usize = updates.iter().map(|u| u.n_samples).sum();
    if total == 0 {
        return Err(Error::EmptyInput("fedavg sample counts"));
    }
    let mut out = vec![0.0; dim];
    for u in updates {
        let w = u.n_samples as f64 / total as f64;
        for (o, x) in out.iter_mut().zip(&u.flat) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Scores within this relative distance of the best are treated as tied.
pub const KRUM_TIE_RTOL: f64 = 1e-9;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Krum scores: sum of squared distances to the `n − f − 2` nearest other
/// updates.
pub fn krum_scores(updates: &[ClientUpdate], f: usize) -> Result<Vec<f64>> {
    check_dims(updates, "krum")?;
    let n = updates.len();
    if n < f + 3 {
        return Err(Error::TooFewClients {
            context: "krum",
            needed: f + 3,
            found: n,
        });
    }
    let neighbours = n - f - 2;
    Ok((0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| squared_distance(&updates[i].flat, &updates[j].flat))
                .collect();
            d.sort_by(f64::total_cmp);
            d[..neighbours].iter().sum()
        })
        .collect())
}

/// Single-Krum selection. Ties go to the lowest client id.
pub fn krum(updates: &[ClientUpdate], f: usize) -> Result<&ClientUpdate> {
    let scores = krum_scores(updates, f)?;
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let cutoff = best + KRUM_TIE_RTOL * best.abs();
    let winner = (0..updates.len())
        .filter(|&i| scores[i] <= cutoff)
        .min_by_key(|&i| updates[i].client)
        .expect("at least one update attains the minimum");
    Ok(&updates[winner])
}

/// Coordinate-wise mean after dropping the `trim` smallest and `trim`
/// largest values. Unweighted.
pub fn trimmed_mean(updates: &[ClientUpdate], trim: usize) -> Result<Vec<f64>> {
    let dim = check_dims(updates, "trimmed_mean")?;
    let n = updates.len();
    if n <= 2 * trim {
        return Err(Error::TooFewClients {
            context: "trimmed_mean",
            needed: 2 * trim + 1,
            found: n,
        });
    }
    let mut column = vec![0.0; n];
    Ok((0..dim)
        .map(|k| {
            for (c, u) in column.iter_mut().zip(updates) {
                *c = u.flat[k];
            }
            column.sort_by(f64::total_cmp);
            let kept = &column[trim..n - trim];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect())
}

/// `⌊ratio · n⌋`, at least 1 once `n ≥ 3`, and never so large that nothing
/// is left.
pub fn default_trim_count(malicious_ratio: f64, n_sampled: usize) -> usize {
    let mut b = libm::floor(malicious_ratio * n_sampled as f64) as usize;
    if n_sampled >= 3 {
        b = b.max(1);
    }
    b.min(n_sampled.saturating_sub(1) / 2)
}

/// `⌈0.3 · n⌉`, capped so that `n ≥ f + 3`.
pub fn default_krum_f(n_sampled: usize) -> usize {
    let f = libm::ceil(0.3 * n_sampled as f64) as usize;
    f.min(n_sampled.saturating_sub(3))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoolsGoldWeights {
    pub weights: Vec<f64>,
    /// Indices whose history had zero norm (weighted 1, flagged).
    pub zero_norm: Vec<usize>,
}

/// FoolsGold learning-rate weights from accumulated update histories:
/// cosine similarity, pardoning, inversion, logit sharpening and clamping.
pub fn foolsgold(histories: &[Vec<f64>]) -> Result<FoolsGoldWeights> {
    let n = histories.len();
    if n == 0 {
        return Err(Error::EmptyInput("foolsgold"));
    }
    let dim = histories[0].len();
    if histories.iter().any(|h| h.len() != dim) {
        return Err(Error::Shape {
            context: "foolsgold",
            expected: (dim, 1),
            found: (histories.iter().map(Vec::len).find(|&l| l != dim).unwrap_or(0), 1),
        });
    }
    let norms: Vec<f64> = histories.iter().map(|h| l2_norm(h)).collect();
    let zero_norm: Vec<usize> = (0..n).filter(|&i| norms[i] == 0.0).collect();
    if n == 1 {
        return Ok(FoolsGoldWeights { weights: vec![1.0], zero_norm });
    }

    let mut cs = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && norms[i] > 0.0 && norms[j] > 0.0 {
                cs[i][j] = dot(&histories[i], &histories[j]) / (norms[i] * norms[j]);
            }
        }
    }
    let max_cs: Vec<f64> = cs
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    // pardoning: honest clients that merely resemble a sybil get rescaled
    for i in 0..n {
        for j in 0..n {
            if i != j && max_cs[i] < max_cs[j] {
                cs[i][j] *= max_cs[i] / max_cs[j];
            }
        }
    }
    let mut wv: Vec<f64> = cs
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let m = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            (1.0 - m).clamp(0.0, 1.0)
        })
        .collect();
    let top = wv.iter().copied().fold(0.0, f64::max);
    if top > 0.0 {
        wv.iter_mut().for_each(|w| *w /= top);
    }
    for w in wv.iter_mut() {
        if *w >= 1.0 {
            *w = 0.99;
        }
        let sharpened = libm::log(*w / (1.0 - *w)) + 0.5;
        *w = if sharpened.is_nan() { 0.0 } else { sharpened.clamp(0.0, 1.0) };
    }
    for &i in &zero_norm {
        wv[i] = 1.0;
    }
    Ok(FoolsGoldWeights { weights: wv, zero_norm })
}

/// Residual cutoff: clients whose mean normalized residual reaches this get
/// weight 0.
pub const RESIDUAL_TAU: f64 = 3.0;
const MAD_TO_SIGMA: f64 = 1.4826;
const SCALE_EPS: f64 = 1e-12;

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median/MAD confidence weights: `max(0, 1 − r_i / 3)` with `r_i` the mean
/// robust z-score of client `i` across coordinates.
pub fn residual_weights(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let dim = check_dims(updates, "residual_weights")?;
    let n = updates.len();
    if n < 3 {
        return Err(Error::TooFewClients {
            context: "residual_weights",
            needed: 3,
            found: n,
        });
    }
    let mut residual = vec![0.0; n];
    let mut column = vec![0.0; n];
    let mut dev = vec![0.0; n];
    for k in 0..dim {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u.flat[k];
        }
        let mut sorted = column.clone();
        sorted.sort_by(f64::total_cmp);
        let med = median(&sorted);
        for (d, &x) in dev.iter_mut().zip(&column) {
            *d = (x - med).abs();
        }
        let mut sorted_dev = dev.clone();
        sorted_dev.sort_by(f64::total_cmp);
        let scale = MAD_TO_SIGMA * median(&sorted_dev) + SCALE_EPS;
        for (r, d) in residual.iter_mut().zip(&dev) {
            *r += d / scale;
        }
    }
    Ok(residual
        .into_iter()
        .map(|r| (1.0 - (r / dim.max(1) as f64) / RESIDUAL_TAU).max(0.0))
        .collect())
}
