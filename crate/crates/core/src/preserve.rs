//! Which invertible matrices commute with an activation: `σ(A x) = A σ(x)`.
//!
//! The quantifier over all `x` cannot be checked by sampling, so
//! [`is_preserved`] combines random probes with a fixed structured family
//! (unit vectors, their negatives, and `t·e_j − e_k` for `t ∈ {1, 10, 100}`)
//! that separates the positive monomial matrices (ReLU) and the signed
//! permutation matrices (sin, tanh) from everything else on small grids.
//! It is a heuristic decision procedure, not a proof.

use serde::Serialize;

use crate::error::{dim_err, Result};
use crate::group::SubgroupKind;
use crate::network::ActivationKind;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub matrix: Tensor,
    pub x: Tensor,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreservationVerdict {
    pub preserved: bool,
    pub witness: Option<Witness>,
}

fn square_size(a: &Tensor) -> Result<usize> {
    match a.dims() {
        [n, m] if n == m => Ok(*n),
        _ => Err(dim_err(format!("expected a square matrix, got {}", a.shape()))),
    }
}

/// Max absolute row sum.
pub fn inf_norm(a: &Tensor) -> f64 {
    let n = a.dims()[1];
    a.data()
        .chunks(n)
        .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `‖σ(A x) − A σ(x)‖∞`.
pub fn commutation_defect(a: &Tensor, sigma: ActivationKind, x: &[f64]) -> f64 {
    let n = x.len();
    let sx: Vec<f64> = x.iter().map(|&v| sigma.apply(v)).collect();
    let rows = a.data().chunks(n);
    rows.map(|row| {
        let ax: f64 = row.iter().zip(x).map(|(p, q)| p * q).sum();
        let asx: f64 = row.iter().zip(&sx).map(|(p, q)| p * q).sum();
        (sigma.apply(ax) - asx).abs()
    })
    .fold(0.0, f64::max)
}

/// The structured probes: `e_j`, `−e_j`, and `t·e_j − e_k` for `j ≠ k`.
pub fn structured_probes(n: usize) -> Vec<Vec<f64>> {
    let mut probes = Vec::new();
    for j in 0..n {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; n];
            e[j] = s;
            probes.push(e);
        }
    }
    for j in 0..n {
        for k in 0..n {
            if j == k {
                continue;
            }
            for t in [1.0, 10.0, 100.0] {
                let mut e = vec![0.0; n];
                e[j] = t;
                e[k] = -1.0;
                probes.push(e);
            }
        }
    }
    probes
}

/// Sampled test of `σ(A x) = A σ(x)`: `trials` random probes from
/// `Uniform[−10, 10]^n` plus [`structured_probes`]. Preserved iff every
/// defect is at most `1e−9 · ‖A‖∞`; otherwise the worst probe is returned.
pub fn is_preserved(a: &Tensor, sigma: ActivationKind, trials: usize, seed: u64) -> Result<PreservationVerdict> {
    let n = square_size(a)?;
    let tol = 1e-9 * inf_norm(a);
    let mut rng = SplitMix64::new(seed);
    let random = (0..trials).map(|_| rng.uniform_vec(n, -10.0, 10.0));
    let mut worst: Option<(Vec<f64>, f64)> = None;
    for x in structured_probes(n).into_iter().chain(random) {
        let dev = commutation_defect(a, sigma, &x);
        if dev > tol && worst.as_ref().is_none_or(|(_, w)| dev > *w) {
            worst = Some((x, dev));
        }
    }
    Ok(match worst {
        None => PreservationVerdict {
            preserved: true,
            witness: None,
        },
        Some((x, deviation)) => PreservationVerdict {
            preserved: false,
            witness: Some(Witness {
                matrix: a.clone(),
                x: Tensor::vector(x)?,
                deviation,
            }),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "class", content = "kind", rename_all = "lowercase")]
pub enum MonomialClass {
    NotMonomial,
    /// Most specific subgroup containing the matrix: `Trivial` (identity),
    /// `PermOnly`, `Positive`, `SignFlip` or `Full`.
    Monomial(SubgroupKind),
}

/// Exact structural read-off: one nonzero per row and per column.
pub fn classify_monomial(a: &Tensor) -> Result<MonomialClass> {
    let n = square_size(a)?;
    let mut col_used = vec![false; n];
    let mut entries = Vec::with_capacity(n);
    let mut is_identity = true;
    for i in 0..n {
        let row = &a.data()[i * n..(i + 1) * n];
        let nz: Vec<usize> = (0..n).filter(|&k| row[k] != 0.0).collect();
        if nz.len() != 1 || col_used[nz[0]] {
            return Ok(MonomialClass::NotMonomial);
        }
        col_used[nz[0]] = true;
        is_identity &= nz[0] == i && row[i] == 1.0;
        entries.push(row[nz[0]]);
    }
    let kind = if is_identity {
        SubgroupKind::Trivial
    } else if entries.iter().all(|&x| x == 1.0) {
        SubgroupKind::PermOnly
    } else if entries.iter().all(|&x| x > 0.0) {
        SubgroupKind::Positive
    } else if entries.iter().all(|&x| x == 1.0 || x == -1.0) {
        SubgroupKind::SignFlip
    } else {
        SubgroupKind::Full
    };
    Ok(MonomialClass::Monomial(kind))
}
