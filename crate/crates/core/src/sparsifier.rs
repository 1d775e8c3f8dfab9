//! Correlation-thresholded covariance sparsification that keeps the
//! result positive semidefinite by construction.
//!
//! Zeroing a weak off-diagonal pair `(i,j)` subtracts
//! `Σ_{i,j}(e_i e_jᵀ + e_j e_iᵀ)`, which alone can break PSD. Each
//! removal is instead written as subtracting `|Σ_{i,j}|·v vᵀ` with
//! `v = e_i − sign(Σ_{i,j})·e_j` and adding `|Σ_{i,j}|` back to both
//! diagonals, so the output is the input plus a PSD compensation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gaussian::SymMatrix;

/// Threshold policy on the magnitude of the correlation coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsifyPolicy {
    /// pairs with `|ρ_{i,j}| < tau` are removed; 0 disables sparsification
    pub tau: f64,
}

impl SparsifyPolicy {
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) || !tau.is_finite() {
            return Err(Error::InvalidParameter(format!("tau {tau} out of [0, 1]")));
        }
        Ok(SparsifyPolicy { tau })
    }
}

/// `ρ_{i,j} = Σ_{i,j} / √(Σ_{i,i}Σ_{j,j})`; 0 where either variance is 0.
pub fn correlation(sigma: &SymMatrix) -> DMatrix<f64> {
    let n = sigma.dim();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return 1.0;
        }
        let d = sigma[(i, i)] * sigma[(j, j)];
        if d <= 0.0 {
            0.0
        } else {
            sigma[(i, j)] / d.sqrt()
        }
    })
}

/// Returns the sparsified covariance and the number of zeroed pairs.
/// Correlations are measured on the input matrix, not updated as pairs
/// are removed, so the result is independent of removal order.
pub fn threshold_covariance(sigma: &SymMatrix, policy: SparsifyPolicy) -> (SymMatrix, usize) {
    let n = sigma.dim();
    if policy.tau == 0.0 {
        return (sigma.clone(), 0);
    }
    let rho = correlation(sigma);
    let mut out = sigma.as_matrix().clone();
    let mut removed = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let off = sigma[(i, j)];
            if off != 0.0 && rho[(i, j)].abs() < policy.tau {
                out[(i, j)] = 0.0;
                out[(j, i)] = 0.0;
                out[(i, i)] += off.abs();
                out[(j, j)] += off.abs();
                removed += 1;
            }
        }
    }
    (SymMatrix::symmetrized(out), removed)
}
