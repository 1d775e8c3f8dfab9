//! Small dense symmetric/PD matrix utilities and the Gaussian product
//! factorization that the forecaster is built on.
//!
//! Every matrix inversion in the crate goes through a Cholesky
//! factorization followed by triangular solves; explicit inverses only
//! appear where a covariance itself is the requested output.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative symmetry tolerance enforced on construction.
const SYM_TOL: f64 = 1e-12;

/// Dense symmetric real matrix with a checked constructor.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps a matrix, requiring symmetry within `1e-12` relative.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "expected square nonempty matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(1.0);
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                if (m[(i, j)] - m[(j, i)]).abs() > SYM_TOL * scale {
                    return Err(Error::InvalidParameter(format!(
                        "matrix not symmetric at ({i},{j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    /// Symmetrizes `(M + Mᵀ)/2` and wraps. Used after every covariance
    /// update to control floating-point drift in long recursions.
    pub fn symmetrized(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        Self((m + t) * 0.5)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Smallest eigenvalue, for PSD checks.
    pub fn min_eigenvalue(&self) -> f64 {
        self.0
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// PSD within the crate-wide tolerance `min eig ≥ −1e-10·trace/dim`.
    pub fn is_psd(&self) -> bool {
        let tol = 1e-10 * (self.trace().abs() / self.dim() as f64).max(1e-300);
        self.min_eigenvalue() >= -tol
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Multivariate Gaussian given by mean and covariance.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, cov: SymMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mean dim {} vs cov dim {}",
                mean.len(),
                cov.dim()
            )));
        }
        if !cov.is_psd() {
            return Err(Error::NotPositiveDefinite(format!(
                " (covariance, min eigenvalue {})",
                cov.min_eigenvalue()
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Density value at `x`. Requires a PD covariance.
    pub fn pdf(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = pd_factor_jittered(&self.cov)?;
        let dev = x - &self.mean;
        let quad = dev.dot(&chol.solve(&dev));
        let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let n = self.mean.len() as f64;
        Ok((-0.5 * (quad + logdet + n * (2.0 * std::f64::consts::PI).ln())).exp())
    }
}

/// Cholesky factorization of a symmetric matrix. `None` signals non-PD
/// input; it never panics.
pub fn pd_factor(m: &SymMatrix) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.as_matrix().clone())
}

/// Jitter used when a required inversion target fails PD factorization:
/// retry once with `δ·I`, `δ = 1e-9·max(1, trace/dim)`. Early-iteration
/// covariances are singular by construction (they start at zero).
pub fn pd_factor_jittered(m: &SymMatrix) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = pd_factor(m) {
        return Ok(c);
    }
    let dim = m.dim();
    let delta = 1e-9 * (m.trace() / dim as f64).max(1.0);
    let jittered = m.as_matrix() + DMatrix::identity(dim, dim) * delta;
    Cholesky::new(jittered).ok_or_else(|| {
        Error::NotPositiveDefinite(format!(" after jitter (dim {dim}, delta {delta:e})"))
    })
}

/// Solves `A·X = B` for SPD `A` (jittered if needed).
pub fn solve_spd(a: &SymMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.dim() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "solve_spd: A dim {} vs B rows {}",
            a.dim(),
            b.nrows()
        )));
    }
    Ok(pd_factor_jittered(a)?.solve(b))
}

/// Product factorization of two Gaussians
/// `N(x; a, B)·N(y; Cx, D) = N(x; E·e, E)·N(y; Ca, D + C·B·Cᵀ)`
/// with `E = (B⁻¹ + CᵀD⁻¹C)⁻¹` and `e = B⁻¹a + CᵀD⁻¹y`.
///
/// Returns `(posterior over x, evidence over y)`.
pub fn fuse_gaussians(
    prior_mean: &DVector<f64>,
    prior_cov: &SymMatrix,
    obs_matrix: &DMatrix<f64>,
    obs_cov: &SymMatrix,
    obs: &DVector<f64>,
) -> Result<(GaussianDensity, GaussianDensity)> {
    let n = prior_mean.len();
    let m = obs.len();
    if prior_cov.dim() != n || obs_matrix.nrows() != m || obs_matrix.ncols() != n || obs_cov.dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "fuse_gaussians: a∈R^{n}, B {}x{}, C {}x{}, D {}x{}, y∈R^{m}",
            prior_cov.dim(),
            prior_cov.dim(),
            obs_matrix.nrows(),
            obs_matrix.ncols(),
            obs_cov.dim(),
            obs_cov.dim()
        )));
    }
    let b_chol = pd_factor_jittered(prior_cov)?;
    let d_chol = pd_factor_jittered(obs_cov)?;

    // E⁻¹ = B⁻¹ + CᵀD⁻¹C
    let b_inv = b_chol.solve(&DMatrix::identity(n, n));
    let d_inv_c = d_chol.solve(obs_matrix);
    let e_prec = SymMatrix::symmetrized(&b_inv + obs_matrix.transpose() * &d_inv_c);
    let e_chol = pd_factor_jittered(&e_prec)?;

    // e = B⁻¹a + CᵀD⁻¹y
    let info = &b_inv * prior_mean + obs_matrix.transpose() * d_chol.solve(obs);
    let post_mean = e_chol.solve(&info);
    let post_cov = SymMatrix::symmetrized(e_chol.solve(&DMatrix::identity(n, n)));

    let ev_mean = obs_matrix * prior_mean;
    let ev_cov = SymMatrix::symmetrized(
        obs_cov.as_matrix() + obs_matrix * prior_cov.as_matrix() * obs_matrix.transpose(),
    );

    Ok((
        GaussianDensity::new(post_mean, post_cov)?,
        GaussianDensity::new(ev_mean, ev_cov)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn pd_factor_identity() {
        let m = SymMatrix::identity(3);
        let c = pd_factor(&m).unwrap();
        assert_relative_eq!(c.l(), DMatrix::identity(3, 3), epsilon = 1e-14);
    }

    #[test]
    fn pd_factor_reconstructs() {
        let m = SymMatrix::new(mat(2, 2, &[4.0, 2.0, 2.0, 3.0])).unwrap();
        let c = pd_factor(&m).unwrap();
        let l = c.l();
        assert_relative_eq!(l[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(l[(1, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(l[(1, 1)], 2.0_f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(&l * l.transpose(), m.as_matrix().clone(), epsilon = 1e-12);
    }

    #[test]
    fn pd_factor_rejects_indefinite() {
        // eigenvalues 3 and -1
        let m = SymMatrix::new(mat(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        assert!(pd_factor(&m).is_none());
    }

    #[test]
    fn solve_spd_identity_and_diagonal() {
        let b = mat(2, 1, &[7.0, -3.0]);
        let x = solve_spd(&SymMatrix::identity(2), &b).unwrap();
        assert_relative_eq!(x, b, epsilon = 1e-14);

        let a = SymMatrix::new(mat(2, 2, &[2.0, 0.0, 0.0, 4.0])).unwrap();
        let b = mat(2, 1, &[2.0, 8.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert_relative_eq!(x, mat(2, 1, &[1.0, 2.0]), epsilon = 1e-12);
    }

    #[test]
    fn solve_spd_random_residual() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let g = DMatrix::from_fn(5, 5, |_, _| rng.random::<f64>() - 0.5);
        let a = SymMatrix::symmetrized(&g * g.transpose() + DMatrix::identity(5, 5) * 0.5);
        let b = DMatrix::from_fn(5, 3, |_, _| rng.random::<f64>() - 0.5);
        let x = solve_spd(&a, &b).unwrap();
        let resid = (a.as_matrix() * &x - &b).norm();
        assert!(resid <= 1e-10 * b.norm());
    }

    #[test]
    fn fuse_symmetric_halves_variance() {
        let a = DVector::zeros(2);
        let y = DVector::zeros(2);
        let eye = SymMatrix::identity(2);
        let c = DMatrix::identity(2, 2);
        let (post, ev) = fuse_gaussians(&a, &eye, &c, &eye, &y).unwrap();
        assert_relative_eq!(post.mean, DVector::zeros(2), epsilon = 1e-12);
        assert_relative_eq!(
            post.cov.as_matrix().clone(),
            DMatrix::identity(2, 2) * 0.5,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            ev.cov.as_matrix().clone(),
            DMatrix::identity(2, 2) * 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn fuse_uninformative_observation_keeps_prior() {
        let a = DVector::from_row_slice(&[1.0, -2.0]);
        let b = SymMatrix::new(mat(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let c = DMatrix::identity(2, 2);
        let d = SymMatrix::new(DMatrix::identity(2, 2) * 1e12).unwrap();
        let y = DVector::from_row_slice(&[100.0, 100.0]);
        let (post, _) = fuse_gaussians(&a, &b, &c, &d, &y).unwrap();
        assert_relative_eq!(post.mean, a, epsilon = 1e-9);
        assert_relative_eq!(
            post.cov.as_matrix().clone(),
            b.as_matrix().clone(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn fuse_pointwise_product_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 2;
        let m = 2;
        let g1 = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let b = SymMatrix::symmetrized(&g1 * g1.transpose() + DMatrix::identity(n, n) * 0.5);
        let g2 = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() - 0.5);
        let d = SymMatrix::symmetrized(&g2 * g2.transpose() + DMatrix::identity(m, m) * 0.5);
        let a = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let c = DMatrix::from_fn(m, n, |_, _| rng.random::<f64>() - 0.5);
        let y = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);

        let (post, ev) = fuse_gaussians(&a, &b, &c, &d, &y).unwrap();
        let prior = GaussianDensity::new(a.clone(), b.clone()).unwrap();
        for _ in 0..100 {
            let x = DVector::from_fn(n, |_, _| 3.0 * (rng.random::<f64>() - 0.5));
            let like = GaussianDensity::new(&c * &x, d.clone()).unwrap();
            let lhs = prior.pdf(&x).unwrap() * like.pdf(&y).unwrap();
            let rhs = post.pdf(&x).unwrap() * ev.pdf(&y).unwrap();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-9);
        }
    }

    #[test]
    fn fuse_mean_satisfies_information_form() {
        // E⁻¹·mean = e to 1e-10
        let a = DVector::from_row_slice(&[0.5, 1.5]);
        let b = SymMatrix::new(mat(2, 2, &[1.5, 0.2, 0.2, 0.8])).unwrap();
        let c = mat(2, 2, &[1.0, 0.1, -0.2, 0.9]);
        let d = SymMatrix::new(mat(2, 2, &[0.5, 0.0, 0.0, 0.7])).unwrap();
        let y = DVector::from_row_slice(&[0.3, -0.4]);
        let (post, _) = fuse_gaussians(&a, &b, &c, &d, &y).unwrap();
        let e_inv_mean = solve_spd(&post.cov, &DMatrix::from_column_slice(2, 1, post.mean.as_slice()))
            .unwrap();
        let b_chol = pd_factor(&b).unwrap();
        let d_chol = pd_factor(&d).unwrap();
        let info = b_chol.solve(&a) + c.transpose() * d_chol.solve(&y);
        assert_relative_eq!(DVector::from_column_slice(e_inv_mean.as_slice()), info, epsilon = 1e-10);
    }
}
