//! Slow, independent reference implementations used by tests: batch
//! weighted maximum likelihood, explicit joint-Gaussian multi-step
//! conditioning, and numeric CRPS quadrature. Nothing here is on the
//! production path and nothing is optimized.

use chrono::{Duration, NaiveDateTime};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gaussian::{fuse_gaussians, SymMatrix};
use crate::model::{CalendarModel, ModelBank};

/// Weighted regression history with shared forgetting factor.
#[derive(Debug, Clone)]
pub struct History {
    pub features: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

impl History {
    pub fn new(features: Vec<DVector<f64>>, outputs: Vec<DVector<f64>>) -> Result<Self> {
        if features.is_empty() || features.len() != outputs.len() {
            return Err(Error::DimensionMismatch(format!(
                "history needs equal nonzero counts, got {} features and {} outputs",
                features.len(),
                outputs.len()
            )));
        }
        let d = features[0].len();
        let k = outputs[0].len();
        if features.iter().any(|u| u.len() != d) || outputs.iter().any(|s| s.len() != k) {
            return Err(Error::DimensionMismatch("inconsistent history dims".into()));
        }
        Ok(History { features, outputs })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Whether the batch solve mimics the recursion's implicit initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// plain weighted least squares; agrees with the recursion only
    /// asymptotically, once the initial condition has decayed
    Pure,
    /// adds the decayed ridge term `λⁿ·I` that a unit initial inverse
    /// Gram imposes, and forms the residual of each step against that
    /// step's own solution; agrees with the recursion exactly
    PriorAugmented,
}

/// Exponentially weighted batch estimate of the mean matrix and noise
/// covariance. Weights are `λ^{n−j}`.
pub fn batch_weighted_mle(
    h: &History,
    lambda: f64,
    mode: BatchMode,
) -> Result<(DMatrix<f64>, SymMatrix)> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidParameter(format!("lambda {lambda} out of (0,1)")));
    }
    let n = h.len();
    let d = h.features[0].len();
    let k = h.outputs[0].len();

    // weighted sums up to step m, with the optional decayed ridge
    let solve_at = |m: usize| -> Result<DMatrix<f64>> {
        let mut gram = DMatrix::zeros(d, d);
        let mut cross = DMatrix::zeros(k, d);
        for j in 0..m {
            let w = lambda.powi((m - 1 - j) as i32);
            gram += &h.features[j] * h.features[j].transpose() * w;
            cross += &h.outputs[j] * h.features[j].transpose() * w;
        }
        if mode == BatchMode::PriorAugmented {
            gram += DMatrix::identity(d, d) * lambda.powi(m as i32);
        }
        let inv = gram
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite(" (singular weighted feature Gram)".into()))?;
        Ok(cross * inv)
    };

    let m_final = solve_at(n)?;
    let gamma: f64 = (0..n).map(|j| lambda.powi((n - 1 - j) as i32)).sum();
    let mut sigma = DMatrix::zeros(k, k);
    match mode {
        BatchMode::Pure => {
            for j in 0..n {
                let w = lambda.powi((n - 1 - j) as i32);
                let r = &h.outputs[j] - &m_final * &h.features[j];
                sigma += &r * r.transpose() * w;
            }
        }
        BatchMode::PriorAugmented => {
            for j in 0..n {
                let w = lambda.powi((n - 1 - j) as i32);
                let m_j = solve_at(j + 1)?;
                let r = &h.outputs[j] - m_j * &h.features[j];
                sigma += &r * r.transpose() * w;
            }
        }
    }
    Ok((m_final, SymMatrix::symmetrized(sigma / gamma)))
}

/// Exact multi-step forecast by explicit joint construction: at each
/// step the previous posterior is pushed through the transition by
/// writing the joint over (previous, next) and marginalizing, then the
/// observation likelihood is folded in with the Gaussian fusion
/// primitive. Dimensions are capped to keep this affordable.
pub fn joint_conditional_forecast(
    bank: &ModelBank,
    s_t: &DVector<f64>,
    features: &[DVector<f64>],
    t: NaiveDateTime,
    cal: &CalendarModel,
) -> Result<Vec<(DVector<f64>, SymMatrix)>> {
    let k = bank.k;
    if k > 3 || features.len() > 6 {
        return Err(Error::InvalidParameter(format!(
            "oracle forecast capped at K ≤ 3, L ≤ 6 (got K={k}, L={})",
            features.len()
        )));
    }
    let mut mean = s_t.clone();
    let mut cov = SymMatrix::zeros(k);
    let mut out = Vec::with_capacity(features.len());
    for (i, u_r) in features.iter().enumerate() {
        let c = cal.calendar_of(t + Duration::hours(i as i64 + 1));
        let tm = bank.transition_model(c)?;
        let om = bank.observation_model(c)?;
        let a = tm.m.columns(1, k).into_owned();
        let b = tm.m.column(0).into_owned();

        // joint over (prev, next) under the transition, then drop prev
        let mut joint = DMatrix::zeros(2 * k, 2 * k);
        joint.view_mut((0, 0), (k, k)).copy_from(cov.as_matrix());
        let cross = cov.as_matrix() * a.transpose();
        joint.view_mut((0, k), (k, k)).copy_from(&cross);
        joint.view_mut((k, 0), (k, k)).copy_from(&cross.transpose());
        joint
            .view_mut((k, k), (k, k))
            .copy_from(&(&a * cov.as_matrix() * a.transpose() + tm.sigma.as_matrix()));
        let prior_mean = &b + &a * &mean;
        let prior_cov = SymMatrix::symmetrized(joint.view((k, k), (k, k)).into_owned());

        // fold in the observation of the same step's load
        let (posterior, _) = fuse_gaussians(
            &prior_mean,
            &prior_cov,
            &DMatrix::identity(k, k),
            &om.sigma,
            &(&om.m * u_r),
        )?;
        mean = posterior.mean.clone();
        cov = posterior.cov.clone();
        out.push((posterior.mean, posterior.cov));
    }
    Ok(out)
}

/// CRPS of `N(mu, sigma²)` at outcome `s` by adaptive Simpson quadrature
/// of `∫ (F(y) − 𝕀{y ≥ s})² dy` over `[μ−10σ, μ+10σ]`, split at `s`.
pub fn quadrature_crps(mu: f64, sigma: f64, s: f64) -> Result<f64> {
    if !(sigma > 0.0) || !mu.is_finite() || !s.is_finite() {
        return Err(Error::InvalidParameter(format!("quadrature inputs mu={mu} sigma={sigma} s={s}")));
    }
    let norm = Normal::new(mu, sigma).expect("valid normal");
    let f = |y: f64| {
        let cdf = norm.cdf(y);
        let step = if y >= s { 1.0 } else { 0.0 };
        (cdf - step) * (cdf - step)
    };
    let lo = mu - 10.0 * sigma;
    let hi = mu + 10.0 * sigma;
    let mut total = 0.0;
    let mut cuts = vec![lo];
    if s > lo && s < hi {
        cuts.push(s);
    }
    cuts.push(hi);
    for w in cuts.windows(2) {
        total += adaptive_simpson(&f, w[0], w[1], 5e-8, 40);
    }
    // outcomes beyond the window leave a residual |s − clamp(s)| exactly
    if s <= lo {
        total += lo - s;
    } else if s >= hi {
        total += s - hi;
    }
    Ok(total)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64, depth: u32) -> f64 {
    fn simpson(a: f64, fa: f64, b: f64, fb: f64, fm: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        eps: f64,
        depth: u32,
    ) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, fa, m, fm, flm);
        let right = simpson(m, fm, b, fb, frm);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, lm, flm, left, eps * 0.5, depth - 1)
                + recurse(f, m, fm, b, fb, rm, frm, right, eps * 0.5, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fb, fm) = (f(a), f(b), f(m));
    let whole = simpson(a, fa, b, fb, fm);
    recurse(f, a, fa, b, fb, m, fm, whole, eps, depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::{predict_one, prediction_step};
    use crate::learner::{recursive_update, UpdateOrder};
    use crate::metrics::crps_gaussian;
    use crate::model::init_model;
    use approx::assert_relative_eq;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn monday_11() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2025, 1, 6).unwrap().and_hms_opt(11, 0, 0).unwrap()
    }

    fn random_history(k: usize, d: usize, n: usize, seed: u64) -> History {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..n)
            .map(|_| DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        let outputs = (0..n)
            .map(|_| DVector::from_fn(k, |_, _| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        History::new(features, outputs).unwrap()
    }

    #[test]
    fn single_observation_augmented_matches_hand_value() {
        let h = History::new(
            vec![DVector::from_row_slice(&[1.0])],
            vec![DVector::from_row_slice(&[2.0])],
        )
        .unwrap();
        let (m, _) = batch_weighted_mle(&h, 0.9, BatchMode::PriorAugmented).unwrap();
        // (2·1)/(1 + 0.9)
        assert_relative_eq!(m[(0, 0)], 2.0 / 1.9, epsilon = 1e-14);
        let (m_pure, _) = batch_weighted_mle(&h, 0.9, BatchMode::Pure).unwrap();
        assert_relative_eq!(m_pure[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_outputs_give_zero_estimates() {
        let mut h = random_history(2, 3, 20, 1);
        for s in h.outputs.iter_mut() {
            s.fill(0.0);
        }
        for mode in [BatchMode::Pure, BatchMode::PriorAugmented] {
            let (m, sigma) = batch_weighted_mle(&h, 0.9, mode).unwrap();
            assert!(m.amax() < 1e-14);
            assert!(sigma.as_matrix().amax() < 1e-14);
        }
    }

    #[test]
    fn augmented_mode_matches_recursion_exactly() {
        let k = 3;
        let d = 4;
        let h = random_history(k, d, 100, 2);
        for lambda in [0.9, 0.99] {
            let mut model = init_model(k, 1, 1, lambda, lambda).unwrap().transition.remove(0);
            // transition model of init has d = k+1 = 4, matching here
            for j in 0..h.len() {
                recursive_update(&mut model, &h.features[j], &h.outputs[j], lambda, UpdateOrder::PreUpdateP)
                    .unwrap();
            }
            let (m, sigma) = batch_weighted_mle(&h, lambda, BatchMode::PriorAugmented).unwrap();
            assert!((&model.m - &m).amax() < 1e-8, "M gap {}", (&model.m - &m).amax());
            let gap = (model.sigma.as_matrix() - sigma.as_matrix()).amax();
            assert!(gap < 1e-8, "Sigma gap {gap} at lambda {lambda}");
        }
    }

    #[test]
    fn inverse_gram_matches_recursive_p() {
        let k = 2;
        let d = 3;
        let lambda = 0.9;
        let h = random_history(k, d, 60, 3);
        let mut model = init_model(d - 1, 1, 1, lambda, lambda).unwrap().transition.remove(0);
        for j in 0..h.len() {
            recursive_update(
                &mut model,
                &h.features[j],
                &DVector::zeros(d - 1),
                lambda,
                UpdateOrder::PreUpdateP,
            )
            .unwrap();
        }
        let n = h.len();
        let mut gram = DMatrix::identity(d, d) * lambda.powi(n as i32);
        for j in 0..n {
            gram += &h.features[j] * h.features[j].transpose() * lambda.powi((n - 1 - j) as i32);
        }
        let p_expect = gram.try_inverse().unwrap();
        assert!((model.p.as_matrix() - &p_expect).amax() < 1e-10);
    }

    #[test]
    fn pure_mode_converges_to_recursion() {
        let k = 2;
        let d = 3;
        let lambda = 0.9;
        let h = random_history(k, d, 400, 4);
        // init_model transition has feature dim k+1 = 3, matching d
        let mut model = init_model(k, 1, 1, lambda, lambda).unwrap().transition.remove(0);
        for j in 0..h.len() {
            recursive_update(&mut model, &h.features[j], &h.outputs[j], lambda, UpdateOrder::PreUpdateP)
                .unwrap();
        }
        let (m, _) = batch_weighted_mle(&h, lambda, BatchMode::Pure).unwrap();
        let rel = (&model.m - &m).norm() / m.norm();
        assert!(rel < 1e-6, "relative gap {rel}");
    }

    #[test]
    fn batch_is_permutation_covariant() {
        let h = random_history(3, 2, 25, 5);
        let perm = [2usize, 0, 1];
        let permuted = History::new(
            h.features.clone(),
            h.outputs
                .iter()
                .map(|s| DVector::from_fn(3, |i, _| s[perm[i]]))
                .collect(),
        )
        .unwrap();
        let (m, sigma) = batch_weighted_mle(&h, 0.9, BatchMode::PriorAugmented).unwrap();
        let (mp, sigmap) = batch_weighted_mle(&permuted, 0.9, BatchMode::PriorAugmented).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_relative_eq!(mp[(i, j)], m[(perm[i], j)], epsilon = 1e-12);
            }
            for j in 0..3 {
                assert_relative_eq!(sigmap[(i, j)], sigma[(perm[i], perm[j])], epsilon = 1e-12);
            }
        }
    }

    fn random_bank(k: usize, r: usize, seed: u64) -> ModelBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = init_model(k, r, 48, 0.9, 0.9).unwrap();
        for m in bank.transition.iter_mut() {
            m.m = DMatrix::from_fn(k, k + 1, |_, _| 0.5 * (rng.random::<f64>() - 0.5));
            let g = DMatrix::from_fn(k, k, |_, _| rng.random::<f64>() - 0.5);
            m.sigma = SymMatrix::symmetrized(&g * g.transpose() + DMatrix::identity(k, k) * 0.3);
        }
        for m in bank.observation.iter_mut() {
            m.m = DMatrix::from_fn(k, k * r, |_, _| 0.5 * (rng.random::<f64>() - 0.5));
            let g = DMatrix::from_fn(k, k, |_, _| rng.random::<f64>() - 0.5);
            m.sigma = SymMatrix::symmetrized(&g * g.transpose() + DMatrix::identity(k, k) * 0.3);
        }
        bank
    }

    #[test]
    fn one_step_matches_predict_one() {
        let bank = random_bank(2, 2, 6);
        let cal = CalendarModel::default();
        let s_t = DVector::from_row_slice(&[0.8, -0.3]);
        let u_r = DVector::from_fn(4, |i, _| 0.2 * i as f64);
        let t = monday_11();
        let oracle = joint_conditional_forecast(&bank, &s_t, std::slice::from_ref(&u_r), t, &cal).unwrap();
        let c = cal.calendar_of(t + Duration::hours(1));
        let (mean, cov) = predict_one(&bank, c, &s_t, &SymMatrix::zeros(2), &u_r).unwrap();
        assert!((&oracle[0].0 - mean).amax() < 1e-10);
        assert!((oracle[0].1.as_matrix() - cov.as_matrix()).amax() < 1e-10);
    }

    #[test]
    fn multi_step_matches_production_forecaster() {
        let bank = random_bank(2, 1, 7);
        let cal = CalendarModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s_t = DVector::from_fn(2, |_, _| rng.random::<f64>());
        let features: Vec<_> = (0..3)
            .map(|_| DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5))
            .collect();
        let t = monday_11();
        let oracle = joint_conditional_forecast(&bank, &s_t, &features, t, &cal).unwrap();
        let prod = prediction_step(&bank, &s_t, &features, t, &cal).unwrap();
        for i in 0..3 {
            assert!((&oracle[i].0 - &prod.means[i]).amax() < 1e-8, "step {i} mean");
            assert!(
                (oracle[i].1.as_matrix() - prod.covs[i].as_matrix()).amax() < 1e-8,
                "step {i} cov"
            );
            assert!(oracle[i].1.is_psd());
        }
    }

    #[test]
    fn uninformative_observations_give_pure_rollforward() {
        let k = 2;
        let mut bank = random_bank(k, 1, 9);
        for m in bank.observation.iter_mut() {
            m.sigma = SymMatrix::symmetrized(DMatrix::identity(k, k) * 1e12);
        }
        let cal = CalendarModel::default();
        let s_t = DVector::from_row_slice(&[1.0, 0.5]);
        let features: Vec<_> = (0..4).map(|_| DVector::from_element(k, 0.3)).collect();
        let t = monday_11();
        let oracle = joint_conditional_forecast(&bank, &s_t, &features, t, &cal).unwrap();
        let mut mean = s_t.clone();
        let mut cov = DMatrix::zeros(k, k);
        for (i, step) in oracle.iter().enumerate() {
            let c = cal.calendar_of(t + Duration::hours(i as i64 + 1));
            let tm = &bank.transition[c - 1];
            let a = tm.m.columns(1, k);
            mean = tm.m.column(0).into_owned() + &a * mean;
            cov = &a * cov * a.transpose() + tm.sigma.as_matrix();
            assert!((&step.0 - &mean).amax() < 1e-6 * mean.amax().max(1.0), "step {i}");
            assert!((step.1.as_matrix() - &cov).amax() < 1e-4, "step {i} cov");
        }
    }

    #[test]
    fn dims_over_the_cost_bound_are_rejected() {
        let bank = random_bank(2, 1, 10);
        let s_t = DVector::zeros(2);
        let features: Vec<_> = (0..7).map(|_| DVector::zeros(2)).collect();
        assert!(joint_conditional_forecast(&bank, &s_t, &features, monday_11(), &CalendarModel::default())
            .is_err());
    }

    #[test]
    fn quadrature_reference_value() {
        let v = quadrature_crps(0.0, 1.0, 0.0).unwrap();
        assert_relative_eq!(v, 0.233695, epsilon = 1e-6);
    }

    #[test]
    fn quadrature_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let mu = rng.random::<f64>() * 10.0 - 5.0;
            let sigma = 0.2 + rng.random::<f64>() * 3.0;
            let s = mu + (rng.random::<f64>() * 8.0 - 4.0) * sigma;
            let q = quadrature_crps(mu, sigma, s).unwrap();
            let c = crps_gaussian(s, mu, sigma * sigma).unwrap();
            assert!((q - c).abs() < 1e-6, "mu={mu} sigma={sigma} s={s}: {q} vs {c}");
        }
    }

    #[test]
    fn quadrature_tail_is_absolute_error() {
        let s = 50.0;
        let v = quadrature_crps(0.0, 1.0, s).unwrap();
        assert_relative_eq!(v, s - 1.0 / std::f64::consts::PI.sqrt(), epsilon = 1e-4);
    }

    #[test]
    fn quadrature_scale_equivariance() {
        let full = quadrature_crps(0.0, 1.0, 0.0).unwrap();
        let half = quadrature_crps(0.0, 0.5, 0.0).unwrap();
        assert_relative_eq!(half, 0.5 * full, epsilon = 1e-7);
    }
}
