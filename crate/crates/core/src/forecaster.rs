//! Recursive probabilistic multi-step forecasts with full cross-entity
//! error covariance.
//!
//! Each step fuses the transition roll-forward of the previous forecast
//! with the observation model of the step's calendar type:
//! `W₁ = Σ_s + (M_s N)·Ê·(M_s N)ᵀ`, `W₂ = Σ_r`,
//! `ŝ = W₁(W₁+W₂)⁻¹M_r u_r + W₂(W₁+W₂)⁻¹M_s û_s`,
//! `Ê = W₂(W₁+W₂)⁻¹W₁`.

use chrono::{Duration, NaiveDateTime};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::ContinuousCDF;

use crate::error::{Error, Result};
use crate::gaussian::{pd_factor_jittered, SymMatrix};
use crate::learner::transition_features;
use crate::model::{CalendarModel, ModelBank};

/// Multi-step Gaussian forecast: one mean vector and covariance per
/// horizon step.
#[derive(Debug, Clone)]
pub struct ProbabilisticForecast {
    pub base_time: NaiveDateTime,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<SymMatrix>,
}

impl ProbabilisticForecast {
    pub fn horizon(&self) -> usize {
        self.means.len()
    }
}

/// The `(K+1)×K` block selector `[0; I_K]`: right-multiplying a
/// transition mean matrix by it drops the intercept column.
pub fn selector_matrix(k: usize) -> DMatrix<f64> {
    let mut n = DMatrix::zeros(k + 1, k);
    for i in 0..k {
        n[(i + 1, i)] = 1.0;
    }
    n
}

/// One forecast step for calendar type `c`.
pub fn predict_one(
    bank: &ModelBank,
    c: usize,
    prev_mean: &DVector<f64>,
    prev_cov: &SymMatrix,
    u_r: &DVector<f64>,
) -> Result<(DVector<f64>, SymMatrix)> {
    let tm = bank.transition_model(c)?;
    let om = bank.observation_model(c)?;
    let k = bank.k;
    if prev_mean.len() != k || prev_cov.dim() != k || u_r.len() != k * bank.r {
        return Err(Error::DimensionMismatch(format!(
            "predict_one: prev dim {}, cov dim {}, u_r dim {} for K={k}, R={}",
            prev_mean.len(),
            prev_cov.dim(),
            u_r.len(),
            bank.r
        )));
    }

    // M_s·N: the load-dependent columns of the transition mean matrix
    let a = tm.m.columns(1, k);
    let w1 = SymMatrix::symmetrized(tm.sigma.as_matrix() + &a * prev_cov.as_matrix() * a.transpose());
    let w2 = &om.sigma;
    let total = SymMatrix::symmetrized(w1.as_matrix() + w2.as_matrix());
    let chol = pd_factor_jittered(&total).map_err(|_| {
        Error::NotPositiveDefinite(format!(" (W1+W2 for calendar type {c}, even after jitter)"))
    })?;

    let obs_term = &om.m * u_r;
    let trans_term = &tm.m * transition_features(prev_mean);
    // (W1+W2)⁻¹ is factored once and reused for both mean terms and the
    // covariance, keeping the per-step cost at one small factorization.
    let mean = w1.as_matrix() * chol.solve(&obs_term) + w2.as_matrix() * chol.solve(&trans_term);
    let cov = SymMatrix::symmetrized(w2.as_matrix() * chol.solve(w1.as_matrix()));
    Ok((mean, cov))
}

/// Rolls `predict_one` over `features.len()` steps starting from the
/// known load `s_t` (`Ê_t = 0`). Never mutates the bank.
pub fn prediction_step(
    bank: &ModelBank,
    s_t: &DVector<f64>,
    features: &[DVector<f64>],
    t: NaiveDateTime,
    cal: &CalendarModel,
) -> Result<ProbabilisticForecast> {
    let mut mean = s_t.clone();
    let mut cov = SymMatrix::zeros(bank.k);
    let mut means = Vec::with_capacity(features.len());
    let mut covs = Vec::with_capacity(features.len());
    for (i, u_r) in features.iter().enumerate() {
        let c = cal.calendar_of(t + Duration::hours(i as i64 + 1));
        let (m, e) = predict_one(bank, c, &mean, &cov, u_r)?;
        means.push(m.clone());
        covs.push(e.clone());
        mean = m;
        cov = e;
    }
    Ok(ProbabilisticForecast { base_time: t, means, covs })
}

/// Quantile of one entity at one step; `degenerate` flags a zero-width
/// predictive distribution queried away from the median.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantile {
    pub value: f64,
    pub degenerate: bool,
}

/// `ŝ + Φ⁻¹(q)·√(Ê[k,k])` for step `i` and entity `k` (both 1-based).
pub fn forecast_quantile(f: &ProbabilisticForecast, step: usize, entity: usize, q: f64) -> Result<Quantile> {
    if step < 1 || step > f.horizon() {
        return Err(Error::InvalidParameter(format!("step {step} out of 1..={}", f.horizon())));
    }
    let k = f.means[step - 1].len();
    if entity < 1 || entity > k {
        return Err(Error::InvalidParameter(format!("entity {entity} out of 1..={k}")));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParameter(format!("quantile {q} out of (0,1)")));
    }
    let mean = f.means[step - 1][entity - 1];
    let var = f.covs[step - 1][(entity - 1, entity - 1)].max(0.0);
    if var == 0.0 {
        return Ok(Quantile { value: mean, degenerate: q != 0.5 });
    }
    let z = statrs::distribution::Normal::standard().inverse_cdf(q);
    Ok(Quantile { value: mean + z * var.sqrt(), degenerate: false })
}

/// Mean and variance of the summed load across entities at step `i`
/// (1-based); the variance includes all cross-entity covariances.
pub fn aggregate_forecast(f: &ProbabilisticForecast, step: usize) -> Result<(f64, f64)> {
    if step < 1 || step > f.horizon() {
        return Err(Error::InvalidParameter(format!("step {step} out of 1..={}", f.horizon())));
    }
    let mean = f.means[step - 1].sum();
    let cov = f.covs[step - 1].as_matrix();
    let ones = DVector::from_element(cov.nrows(), 1.0);
    let var = (cov * &ones).dot(&ones);
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use approx::assert_relative_eq;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};

    fn monday_11() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2025, 1, 6).unwrap().and_hms_opt(11, 0, 0).unwrap()
    }

    fn random_bank(k: usize, r: usize, seed: u64) -> ModelBank {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
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
    fn equal_weight_fusion() {
        let k = 2;
        let mut bank = random_bank(k, 1, 1);
        for m in bank.transition.iter_mut().chain(bank.observation.iter_mut()) {
            m.sigma = SymMatrix::identity(k);
        }
        let prev = DVector::from_row_slice(&[1.0, 2.0]);
        let u_r = DVector::from_row_slice(&[0.3, -0.7]);
        let c = 5;
        let (mean, cov) = predict_one(&bank, c, &prev, &SymMatrix::zeros(k), &u_r).unwrap();
        let expect = (&bank.observation[c - 1].m * &u_r
            + &bank.transition[c - 1].m * transition_features(&prev))
            * 0.5;
        assert_relative_eq!(mean, expect, epsilon = 1e-12);
        assert_relative_eq!(cov.as_matrix().clone(), DMatrix::identity(k, k) * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn tiny_observation_noise_dominates() {
        let k = 2;
        let mut bank = random_bank(k, 1, 2);
        let c = 3;
        bank.observation[c - 1].sigma =
            SymMatrix::new(DMatrix::identity(k, k) * 1e-9).unwrap();
        let prev = DVector::from_row_slice(&[1.0, -1.0]);
        let u_r = DVector::from_row_slice(&[0.2, 0.4]);
        let (mean, cov) = predict_one(&bank, c, &prev, &SymMatrix::zeros(k), &u_r).unwrap();
        let obs_mean = &bank.observation[c - 1].m * &u_r;
        assert_relative_eq!(mean, obs_mean, epsilon = 1e-6);
        assert!(cov.as_matrix().amax() < 1e-6);
    }

    #[test]
    fn weight_complementarity() {
        let k = 3;
        let bank = random_bank(k, 2, 3);
        let c = 7;
        let tm = &bank.transition[c - 1];
        let om = &bank.observation[c - 1];
        let prev_cov = SymMatrix::symmetrized(DMatrix::identity(k, k) * 0.2);
        let a = tm.m.columns(1, k);
        let w1 = SymMatrix::symmetrized(tm.sigma.as_matrix() + &a * prev_cov.as_matrix() * a.transpose());
        let total = SymMatrix::symmetrized(w1.as_matrix() + om.sigma.as_matrix());
        let chol = pd_factor_jittered(&total).unwrap();
        let sum = w1.as_matrix() * chol.solve(&DMatrix::identity(k, k))
            + om.sigma.as_matrix() * chol.solve(&DMatrix::identity(k, k));
        assert_relative_eq!(sum, DMatrix::identity(k, k), epsilon = 1e-10);
    }

    #[test]
    fn fused_covariance_below_both_sources() {
        // with Ê_prev = 0: Ê ≼ Σ_s and Ê ≼ Σ_r in the PSD order
        let k = 3;
        let bank = random_bank(k, 1, 4);
        let c = 12;
        let prev = DVector::zeros(k);
        let u_r = DVector::from_fn(k, |i, _| i as f64 * 0.1);
        let (_, cov) = predict_one(&bank, c, &prev, &SymMatrix::zeros(k), &u_r).unwrap();
        for sigma in [&bank.transition[c - 1].sigma, &bank.observation[c - 1].sigma] {
            let diff = SymMatrix::symmetrized(sigma.as_matrix() - cov.as_matrix());
            assert!(diff.min_eigenvalue() >= -1e-10 * diff.trace().abs().max(1.0));
        }
    }

    #[test]
    fn horizon_shapes() {
        let bank = random_bank(8, 3, 5);
        let s_t = DVector::from_element(8, 1.0);
        let features: Vec<_> = (0..24).map(|i| DVector::from_element(24, 0.1 * i as f64)).collect();
        let f = prediction_step(&bank, &s_t, &features, monday_11(), &CalendarModel::default()).unwrap();
        assert_eq!(f.horizon(), 24);
        assert!(f.means.iter().all(|m| m.len() == 8));
        assert!(f.covs.iter().all(|c| c.dim() == 8 && c.is_psd()));
    }

    #[test]
    fn single_step_matches_predict_one() {
        let bank = random_bank(2, 1, 6);
        let s_t = DVector::from_row_slice(&[0.5, 1.5]);
        let u_r = DVector::from_row_slice(&[1.0, 0.0]);
        let t = monday_11();
        let cal = CalendarModel::default();
        let f = prediction_step(&bank, &s_t, std::slice::from_ref(&u_r), t, &cal).unwrap();
        let c = cal.calendar_of(t + Duration::hours(1));
        let (mean, cov) = predict_one(&bank, c, &s_t, &SymMatrix::zeros(2), &u_r).unwrap();
        assert_relative_eq!(f.means[0], mean, epsilon = 1e-14);
        assert_relative_eq!(f.covs[0].as_matrix().clone(), cov.as_matrix().clone(), epsilon = 1e-14);
    }

    #[test]
    fn quantiles_are_gaussian() {
        let f = ProbabilisticForecast {
            base_time: monday_11(),
            means: vec![DVector::from_row_slice(&[0.0])],
            covs: vec![SymMatrix::identity(1)],
        };
        let med = forecast_quantile(&f, 1, 1, 0.5).unwrap();
        assert_relative_eq!(med.value, 0.0, epsilon = 1e-12);
        let hi = forecast_quantile(&f, 1, 1, 0.975).unwrap();
        assert_relative_eq!(hi.value, 1.959964, epsilon = 1e-5);
        let lo = forecast_quantile(&f, 1, 1, 0.025).unwrap();
        assert_relative_eq!(lo.value, -hi.value, epsilon = 1e-12);
    }

    #[test]
    fn zero_variance_quantile_is_flagged() {
        let f = ProbabilisticForecast {
            base_time: monday_11(),
            means: vec![DVector::from_row_slice(&[3.0])],
            covs: vec![SymMatrix::zeros(1)],
        };
        let q = forecast_quantile(&f, 1, 1, 0.9).unwrap();
        assert!(q.degenerate);
        assert_relative_eq!(q.value, 3.0, epsilon = 1e-15);
        assert!(!forecast_quantile(&f, 1, 1, 0.5).unwrap().degenerate);
    }

    #[test]
    fn aggregate_uses_cross_covariances() {
        let f = ProbabilisticForecast {
            base_time: monday_11(),
            means: vec![DVector::from_row_slice(&[1.0, 2.0])],
            covs: vec![SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, -0.4, -0.4, 1.0])).unwrap()],
        };
        let (mean, var) = aggregate_forecast(&f, 1).unwrap();
        assert_relative_eq!(mean, 3.0, epsilon = 1e-15);
        assert_relative_eq!(var, 1.2, epsilon = 1e-12);
        assert!(var < 2.0); // below the sum of diagonals
    }

    #[test]
    fn coverage_of_two_sigma_band_on_generative_model() {
        // data synthesized from the bank's own parameters: the ±2σ band
        // should cover roughly 95% of one-step outcomes
        let k = 2;
        let bank = random_bank(k, 1, 8);
        let cal = CalendarModel::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut hits = 0usize;
        let mut total = 0usize;
        let t = monday_11();
        for _ in 0..1000 {
            let s_t = DVector::from_fn(k, |_, _| rng.random::<f64>() - 0.5);
            let u_r = DVector::from_fn(k, |_, _| rng.random::<f64>() - 0.5);
            let c = cal.calendar_of(t + Duration::hours(1));
            let (mean, cov) = predict_one(&bank, c, &s_t, &SymMatrix::zeros(k), &u_r).unwrap();
            // sample from the fused predictive itself
            let chol = pd_factor_jittered(&cov).unwrap();
            let z = DVector::from_fn(k, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let sample = &mean + chol.l() * z;
            for i in 0..k {
                let sd = cov[(i, i)].sqrt();
                if (sample[i] - mean[i]).abs() <= 2.0 * sd {
                    hits += 1;
                }
                total += 1;
            }
        }
        let coverage = hits as f64 / total as f64;
        assert!((0.93..=0.97).contains(&coverage), "coverage {coverage}");
    }
}
