//! Recursive exponentially-weighted ML updates of `(M, Sigma, P, gamma)`
//! for each calendar type as new loads arrive.

use chrono::{Duration, NaiveDateTime};
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::gaussian::SymMatrix;
use crate::model::{CalendarModel, ConditionalModel, ModelBank};

/// Which `P` feeds the `Sigma` and `M` denominators.
///
/// The proven recursion uses the pre-update `P`; the printed loop of the
/// reference procedure updates `P` first. Both are exposed so they can be
/// A/B tested; `PreUpdateP` is the default everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateOrder {
    #[default]
    PreUpdateP,
    PostUpdateP,
}

/// One rank-1 recursive update of a conditional model.
///
/// In order: `e = s − M·u`; `P ← (1/λ)(P − P·u·uᵀ·P/(λ + uᵀPu))`;
/// `γ ← λγ + 1`; `Σ ← Σ − (1/γ)(Σ − λ²·e·eᵀ/(λ + uᵀPu)²)`;
/// `M ← M + e·uᵀ·P/(λ + uᵀPu)`, with `P` in the denominators chosen by
/// `order`.
pub fn recursive_update(
    model: &mut ConditionalModel,
    u: &DVector<f64>,
    s: &DVector<f64>,
    lambda: f64,
    order: UpdateOrder,
) -> Result<()> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidParameter(format!("lambda must be in (0,1), got {lambda}")));
    }
    if u.len() != model.feat_dim() || s.len() != model.out_dim() {
        return Err(Error::DimensionMismatch(format!(
            "update: u dim {} vs {}, s dim {} vs {}",
            u.len(),
            model.feat_dim(),
            s.len(),
            model.out_dim()
        )));
    }
    if u.iter().chain(s.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(" in recursive_update input".to_string()));
    }

    let e = s - &model.m * u;

    let pu_pre = model.p.as_matrix() * u;
    let denom_pre = lambda + u.dot(&pu_pre);
    let p_new = SymMatrix::symmetrized(
        (model.p.as_matrix() - &pu_pre * (pu_pre.transpose() / denom_pre)) / lambda,
    );

    let (pu, denom) = match order {
        UpdateOrder::PreUpdateP => (pu_pre, denom_pre),
        UpdateOrder::PostUpdateP => {
            let pu_post = p_new.as_matrix() * u;
            let denom_post = lambda + u.dot(&pu_post);
            (pu_post, denom_post)
        }
    };
    model.p = p_new;

    model.gamma = lambda * model.gamma + 1.0;
    let scaled = (lambda / denom) * &e;
    let sigma_new = model.sigma.as_matrix()
        - (model.sigma.as_matrix() - &scaled * scaled.transpose()) / model.gamma;
    model.sigma = SymMatrix::symmetrized(sigma_new);

    model.m += &e * (pu.transpose() / denom);
    Ok(())
}

/// One prediction window of training data: loads `s_t..s_{t+L}` and the
/// feature vectors for steps `t+1..t+L`.
#[derive(Debug, Clone)]
pub struct TrainingSlice {
    pub t: NaiveDateTime,
    pub loads: Vec<DVector<f64>>,
    pub features: Vec<DVector<f64>>,
}

impl TrainingSlice {
    pub fn horizon(&self) -> usize {
        self.features.len()
    }

    fn validate(&self, bank: &ModelBank) -> Result<()> {
        if self.loads.len() != self.features.len() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "slice has {} loads for {} feature steps",
                self.loads.len(),
                self.features.len()
            )));
        }
        if self.loads.iter().any(|s| s.len() != bank.k) {
            return Err(Error::DimensionMismatch("slice load dim != K".into()));
        }
        if self.features.iter().any(|u| u.len() != bank.k * bank.r) {
            return Err(Error::DimensionMismatch("slice feature dim != K*R".into()));
        }
        Ok(())
    }
}

/// Feature vector for the transition model: `u_s = [1, sᵀ]ᵀ`.
pub fn transition_features(s: &DVector<f64>) -> DVector<f64> {
    let mut u = DVector::zeros(s.len() + 1);
    u[0] = 1.0;
    u.rows_mut(1, s.len()).copy_from(s);
    u
}

/// Applies the learning loop over one slice: for each step the calendar
/// type's transition model is updated with `([1, s_{t+i-1}ᵀ]ᵀ, s_{t+i})`
/// and its observation model with `(u_r, s_{t+i})`.
///
/// Steps whose loads are non-finite (missing data) are skipped for both
/// models.
pub fn learning_step(
    bank: &mut ModelBank,
    slice: &TrainingSlice,
    cal: &CalendarModel,
    order: UpdateOrder,
) -> Result<()> {
    slice.validate(bank)?;
    for i in 1..=slice.horizon() {
        let prev = &slice.loads[i - 1];
        let cur = &slice.loads[i];
        if prev.iter().chain(cur.iter()).any(|v| !v.is_finite()) {
            continue;
        }
        let c = cal.calendar_of(slice.t + Duration::hours(i as i64));
        if c > bank.c {
            return Err(Error::InvalidParameter(format!(
                "calendar type {c} exceeds bank C={}",
                bank.c
            )));
        }
        let u_s = transition_features(prev);
        recursive_update(&mut bank.transition[c - 1], &u_s, cur, bank.lambda_s, order)?;
        recursive_update(
            &mut bank.observation[c - 1],
            &slice.features[i - 1],
            cur,
            bank.lambda_r,
            order,
        )?;
    }
    Ok(())
}
