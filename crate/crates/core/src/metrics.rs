//! Point and probabilistic scores for Gaussian predictive distributions.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Evaluation grid of 19 quantile levels, 0.05 through 0.95.
pub const QUANTILE_GRID: [f64; 19] = [
    0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75,
    0.80, 0.85, 0.90, 0.95,
];

pub fn abs_error(actual: f64, predicted: f64) -> f64 {
    (actual - predicted).abs()
}

/// Closed-form continuous ranked probability score of `N(mean, var)`
/// against the outcome `actual`. A zero-variance forecast degrades to
/// the absolute error.
pub fn crps_gaussian(actual: f64, mean: f64, var: f64) -> Result<f64> {
    if !actual.is_finite() || !mean.is_finite() || !var.is_finite() || var < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "crps inputs actual={actual} mean={mean} var={var}"
        )));
    }
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok((actual - mean).abs());
    }
    let z = (actual - mean) / sd;
    let n = Normal::standard();
    Ok(sd * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / std::f64::consts::PI.sqrt()))
}

/// Pinball loss of the level-`q` forecast quantile `fq`.
pub fn pinball(actual: f64, fq: f64, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParameter(format!("quantile level {q} out of (0,1)")));
    }
    Ok(if actual >= fq { q * (actual - fq) } else { (1.0 - q) * (fq - actual) })
}

/// Streaming accumulator over (actual, Gaussian forecast) pairs.
/// Accumulators for disjoint slices of a run can be `merge`d.
#[derive(Debug, Clone, Default)]
pub struct ScoreAccumulator {
    n: usize,
    sum_abs: f64,
    sum_sq: f64,
    mape_sum: f64,
    mape_n: usize,
    crps_sum: f64,
    pinball_sum: [f64; 19],
    below_quantile: [usize; 19],
    interval_hits: usize,
    two_sigma_hits: usize,
    degenerate: usize,
}

impl ScoreAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Scores one scalar observation against its marginal `N(mean, var)`.
    pub fn record(&mut self, actual: f64, mean: f64, var: f64) -> Result<()> {
        if !actual.is_finite() || !mean.is_finite() || !var.is_finite() || var < 0.0 {
            return Err(Error::NonFinite(format!(
                " in score inputs: actual={actual} mean={mean} var={var}"
            )));
        }
        let err = actual - mean;
        self.n += 1;
        self.sum_abs += err.abs();
        self.sum_sq += err * err;
        if actual != 0.0 {
            self.mape_sum += (err / actual).abs();
            self.mape_n += 1;
        }
        self.crps_sum += crps_gaussian(actual, mean, var)?;
        let sd = var.sqrt();
        if sd == 0.0 {
            self.degenerate += 1;
            for (i, &q) in QUANTILE_GRID.iter().enumerate() {
                self.pinball_sum[i] += pinball(actual, mean, q)?;
                if actual <= mean {
                    self.below_quantile[i] += 1;
                }
            }
            if actual == mean {
                self.interval_hits += 1;
                self.two_sigma_hits += 1;
            }
            return Ok(());
        }
        let norm = Normal::standard();
        for (i, &q) in QUANTILE_GRID.iter().enumerate() {
            let fq = mean + norm.inverse_cdf(q) * sd;
            self.pinball_sum[i] += pinball(actual, fq, q)?;
            if actual <= fq {
                self.below_quantile[i] += 1;
            }
        }
        let half = norm.inverse_cdf(0.975) * sd;
        if (mean - half..=mean + half).contains(&actual) {
            self.interval_hits += 1;
        }
        if err.abs() <= 2.0 * sd {
            self.two_sigma_hits += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ScoreAccumulator) {
        self.n += other.n;
        self.sum_abs += other.sum_abs;
        self.sum_sq += other.sum_sq;
        self.mape_sum += other.mape_sum;
        self.mape_n += other.mape_n;
        self.crps_sum += other.crps_sum;
        for i in 0..QUANTILE_GRID.len() {
            self.pinball_sum[i] += other.pinball_sum[i];
            self.below_quantile[i] += other.below_quantile[i];
        }
        self.interval_hits += other.interval_hits;
        self.two_sigma_hits += other.two_sigma_hits;
        self.degenerate += other.degenerate;
    }

    /// Empirical frequency of the actual falling at or below each grid
    /// quantile.
    pub fn coverage_curve(&self) -> [f64; 19] {
        let mut out = [f64::NAN; 19];
        if self.n > 0 {
            for i in 0..19 {
                out[i] = self.below_quantile[i] as f64 / self.n as f64;
            }
        }
        out
    }

    pub fn finalize(&self) -> Result<Scores> {
        if self.n == 0 {
            return Err(Error::Data("no observations scored".into()));
        }
        let n = self.n as f64;
        let curve = self.coverage_curve();
        let ce = QUANTILE_GRID
            .iter()
            .zip(curve.iter())
            .map(|(q, c)| (c - q).abs())
            .sum::<f64>()
            / QUANTILE_GRID.len() as f64;
        let mut pinball_mean = [0.0; 19];
        for i in 0..19 {
            pinball_mean[i] = self.pinball_sum[i] / n;
        }
        Ok(Scores {
            count: self.n,
            mae: self.sum_abs / n,
            rmse: (self.sum_sq / n).sqrt(),
            mape: if self.mape_n > 0 { self.mape_sum / self.mape_n as f64 } else { f64::NAN },
            crps: self.crps_sum / n,
            mean_pinball: pinball_mean.iter().sum::<f64>() / 19.0,
            pinball: pinball_mean,
            calibration_error: ce,
            coverage95: self.interval_hits as f64 / n,
            coverage_two_sigma: self.two_sigma_hits as f64 / n,
            degenerate_forecasts: self.degenerate,
        })
    }
}

/// Finalized scores of one evaluation window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scores {
    pub count: usize,
    pub mae: f64,
    pub rmse: f64,
    /// mean absolute percentage error over nonzero actuals; NaN if none
    pub mape: f64,
    pub crps: f64,
    pub mean_pinball: f64,
    /// mean pinball loss at each grid level
    pub pinball: [f64; 19],
    /// mean absolute gap between nominal and empirical grid coverage
    pub calibration_error: f64,
    /// empirical coverage of the central 95% interval
    pub coverage95: f64,
    /// empirical coverage of the mean ± 2·std band
    pub coverage_two_sigma: f64,
    pub degenerate_forecasts: usize,
}
