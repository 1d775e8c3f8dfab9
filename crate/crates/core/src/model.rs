//! Model parameters and learner state, kept per calendar type, together
//! with the calendar mapping and snapshot persistence.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::SymMatrix;

/// Maps timestamps to calendar types: weekday hour `h` → `h+1`,
/// weekend/holiday hour `h` → `h+25`, so the image is `{1..48}`.
#[derive(Debug, Clone, Default)]
pub struct CalendarModel {
    pub holidays: BTreeSet<NaiveDate>,
}

impl CalendarModel {
    pub fn new(holidays: BTreeSet<NaiveDate>) -> Self {
        Self { holidays }
    }

    /// Total number of calendar types this mapping produces.
    pub const TYPES: usize = 48;

    pub fn is_offday(&self, date: NaiveDate) -> bool {
        matches!(date.weekday(), Weekday::Sat | Weekday::Sun) || self.holidays.contains(&date)
    }

    /// Calendar type of a timestamp, in `{1..48}`.
    pub fn calendar_of(&self, ts: NaiveDateTime) -> usize {
        let h = ts.hour() as usize;
        if self.is_offday(ts.date()) {
            h + 25
        } else {
            h + 1
        }
    }
}

/// Conditional Gaussian model for one calendar type: mean matrix `M`,
/// covariance `Sigma`, data autocorrelation inverse `P`, and cumulative
/// forgetting factor `gamma`.
#[derive(Debug, Clone)]
pub struct ConditionalModel {
    pub m: DMatrix<f64>,
    pub sigma: SymMatrix,
    pub p: SymMatrix,
    pub gamma: f64,
}

impl ConditionalModel {
    /// Initial state: `M = 0`, `Sigma = 0`, `P = I`, `gamma = 0`.
    pub fn init(out_dim: usize, feat_dim: usize) -> Self {
        Self {
            m: DMatrix::zeros(out_dim, feat_dim),
            sigma: SymMatrix::zeros(out_dim),
            p: SymMatrix::identity(feat_dim),
            gamma: 0.0,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn feat_dim(&self) -> usize {
        self.m.ncols()
    }
}

/// Full parameter set: a transition and an observation model per
/// calendar type, plus the forgetting factors.
#[derive(Debug, Clone)]
pub struct ModelBank {
    pub k: usize,
    pub r: usize,
    pub c: usize,
    pub lambda_s: f64,
    pub lambda_r: f64,
    pub transition: Vec<ConditionalModel>,
    pub observation: Vec<ConditionalModel>,
}

/// Builds a freshly initialized bank: every sub-model has `M = 0`,
/// `Sigma = 0`, `P = I`, `gamma = 0`.
pub fn init_model(k: usize, r: usize, c: usize, lambda_s: f64, lambda_r: f64) -> Result<ModelBank> {
    if k < 1 || r < 1 || c < 1 {
        return Err(Error::InvalidParameter(format!(
            "init_model requires K, R, C >= 1, got K={k}, R={r}, C={c}"
        )));
    }
    for (name, l) in [("lambda_s", lambda_s), ("lambda_r", lambda_r)] {
        if !(l > 0.0 && l < 1.0) {
            return Err(Error::InvalidParameter(format!("{name} must be in (0,1), got {l}")));
        }
    }
    Ok(ModelBank {
        k,
        r,
        c,
        lambda_s,
        lambda_r,
        transition: (0..c).map(|_| ConditionalModel::init(k, k + 1)).collect(),
        observation: (0..c).map(|_| ConditionalModel::init(k, k * r)).collect(),
    })
}

impl ModelBank {
    pub fn transition_model(&self, cal_type: usize) -> Result<&ConditionalModel> {
        self.transition
            .get(cal_type.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidParameter(format!("calendar type {cal_type} out of 1..={}", self.c)))
    }

    pub fn observation_model(&self, cal_type: usize) -> Result<&ConditionalModel> {
        self.observation
            .get(cal_type.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidParameter(format!("calendar type {cal_type} out of 1..={}", self.c)))
    }

    /// Copy of the bank with every covariance passed through `f`.
    /// Used to apply sparsification to forecast-side copies only.
    pub fn map_covariances(&self, f: impl Fn(&SymMatrix) -> SymMatrix) -> ModelBank {
        let mut out = self.clone();
        for m in out.transition.iter_mut().chain(out.observation.iter_mut()) {
            m.sigma = f(&m.sigma);
        }
        out
    }
}

// --- snapshot persistence -------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ModelSnapshot {
    version: u32,
    k: usize,
    r: usize,
    c: usize,
    lambda_s: f64,
    lambda_r: f64,
    transition: Vec<ConditionalSnapshot>,
    observation: Vec<ConditionalSnapshot>,
}

/// Flattened matrices in row-major order.
#[derive(Debug, Serialize, Deserialize)]
struct ConditionalSnapshot {
    rows: usize,
    cols: usize,
    m: Vec<f64>,
    sigma: Vec<f64>,
    p: Vec<f64>,
    gamma: f64,
}

const SNAPSHOT_VERSION: u32 = 1;

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
        .collect()
}

fn from_row_major(rows: usize, cols: usize, v: &[f64]) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Data(format!(
            "snapshot matrix has {} entries, expected {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, v))
}

impl ConditionalSnapshot {
    fn capture(m: &ConditionalModel) -> Self {
        Self {
            rows: m.out_dim(),
            cols: m.feat_dim(),
            m: row_major(&m.m),
            sigma: row_major(m.sigma.as_matrix()),
            p: row_major(m.p.as_matrix()),
            gamma: m.gamma,
        }
    }

    fn restore(&self) -> Result<ConditionalModel> {
        Ok(ConditionalModel {
            m: from_row_major(self.rows, self.cols, &self.m)?,
            sigma: SymMatrix::new(from_row_major(self.rows, self.rows, &self.sigma)?)?,
            p: SymMatrix::new(from_row_major(self.cols, self.cols, &self.p)?)?,
            gamma: self.gamma,
        })
    }
}

/// Writes a versioned JSON snapshot of the bank.
pub fn save_snapshot(bank: &ModelBank, path: &Path) -> Result<()> {
    let snap = ModelSnapshot {
        version: SNAPSHOT_VERSION,
        k: bank.k,
        r: bank.r,
        c: bank.c,
        lambda_s: bank.lambda_s,
        lambda_r: bank.lambda_r,
        transition: bank.transition.iter().map(ConditionalSnapshot::capture).collect(),
        observation: bank.observation.iter().map(ConditionalSnapshot::capture).collect(),
    };
    let text = serde_json::to_string(&snap)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<ModelBank> {
    let text = std::fs::read_to_string(path)?;
    let snap: ModelSnapshot = serde_json::from_str(&text)?;
    if snap.version != SNAPSHOT_VERSION {
        return Err(Error::Data(format!("unsupported snapshot version {}", snap.version)));
    }
    let restore_all = |items: &[ConditionalSnapshot]| -> Result<Vec<ConditionalModel>> {
        items.iter().map(ConditionalSnapshot::restore).collect()
    };
    let bank = ModelBank {
        k: snap.k,
        r: snap.r,
        c: snap.c,
        lambda_s: snap.lambda_s,
        lambda_r: snap.lambda_r,
        transition: restore_all(&snap.transition)?,
        observation: restore_all(&snap.observation)?,
    };
    if bank.transition.len() != bank.c || bank.observation.len() != bank.c {
        return Err(Error::Data("snapshot model count does not match C".into()));
    }
    Ok(bank)
}
