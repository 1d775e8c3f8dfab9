//! CSV ingestion, feature construction, synthetic data generation and
//! the delayed-availability transform.
//!
//! CSV schema: header `timestamp,load_1..load_K[,temp_1..temp_K]`,
//! ISO-8601 local timestamps, strictly increasing on the hour.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{pd_factor, SymMatrix};
use crate::learner::transition_features;
use crate::model::{CalendarModel, ModelBank};

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// One hourly row: loads for all entities plus optional per-entity
/// weather readings (empty when the file has no weather columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRecord {
    pub timestamp: NaiveDateTime,
    pub loads: Vec<f64>,
    pub weather: Vec<f64>,
}

/// Parsed file plus the list of missing hours between first and last row.
#[derive(Debug, Clone)]
pub struct LoadedSeries {
    pub records: Vec<SeriesRecord>,
    pub gaps: Vec<NaiveDateTime>,
}

pub fn load_csv(path: &Path) -> Result<LoadedSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)?;
    let headers = rdr.headers().map_err(|e| Error::Data(format!("{path:?}: {e}")))?.clone();
    let mut load_cols = Vec::new();
    let mut temp_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == 0 {
            if h != "timestamp" {
                return Err(Error::Data(format!("{path:?}: first column must be 'timestamp', got '{h}'")));
            }
        } else if h.starts_with("load_") {
            load_cols.push(i);
        } else if h.starts_with("temp_") {
            temp_cols.push(i);
        } else {
            return Err(Error::Data(format!("{path:?}: unrecognized column '{h}'")));
        }
    }
    if load_cols.is_empty() {
        return Err(Error::Data(format!("{path:?}: no load_<k> columns")));
    }
    if !temp_cols.is_empty() && temp_cols.len() != load_cols.len() {
        return Err(Error::Data(format!(
            "{path:?}: {} temp columns for {} load columns",
            temp_cols.len(),
            load_cols.len()
        )));
    }

    let mut records: Vec<SeriesRecord> = Vec::new();
    let mut gaps = Vec::new();
    for (row_idx, row) in rdr.records().enumerate() {
        let line = row_idx + 2; // header is line 1
        let row = row.map_err(|e| Error::Data(format!("{path:?} line {line}: {e}")))?;
        let ts = NaiveDateTime::parse_from_str(&row[0], TS_FORMAT)
            .map_err(|e| Error::Data(format!("{path:?} line {line}: bad timestamp '{}': {e}", &row[0])))?;
        if let Some(prev) = records.last() {
            if ts <= prev.timestamp {
                return Err(Error::Data(format!(
                    "{path:?} line {line}: timestamp {ts} not after {}",
                    prev.timestamp
                )));
            }
            let mut expect = prev.timestamp + Duration::hours(1);
            while expect < ts {
                gaps.push(expect);
                expect += Duration::hours(1);
            }
        }
        let field = |i: usize| -> Result<f64> {
            row.get(i)
                .ok_or_else(|| Error::Data(format!("{path:?} line {line}: missing column {i}")))?
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("{path:?} line {line}: bad number: {e}")))
        };
        let loads = load_cols.iter().map(|&i| field(i)).collect::<Result<Vec<_>>>()?;
        let weather = temp_cols.iter().map(|&i| field(i)).collect::<Result<Vec<_>>>()?;
        records.push(SeriesRecord { timestamp: ts, loads, weather });
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{path:?}: no data rows")));
    }
    Ok(LoadedSeries { records, gaps })
}

pub fn write_csv(path: &Path, records: &[SeriesRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Err(Error::Data("cannot write empty series".into()));
    };
    let k = first.loads.len();
    let with_weather = !first.weather.is_empty();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend((1..=k).map(|i| format!("load_{i}")));
    if with_weather {
        header.extend((1..=k).map(|i| format!("temp_{i}")));
    }
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for r in records {
        let mut row = vec![r.timestamp.format(TS_FORMAT).to_string()];
        row.extend(r.loads.iter().map(|v| format!("{v:.10}")));
        if with_weather {
            row.extend(r.weather.iter().map(|v| format!("{v:.10}")));
        }
        w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// How raw weather readings become the regression features of one entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// raw weather block as-is (R = readings per entity)
    Identity,
    /// per entity `[1, Δw, Δw²]` with `Δw = w − w̄_c` (R = 3)
    TemperatureShift,
}

/// Feature constructor with per-calendar per-entity running weather
/// means, smoothed with its own forgetting factor.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    smoothing: f64,
    // (calendar type, entity) -> running mean
    means: BTreeMap<(usize, usize), f64>,
}

impl FeatureMap {
    pub fn new(kind: FeatureKind, smoothing: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidParameter(format!("smoothing factor {smoothing} out of [0,1)")));
        }
        Ok(FeatureMap { kind, smoothing, means: BTreeMap::new() })
    }

    pub fn feature_dim(&self, k: usize, readings_per_entity: usize) -> usize {
        match self.kind {
            FeatureKind::Identity => k * readings_per_entity,
            FeatureKind::TemperatureShift => k * 3,
        }
    }

    pub fn running_mean(&self, c: usize, entity: usize) -> Option<f64> {
        self.means.get(&(c, entity)).copied()
    }

    /// Builds `u_r` for calendar type `c` and advances the running means.
    /// Returns the vector and whether any entity fell back to `[1,0,0]`
    /// for lack of a weather reading.
    pub fn build_features(&mut self, record: &SeriesRecord, c: usize) -> Result<(DVector<f64>, bool)> {
        let k = record.loads.len();
        match self.kind {
            FeatureKind::Identity => {
                if record.weather.is_empty() || record.weather.iter().any(|w| !w.is_finite()) {
                    return Err(Error::Data(format!(
                        "identity feature map needs finite weather readings at {}",
                        record.timestamp
                    )));
                }
                Ok((DVector::from_vec(record.weather.clone()), false))
            }
            FeatureKind::TemperatureShift => {
                let mut out = DVector::zeros(3 * k);
                let mut fell_back = false;
                for entity in 0..k {
                    let w = record.weather.get(entity).copied();
                    match w.filter(|w| w.is_finite()) {
                        None => {
                            out[3 * entity] = 1.0;
                            fell_back = true;
                        }
                        Some(w) => {
                            let mean = *self.means.entry((c, entity)).or_insert(w);
                            let dw = w - mean;
                            out[3 * entity] = 1.0;
                            out[3 * entity + 1] = dw;
                            out[3 * entity + 2] = dw * dw;
                            self.means.insert(
                                (c, entity),
                                self.smoothing * mean + (1.0 - self.smoothing) * w,
                            );
                        }
                    }
                }
                Ok((out, fell_back))
            }
        }
    }
}

/// Generated trajectory. `records[0]` is the anchor state; for i ≥ 1,
/// `features[i]` is the observation-side feature vector whose emission
/// produced `records[i].loads` (`features[0]` is an unused placeholder).
#[derive(Debug, Clone)]
pub struct SyntheticSeries {
    pub records: Vec<SeriesRecord>,
    pub features: Vec<DVector<f64>>,
}

/// Samples a trajectory from the bank taken as the true parameters.
///
/// Loads follow the transition conditional exactly:
/// `s_t ~ N(M_{s,c}·[1, s_{t−1}], Σ_{s,c})`. Features are then chosen
/// so the observation conditional holds as well: with emission noise
/// `ε ~ N(0, Σ_{r,c})`, `u_r` solves `M_{r,c}u_r = s_t − ε` via the
/// pseudoinverse, plus noise in the nullspace of `M_{r,c}`.
pub fn synthesize_hmm(
    bank: &ModelBank,
    start: NaiveDateTime,
    steps: usize,
    seed: u64,
    cal: &CalendarModel,
) -> Result<SyntheticSeries> {
    let k = bank.k;
    let d = k * bank.r;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // per-calendar factors and feature-space maps, built lazily
    let mut trans_chol: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
    let mut obs_maps: BTreeMap<usize, (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = BTreeMap::new();

    let normal = |rng: &mut ChaCha8Rng, n: usize| {
        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
    };

    let mut s = DVector::from_element(k, 1.0);
    let mut records = vec![SeriesRecord {
        timestamp: start,
        loads: s.iter().copied().collect(),
        weather: vec![],
    }];
    let mut features = vec![DVector::zeros(d)];

    for i in 1..=steps {
        let t = start + Duration::hours(i as i64);
        let c = cal.calendar_of(t);
        let tm = bank.transition_model(c)?;
        let om = bank.observation_model(c)?;

        if !trans_chol.contains_key(&c) {
            let l = pd_factor(&tm.sigma)
                .ok_or_else(|| Error::NotPositiveDefinite(format!(" (true transition Σ, type {c})")))?
                .l();
            trans_chol.insert(c, l);
        }
        if !obs_maps.contains_key(&c) {
            let l = pd_factor(&om.sigma)
                .ok_or_else(|| Error::NotPositiveDefinite(format!(" (true observation Σ, type {c})")))?
                .l();
            // Mᵀ(MMᵀ)⁻¹ needs full row rank of the true observation matrix
            let gram = SymMatrix::symmetrized(&om.m * om.m.transpose());
            let gram_chol = pd_factor(&gram).ok_or_else(|| {
                Error::InvalidParameter(format!("true observation matrix of type {c} is row rank deficient"))
            })?;
            let pinv = om.m.transpose() * gram_chol.solve(&DMatrix::identity(k, k));
            let null_proj = DMatrix::identity(d, d) - &pinv * &om.m;
            obs_maps.insert(c, (l, pinv, null_proj));
        }

        let lt = &trans_chol[&c];
        s = &tm.m * transition_features(&s) + lt * normal(&mut rng, k);

        let (lo, pinv, null_proj) = &obs_maps[&c];
        let eps = lo * normal(&mut rng, k);
        let u_r = pinv * (&s - eps) + null_proj * normal(&mut rng, d);

        if s.iter().any(|v| !v.is_finite()) || u_r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(" in synthetic trajectory at step {i}")));
        }
        records.push(SeriesRecord { timestamp: t, loads: s.iter().copied().collect(), weather: vec![] });
        features.push(u_r);
    }
    Ok(SyntheticSeries { records, features })
}

/// Records with load availability lagged by `delay` hours. Weather is
/// assumed current; only loads arrive late.
#[derive(Debug, Clone)]
pub struct DelayedRecords {
    pub records: Vec<SeriesRecord>,
    pub delay: usize,
}

pub fn apply_delay(records: Vec<SeriesRecord>, delay: usize) -> Result<DelayedRecords> {
    if delay > 23 {
        return Err(Error::InvalidParameter(format!("delay {delay} out of 0..=23")));
    }
    Ok(DelayedRecords { records, delay })
}

impl DelayedRecords {
    /// Index of the most recent record whose load is visible when
    /// standing at record `idx`.
    pub fn latest_available(&self, idx: usize) -> Option<usize> {
        idx.checked_sub(self.delay)
    }
}
