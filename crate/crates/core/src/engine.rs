//! Rolling-origin experiment driver: daily predict-then-learn over an
//! hourly series, artifact writing, synthetic self-evaluation and the
//! update benchmark.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::config::{LearnScope, RunConfig};
use crate::data::{apply_delay, load_csv, synthesize_hmm, FeatureMap, SeriesRecord};
use crate::error::{Error, Result};
use crate::forecaster::prediction_step;
use crate::gaussian::SymMatrix;
use crate::learner::{learning_step, TrainingSlice, UpdateOrder};
use crate::metrics::{ScoreAccumulator, Scores, QUANTILE_GRID};
use crate::model::{init_model, save_snapshot, CalendarModel, ModelBank};
use crate::sparsifier::{threshold_covariance, SparsifyPolicy};

/// One scored horizon step: per-entity marginals plus the aggregate.
#[derive(Debug, Clone)]
pub struct StepForecast {
    pub target: NaiveDateTime,
    pub means: DVector<f64>,
    pub vars: DVector<f64>,
    pub agg_mean: f64,
    pub agg_var: f64,
}

#[derive(Debug)]
pub struct LoopOutput {
    pub per_entity: Vec<ScoreAccumulator>,
    pub aggregate: ScoreAccumulator,
    pub forecasts: Vec<StepForecast>,
    pub prediction_days: usize,
    pub scored_days: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LoopOptions {
    pub horizon: usize,
    pub prediction_hour: u32,
    pub tau: f64,
    pub delay: usize,
    pub warmup_days: usize,
    pub learn_scope: LearnScope,
    pub update_order: UpdateOrder,
    /// disabled for reference runs with fixed true parameters
    pub learn: bool,
}

fn load_vec(rec: &SeriesRecord) -> DVector<f64> {
    DVector::from_vec(rec.loads.clone())
}

/// Sequentially updates both conditional models for hour index `j`
/// (transition from `j-1`, emission at `j`).
fn learn_hour(
    bank: &mut ModelBank,
    records: &[SeriesRecord],
    features: &[DVector<f64>],
    j: usize,
    cal: &CalendarModel,
    order: UpdateOrder,
) -> Result<()> {
    if j == 0 {
        return Ok(());
    }
    let slice = TrainingSlice {
        t: records[j - 1].timestamp,
        loads: vec![load_vec(&records[j - 1]), load_vec(&records[j])],
        features: vec![features[j].clone()],
    };
    learning_step(bank, &slice, cal, order)
}

/// The daily predict-then-learn loop. At each prediction hour: first
/// learn every hour that has become available (respecting the delay and
/// the learning scope), then forecast the next `horizon` hours from the
/// most recent available load, bridging the delay gap with unscored
/// model steps. Forecasts therefore never condition on actuals from
/// their own horizon.
pub fn run_loop(
    bank: &mut ModelBank,
    records: &[SeriesRecord],
    features: &[DVector<f64>],
    cal: &CalendarModel,
    opts: &LoopOptions,
) -> Result<LoopOutput> {
    if records.len() != features.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} records vs {} feature vectors",
            records.len(),
            features.len()
        )));
    }
    if records.is_empty() {
        return Err(Error::Data("empty series".into()));
    }
    let delayed = apply_delay(records.to_vec(), opts.delay)?;
    let l = opts.horizon;
    let k = bank.k;
    let policy = SparsifyPolicy::new(opts.tau)?;
    let warmup_end = records[0].timestamp + Duration::days(opts.warmup_days as i64);

    let mut per_entity = vec![ScoreAccumulator::new(); k];
    let mut aggregate = ScoreAccumulator::new();
    let mut forecasts = Vec::new();
    let mut prediction_days = 0usize;
    let mut scored_days = 0usize;

    // hour indices still to be learned, as half-open (start, end] windows
    let mut windows: VecDeque<(usize, usize)> = VecDeque::new();
    let mut learned_until = 0usize;

    for idx in 0..records.len() {
        if records[idx].timestamp.hour() != opts.prediction_hour {
            continue;
        }
        let avail = match delayed.latest_available(idx) {
            Some(a) => a,
            None => continue, // nothing visible yet under the delay
        };

        if opts.learn {
            match opts.learn_scope {
                LearnScope::AllHours => {
                    for j in (learned_until + 1)..=avail {
                        learn_hour(bank, records, features, j, cal, opts.update_order)?;
                    }
                    learned_until = learned_until.max(avail);
                }
                LearnScope::PredictedSlice => {
                    while let Some(&(start, end)) = windows.front() {
                        let lo = start.max(learned_until);
                        let hi = end.min(avail);
                        for j in (lo + 1)..=hi {
                            learn_hour(bank, records, features, j, cal, opts.update_order)?;
                        }
                        learned_until = learned_until.max(hi);
                        if end <= avail {
                            windows.pop_front();
                        } else {
                            break;
                        }
                    }
                }
            }
        }
        windows.push_back((idx, idx + l));

        if idx + l >= records.len() {
            continue; // horizon runs past the data
        }
        let score = records[idx].timestamp >= warmup_end;
        if opts.learn && !score {
            continue; // settling period: update only, no forecasts
        }
        let anchor_rec = &records[avail];
        let s_anchor = load_vec(anchor_rec);
        if s_anchor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                " in anchor load at {}",
                anchor_rec.timestamp
            )));
        }
        let steps = idx + l - avail; // delay bridge + scored horizon
        let feats = &features[avail + 1..=idx + l];

        let forecast_bank;
        let bank_ref: &ModelBank = if opts.tau > 0.0 {
            forecast_bank = bank.map_covariances(|s| threshold_covariance(s, policy).0);
            &forecast_bank
        } else {
            bank
        };
        let fc = prediction_step(bank_ref, &s_anchor, feats, anchor_rec.timestamp, cal)?;

        prediction_days += 1;
        if score {
            scored_days += 1;
        }
        for step in (steps - l + 1)..=steps {
            let target_idx = avail + step;
            let mean = &fc.means[step - 1];
            let cov = &fc.covs[step - 1];
            let vars = DVector::from_fn(k, |i, _| cov[(i, i)].max(0.0));
            let ones = DVector::from_element(k, 1.0);
            let agg_var = (cov.as_matrix() * &ones).dot(&ones).max(0.0);
            let agg_mean = mean.sum();
            forecasts.push(StepForecast {
                target: records[target_idx].timestamp,
                means: mean.clone(),
                vars: vars.clone(),
                agg_mean,
                agg_var,
            });
            if score {
                let actual = &records[target_idx].loads;
                if actual.iter().all(|v| v.is_finite()) {
                    for i in 0..k {
                        per_entity[i].record(actual[i], mean[i], vars[i])?;
                    }
                    aggregate.record(actual.iter().sum(), agg_mean, agg_var)?;
                }
            }
        }
    }
    Ok(LoopOutput { per_entity, aggregate, forecasts, prediction_days, scored_days })
}

fn read_holidays(path: &Path) -> Result<BTreeSet<NaiveDate>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read holiday file {path:?}: {e}")))?;
    let mut out = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let date = NaiveDate::parse_from_str(line, "%Y-%m-%d")
            .map_err(|e| Error::Data(format!("{path:?} line {}: bad date '{line}': {e}", i + 1)))?;
        out.insert(date);
    }
    Ok(out)
}

/// Keeps only the 1-based entity columns in `subset`, in order.
pub fn select_entities(records: &[SeriesRecord], subset: &[usize]) -> Result<Vec<SeriesRecord>> {
    let k = records.first().map(|r| r.loads.len()).unwrap_or(0);
    if let Some(&bad) = subset.iter().find(|&&e| e < 1 || e > k) {
        return Err(Error::Config(format!("entities_subset index {bad} out of 1..={k}")));
    }
    Ok(records
        .iter()
        .map(|r| SeriesRecord {
            timestamp: r.timestamp,
            loads: subset.iter().map(|&e| r.loads[e - 1]).collect(),
            weather: if r.weather.is_empty() {
                vec![]
            } else {
                subset.iter().map(|&e| r.weather[e - 1]).collect()
            },
        })
        .collect())
}

/// Per-entity blocks of size `r` from full feature vectors.
pub fn select_feature_blocks(features: &[DVector<f64>], subset: &[usize], r: usize) -> Vec<DVector<f64>> {
    features
        .iter()
        .map(|u| {
            let mut out = DVector::zeros(subset.len() * r);
            for (slot, &e) in subset.iter().enumerate() {
                out.rows_mut(slot * r, r).copy_from(&u.rows((e - 1) * r, r));
            }
            out
        })
        .collect()
}

/// Inserts NaN-load rows for missing hours so index arithmetic stays
/// hourly. Learning and scoring skip the fill rows.
fn fill_gaps(records: Vec<SeriesRecord>, gaps: &[NaiveDateTime]) -> Vec<SeriesRecord> {
    if gaps.is_empty() {
        return records;
    }
    let k = records[0].loads.len();
    let w = records[0].weather.len();
    let mut out: Vec<SeriesRecord> = Vec::with_capacity(records.len() + gaps.len());
    let mut gi = 0usize;
    for rec in records {
        while gi < gaps.len() && gaps[gi] < rec.timestamp {
            out.push(SeriesRecord {
                timestamp: gaps[gi],
                loads: vec![f64::NAN; k],
                weather: vec![f64::NAN; w],
            });
            gi += 1;
        }
        out.push(rec);
    }
    out
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub config_hash: String,
    pub prediction_days: usize,
    pub scored_days: usize,
    pub gap_hours: usize,
    pub feature_fallback_hours: usize,
    pub per_entity: Vec<Scores>,
    pub aggregate: Scores,
}

/// Full CSV-driven experiment: ingest, feature pass, rolling loop,
/// artifacts in the output directory.
pub fn run_rolling(cfg: &RunConfig) -> Result<RunReport> {
    let loaded = load_csv(&cfg.data)?;
    let mut records = fill_gaps(loaded.records, &loaded.gaps);
    if let Some(subset) = &cfg.entities_subset {
        records = select_entities(&records, subset)?;
    }
    let k = records[0].loads.len();
    if k != cfg.k && cfg.entities_subset.is_none() {
        return Err(Error::Config(format!("config k={} but data has {k} entities", cfg.k)));
    }
    let holidays = match &cfg.holiday_file {
        Some(p) => read_holidays(p)?,
        None => BTreeSet::new(),
    };
    let cal = CalendarModel::new(holidays);

    // single streaming feature pass keeps the running weather means causal
    let mut fmap = FeatureMap::new(cfg.feature_kind, cfg.weather_smoothing)?;
    let mut features = Vec::with_capacity(records.len());
    let mut fallback_hours = 0usize;
    for rec in &records {
        let c = cal.calendar_of(rec.timestamp);
        let (u, fell_back) = fmap.build_features(rec, c)?;
        if fell_back {
            fallback_hours += 1;
        }
        features.push(u);
    }
    let expected_dim = k * cfg.r;
    if features.iter().any(|u| u.len() != expected_dim) {
        return Err(Error::Config(format!(
            "feature map produces dim {} but k*r = {expected_dim}; check r and feature_kind",
            features[0].len()
        )));
    }

    let mut bank = init_model(k, cfg.r, cfg.calendar_types, cfg.lambda_s, cfg.lambda_r)?;
    let opts = LoopOptions {
        horizon: cfg.horizon,
        prediction_hour: cfg.prediction_hour,
        tau: cfg.tau,
        delay: cfg.delay,
        warmup_days: cfg.warmup_days,
        learn_scope: cfg.learn_scope,
        update_order: cfg.update_order,
        learn: true,
    };
    let out = run_loop(&mut bank, &records, &features, &cal, &opts)?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    let hash = cfg.hash();
    write_forecast_csv(&cfg.output_dir.join("forecasts.csv"), &hash, &out.forecasts)?;
    write_intervals_csv(&cfg.output_dir.join("intervals.csv"), &hash, &out.forecasts)?;
    let report = RunReport {
        config_hash: hash.clone(),
        prediction_days: out.prediction_days,
        scored_days: out.scored_days,
        gap_hours: loaded.gaps.len(),
        feature_fallback_hours: fallback_hours,
        per_entity: out.per_entity.iter().map(|a| a.finalize()).collect::<Result<Vec<_>>>()?,
        aggregate: out.aggregate.finalize()?,
    };
    write_metrics_csv(&cfg.output_dir.join("metrics.csv"), &hash, &report)?;
    std::fs::write(
        cfg.output_dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let snap_path = cfg
        .snapshot_out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("model_snapshot.json"));
    save_snapshot(&bank, &snap_path)?;
    Ok(report)
}

fn csv_file(path: &Path, config_hash: &str) -> Result<std::fs::File> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# config_hash={config_hash}")?;
    Ok(f)
}

fn write_forecast_csv(path: &Path, hash: &str, rows: &[StepForecast]) -> Result<()> {
    let f = csv_file(path, hash)?;
    let mut w = csv::Writer::from_writer(f);
    let mut header = vec!["timestamp".to_string(), "entity".to_string(), "mean".to_string(), "std".to_string()];
    header.extend(QUANTILE_GRID.iter().map(|q| format!("q{:02}", (q * 100.0).round() as u32)));
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    let norm = statrs::distribution::Normal::standard();
    let zs: Vec<f64> = QUANTILE_GRID.iter().map(|&q| norm.inverse_cdf(q)).collect();
    for row in rows {
        for i in 0..row.means.len() {
            let sd = row.vars[i].sqrt();
            let mut rec = vec![
                row.target.format("%Y-%m-%dT%H:%M:%S").to_string(),
                (i + 1).to_string(),
                format!("{:.6}", row.means[i]),
                format!("{sd:.6}"),
            ];
            rec.extend(zs.iter().map(|z| format!("{:.6}", row.means[i] + z * sd)));
            w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_intervals_csv(path: &Path, hash: &str, rows: &[StepForecast]) -> Result<()> {
    let f = csv_file(path, hash)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["timestamp", "entity", "mean", "lo2", "hi2", "lo4", "hi4"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for row in rows {
        for i in 0..row.means.len() {
            let (m, sd) = (row.means[i], row.vars[i].sqrt());
            w.write_record([
                row.target.format("%Y-%m-%dT%H:%M:%S").to_string(),
                (i + 1).to_string(),
                format!("{m:.6}"),
                format!("{:.6}", m - 2.0 * sd),
                format!("{:.6}", m + 2.0 * sd),
                format!("{:.6}", m - 4.0 * sd),
                format!("{:.6}", m + 4.0 * sd),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_metrics_csv(path: &Path, hash: &str, report: &RunReport) -> Result<()> {
    let f = csv_file(path, hash)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record([
        "entity", "count", "mae", "rmse", "mape", "crps", "mean_pinball", "calibration_error",
        "coverage95",
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    let mut row = |label: &str, s: &Scores| {
        w.write_record([
            label.to_string(),
            s.count.to_string(),
            format!("{:.6}", s.mae),
            format!("{:.6}", s.rmse),
            format!("{:.6}", s.mape),
            format!("{:.6}", s.crps),
            format!("{:.6}", s.mean_pinball),
            format!("{:.6}", s.calibration_error),
            format!("{:.6}", s.coverage95),
        ])
        .map_err(|e| Error::Data(e.to_string()))
    };
    for (i, s) in report.per_entity.iter().enumerate() {
        row(&(i + 1).to_string(), s)?;
    }
    row("aggregate", &report.aggregate)?;
    w.flush()?;
    Ok(())
}

fn default_r() -> usize { 1 }
fn default_lambda() -> f64 { 0.9 }
fn default_tau() -> f64 { 0.0 }
fn default_warm_start() -> bool { true }
fn default_sigma_scale() -> f64 { 1.0 }
fn default_coupling() -> f64 { 0.1 }
fn default_corr() -> f64 { 0.5 }
fn default_trans_noise() -> f64 { 0.04 }
fn default_obs_noise() -> f64 { 0.02 }
fn default_warmup() -> usize { 30 }
fn default_hour() -> u32 { 11 }
fn default_horizon() -> usize { 24 }

/// Synthetic self-evaluation setup: the generative truth plus the run
/// protocol. All fields have working defaults except dims, days, seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalManifest {
    pub seed: u64,
    pub k: usize,
    pub days: usize,
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default = "default_lambda")]
    pub lambda_s: f64,
    #[serde(default = "default_lambda")]
    pub lambda_r: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub delay: usize,
    /// start the learner at the truth instead of from zero
    #[serde(default = "default_warm_start")]
    pub warm_start: bool,
    /// generator noise scale relative to what the learner is told;
    /// values != 1 are a deliberate misspecification control
    #[serde(default = "default_sigma_scale")]
    pub sigma_scale: f64,
    /// total cross-entity mass in each transition row
    #[serde(default = "default_coupling")]
    pub coupling: f64,
    /// transition noise correlation between entities
    #[serde(default = "default_corr")]
    pub noise_corr: f64,
    #[serde(default = "default_trans_noise")]
    pub trans_noise: f64,
    #[serde(default = "default_obs_noise")]
    pub obs_noise: f64,
    #[serde(default = "default_warmup")]
    pub warmup_days: usize,
    #[serde(default = "default_hour")]
    pub prediction_hour: u32,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

impl EvalManifest {
    pub fn from_file(path: &Path) -> Result<EvalManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {path:?}: {e}")))?;
        let m: EvalManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad manifest {path:?}: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.r < 1 || self.days < 1 {
            return Err(Error::Config("manifest needs k, r, days >= 1".into()));
        }
        for (name, l) in [("lambda_s", self.lambda_s), ("lambda_r", self.lambda_r)] {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::Config(format!("manifest {name} {l} out of (0,1)")));
            }
        }
        if self.trans_noise <= 0.0 || self.obs_noise <= 0.0 || self.sigma_scale <= 0.0 {
            return Err(Error::Config("manifest noise scales must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.noise_corr) {
            return Err(Error::Config(format!("noise_corr {} out of [0,1)", self.noise_corr)));
        }
        if !(0.0..=1.0).contains(&self.tau) || self.delay > 23 || self.prediction_hour > 23 {
            return Err(Error::Config("manifest tau/delay/prediction_hour out of range".into()));
        }
        if self.coupling < 0.0 || self.coupling >= 0.4 {
            return Err(Error::Config(format!("coupling {} out of [0, 0.4)", self.coupling)));
        }
        Ok(())
    }
}

/// Stable diagonally dominant truth: per-hour intercepts give a daily
/// shape, transition rows mix 0.6 self weight with `coupling` spread
/// over the other entities, noise is equicorrelated.
pub fn make_true_bank(m: &EvalManifest) -> Result<ModelBank> {
    let k = m.k;
    let mut bank = init_model(k, m.r, 48, m.lambda_s, m.lambda_r)?;
    let cross = if k > 1 { m.coupling / (k - 1) as f64 } else { 0.0 };
    let corr = if k > 1 { m.noise_corr } else { 0.0 };
    for (ci, tm) in bank.transition.iter_mut().enumerate() {
        let hour = ci % 24; // both day kinds share the shape
        let level = 1.0 + 0.3 * (2.0 * std::f64::consts::PI * hour as f64 / 24.0).sin();
        tm.m = DMatrix::from_fn(k, k + 1, |i, j| {
            if j == 0 {
                level * (1.0 + 0.05 * i as f64)
            } else if j == i + 1 {
                0.6
            } else {
                cross
            }
        });
        tm.sigma = SymMatrix::symmetrized(DMatrix::from_fn(k, k, |i, j| {
            m.trans_noise * if i == j { 1.0 } else { corr }
        }));
    }
    for om in bank.observation.iter_mut() {
        // block diagonal so single-entity submodels stay well specified
        om.m = DMatrix::from_fn(k, k * m.r, |i, j| {
            if j / m.r == i {
                match j % m.r {
                    0 => 1.0,
                    1 => 0.3,
                    _ => 0.1,
                }
            } else {
                0.0
            }
        });
        om.sigma = SymMatrix::symmetrized(DMatrix::identity(k, k) * m.obs_noise);
    }
    Ok(bank)
}

fn scale_covariances(bank: &ModelBank, scale: f64) -> ModelBank {
    bank.map_covariances(|s| SymMatrix::symmetrized(s.as_matrix() * scale))
}

/// Learner state seeded at the given parameters with a settled
/// effective sample count, so early updates refine rather than reset.
pub fn warm_start_bank(truth: &ModelBank) -> ModelBank {
    let mut bank = truth.clone();
    for m in bank.transition.iter_mut() {
        m.gamma = 1.0 / (1.0 - bank.lambda_s);
    }
    for m in bank.observation.iter_mut() {
        m.gamma = 1.0 / (1.0 - bank.lambda_r);
    }
    bank
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub manifest: EvalManifest,
    pub per_entity: Vec<Scores>,
    pub aggregate: Scores,
    /// CRPS of the learner's forecasts, averaged over entities
    pub model_crps: f64,
    /// CRPS of forecasts from the fixed generative truth on the same
    /// targets: the attainable floor
    pub optimal_crps: f64,
    pub calibration_error: f64,
    pub coverage95: f64,
    pub coverage_two_sigma: f64,
}

/// Generates a trajectory from the manifest's truth, runs the rolling
/// loop with an online learner, and scores it against the truth's own
/// forecasts.
pub fn run_synthetic_eval(m: &EvalManifest) -> Result<EvalReport> {
    m.validate()?;
    let base = make_true_bank(m)?;
    let gen_bank = if m.sigma_scale == 1.0 { base.clone() } else { scale_covariances(&base, m.sigma_scale) };
    let cal = CalendarModel::default();
    let start = NaiveDate::from_ymd_opt(2025, 1, 6)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let steps = m.days * 24 + m.horizon;
    let series = synthesize_hmm(&gen_bank, start, steps, m.seed, &cal)?;

    let opts = LoopOptions {
        horizon: m.horizon,
        prediction_hour: m.prediction_hour,
        tau: m.tau,
        delay: m.delay,
        warmup_days: m.warmup_days,
        learn_scope: LearnScope::PredictedSlice,
        update_order: UpdateOrder::PreUpdateP,
        learn: true,
    };
    let mut learner = if m.warm_start { warm_start_bank(&base) } else { init_model(m.k, m.r, 48, m.lambda_s, m.lambda_r)? };
    let out = run_loop(&mut learner, &series.records, &series.features, &cal, &opts)?;

    // reference forecasts from the frozen truth on identical targets
    let ref_opts = LoopOptions { tau: 0.0, learn: false, ..opts };
    let mut truth = gen_bank.clone();
    let ref_out = run_loop(&mut truth, &series.records, &series.features, &cal, &ref_opts)?;

    let per_entity = out.per_entity.iter().map(|a| a.finalize()).collect::<Result<Vec<_>>>()?;
    let aggregate = out.aggregate.finalize()?;
    let ref_scores = ref_out.per_entity.iter().map(|a| a.finalize()).collect::<Result<Vec<_>>>()?;
    let model_crps = per_entity.iter().map(|s| s.crps).sum::<f64>() / per_entity.len() as f64;
    let optimal_crps = ref_scores.iter().map(|s| s.crps).sum::<f64>() / ref_scores.len() as f64;
    let calibration_error =
        per_entity.iter().map(|s| s.calibration_error).sum::<f64>() / per_entity.len() as f64;
    let coverage95 = per_entity.iter().map(|s| s.coverage95).sum::<f64>() / per_entity.len() as f64;
    let coverage_two_sigma =
        per_entity.iter().map(|s| s.coverage_two_sigma).sum::<f64>() / per_entity.len() as f64;
    Ok(EvalReport {
        manifest: m.clone(),
        per_entity,
        aggregate,
        model_crps,
        optimal_crps,
        calibration_error,
        coverage95,
        coverage_two_sigma,
    })
}

#[derive(Debug, Serialize)]
pub struct BenchEntry {
    pub k: usize,
    pub reps: usize,
    pub learn_median_ms: f64,
    pub predict_median_ms: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub horizon: usize,
    pub r: usize,
    pub entries: Vec<BenchEntry>,
    /// log2 ratio of consecutive learn medians per K doubling
    pub learn_scaling_exponents: Vec<f64>,
}

/// Medians wall times of one learning step and one prediction step at
/// each requested K.
pub fn bench_update(ks: &[usize], horizon: usize, r: usize, reps: usize) -> Result<BenchReport> {
    if ks.is_empty() || reps < 1 || horizon < 1 || r < 1 {
        return Err(Error::InvalidParameter("bench needs dims >= 1 and reps >= 1".into()));
    }
    let cal = CalendarModel::default();
    let start = NaiveDate::from_ymd_opt(2025, 1, 6).unwrap().and_hms_opt(11, 0, 0).unwrap();
    let mut entries = Vec::new();
    for &k in ks {
        if k < 1 {
            return Err(Error::InvalidParameter("bench needs k >= 1".into()));
        }
        let manifest = EvalManifest {
            seed: 7,
            k,
            days: 1,
            r,
            lambda_s: 0.9,
            lambda_r: 0.9,
            tau: 0.0,
            delay: 0,
            warm_start: true,
            sigma_scale: 1.0,
            coupling: 0.05,
            noise_corr: 0.3,
            trans_noise: 0.04,
            obs_noise: 0.02,
            warmup_days: 0,
            prediction_hour: 11,
            horizon,
        };
        let truth = make_true_bank(&manifest)?;
        let series = synthesize_hmm(&truth, start, horizon, manifest.seed, &cal)?;
        let slice = TrainingSlice {
            t: start,
            loads: series.records.iter().map(load_vec).collect(),
            features: series.features[1..].to_vec(),
        };
        let s_t = load_vec(&series.records[0]);
        let feats = &series.features[1..];

        let mut learn_times = Vec::with_capacity(reps);
        let mut predict_times = Vec::with_capacity(reps);
        let mut bank = warm_start_bank(&truth);
        for _ in 0..reps {
            let t0 = Instant::now();
            learning_step(&mut bank, &slice, &cal, UpdateOrder::PreUpdateP)?;
            learn_times.push(t0.elapsed().as_secs_f64() * 1e3);
            let t1 = Instant::now();
            let fc = prediction_step(&bank, &s_t, feats, start, &cal)?;
            predict_times.push(t1.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(&fc);
        }
        entries.push(BenchEntry {
            k,
            reps,
            learn_median_ms: median(&mut learn_times),
            predict_median_ms: median(&mut predict_times),
        });
    }
    let mut exponents = Vec::new();
    for w in entries.windows(2) {
        let dim_ratio = w[1].k as f64 / w[0].k as f64;
        let time_ratio = w[1].learn_median_ms / w[0].learn_median_ms;
        exponents.push(time_ratio.log2() / dim_ratio.log2());
    }
    Ok(BenchReport { horizon, r, entries, learn_scaling_exponents: exponents })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
