//! Flat `key = value` run configuration with defaults, validation and a
//! stable hash for output provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::FeatureKind;
use crate::error::{Error, Result};
use crate::learner::UpdateOrder;

/// Whether daily learning consumes exactly the previously predicted
/// window or every hour that has become available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LearnScope {
    #[default]
    PredictedSlice,
    AllHours,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: PathBuf,
    pub output_dir: PathBuf,
    pub k: usize,
    pub r: usize,
    pub feature_kind: FeatureKind,
    pub calendar_types: usize,
    pub horizon: usize,
    pub prediction_hour: u32,
    pub lambda_s: f64,
    pub lambda_r: f64,
    pub tau: f64,
    pub delay: usize,
    pub warmup_days: usize,
    pub holiday_file: Option<PathBuf>,
    pub snapshot_out: Option<PathBuf>,
    pub entities_subset: Option<Vec<usize>>,
    pub learn_scope: LearnScope,
    pub update_order: UpdateOrder,
    pub weather_smoothing: f64,
    pub seed: u64,
}

impl RunConfig {
    /// Parses the file and applies `overrides` (same key names) on top.
    pub fn load(path: &Path, overrides: &BTreeMap<String, String>) -> Result<RunConfig> {
        let mut map = parse_kv_file(path)?;
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        RunConfig::from_map(&map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<RunConfig> {
        let known = [
            "data", "output_dir", "k", "r", "feature_kind", "calendar_types", "horizon",
            "prediction_hour", "lambda_s", "lambda_r", "tau", "delay", "warmup_days",
            "holiday_file", "snapshot_out", "entities_subset", "learn_scope", "update_order",
            "weather_smoothing", "seed",
        ];
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
        }
        let get = |key: &str| map.get(key).map(String::as_str);
        let require = |key: &str| {
            get(key).ok_or_else(|| Error::Config(format!("missing required config key '{key}'")))
        };

        let cfg = RunConfig {
            data: PathBuf::from(require("data")?),
            output_dir: PathBuf::from(require("output_dir")?),
            k: parse(map, "k", None)?,
            r: parse(map, "r", Some(3))?,
            feature_kind: match get("feature_kind").unwrap_or("temperature-shift") {
                "identity" => FeatureKind::Identity,
                "temperature-shift" => FeatureKind::TemperatureShift,
                other => return Err(Error::Config(format!("unknown feature_kind '{other}'"))),
            },
            calendar_types: parse(map, "calendar_types", Some(48))?,
            horizon: parse(map, "horizon", Some(24))?,
            prediction_hour: parse(map, "prediction_hour", Some(11))?,
            lambda_s: parse(map, "lambda_s", Some(0.9))?,
            lambda_r: parse(map, "lambda_r", Some(0.9))?,
            tau: parse(map, "tau", Some(0.1))?,
            delay: parse(map, "delay", Some(0))?,
            warmup_days: parse(map, "warmup_days", Some(30))?,
            holiday_file: get("holiday_file").map(PathBuf::from),
            snapshot_out: get("snapshot_out").map(PathBuf::from),
            entities_subset: match get("entities_subset") {
                None | Some("") => None,
                Some(list) => Some(
                    list.split(',')
                        .map(|tok| {
                            tok.trim().parse::<usize>().map_err(|_| {
                                Error::Config(format!("bad entities_subset entry '{tok}'"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
            },
            learn_scope: match get("learn_scope").unwrap_or("predicted-slice") {
                "predicted-slice" => LearnScope::PredictedSlice,
                "all-hours" => LearnScope::AllHours,
                other => return Err(Error::Config(format!("unknown learn_scope '{other}'"))),
            },
            update_order: match get("update_order").unwrap_or("pre") {
                "pre" => UpdateOrder::PreUpdateP,
                "post" => UpdateOrder::PostUpdateP,
                other => return Err(Error::Config(format!("unknown update_order '{other}'"))),
            },
            weather_smoothing: parse(map, "weather_smoothing", Some(0.95))?,
            seed: parse(map, "seed", Some(0))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k < 1 || self.r < 1 || self.calendar_types < 1 {
            return bad(format!("k, r, calendar_types must be >= 1 (got {}, {}, {})", self.k, self.r, self.calendar_types));
        }
        if self.horizon < 1 {
            return bad("horizon must be >= 1".into());
        }
        if self.prediction_hour > 23 {
            return bad(format!("prediction_hour {} out of 0..=23", self.prediction_hour));
        }
        for (name, l) in [("lambda_s", self.lambda_s), ("lambda_r", self.lambda_r)] {
            if !(l > 0.0 && l < 1.0) {
                return bad(format!("{name} {l} out of (0,1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} out of [0,1]", self.tau));
        }
        if self.delay > 23 {
            return bad(format!("delay {} out of 0..=23", self.delay));
        }
        if !(0.0..1.0).contains(&self.weather_smoothing) {
            return bad(format!("weather_smoothing {} out of [0,1)", self.weather_smoothing));
        }
        if let Some(subset) = &self.entities_subset {
            if subset.is_empty() || subset.iter().any(|&e| e < 1) {
                return bad("entities_subset must list 1-based entity indices".into());
            }
            let mut sorted = subset.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != subset.len() {
                return bad("entities_subset has duplicates".into());
            }
        }
        Ok(())
    }

    /// Canonical one-line-per-key rendering; input to the config hash.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| s.push_str(&format!("{k}={v}\n"));
        push("data", self.data.display().to_string());
        push("output_dir", self.output_dir.display().to_string());
        push("k", self.k.to_string());
        push("r", self.r.to_string());
        push(
            "feature_kind",
            match self.feature_kind {
                FeatureKind::Identity => "identity".into(),
                FeatureKind::TemperatureShift => "temperature-shift".into(),
            },
        );
        push("calendar_types", self.calendar_types.to_string());
        push("horizon", self.horizon.to_string());
        push("prediction_hour", self.prediction_hour.to_string());
        push("lambda_s", format!("{}", self.lambda_s));
        push("lambda_r", format!("{}", self.lambda_r));
        push("tau", format!("{}", self.tau));
        push("delay", self.delay.to_string());
        push("warmup_days", self.warmup_days.to_string());
        push("holiday_file", self.holiday_file.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        push("snapshot_out", self.snapshot_out.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        push(
            "entities_subset",
            self.entities_subset
                .as_ref()
                .map(|v| v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","))
                .unwrap_or_default(),
        );
        push(
            "learn_scope",
            match self.learn_scope {
                LearnScope::PredictedSlice => "predicted-slice".into(),
                LearnScope::AllHours => "all-hours".into(),
            },
        );
        push(
            "update_order",
            match self.update_order {
                UpdateOrder::PreUpdateP => "pre".into(),
                UpdateOrder::PostUpdateP => "post".into(),
            },
        );
        push("weather_smoothing", format!("{}", self.weather_smoothing));
        push("seed", self.seed.to_string());
        s
    }

    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical_string().as_bytes()))
    }
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: Option<T>) -> Result<T> {
    match map.get(key) {
        Some(v) => v
            .parse::<T>()
            .map_err(|_| Error::Config(format!("bad value '{v}' for config key '{key}'"))),
        None => default.ok_or_else(|| Error::Config(format!("missing required config key '{key}'"))),
    }
}

/// `key = value` lines; blank lines and `#` comments ignored.
pub fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {path:?}: {e}")))?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("{path:?} line {}: expected key=value, got '{raw}'", i + 1)));
        };
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("{path:?} line {}: duplicate key '{}'", i + 1, k.trim())));
        }
    }
    Ok(map)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_cfg(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_fill_in() {
        let f = write_cfg("data = in.csv\noutput_dir = out\nk = 2\n");
        let cfg = RunConfig::load(f.path(), &BTreeMap::new()).unwrap();
        assert_eq!(cfg.horizon, 24);
        assert_eq!(cfg.prediction_hour, 11);
        assert_eq!(cfg.lambda_s, 0.9);
        assert_eq!(cfg.lambda_r, 0.9);
        assert_eq!(cfg.tau, 0.1);
        assert_eq!(cfg.delay, 0);
        assert_eq!(cfg.warmup_days, 30);
        assert_eq!(cfg.r, 3);
        assert_eq!(cfg.feature_kind, FeatureKind::TemperatureShift);
        assert_eq!(cfg.calendar_types, 48);
    }

    #[test]
    fn overrides_win() {
        let f = write_cfg("data = in.csv\noutput_dir = out\nk = 2\ntau = 0.2\n");
        let mut ov = BTreeMap::new();
        ov.insert("tau".to_string(), "0.05".to_string());
        ov.insert("delay".to_string(), "12".to_string());
        let cfg = RunConfig::load(f.path(), &ov).unwrap();
        assert_eq!(cfg.tau, 0.05);
        assert_eq!(cfg.delay, 12);
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let f = write_cfg("data = in.csv\noutput_dir = out\nk = 2\nbogus = 1\n");
        assert!(RunConfig::load(f.path(), &BTreeMap::new()).is_err());
        let f = write_cfg("data = in.csv\noutput_dir = out\nk = 2\nlambda_s = 1.5\n");
        assert!(RunConfig::load(f.path(), &BTreeMap::new()).is_err());
        let f = write_cfg("data = in.csv\noutput_dir = out\nk = 2\ndelay = 24\n");
        assert!(RunConfig::load(f.path(), &BTreeMap::new()).is_err());
        let f = write_cfg("data = in.csv\noutput_dir = out\n");
        assert!(RunConfig::load(f.path(), &BTreeMap::new()).is_err());
    }

    #[test]
    fn subset_parsing() {
        let f = write_cfg("data = in.csv\noutput_dir = out\nk = 8\nentities_subset = 1, 3\n");
        let cfg = RunConfig::load(f.path(), &BTreeMap::new()).unwrap();
        assert_eq!(cfg.entities_subset, Some(vec![1, 3]));
        let f = write_cfg("data = in.csv\noutput_dir = out\nk = 8\nentities_subset = 1,1\n");
        assert!(RunConfig::load(f.path(), &BTreeMap::new()).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let f = write_cfg("data = in.csv\noutput_dir = out\nk = 2\n");
        let a = RunConfig::load(f.path(), &BTreeMap::new()).unwrap();
        let b = RunConfig::load(f.path(), &BTreeMap::new()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut ov = BTreeMap::new();
        ov.insert("tau".to_string(), "0.2".to_string());
        let c = RunConfig::load(f.path(), &ov).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn comments_and_duplicates() {
        let f = write_cfg("# comment\ndata = in.csv\n\noutput_dir = out\nk = 2\n");
        assert!(RunConfig::load(f.path(), &BTreeMap::new()).is_ok());
        let f = write_cfg("data = a\ndata = b\noutput_dir = out\nk = 2\n");
        assert!(RunConfig::load(f.path(), &BTreeMap::new()).is_err());
    }
}
