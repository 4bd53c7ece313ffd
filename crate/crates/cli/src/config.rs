//! Flat key=value run configuration with file + flag-override merging.
//!
//! Files are UTF-8 lines of `key=value`; `#` starts a comment. Command-line
//! overrides use the same `key=value` form and win over file values. Unknown
//! keys are rejected. The effective merged configuration is always written
//! next to a run's outputs and reloads to an identical configuration.

use pdanet::error::{Error, Result};
use pdanet::head::HeadMode;
use pdanet::train::{LossKind, OptimConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Compute precision of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn token(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "unknown precision '{other}' (expected f32 or f64)"
            ))),
        }
    }
}

/// Dichotomization point: a fixed value, or the median of the training
/// labels resolved when data is available.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSpec {
    Value(f64),
    Median,
}

impl ThresholdSpec {
    fn token(&self) -> String {
        match self {
            ThresholdSpec::Value(v) => format!("{v}"),
            ThresholdSpec::Median => "median".to_string(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        if s == "median" {
            return Ok(ThresholdSpec::Median);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("pcr_threshold '{s}' is not a number")))?;
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Config(format!(
                "pcr_threshold must lie in (0, 1), got {v}"
            )));
        }
        Ok(ThresholdSpec::Value(v))
    }
}

/// Where samples come from; exactly one source must be configured.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Manifest(PathBuf),
    Synth {
        count: usize,
        seed: u64,
        image_size: usize,
    },
    FeatureDir(PathBuf),
}

/// Fully merged run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: HeadMode,
    pub loss: LossKind,
    pub pcr_lambda: f64,
    pub pcr_threshold: ThresholdSpec,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub drop_factor: f64,
    pub drop_at_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub split_seed: u64,
    pub data: DataSource,
    pub out_dir: Option<PathBuf>,
    pub precision: Precision,
    pub lambda_grid: Vec<f64>,
    pub resume: Option<PathBuf>,
}

const KNOWN_KEYS: &[&str] = &[
    "mode",
    "loss",
    "pcr_lambda",
    "pcr_threshold",
    "lr_backbone",
    "lr_head",
    "momentum",
    "weight_decay",
    "epochs",
    "drop_factor",
    "drop_at_epoch",
    "batch_size",
    "seed",
    "split_train",
    "split_val",
    "split_test",
    "split_seed",
    "manifest",
    "synth_count",
    "synth_seed",
    "image_size",
    "feature_dir",
    "out_dir",
    "precision",
    "lambda_grid",
    "resume",
];

fn parse_kv_line(line: &str, line_no: usize) -> Result<Option<(String, String)>> {
    let without_comment = match line.find('#') {
        Some(idx) => &line[..idx],
        None => line,
    };
    let trimmed = without_comment.trim();
    if trimmed.is_empty() {
        return Ok(None);
    }
    let (key, value) = trimmed.split_once('=').ok_or_else(|| {
        Error::Config(format!("line {line_no}: expected key=value, got '{trimmed}'"))
    })?;
    Ok(Some((key.trim().to_string(), value.trim().to_string())))
}

fn collect_pairs(
    file_text: Option<&str>,
    overrides: &[String],
) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    if let Some(text) = file_text {
        for (i, line) in text.lines().enumerate() {
            if let Some((k, v)) = parse_kv_line(line, i + 1)? {
                map.insert(k, v);
            }
        }
    }
    for item in overrides {
        let (k, v) = item.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{item}' is not of the form key=value"))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    for key in map.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown configuration key '{key}'")));
        }
    }
    Ok(map)
}

fn get_f64(map: &BTreeMap<String, String>, key: &str, default: f64) -> Result<f64> {
    match map.get(key) {
        None => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|_| Error::Config(format!("{key} '{s}' is not a number"))),
    }
}

fn get_usize(map: &BTreeMap<String, String>, key: &str, default: usize) -> Result<usize> {
    match map.get(key) {
        None => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|_| Error::Config(format!("{key} '{s}' is not a non-negative integer"))),
    }
}

fn get_u64(map: &BTreeMap<String, String>, key: &str, default: u64) -> Result<u64> {
    match map.get(key) {
        None => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|_| Error::Config(format!("{key} '{s}' is not a non-negative integer"))),
    }
}

impl RunConfig {
    /// Merge an optional config file with command-line overrides.
    pub fn load(config_path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let file_text = match config_path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config file {}: {e}", p.display()))
            })?),
            None => None,
        };
        Self::from_pairs(collect_pairs(file_text.as_deref(), overrides)?)
    }

    fn from_pairs(map: BTreeMap<String, String>) -> Result<RunConfig> {
        let mode = match map.get("mode") {
            Some(s) => HeadMode::parse(s)?,
            None => HeadMode::Coupled,
        };
        let loss = match map.get("loss") {
            Some(s) => LossKind::parse(s)?,
            None => LossKind::Mse,
        };
        let pcr_threshold = match map.get("pcr_threshold") {
            Some(s) => ThresholdSpec::parse(s)?,
            None => ThresholdSpec::Value(0.5),
        };
        let precision = match map.get("precision") {
            Some(s) => Precision::parse(s)?,
            None => Precision::F64,
        };
        let epochs = get_usize(&map, "epochs", 200)?;
        // by default the rate drop covers the final quarter of the schedule
        let drop_at_epoch = get_usize(&map, "drop_at_epoch", epochs - epochs / 4)?;
        let seed = get_u64(&map, "seed", 42)?;

        let lambda_grid = match map.get("lambda_grid") {
            None => vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0],
            Some(s) => {
                let mut grid = Vec::new();
                for tok in s.split(',') {
                    let v: f64 = tok.trim().parse().map_err(|_| {
                        Error::Config(format!("lambda_grid entry '{}' is not a number", tok.trim()))
                    })?;
                    grid.push(v);
                }
                if grid.is_empty() {
                    return Err(Error::Config("lambda_grid is empty".into()));
                }
                grid
            }
        };

        let manifest = map.get("manifest").map(PathBuf::from);
        let feature_dir = map.get("feature_dir").map(PathBuf::from);
        let synth_count = match map.get("synth_count") {
            Some(s) => Some(s.parse::<usize>().map_err(|_| {
                Error::Config(format!("synth_count '{s}' is not a non-negative integer"))
            })?),
            None => None,
        };
        let sources = manifest.is_some() as u8
            + feature_dir.is_some() as u8
            + synth_count.is_some() as u8;
        if sources != 1 {
            return Err(Error::Config(
                "exactly one data source required: manifest=..., synth_count=..., or feature_dir=..."
                    .into(),
            ));
        }
        let data = if let Some(m) = manifest {
            DataSource::Manifest(m)
        } else if let Some(d) = feature_dir {
            DataSource::FeatureDir(d)
        } else {
            DataSource::Synth {
                count: synth_count.unwrap(),
                seed: get_u64(&map, "synth_seed", seed)?,
                image_size: get_usize(&map, "image_size", 64)?,
            }
        };

        let cfg = RunConfig {
            mode,
            loss,
            pcr_lambda: get_f64(&map, "pcr_lambda", 1.0)?,
            pcr_threshold,
            lr_backbone: get_f64(&map, "lr_backbone", 0.001)?,
            lr_head: get_f64(&map, "lr_head", 0.01)?,
            momentum: get_f64(&map, "momentum", 0.9)?,
            weight_decay: get_f64(&map, "weight_decay", 0.0005)?,
            epochs,
            drop_factor: get_f64(&map, "drop_factor", 10.0)?,
            drop_at_epoch,
            batch_size: get_usize(&map, "batch_size", 8)?,
            seed,
            split_train: get_f64(&map, "split_train", 0.7)?,
            split_val: get_f64(&map, "split_val", 0.1)?,
            split_test: get_f64(&map, "split_test", 0.2)?,
            split_seed: get_u64(&map, "split_seed", seed)?,
            data,
            out_dir: map.get("out_dir").map(PathBuf::from),
            precision,
            lambda_grid,
            resume: map.get("resume").map(PathBuf::from),
        };
        cfg.optim()?; // surface optimizer-field errors at load time
        if cfg.pcr_lambda < 0.0 || !cfg.pcr_lambda.is_finite() {
            return Err(Error::Config(format!(
                "pcr_lambda must be non-negative, got {}",
                cfg.pcr_lambda
            )));
        }
        Ok(cfg)
    }

    /// Check that every referenced path exists.
    pub fn validate_paths(&self) -> Result<()> {
        let mut required: Vec<&PathBuf> = Vec::new();
        match &self.data {
            DataSource::Manifest(p) | DataSource::FeatureDir(p) => required.push(p),
            DataSource::Synth { .. } => {}
        }
        if let Some(r) = &self.resume {
            required.push(r);
        }
        for p in required {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "referenced path does not exist: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn optim(&self) -> Result<OptimConfig> {
        let cfg = OptimConfig {
            lr_backbone: self.lr_backbone,
            lr_head: self.lr_head,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            drop_factor: self.drop_factor,
            drop_at_epoch: self.drop_at_epoch,
            batch_size: self.batch_size,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize every effective key; reloading the result reproduces this
    /// configuration exactly.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("mode", self.mode.token().to_string());
        push("loss", self.loss.token().to_string());
        push("pcr_lambda", format!("{}", self.pcr_lambda));
        push("pcr_threshold", self.pcr_threshold.token());
        push("lr_backbone", format!("{}", self.lr_backbone));
        push("lr_head", format!("{}", self.lr_head));
        push("momentum", format!("{}", self.momentum));
        push("weight_decay", format!("{}", self.weight_decay));
        push("epochs", format!("{}", self.epochs));
        push("drop_factor", format!("{}", self.drop_factor));
        push("drop_at_epoch", format!("{}", self.drop_at_epoch));
        push("batch_size", format!("{}", self.batch_size));
        push("seed", format!("{}", self.seed));
        push("split_train", format!("{}", self.split_train));
        push("split_val", format!("{}", self.split_val));
        push("split_test", format!("{}", self.split_test));
        push("split_seed", format!("{}", self.split_seed));
        match &self.data {
            DataSource::Manifest(p) => push("manifest", p.display().to_string()),
            DataSource::FeatureDir(p) => push("feature_dir", p.display().to_string()),
            DataSource::Synth {
                count,
                seed,
                image_size,
            } => {
                push("synth_count", format!("{count}"));
                push("synth_seed", format!("{seed}"));
                push("image_size", format!("{image_size}"));
            }
        }
        if let Some(p) = &self.out_dir {
            push("out_dir", p.display().to_string());
        }
        push("precision", self.precision.token().to_string());
        let grid: Vec<String> = self.lambda_grid.iter().map(|v| format!("{v}")).collect();
        push("lambda_grid", grid.join(","));
        if let Some(p) = &self.resume {
            push("resume", p.display().to_string());
        }
        out
    }
}
