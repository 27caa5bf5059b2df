//! Flat `key = value` configuration: parsing, overrides, the full training
//! key schema, and the sorted resolved-config echo.
//!
//! Files are line-oriented: blank lines and `#` comments are ignored, each
//! remaining line is `key = value` with dotted lowercase keys. Unknown keys
//! are errors (callers map them to usage-error exits), so typos never pass
//! silently. The echo of a run renders every effective key sorted, and
//! parsing that echo back reproduces the same settings.

use crate::batchvar::BatchStrategy;
use crate::densify::MetricMode;
use crate::trainer::{LossMode, TrainConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: bad value `{value}` ({msg})")]
    BadValue {
        key: String,
        value: String,
        msg: String,
    },
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Parsed key/value pairs, kept sorted by key.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<ConfigMap> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.')
            {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("bad key `{key}`"),
                });
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(ConfigMap { entries })
    }

    pub fn from_file(path: &Path) -> Result<ConfigMap> {
        ConfigMap::parse(&std::fs::read_to_string(path)?)
    }

    /// Apply an override (later writers win).
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted `key = value` lines (the resolved-config echo format).
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// A full training run as configured: the trainer config plus the run-level
/// knobs that live outside it.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub train: TrainConfig,
    /// Random gaussians to initialize with.
    pub init_gaussians: usize,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            train: TrainConfig::default(),
            init_gaussians: 100,
            checkpoint_every: 0,
        }
    }
}

fn bad(key: &str, value: &str, msg: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        msg: msg.to_string(),
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| bad(key, value, expected))
}

/// Interpret a map against the full training key schema. Defaults fill the
/// gaps; any key outside the schema is rejected.
pub fn train_settings(map: &ConfigMap) -> Result<TrainSettings> {
    let mut s = TrainSettings::default();
    for (key, value) in &map.entries {
        let (k, v) = (key.as_str(), value.as_str());
        match k {
            "iterations" => s.train.iterations = num(k, v, "a count")?,
            "seed" => s.train.seed = num(k, v, "an unsigned integer")?,
            "tile_size" => s.train.tile_size = num(k, v, "a pixel count")?,
            "max_gaussians" => s.train.max_gaussians = num(k, v, "a count")?,
            "eval_every" => s.train.eval_every = num(k, v, "a count")?,
            "holdout_every" => s.train.holdout_every = num(k, v, "a count")?,
            "init_gaussians" => s.init_gaussians = num(k, v, "a count")?,
            "checkpoint_every" => s.checkpoint_every = num(k, v, "a count")?,
            "loss.mode" => {
                s.train.loss_mode = LossMode::parse(v)
                    .ok_or_else(|| bad(k, v, "one of l1, l2, l1_dssim, l1_dssim3d"))?;
            }
            "loss.lambda" => s.train.lambda_dssim = num(k, v, "a decimal")?,
            "loss.half_width" => s.train.window.half_width = num(k, v, "a pixel count")?,
            "loss.sigma2d" => s.train.window.sigma2d = num(k, v, "a decimal")?,
            "loss.sigma3d" => s.train.window.sigma3d = num(k, v, "a decimal")?,
            "lr.mean" => s.train.lr_mean = num(k, v, "a decimal")?,
            "lr.mean_end" => s.train.lr_mean_end = num(k, v, "a decimal")?,
            "lr.log_scale" => s.train.lr_log_scale = num(k, v, "a decimal")?,
            "lr.quat" => s.train.lr_quat = num(k, v, "a decimal")?,
            "lr.opacity" => s.train.lr_opacity = num(k, v, "a decimal")?,
            "lr.color" => s.train.lr_color = num(k, v, "a decimal")?,
            "batch.strategy" => {
                s.train.batch.strategy = BatchStrategy::parse(v)
                    .ok_or_else(|| bad(k, v, "single_view or multi_view"))?;
            }
            "batch.views" => s.train.batch.views_per_batch = num(k, v, "a count")?,
            "batch.pixels" => s.train.batch.pixels_per_batch = num(k, v, "a count")?,
            "adc.metric" => {
                s.train.adc.metric_mode =
                    MetricMode::parse(v).ok_or_else(|| bad(k, v, "e_old or multi_view"))?;
            }
            "adc.grad_threshold" => s.train.adc.grad_threshold = num(k, v, "a decimal")?,
            "adc.size_threshold" => s.train.adc.size_threshold_world = num(k, v, "a decimal")?,
            "adc.split_factor" => s.train.adc.split_factor = num(k, v, "a decimal")?,
            "adc.split_count" => s.train.adc.split_count = num(k, v, "a count")?,
            "adc.prune_opacity" => s.train.adc.prune_opacity = num(k, v, "a decimal")?,
            "adc.prune_scale_max" => s.train.adc.prune_scale_max = num(k, v, "a decimal")?,
            "adc.interval" => s.train.adc.interval = num(k, v, "a count")?,
            "adc.start_iter" => s.train.adc.start_iter = num(k, v, "a count")?,
            // 0 means "never stop densifying".
            "adc.stop_iter" => {
                let stop: u64 = num(k, v, "a count (0 = never)")?;
                s.train.adc.stop_iter = if stop == 0 { u64::MAX } else { stop };
            }
            "opacity_reset.every" => s.train.opacity_reset_every = num(k, v, "a count")?,
            "opacity_reset.ceiling" => s.train.opacity_reset_ceiling = num(k, v, "a decimal")?,
            _ => return Err(ConfigError::UnknownKey(key.clone())),
        }
    }
    // One seed drives every stream; the pruning floor scales with the batch.
    s.train.batch.seed = s.train.seed;
    s.train.adc.batch_views = match s.train.batch.strategy {
        BatchStrategy::MultiView => s.train.batch.views_per_batch,
        BatchStrategy::SingleView => 1,
    };
    Ok(s)
}

/// Every schema key with its effective value, ready to echo. Parsing the
/// rendered result reproduces the same settings.
pub fn resolved_train_config(s: &TrainSettings) -> ConfigMap {
    let t = &s.train;
    let mut map = ConfigMap::default();
    let mut put = |k: &str, v: String| map.set(k, &v);
    put("iterations", t.iterations.to_string());
    put("seed", t.seed.to_string());
    put("tile_size", t.tile_size.to_string());
    put("max_gaussians", t.max_gaussians.to_string());
    put("eval_every", t.eval_every.to_string());
    put("holdout_every", t.holdout_every.to_string());
    put("init_gaussians", s.init_gaussians.to_string());
    put("checkpoint_every", s.checkpoint_every.to_string());
    put("loss.mode", t.loss_mode.name().to_string());
    put("loss.lambda", t.lambda_dssim.to_string());
    put("loss.half_width", t.window.half_width.to_string());
    put("loss.sigma2d", t.window.sigma2d.to_string());
    put("loss.sigma3d", t.window.sigma3d.to_string());
    put("lr.mean", t.lr_mean.to_string());
    put("lr.mean_end", t.lr_mean_end.to_string());
    put("lr.log_scale", t.lr_log_scale.to_string());
    put("lr.quat", t.lr_quat.to_string());
    put("lr.opacity", t.lr_opacity.to_string());
    put("lr.color", t.lr_color.to_string());
    put("batch.strategy", t.batch.strategy.name().to_string());
    put("batch.views", t.batch.views_per_batch.to_string());
    put("batch.pixels", t.batch.pixels_per_batch.to_string());
    put("adc.metric", t.adc.metric_mode.name().to_string());
    put("adc.grad_threshold", t.adc.grad_threshold.to_string());
    put("adc.size_threshold", t.adc.size_threshold_world.to_string());
    put("adc.split_factor", t.adc.split_factor.to_string());
    put("adc.split_count", t.adc.split_count.to_string());
    put("adc.prune_opacity", t.adc.prune_opacity.to_string());
    put("adc.prune_scale_max", t.adc.prune_scale_max.to_string());
    put("adc.interval", t.adc.interval.to_string());
    put("adc.start_iter", t.adc.start_iter.to_string());
    put(
        "adc.stop_iter",
        if t.adc.stop_iter == u64::MAX {
            "0".to_string()
        } else {
            t.adc.stop_iter.to_string()
        },
    );
    put("opacity_reset.every", t.opacity_reset_every.to_string());
    put("opacity_reset.ceiling", t.opacity_reset_ceiling.to_string());
    map
}
