//! Run configuration: defaults, flat `key = value` config files, and
//! command-line overrides. Unknown keys in a config file are a hard error.

use std::path::Path;

use closr_core::inference::{CentroidProxy, OodScore};
use closr_core::{Error, Result};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Clad,
    Closr,
}

/// Every tunable of the pipeline with its default. Field names double as
/// config-file keys.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub label_column: String,
    pub benign_label: String,
    pub zero_day: Vec<String>,
    pub train_fraction: f64,
    pub no_split: bool,
    pub clamp_bound: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub f_o: usize,
    pub dropout: f64,
    pub margin: f64,
    pub alpha: f64,
    pub squared: bool,
    pub temperature: f64,
    pub seed: u64,
    pub proxy: CentroidProxy,
    pub ood_score: OodScore,
    pub tau: Option<f64>,
    pub target_fpr: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Clad,
            label_column: "label".into(),
            benign_label: "benign".into(),
            zero_day: Vec::new(),
            train_fraction: 0.5,
            no_split: false,
            clamp_bound: 10.0,
            epochs: 200,
            warmup_epochs: 20,
            base_lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 128,
            d_model: 64,
            depth: 3,
            f_o: 16,
            dropout: 0.0,
            margin: 1.0,
            alpha: 0.5,
            squared: true,
            temperature: 0.1,
            seed: 0,
            proxy: CentroidProxy::Centroid,
            ood_score: OodScore::WeightedGaussian,
            tau: None,
            target_fpr: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("config key {key:?}: cannot parse value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("config key {key:?}: expected a boolean, got {value:?}"))),
    }
}

pub fn parse_proxy(value: &str) -> Result<CentroidProxy> {
    match value {
        "centroid" => Ok(CentroidProxy::Centroid),
        "median" => Ok(CentroidProxy::Median),
        "trimmed-mean" | "trimmed_mean" => Ok(CentroidProxy::TrimmedMean),
        "medoid" => Ok(CentroidProxy::Medoid),
        "neighbour" | "neighbor" => Ok(CentroidProxy::Neighbour),
        _ => Err(Error::config(format!("unknown proxy {value:?}"))),
    }
}

pub fn parse_ood_score(value: &str) -> Result<OodScore> {
    match value {
        "weighted-gaussian" | "weighted_gaussian" => Ok(OodScore::WeightedGaussian),
        "gaussian" => Ok(OodScore::Gaussian),
        "energy" => Ok(OodScore::Energy),
        _ => Err(Error::config(format!("unknown ood score {value:?}"))),
    }
}

impl RunConfig {
    /// Apply one config-file entry. Unknown keys are rejected so typos never
    /// pass silently.
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => {
                self.mode = match value {
                    "clad" => Mode::Clad,
                    "closr" => Mode::Closr,
                    _ => return Err(Error::config(format!("unknown mode {value:?}"))),
                }
            }
            "label_column" => self.label_column = value.to_string(),
            "benign_label" => self.benign_label = value.to_string(),
            "zero_day" => {
                self.zero_day = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "train_fraction" => self.train_fraction = parse_value(key, value)?,
            "no_split" => self.no_split = parse_bool(key, value)?,
            "clamp_bound" => self.clamp_bound = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "base_lr" => self.base_lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "depth" => self.depth = parse_value(key, value)?,
            "f_o" => self.f_o = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "margin" => self.margin = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "squared" => self.squared = parse_bool(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "proxy" => self.proxy = parse_proxy(value)?,
            "ood_score" => self.ood_score = parse_ood_score(value)?,
            "tau" => self.tau = Some(parse_value(key, value)?),
            "target_fpr" => self.target_fpr = Some(parse_value(key, value)?),
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Load overrides from a flat `key = value` file with `#` comments.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "config line {} is not `key = value`: {raw:?}",
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
