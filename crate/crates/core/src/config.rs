//! Training configuration: TOML or JSON files plus `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::MaskMode;
use crate::error::{Error, Result};

fn one() -> f64 {
    1.0
}
fn default_mask_rate() -> f64 {
    0.3
}
fn default_pretrain() -> usize {
    200
}
fn default_refresh() -> usize {
    1
}
fn default_medoid_iters() -> usize {
    50
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden_gcn: usize,
    pub gcn_layers: usize,
    pub tau: f64,
    #[serde(rename = "N_neg")]
    pub n_neg: usize,
    /// Epochs between medoid sampling rounds.
    pub t: usize,
    /// Hidden width of the prediction head.
    pub d: usize,
    pub gamma_st: f64,
    #[serde(default = "one")]
    pub gamma_clus: f64,
    pub gamma_al: f64,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default)]
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pretrain")]
    pub pretrain_epochs: usize,
    /// Epochs between target distribution refreshes.
    #[serde(default = "default_refresh")]
    pub target_refresh: usize,
    #[serde(default = "yes")]
    pub normalize_similarity: bool,
    #[serde(default)]
    pub symmetric_contrast: bool,
    #[serde(default = "yes")]
    pub align_updates_centers: bool,
    #[serde(default = "default_medoid_iters")]
    pub medoid_max_iter: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("tau", self.tau),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        let counts = [
            ("hidden_gcn", self.hidden_gcn),
            ("gcn_layers", self.gcn_layers),
            ("t", self.t),
            ("d", self.d),
            ("target_refresh", self.target_refresh),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be at least 1")));
            }
        }
        let weights = [
            ("gamma_st", self.gamma_st),
            ("gamma_clus", self.gamma_clus),
            ("gamma_al", self.gamma_al),
        ];
        for (key, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask_rate must lie in [0, 1), got {}", self.mask_rate)));
        }
        Ok(())
    }

    /// Parses TOML text, applies overrides, then validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Self::from_table(table, overrides)
    }

    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let table = match toml::Value::try_from(value) {
            Ok(toml::Value::Table(t)) => t,
            Ok(_) => return Err(Error::Config("config must be a JSON object".into())),
            Err(e) => return Err(Error::Config(e.to_string())),
        };
        Self::from_table(table, overrides)
    }

    /// Reads `.json` files as JSON and anything else as TOML.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            Self::from_json_str(&text, overrides)
        } else {
            Self::from_toml_str(&text, overrides)
        }
    }

    fn from_table(mut table: toml::Table, overrides: &[String]) -> Result<Self> {
        for item in overrides {
            let (key, value) = parse_override(item)?;
            table.insert(key, value);
        }
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let config: TrainConfig = toml::from_str(&text).map_err(|e| describe(&e, &text))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Turns a deserialization failure into a message that names the key.
fn describe(e: &toml::de::Error, text: &str) -> Error {
    let key = e
        .span()
        .and_then(|span| text[..span.start].rsplit('\n').next())
        .and_then(|line| line.split('=').next())
        .map(|k| k.trim().trim_matches('"').to_string())
        .filter(|k| !k.is_empty());
    match key {
        Some(k) if !e.message().contains(&k) => Error::Config(format!("{k}: {}", e.message())),
        _ => Error::Config(e.message().to_string()),
    }
}

/// Splits `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {item:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}
