use serde::{Deserialize, Serialize};

use crate::engine::{AdamConfig, EngineConfig, PruneSchedule, TreebranchConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::raster::RasterConfig;

/// Every tunable parameter. Omitted keys take their defaults; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// `toy` or `remote:<host:port>`.
    pub backend: String,
    pub seed: u64,
    pub iterations: u64,
    /// Render resolution along the longer side.
    pub resolution: usize,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub treebranch: TreebranchConfig,
    pub prune: PruneSchedule,
    pub raster: RasterConfig,
}

impl Default for Config {
    fn default() -> Self {
        let engine = EngineConfig::default();
        Self {
            backend: "toy".into(),
            seed: 0,
            iterations: 200,
            resolution: engine.resolution,
            loss: engine.loss,
            adam: engine.adam,
            treebranch: engine.treebranch,
            prune: engine.prune,
            raster: engine.raster,
        }
    }
}

impl Config {
    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            loss: self.loss.clone(),
            adam: self.adam,
            treebranch: self.treebranch,
            prune: self.prune.clone(),
            raster: self.raster,
            resolution: self.resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backend != "toy" && !self.backend.starts_with("remote:") {
            return Err(Error::Schema {
                path: "backend".into(),
                detail: format!("expected `toy` or `remote:<addr>`, got `{}`", self.backend),
            });
        }
        self.engine().validate()
    }

    /// Flattened `(key, default)` pairs sorted by key, as documented.
    pub fn defaults_table() -> Vec<(String, String)> {
        let value = serde_json::to_value(Config::default()).expect("config serializes");
        let mut rows = Vec::new();
        flatten("", &value, &mut rows);
        rows
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, rows: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, rows);
            }
        }
        other => rows.push((prefix.to_owned(), other.to_string())),
    }
}

/// Parses a config from JSON (text starting with `{`) or TOML.
pub fn load_config(text: &str) -> Result<Config> {
    let cfg: Config = parse_document(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// JSON or TOML into `T`, reporting the path of the first offending key.
pub(crate) fn parse_document<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let value: serde_json::Value = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?
    } else {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        serde_json::to_value(table).map_err(|e| Error::Config(e.to_string()))?
    };
    serde_path_to_error::deserialize(value).map_err(|e| Error::Schema {
        path: match e.path().to_string() {
            p if p == "." => "<root>".into(),
            p => p,
        },
        detail: e.into_inner().to_string(),
    })
}
