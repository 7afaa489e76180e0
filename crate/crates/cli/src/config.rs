//! Flat JSON run configuration.
//!
//! A run document is a single JSON object whose keys are the union of the
//! model keys, the training keys and a few run-level keys. Keys are routed
//! to their owner by name; anything unrecognized is rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use pvseg_core::{ModelConfig, TrainConfig};

use crate::CliError;

/// Version of the run-configuration schema.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunKeys {
    config_version: u32,
    manifest: Option<PathBuf>,
    out_dir: PathBuf,
}

impl Default for RunKeys {
    fn default() -> Self {
        RunKeys {
            config_version: CONFIG_VERSION,
            manifest: None,
            out_dir: PathBuf::from("runs/train"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub config_version: u32,
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let run = RunKeys::default();
        RunConfig {
            config_version: run.config_version,
            manifest: run.manifest,
            out_dir: run.out_dir,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn keys_of<T: Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m.into_iter().map(|(k, _)| k).collect(),
        _ => unreachable!("configuration sections serialize as objects"),
    }
}

fn section<T: for<'de> Deserialize<'de>>(name: &str, map: Map<String, Value>) -> Result<T, CliError> {
    serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Usage(format!("{name} configuration: {e}")))
}

impl RunConfig {
    /// Builds a configuration from a flat key map, starting from defaults.
    pub fn from_map(map: Map<String, Value>) -> Result<Self, CliError> {
        let model_keys = keys_of(&ModelConfig::default());
        let train_keys = keys_of(&TrainConfig::default());
        let run_keys = keys_of(&RunKeys::default());
        let (mut model, mut train, mut run) = (Map::new(), Map::new(), Map::new());
        for (k, v) in map {
            if model_keys.contains(&k) {
                model.insert(k, v);
            } else if train_keys.contains(&k) {
                train.insert(k, v);
            } else if run_keys.contains(&k) {
                run.insert(k, v);
            } else {
                return Err(CliError::Usage(format!("unknown configuration key `{k}`")));
            }
        }
        let run: RunKeys = section("run", run)?;
        if run.config_version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "configuration version {} is not supported (expected {CONFIG_VERSION})",
                run.config_version
            )));
        }
        let cfg = RunConfig {
            config_version: run.config_version,
            manifest: run.manifest,
            out_dir: run.out_dir,
            model: section("model", model)?,
            train: section("training", train)?,
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Reads a configuration file as a flat key map (not yet validated).
    pub fn read_map(path: &Path) -> Result<Map<String, Value>, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(m)) => Ok(m),
            Ok(_) => Err(CliError::Usage(format!("{}: configuration must be a JSON object", path.display()))),
            Err(e) => Err(CliError::Usage(format!("{}: {e}", path.display()))),
        }
    }

    /// The fully resolved document, every key present.
    pub fn to_map(&self) -> Map<String, Value> {
        let mut out = Map::new();
        let run = RunKeys {
            config_version: self.config_version,
            manifest: self.manifest.clone(),
            out_dir: self.out_dir.clone(),
        };
        for v in [
            serde_json::to_value(&run),
            serde_json::to_value(&self.model),
            serde_json::to_value(&self.train),
        ] {
            if let Ok(Value::Object(m)) = v {
                out.extend(m);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&Value::Object(self.to_map())).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Parses a `key=value` override. The value is read as JSON when it
/// parses, otherwise taken as a string.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}
