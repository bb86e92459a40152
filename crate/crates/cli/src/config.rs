//! Run configuration: a TOML file layered over built-in defaults, then
//! `--set section.key=value` overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use kgdialog_core::model::{Ablation, DecodingParams, ModelConfig};
use kgdialog_core::train::TrainConfig;
use kgdialog_core::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "KGDIALOG_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Minimum corpus frequency for a token to enter the vocabulary.
    pub min_freq: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { min_freq: 1 }
    }
}

/// Model shape. The vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub max_entity_ids: usize,
    pub max_triple_ids: usize,
    pub dropout: f64,
    /// Comma-separated: no-entity-emb, no-triple-emb, no-type-emb, no-kg-mask, none.
    pub ablation: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            max_positions: m.max_positions,
            max_entity_ids: m.max_entity_ids,
            max_triple_ids: m.max_triple_ids,
            dropout: m.dropout,
            ablation: "none".into(),
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            vocab_size,
            max_positions: self.max_positions,
            max_entity_ids: self.max_entity_ids,
            max_triple_ids: self.max_triple_ids,
            dropout: self.dropout,
            ablation: Ablation::parse_list(&self.ablation)?,
            ..ModelConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decoding: DecodingParams,
}


fn default_table() -> Table {
    Table::try_from(RunConfig::default()).expect("defaults serialize")
}

/// Copies `src` into `dst`, refusing keys that `dst` does not have.
fn merge(dst: &mut Table, src: Table, prefix: &str) -> Result<()> {
    for (key, value) in src {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (dst.get_mut(&key), value) {
            (None, _) => return Err(Error::Config(format!("unknown key `{path}`"))),
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &path)?,
            (Some(Value::Table(_)), _) => return Err(Error::Config(format!("`{path}` is a section"))),
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Parses the right-hand side of `--set`: a TOML value, or a bare string.
fn parse_value(text: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

fn set_dotted(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("`{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let mut nested = Table::new();
    let parts: Vec<&str> = key.split('.').collect();
    let mut value = parse_value(value.trim());
    for part in parts.iter().rev() {
        let mut t = Table::new();
        t.insert(part.to_string(), value);
        value = Value::Table(t);
    }
    if let Value::Table(t) = value {
        nested = t;
    }
    merge(table, nested, "")
}

impl RunConfig {
    /// Defaults, then `file` (if any), then each `key=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = default_table();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let user: Table = toml::from_str(&text).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            merge(&mut table, user, "").map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        }
        Self::finish(table, overrides)
    }

    /// Rebuilds a configuration from a checkpoint's echo, then applies
    /// overrides. A missing or foreign echo falls back to the defaults.
    pub fn from_echo(echo: &serde_json::Value, overrides: &[String]) -> Result<Self> {
        let mut table = default_table();
        if let Ok(Value::Table(saved)) = serde_json::from_value::<Value>(echo.clone()) {
            merge(&mut table, saved, "")?;
        }
        Self::finish(table, overrides)
    }

    fn finish(mut table: Table, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            set_dotted(&mut table, o)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        cfg.decoding.validate()?;
        Ablation::parse_list(&cfg.model.ablation)?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// The config file named by `--config`, else by the environment.
pub fn config_path(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.to_string())),
        }
    }
}

/// Every key with its default, one per line.
pub fn keys_help() -> String {
    let mut rows = Vec::new();
    flatten("", &default_table(), &mut rows);
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = format!("Configuration keys (defaults; override with --set key=value or a TOML file via --config / {CONFIG_ENV}):\n");
    for (k, v) in rows {
        let _ = writeln!(s, "  {k:<width$}  {v}");
    }
    s
}
