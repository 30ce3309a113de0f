//! Run configuration: one nested TOML document covering dataset paths, model
//! widths, the bridge schedule, training, inference, and evaluation settings.
//!
//! Environment variables override file values before validation: `FGSB_` is
//! the prefix and `__` separates nesting levels, so `FGSB_TRAIN__EPOCHS=10`
//! sets `train.epochs`. Values parse as TOML literals (integers, floats,
//! booleans, arrays) and fall back to strings. Unknown keys are rejected with
//! the offending path. The fully resolved config serializes to canonical JSON
//! (sorted keys) whose SHA-256 digest identifies the run.

use crate::bridge::BridgeConfig;
use crate::inference::InferenceConfig;
use crate::models::ModelConfig;
use crate::phantom::LESION_THRESHOLD;
use crate::trainer::TrainConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Environment-variable prefix for overrides.
pub const ENV_PREFIX: &str = "FGSB_";

/// Nesting separator inside override names.
pub const ENV_SEPARATOR: &str = "__";

/// Dataset and output locations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest path.
    pub manifest: PathBuf,
    /// Run directory for checkpoints, metrics, and reports.
    pub out_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: PathBuf::from("data/manifest.jsonl"), out_dir: PathBuf::from("runs/run") }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Intensity threshold (model range) that defines lesion masks.
    pub mask_threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { mask_threshold: LESION_THRESHOLD }
    }
}

/// The complete, validated run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub bridge: BridgeConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.bridge.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        if !self.eval.mask_threshold.is_finite()
            || !(-1.0..=1.0).contains(&self.eval.mask_threshold)
        {
            return Err(Error::Config(format!(
                "eval.mask_threshold {} outside the model intensity range [-1, 1]",
                self.eval.mask_threshold
            )));
        }
        if self.data.manifest.as_os_str().is_empty() || self.data.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("data.manifest and data.out_dir must be nonempty".into()));
        }
        Ok(())
    }
}

/// Collect `FGSB_*` overrides from the process environment.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut vars: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len())
        .collect();
    vars.sort();
    vars
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Reuse the TOML literal grammar; anything unparseable is a string.
    let probe = format!("v = {raw}");
    if let Ok(table) = probe.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Table, name: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = name[ENV_PREFIX.len()..]
        .split(ENV_SEPARATOR)
        .map(str::to_lowercase)
        .collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("malformed override name {name}")));
    }
    let mut table = root;
    for key in &path[..path.len() - 1] {
        let entry = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override {name} descends into non-table key `{key}`"))
        })?;
    }
    table.insert(path[path.len() - 1].clone(), parse_override_value(raw));
    Ok(())
}

/// Parse a TOML document, apply overrides, and validate.
pub fn parse_run_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    for (name, value) in overrides {
        apply_override(&mut table, name, value)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("config field error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a run config from disk with process-environment overrides applied.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text, &env_overrides())
}

/// The resolved config as a JSON value (all defaults expanded).
pub fn resolved_json(cfg: &RunConfig) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| Error::Config(format!("config serialization: {e}")))
}

/// SHA-256 over the canonical (sorted-key) JSON serialization.
pub fn config_digest(json: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(json).expect("json serialization");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
