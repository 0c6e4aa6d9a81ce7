//! Run configuration: a versioned TOML tree with dotted `key=value`
//! overrides, a content hash, and the `run.json` manifest written next to
//! every output.
//!
//! A config file only has to name the keys it changes; everything else keeps
//! its default. Unknown keys are rejected with their full dotted path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matching::Strategy;
use crate::toydet::TrainConfig;

/// Schema version of [`RunConfig`].
pub const CONFIG_VERSION: u32 = 1;

/// Knobs of the multi-run commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Strategies trained by `compare`.
    pub strategies: Vec<Strategy>,
    /// Values of `lambda1 = lambda2` trained by `sweep`.
    pub lambdas: Vec<f64>,
    /// Initial last-layer biases probed by `sensitivity`.
    pub biases: Vec<f64>,
    /// Iteration at which `sensitivity` compares the runs.
    pub sensitivity_iters: usize,
    /// Moving-average width of convergence traces.
    pub smoothing_width: usize,
    /// Random probe points per network in `gradcheck`.
    pub gradcheck_probes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Random, Strategy::Focal, Strategy::Ohem, Strategy::Swn],
            lambdas: vec![0.1, 0.3, 0.5, 0.7, 1.0],
            biases: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            sensitivity_iters: 500,
            smoothing_width: 50,
            gradcheck_probes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub train: TrainConfig,
    pub experiments: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            train: TrainConfig::standard_noisy(),
            experiments: ExperimentConfig::default(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Copies `src` onto `dst`, failing on keys `dst` does not have. Tables
/// merge recursively; every other value replaces the default.
fn merge(dst: &mut toml::Table, src: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = dst.get_mut(&k) else {
            return Err(cfg_err(format!("unknown config key `{path}`")));
        };
        match (slot, v) {
            (toml::Value::Table(d), toml::Value::Table(s)) => merge(d, s, &path)?,
            (toml::Value::Table(_), _) => return Err(cfg_err(format!("config key `{path}` must be a table"))),
            (slot, v) => *slot = v,
        }
    }
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value; bare words
/// that are not valid TOML become strings.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `dotted.key=value` override to a config tree.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = tree;
    for (i, p) in parents.iter().enumerate() {
        node = match node.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(cfg_err(format!("unknown config key `{}`", parts[..=i].join(".")))),
        };
    }
    match node.get_mut(*last) {
        Some(toml::Value::Table(_)) => Err(cfg_err(format!("config key `{key}` is a table, set its fields instead"))),
        Some(slot) => {
            *slot = parse_value(raw.trim());
            Ok(())
        }
        None => Err(cfg_err(format!("unknown config key `{key}`"))),
    }
}

impl RunConfig {
    fn default_tree() -> Result<toml::Table> {
        toml::Table::try_from(RunConfig::default()).map_err(|e| cfg_err(e.to_string()))
    }

    fn from_tree(tree: toml::Table) -> Result<Self> {
        let cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds a config from TOML text plus overrides, applied in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        let mut tree = Self::default_tree()?;
        merge(&mut tree, file, "")?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        Self::from_tree(tree)
    }

    /// Loads a TOML config, or the config recorded in a `run.json`
    /// manifest, then applies overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read config file {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: Manifest = serde_json::from_str(&text)
                .map_err(|e| cfg_err(format!("{}: not a run manifest: {e}", path.display())))?;
            let mut tree = Self::default_tree()?;
            let recorded = toml::Table::try_from(&m.config).map_err(|e| cfg_err(e.to_string()))?;
            merge(&mut tree, recorded, "")?;
            for o in overrides {
                apply_override(&mut tree, o)?;
            }
            return Self::from_tree(tree);
        }
        Self::from_toml_str(&text, overrides)
            .map_err(|e| cfg_err(format!("{}: {}", path.display(), e.to_string().trim_start_matches("config error: "))))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(cfg_err(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.train.validate().map_err(|e| cfg_err(e.to_string()))?;
        let x = &self.experiments;
        if x.smoothing_width == 0 || x.sensitivity_iters == 0 || x.gradcheck_probes == 0 {
            return Err(cfg_err("smoothing_width, sensitivity_iters and gradcheck_probes must be >= 1"));
        }
        if x.lambdas.iter().any(|l| !(*l >= 0.0)) || x.biases.iter().any(|b| !b.is_finite()) {
            return Err(cfg_err("lambdas must be >= 0 and biases finite"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// First 12 hex digits of [`RunConfig::hash`], used in file names.
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

/// Everything needed to rerun a command: written as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact: String,
    pub artifact_version: String,
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    /// Output files, relative to the output directory.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, outputs: Vec<String>) -> Self {
        Self {
            artifact: env!("CARGO_PKG_NAME").to_string(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            outputs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
