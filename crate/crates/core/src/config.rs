//! The TOML run configuration shared by every command.
//!
//! Values resolve in this order, later winning: built-in defaults, the
//! config file, the `PARTWARP_DATA_ROOT` environment variable (data root
//! only), then `key=value` overrides given on the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::inference::Encoding;
use crate::losses::LossWeights;
use crate::networks::NetConfig;
use crate::parts::{PartGroups, PartTable};
use crate::training::TrainConfig;

pub const DATA_ROOT_ENV: &str = "PARTWARP_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    /// Split manifest name, e.g. `train` for `root/train.txt`.
    pub split: Option<String>,
    pub part_table: Option<PartTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            steps: t.steps,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    /// Images per command (samples, part draws).
    pub n: usize,
    pub group: String,
    /// Interpolation steps.
    pub steps: usize,
    pub columns: usize,
    pub encoding: Encoding,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self { n: 8, group: "torso".into(), steps: 5, columns: 4, encoding: Encoding::Mean }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub synth: SynthSpec,
    pub net: NetConfig,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub inference: InferenceSection,
    /// Extra named part groups, overlaid on the built-in table.
    pub groups: BTreeMap<String, Vec<u8>>,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Sets a dotted `key` in `table`, creating intermediate tables.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies the environment and
    /// `overrides` (`section.key=value`), and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                set_path(&mut table, "data.root", toml::Value::String(root))?;
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.part_groups()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            steps: t.steps,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            weights: self.loss,
            net: self.net.clone(),
        }
    }

    pub fn part_groups(&self) -> Result<PartGroups> {
        PartGroups::new(self.net.parts, self.data.part_table, &self.groups)
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data.root.as_deref().ok_or_else(|| {
            Error::Config(format!("no data root: set data.root in the config, --data, or {DATA_ROOT_ENV}"))
        })
    }
}
