//! Experiment configuration: a TOML file plus `section.key=value` overrides,
//! resolved against defaults. The config hash is the SHA-256 of the resolved
//! configuration serialized as JSON with sorted keys.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DomainPairSpec;
use crate::error::{Error, Result};
use crate::eval::TTestKind;
use crate::model::ModelConfig;
use crate::trainer::{Method, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Pretraining seeds; few-shot runs cross these with every split.
    pub seeds: Vec<u64>,
    pub splits: usize,
    /// Seed for few-shot split sampling.
    pub split_seed: u64,
    /// Trailing fraction of the source set held out for model selection.
    pub source_val_fraction: f64,
    pub reference: Method,
    pub ttest: TTestKind,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            splits: crate::data::FEWSHOT_SAMPLES,
            split_seed: 1,
            source_val_fraction: 0.2,
            reference: Method::Pt,
            ttest: TTestKind::Welch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    pub grid: usize,
    pub extent: f64,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self { grid: 200, extent: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DomainPairSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fewshot: TrainConfig,
    pub protocol: ProtocolConfig,
    pub plot: PlotConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DomainPairSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fewshot: TrainConfig::fewshot(),
            protocol: ProtocolConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

fn parse_override(item: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{item}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::config(format!("override key `{key}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for seg in parents {
        let entry = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{seg}` is not a section")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Merge `file` (if any) and overrides over the defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (path, value) = parse_override(item)?;
            set_path(&mut table, &path, value)?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(|e| Error::config(format!("data: {e}")))?;
        self.model.validate()?;
        self.train.validate()?;
        self.fewshot.validate()?;
        let p = &self.protocol;
        if p.seeds.is_empty() || p.splits == 0 {
            return Err(Error::config("protocol needs at least one seed and one split"));
        }
        if !(0.0..1.0).contains(&p.source_val_fraction) || p.source_val_fraction == 0.0 {
            return Err(Error::config("source_val_fraction must be in (0, 1)"));
        }
        if self.plot.grid < 2 || !(self.plot.extent > 0.0) {
            return Err(Error::config("plot grid must be >= 2 and extent positive"));
        }
        Ok(())
    }

    /// Resolved configuration as JSON with sorted keys.
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}
