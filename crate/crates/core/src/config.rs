//! Flat key/value run configuration.
//!
//! Resolution order: built-in defaults, then `preset`, then keys from the
//! config file, then explicit overrides. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{Hyperparams, Preset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub ks: Vec<usize>,
    pub threads: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub hyper: Hyperparams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            ks: vec![10, 20],
            threads: 1,
            data: None,
            out: None,
            hyper: Hyperparams::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    /// Parses TOML text over the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(config_err)?;
        Self::default().overlay(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::resolve(Some(path), None)
    }

    /// Defaults, then a preset (`preset` wins over the file's own
    /// `preset` key), then the file's keys.
    pub fn resolve(path: Option<&Path>, preset: Option<Preset>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(config_err)?
            }
            None => toml::Table::new(),
        };
        if let Some(p) = preset {
            table.insert("preset".into(), toml::Value::try_from(p).map_err(config_err)?);
        }
        Self::default().overlay(table)
    }

    /// Applies `table` on top of `self`; a `preset` key is applied before
    /// every other key.
    pub fn overlay(mut self, mut table: toml::Table) -> Result<Self> {
        if let Some(v) = table.remove("preset") {
            let name = v.as_str().ok_or_else(|| config_err("preset must be a string"))?;
            let preset: Preset = name.parse()?;
            self.hyper.apply_preset(preset);
            self.preset = Some(preset);
        }
        if let Some(v) = table.remove("ks") {
            self.ks = v.try_into().map_err(config_err)?;
        }
        if let Some(v) = table.remove("threads") {
            self.threads = v.try_into().map_err(config_err)?;
        }
        if let Some(v) = table.remove("data") {
            self.data = Some(v.try_into().map_err(config_err)?);
        }
        if let Some(v) = table.remove("out") {
            self.out = Some(v.try_into().map_err(config_err)?);
        }
        let mut base = toml::Table::try_from(&self.hyper).map_err(config_err)?;
        base.extend(table);
        self.hyper = toml::Value::Table(base).try_into().map_err(config_err)?;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        EvalConfig::new(self.ks.clone())?;
        Ok(())
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        EvalConfig::new(self.ks.clone())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration as `config.toml` in `dir`.
    pub fn echo_to(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml_string()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
