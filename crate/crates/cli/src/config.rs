//! Key-value config files for `train`. Lines are `key = value`, `#` starts a
//! comment, unknown keys are rejected. Command-line flags override file
//! values; file values override built-in defaults. Keys are documented in
//! docs/config.md.

use std::collections::BTreeMap;
use std::path::Path;

use ivector::{Error, Result};

#[derive(Debug)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "manifest",
    "model_in",
    "model_out",
    "report",
    "recipe",
    "iterations",
    "ivector_dim",
    "seed",
    "covariance",
    "min_improvement_per_frame",
    "update_weights",
    "floor_absolute",
    "floor_relative",
    "loading_scale",
    "calibration_per_component",
    "calibration_warm_start",
    "calibration_max_iterations",
    "quiet",
];

impl ConfigFile {
    pub fn empty() -> Self {
        ConfigFile {
            values: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key = value, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = k.trim().to_string();
            let val = v.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "{}:{}: unknown key {key:?}",
                    path.display(),
                    lineno + 1
                )));
            }
            if values.insert(key.clone(), val).is_some() {
                return Err(Error::Config(format!(
                    "{}:{}: duplicate key {key:?}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(ConfigFile { values })
    }

    /// CLI value wins; otherwise the file value, parsed; otherwise None.
    pub fn resolve<T: std::str::FromStr>(&self, key: &str, cli: Option<T>) -> Result<Option<T>> {
        debug_assert!(KNOWN_KEYS.contains(&key), "unlisted config key {key}");
        if cli.is_some() {
            return Ok(cli);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("config key {key:?}: cannot parse {v:?}"))
            }),
        }
    }

    pub fn resolve_flag(&self, key: &str, cli: bool) -> Result<bool> {
        Ok(self.resolve::<bool>(key, cli.then_some(true))?.unwrap_or(false))
    }
}
