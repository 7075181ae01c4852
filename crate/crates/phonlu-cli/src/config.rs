//! Flat key=value config files: one `key = value` pair per line, `#` starts
//! a comment. Every key must be in the invoking subcommand's accepted set so
//! typos fail loudly instead of silently using defaults.

use std::collections::BTreeMap;
use std::path::Path;

use crate::commands::CliError;

#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Data(format!(
                    "config {}:{}: expected key = value, got {raw:?}",
                    path.display(),
                    i + 1
                )));
            };
            let key = key.trim().to_string();
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::Data(format!(
                    "config {}:{}: duplicate key {key:?}",
                    path.display(),
                    i + 1
                )));
            }
        }
        Ok(FileConfig { values })
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), CliError> {
        for key in self.values.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::Data(format!(
                    "unknown config key {key:?}; accepted keys: {}",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<Option<T>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                CliError::Data(format!("config key {key:?}: {raw:?} is not {kind}"))
            }),
        }
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        self.parse(key, "a number")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, CliError> {
        self.parse(key, "a non-negative integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>, CliError> {
        self.parse(key, "a non-negative integer")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        self.parse(key, "true or false")
    }

    /// Comma-separated integer list, e.g. `kernel_sizes = 3,5`.
    pub fn get_usize_list(&self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|part| {
                    part.trim().parse().map_err(|_| {
                        CliError::Data(format!(
                            "config key {key:?}: {part:?} is not a non-negative integer"
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }
}

/// Hyperparameter space file: each line is `key = v1,v2,...`.
pub fn load_space(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, CliError> {
    let cfg = FileConfig::load(Some(path))?;
    let mut space = BTreeMap::new();
    for key in cfg.values.keys() {
        let raw = &cfg.values[key];
        let values = raw
            .split(',')
            .map(|part| {
                part.trim().parse::<f64>().map_err(|_| {
                    CliError::Data(format!("space key {key:?}: {part:?} is not a number"))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if values.is_empty() {
            return Err(CliError::Data(format!("space key {key:?} has no values")));
        }
        space.insert(key.clone(), values);
    }
    if space.is_empty() {
        return Err(CliError::Data(format!("space file {} is empty", path.display())));
    }
    Ok(space)
}
