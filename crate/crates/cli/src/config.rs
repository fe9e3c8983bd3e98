use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use latode::data::{IcuGenConfig, SpiralConfig};

use crate::commands::CliError;

/// Reads an optional TOML file, applies `key=value` overrides (dotted keys
/// address nested tables) and deserializes the result.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::runtime(format!("{}: {}", p.display(), e)))?;
            text.parse::<toml::Table>().map_err(|e| CliError::invalid(format!("{}: {}", p.display(), e)))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| CliError::invalid(format!("override {:?} is not KEY=VALUE", o)))?;
        // bare words fall back to strings
        let value = format!("v = {}", raw)
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut cur = &mut table;
        for part in &parts[..parts.len() - 1] {
            cur = cur
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| CliError::invalid(format!("override key {:?} crosses a non-table value", key)))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), value);
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::invalid(format!("configuration: {}", e)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Spirals,
    Icu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub kind: DataKind,
    /// Share of series written to `test.json`.
    pub test_share: f64,
    pub split_seed: u64,
    pub spirals: SpiralConfig,
    pub icu: IcuGenConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            kind: DataKind::Icu,
            test_share: 0.2,
            split_seed: 0,
            spirals: SpiralConfig::default(),
            icu: IcuGenConfig::default(),
        }
    }
}

impl GenDataConfig {
    pub fn seed(&self) -> u64 {
        match self.kind {
            DataKind::Spirals => self.spirals.seed,
            DataKind::Icu => self.icu.seed,
        }
    }
}
