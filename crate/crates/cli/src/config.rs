//! Config files, `key=value` overrides and grid expansion.
//!
//! A config file is flat TOML whose keys are the fields of
//! [`ExperimentConfig`]. An optional `[grid]` table maps keys to lists of
//! values for the `grid` command.

use std::path::Path;

use psilora::tasks::ExperimentConfig;
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Syntax(String),
    #[error("malformed override `{0}`: expected key=value")]
    Override(String),
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("grid is empty: {0}")]
    EmptyGrid(String),
}

/// Parsed but unresolved config: base keys plus grid axes in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigSource {
    pub base: Table,
    pub grid: Vec<(String, Vec<Value>)>,
}

/// One grid combination: the varied keys and the resolved config.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub params: Vec<(String, Value)>,
    pub config: ExperimentConfig,
}

impl ConfigSource {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut base: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut source = ConfigSource::default();
        if let Some(grid) = base.remove("grid") {
            let Value::Table(grid) = grid else {
                return Err(field("grid", "must be a table of value lists"));
            };
            for (key, values) in grid {
                let Value::Array(values) = values else {
                    return Err(field(&format!("grid.{key}"), "must be a list"));
                };
                source.add_axis(key, values);
            }
        }
        source.base = base;
        Ok(source)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
                Self::parse(&text)
            }
        }
    }

    /// Applies a `key=value` override. The value is read as a TOML value and
    /// falls back to a bare string, so `optimizer=svdlora` works unquoted.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = split_assignment(assignment)?;
        self.base.insert(key.to_string(), parse_value(raw));
        Ok(())
    }

    /// Adds a grid axis from `key=v1,v2,...`, or from a TOML list `key=[...]`.
    pub fn vary(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = split_assignment(assignment)?;
        let values = match parse_value(raw) {
            Value::Array(a) => a,
            _ if raw.trim().is_empty() => Vec::new(),
            _ => raw.split(',').map(|v| parse_value(v.trim())).collect(),
        };
        self.add_axis(key.to_string(), values);
        Ok(())
    }

    fn add_axis(&mut self, key: String, values: Vec<Value>) {
        let mut unique: Vec<Value> = Vec::new();
        for v in values {
            if !unique.contains(&v) {
                unique.push(v);
            }
        }
        match self.grid.iter_mut().find(|(k, _)| *k == key) {
            Some((_, existing)) => *existing = unique,
            None => self.grid.push((key, unique)),
        }
    }

    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        resolve_table(&self.base)
    }

    /// Cartesian product of the grid axes over the base config, first axis
    /// slowest.
    pub fn expand(&self) -> Result<Vec<GridPoint>, ConfigError> {
        if self.grid.is_empty() {
            return Err(ConfigError::EmptyGrid("no grid axes given".into()));
        }
        if let Some((k, _)) = self.grid.iter().find(|(_, v)| v.is_empty()) {
            return Err(ConfigError::EmptyGrid(format!("axis `{k}` has no values")));
        }
        let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for (key, values) in &self.grid {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        combos
            .into_iter()
            .map(|params| {
                let mut table = self.base.clone();
                for (k, v) in &params {
                    table.insert(k.clone(), v.clone());
                }
                let config = resolve_table(&table)?;
                Ok(GridPoint { params, config })
            })
            .collect()
    }
}

fn field(name: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: name.to_string(), message: message.into() }
}

fn split_assignment(s: &str) -> Result<(&str, &str), ConfigError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(ConfigError::Override(s.to_string())),
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Deserializes and validates. Type errors are attributed to the first key
/// that fails on its own.
pub fn resolve_table(table: &Table) -> Result<ExperimentConfig, ConfigError> {
    let config: ExperimentConfig = match Value::Table(table.clone()).try_into() {
        Ok(c) => c,
        Err(e) => {
            for (k, v) in table {
                let single: Table = [(k.clone(), v.clone())].into_iter().collect();
                if let Err(e) = Value::Table(single).try_into::<ExperimentConfig>() {
                    return Err(field(k, e.to_string().trim()));
                }
            }
            return Err(ConfigError::Invalid(e.to_string()));
        }
    };
    config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(config)
}

/// TOML text of a resolved config; [`parse_config`] inverts it.
pub fn emit(config: &ExperimentConfig) -> String {
    toml::to_string(config).expect("config serializes to TOML")
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let source = ConfigSource::parse(text)?;
    if !source.grid.is_empty() {
        return Err(field("grid", "not allowed in a single-run config"));
    }
    source.resolve()
}

/// `key=value` label for a grid point, used in directory-independent logs.
pub fn label(params: &[(String, Value)]) -> String {
    params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
}
