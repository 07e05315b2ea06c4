use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use dipaco_core::experiment::ExperimentConfig;
use toml::{Table, Value};

/// A problem with the configuration or command-line flags.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Reads `path` and applies `KEY=VALUE` overrides. Values are parsed as
/// TOML literals and fall back to plain strings.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: Table = text
        .parse()
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    ExperimentConfig::from_toml(&table.to_string())
        .with_context(|| format!("config {}", path.display()))
}

pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_error(format!("override {spec:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(format!("bad override key {key:?}")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let (last, parents) = parts.split_last().expect("key has a part");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_error(format!("{key}: {p} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// The named top-level sections of `cfg`, serialized; equal strings mean
/// equal sections.
pub fn sections(cfg: &ExperimentConfig, names: &[&str]) -> Result<String> {
    let all = Table::try_from(cfg).context("serializing config")?;
    let mut picked = Table::new();
    for n in names {
        if let Some(v) = all.get(*n) {
            picked.insert(n.to_string(), v.clone());
        }
    }
    Ok(picked.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_literals_and_create_sections() {
        let mut t: Table = "[plan]\nouter_steps = 3\n".parse().unwrap();
        apply_override(&mut t, "plan.outer_steps=7").unwrap();
        apply_override(&mut t, "routing.router = product").unwrap();
        apply_override(&mut t, "eval.early_stopped=false").unwrap();
        assert_eq!(t["plan"]["outer_steps"].as_integer(), Some(7));
        assert_eq!(t["routing"]["router"].as_str(), Some("product"));
        assert_eq!(t["eval"]["early_stopped"].as_bool(), Some(false));
        assert!(apply_override(&mut t, "noequals").is_err());
        assert!(apply_override(&mut t, "plan.outer_steps.x=1").is_err());
    }
}
