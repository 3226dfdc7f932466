//! Config loading with dotted-key overrides applied to the raw JSON tree
//! before deserialization, so override validation rides on the same schema
//! as the file itself.

use std::fmt;
use std::path::Path;

use serde_json::Value;
use tpc_core::train::RunConfig;

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    BadOverride(String),
    Schema(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(m) => write!(f, "config: {m}"),
            ConfigError::Parse(m) => write!(f, "config: {m}"),
            ConfigError::BadOverride(m) => write!(f, "override: {m}"),
            ConfigError::Schema(m) => write!(f, "config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Parse one `dotted.key=value` pair. The value is interpreted as JSON when
/// it parses (numbers, booleans, arrays), falling back to a plain string so
/// enum variants don't need quoting on the shell.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), ConfigError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(format!("'{s}' is not key=value")))?;
    if key.is_empty() {
        return Err(ConfigError::BadOverride(format!("'{s}' has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn apply_override(tree: &mut Value, path: &[String], value: Value) -> Result<(), ConfigError> {
    let mut node = tree;
    for key in &path[..path.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| {
                ConfigError::BadOverride(format!("'{}' is not an object", key))
            })?
            .entry(key.clone())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let last = &path[path.len() - 1];
    node.as_object_mut()
        .ok_or_else(|| ConfigError::BadOverride(format!("'{last}' parent is not an object")))?
        .insert(last.clone(), value);
    Ok(())
}

/// Load a run config, apply overrides, and validate the result against the
/// full schema (unknown keys rejected).
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut tree: Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        let (key_path, value) = parse_override(o)?;
        apply_override(&mut tree, &key_path, value)?;
    }
    let cfg: RunConfig = serde_json::from_value(tree)
        .map_err(|e| ConfigError::Schema(e.to_string()))?;
    cfg.model
        .validate()
        .map_err(|e| ConfigError::Schema(e.to_string()))?;
    Ok(cfg)
}
