//! Flat `key = value` configuration files using the `LafConfig` field names.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{Context, Result};
use laf_core::LafConfig;
use serde_json::{Map, Number, Value};

use crate::UsageError;

/// A parsed configuration and the keys the file set explicitly.
#[derive(Debug, Clone)]
pub struct ConfigFile {
    pub config: LafConfig,
    pub keys: BTreeSet<String>,
}

fn parse_value(raw: &str) -> Option<Value> {
    match raw {
        "true" => return Some(Value::Bool(true)),
        "false" => return Some(Value::Bool(false)),
        _ => {}
    }
    if let Ok(u) = raw.parse::<u64>() {
        return Some(Value::Number(u.into()));
    }
    raw.parse::<f64>()
        .ok()
        .and_then(Number::from_f64)
        .map(Value::Number)
}

/// Blank lines and `#` comments are ignored; missing keys take their defaults.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let mut map = Map::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected key = value", n + 1)))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = parse_value(raw).ok_or_else(|| {
            UsageError(format!(
                "config line {}: '{raw}' is not a number or boolean",
                n + 1
            ))
        })?;
        if map.insert(key.to_string(), value).is_some() {
            return Err(UsageError(format!("config line {}: duplicate key '{key}'", n + 1)).into());
        }
    }
    let keys = map.keys().cloned().collect();
    let config: LafConfig = serde_json::from_value(Value::Object(map))
        .map_err(|e| UsageError(format!("config: {e}")))?;
    Ok(ConfigFile { config, keys })
}

pub fn read_config(path: &Path) -> Result<ConfigFile> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

pub fn render_config(cfg: &LafConfig) -> String {
    let Value::Object(map) = serde_json::to_value(cfg).expect("config serializes") else {
        unreachable!("config is a struct")
    };
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn write_config(path: &Path, cfg: &LafConfig) -> Result<()> {
    std::fs::write(path, render_config(cfg)).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = LafConfig {
            b_xi: 1e4,
            n_iter: 123,
            retain_composed: true,
            ..LafConfig::default()
        };
        let back = parse_config(&render_config(&cfg)).unwrap();
        assert_eq!(back.config, cfg);
        assert!(back.keys.contains("a_A"));
    }

    #[test]
    fn renamed_fields_and_defaults() {
        let c = parse_config("# comment\na_A = 3\n\nsigma2_mu_k = 5.5 # trailing\n").unwrap();
        assert_eq!(c.config.a_a, 3.0);
        assert_eq!(c.config.sigma2_mu_psi, 5.5);
        assert_eq!(c.config.b_xi, LafConfig::default().b_xi);
        assert_eq!(c.keys.len(), 2);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_config("bogus = 1").is_err());
        assert!(parse_config("n_iter").is_err());
        assert!(parse_config("n_iter = many").is_err());
        assert!(parse_config("n_iter = 2.5").is_err());
        assert!(parse_config("thin = 1\nthin = 2").is_err());
    }
}
