//! Training configuration from JSON files and command-line overrides.
//!
//! Values are layered as defaults, then the file, then individual overrides;
//! the merged document is validated by deserializing it into [`TrainConfig`],
//! which rejects unknown fields.

use std::path::Path;

use hdtree_core::trainer::TrainConfig;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Sets `value` at a dotted key such as `kernel.positive_weight`.
fn set(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::Config(format!("{key}: parent is not an object")))?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Err(Error::Config("empty configuration key".into()))
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Merges defaults, an optional JSON file and `(dotted key, value)` overrides.
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<TrainConfig> {
    let mut doc = serde_json::to_value(TrainConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let from_file: Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if !from_file.is_object() {
            return Err(Error::format(path, "configuration must be a JSON object"));
        }
        merge(&mut doc, from_file);
    }
    for (k, v) in overrides {
        set(&mut doc, k, v.clone())?;
    }
    let config: TrainConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    config.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(config)
}

/// Parses `key=value`, reading the value as JSON and falling back to a string.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (k, v) = text.split_once('=').ok_or_else(|| Error::Config(format!("{text:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hdtree_core::scl::PositiveWeight;
    use hdtree_core::trainer::CodeSpace;

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epochs": 7, "seed": 3, "kernel": {"nu": 0.5}}"#).unwrap();
        let cfg = resolve(Some(&path), &[("seed".into(), Value::from(9))]).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.kernel.nu, 0.5);
        assert_eq!(cfg.kernel.gamma, TrainConfig::default().kernel.gamma);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(resolve(None, &[("epochz".into(), Value::from(1))]).is_err());
        assert!(resolve(None, &[("kernel.nuu".into(), Value::from(1))]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(resolve(None, &[("batch_size".into(), Value::from(0))]).is_err());
    }

    #[test]
    fn overrides_parse() {
        let cfg = resolve(
            None,
            &[
                parse_override("code_space=ball").unwrap(),
                parse_override("kernel.positive_weight=mean").unwrap(),
                parse_override("depth=4").unwrap(),
                parse_override("normalize_condition=true").unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.code_space, CodeSpace::Ball);
        assert_eq!(cfg.kernel.positive_weight, PositiveWeight::Mean);
        assert_eq!(cfg.depth, Some(4));
        assert!(cfg.normalize_condition);
        assert!(parse_override("novalue").is_err());
    }
}
