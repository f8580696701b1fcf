//! Run configuration: JSON file plus `key=value` overrides.
//!
//! Precedence, lowest first: built-in defaults (or the checkpoint being
//! resumed), the JSON file, then overrides in command-line order. A later
//! override of the same key wins.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vilu_core::metrics::MetricsConfig;
use vilu_core::net::NetworkConfig;
use vilu_core::train::TrainConfig;

use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(root: &mut Value, arg: &str) -> Result<()> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {arg:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("override key {key:?} is malformed")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(*p))
            .filter(|v| v.is_object())
            .ok_or_else(|| Error::Usage(format!("unknown config section {p:?} in {key:?}")))?;
    }
    let last = parts[parts.len() - 1];
    let obj = node.as_object_mut().expect("sections are objects");
    if !obj.contains_key(last) {
        return Err(Error::Usage(format!("unknown config key {key:?}")));
    }
    obj.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn resolve(base: RunConfig, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut root = serde_json::to_value(&base).expect("config serialises");
        if let Some(path) = file {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let v: Value = serde_json::from_slice(&bytes).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
            if !v.is_object() {
                return Err(Error::Usage(format!("{}: config must be a JSON object", path.display())));
            }
            merge(&mut root, v);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Usage(format!("invalid configuration: {e}")))?;
        cfg.network.validate().map_err(|e| Error::Usage(e.to_string()))?;
        cfg.train.validate().map_err(|e| Error::Usage(e.to_string()))?;
        if !(cfg.metrics.nsd_tolerance_mm > 0.0) {
            return Err(Error::Usage("metrics.nsd_tolerance_mm must be > 0".into()));
        }
        Ok(cfg)
    }

    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        Self::resolve(RunConfig::default(), file, overrides)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vilu_core::train::Precision;

    fn ov(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_last_wins() {
        let c = RunConfig::load(None, &ov(&["train.lr=0.01", "train.precision=f64", "train.lr=0.02", "network.num_stages=2"])).unwrap();
        assert_eq!(c.train.lr, 0.02);
        assert_eq!(c.train.precision, Precision::F64);
        assert_eq!(c.network.num_stages, 2);
        let c = RunConfig::load(None, &ov(&["train.clip_norm=1.5"])).unwrap();
        assert_eq!(c.train.clip_norm, Some(1.5));
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"epochs": 3, "batch_size": 4}}"#).unwrap();
        let c = RunConfig::load(Some(&p), &ov(&["train.epochs=5"])).unwrap();
        assert_eq!((c.train.epochs, c.train.batch_size, c.train.lr), (5, 4, 0.005));
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in ["train.learning_rate=1", "model.depth=2", "train", "train.lr.x=1"] {
            assert!(matches!(RunConfig::load(None, &ov(&[bad])), Err(Error::Usage(_))), "{bad}");
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"momentum": 0.9}}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(Error::Usage(_))));
        assert!(matches!(RunConfig::load(None, &ov(&["train.lr=-1"])), Err(Error::Usage(_))));
    }
}
