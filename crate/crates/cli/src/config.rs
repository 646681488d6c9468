//! Run configuration: a JSON file, overridden by flags, with the seed falling
//! back to `ALGEBRAFORMER_SEED`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

pub const SEED_ENV: &str = "ALGEBRAFORMER_SEED";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Flag values keyed by dotted path into the config object.
#[derive(Default)]
pub struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, path: &'static str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.push((path, serde_json::to_value(v).expect("flag values serialize")));
        }
        self
    }
}

fn insert(root: &mut Map<String, Value>, path: &str, value: Value) -> Result<(), CliError> {
    let mut parts = path.split('.').peekable();
    let mut obj = root;
    while let Some(key) = parts.next() {
        if parts.peek().is_none() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        let entry = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
        obj = entry.as_object_mut().ok_or_else(|| CliError::Usage(format!("config key {key:?} must be an object")))?;
    }
    Ok(())
}

fn lookup<'a>(root: &'a Map<String, Value>, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut v = root.get(parts.next()?)?;
    for key in parts {
        v = v.as_object()?.get(key)?;
    }
    Some(v)
}

/// Merges the config file (if any), flag overrides and the seed fallback, and
/// deserializes the result. `seed_path` names where the seed lives.
pub fn resolve<T: DeserializeOwned>(
    file: Option<&Path>,
    overrides: &Overrides,
    seed_path: Option<&str>,
) -> Result<T, CliError> {
    let mut root = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(CliError::Usage(format!("config {} must hold a JSON object", p.display()))),
                Err(e) => return Err(CliError::Usage(format!("config {}: {e}", p.display()))),
            }
        }
        None => Map::new(),
    };
    for (path, value) in &overrides.0 {
        insert(&mut root, path, value.clone())?;
    }
    if let Some(path) = seed_path {
        if lookup(&root, path).is_none() {
            if let Ok(raw) = std::env::var(SEED_ENV) {
                let seed: u64 =
                    raw.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={raw:?} is not a seed")))?;
                insert(&mut root, path, Value::from(seed))?;
            }
        }
    }
    serde_json::from_value(Value::Object(root)).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

pub fn write_resolved<T: Serialize>(dir: &Path, config: &T) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(config).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(dir.join(RESOLVED_CONFIG_FILE), text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, Default)]
    #[serde(default, deny_unknown_fields)]
    struct Inner {
        epochs: usize,
        seed: u64,
    }

    #[derive(Debug, Deserialize, Default)]
    #[serde(default, deny_unknown_fields)]
    struct Outer {
        name: String,
        train: Inner,
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"name": "a", "train": {"epochs": 3, "seed": 4}}"#).unwrap();
        let mut o = Overrides::default();
        o.set("train.epochs", Some(7usize)).set("name", None::<String>);
        let got: Outer = resolve(Some(&path), &o, Some("train.seed")).unwrap();
        assert_eq!((got.name.as_str(), got.train.epochs, got.train.seed), ("a", 7, 4));
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let mut o = Overrides::default();
        o.set("bogus", Some(1));
        let err = resolve::<Outer>(None, &o, None).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
