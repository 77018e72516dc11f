//! Layered configuration: defaults, then a TOML file, then `key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

fn toml_to_json(v: toml::Value) -> Value {
    match v {
        toml::Value::String(s) => Value::String(s),
        toml::Value::Integer(i) => Value::from(i),
        toml::Value::Float(f) => Value::from(f),
        toml::Value::Boolean(b) => Value::Bool(b),
        toml::Value::Datetime(d) => Value::String(d.to_string()),
        toml::Value::Array(a) => Value::Array(a.into_iter().map(toml_to_json).collect()),
        toml::Value::Table(t) => Value::Object(t.into_iter().map(|(k, v)| (k, toml_to_json(v))).collect()),
    }
}

/// Tagged sections (those with a `kind` field) are replaced whole.
fn merge(base: &mut Value, incoming: Value, path: &str) -> Result<(), String> {
    match (base, incoming) {
        (Value::Object(b), Value::Object(inc)) if !inc.contains_key("kind") => {
            for (k, v) in inc {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| format!("unknown configuration key `{key}`"))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn parse_override(item: &str) -> Result<(Vec<String>, Value), String> {
    let (key, raw) = item.split_once('=').ok_or_else(|| format!("override `{item}` is not key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(format!("override `{item}` has an empty key"));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .map(toml_to_json)
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn nest(keys: &[String], value: Value) -> Value {
    keys.iter().rev().fold(value, |acc, k| {
        let mut m = Map::new();
        m.insert(k.clone(), acc);
        Value::Object(m)
    })
}

pub fn resolve<C: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[String]) -> Result<C, String> {
    let mut value = serde_json::to_value(C::default()).map_err(|e| e.to_string())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        merge(&mut value, toml_to_json(toml::Value::Table(table)), "")?;
    }
    for item in overrides {
        let (keys, v) = parse_override(item)?;
        merge(&mut value, nest(&keys, v), "")?;
    }
    serde_json::from_value(value).map_err(|e| format!("invalid configuration: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use penh_core::TrainConfig;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c: TrainConfig = resolve(None, &["epochs=3".into(), "weights.lambda_g=0.5".into(), "variant.use_gates=false".into()]).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.weights.lambda_g, 0.5);
        assert!(!c.variant.use_gates);
        assert!(resolve::<TrainConfig>(None, &["nope=1".into()]).unwrap_err().contains("nope"));
        assert!(resolve::<TrainConfig>(None, &["epochs".into()]).is_err());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "epochs = 7\nbatch_size = 2\n[extractor]\nkind = \"random\"\nseed = 9\nwidths = [4, 0]\n").unwrap();
        let c: TrainConfig = resolve(Some(&path), &["epochs=8".into()]).unwrap();
        assert_eq!((c.epochs, c.batch_size), (8, 2));
        assert_eq!(c.extractor, penh_core::ExtractorSpec::Random { seed: 9, widths: vec![4, 0] });
    }
}
