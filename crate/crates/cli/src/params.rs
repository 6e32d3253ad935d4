use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::errors::Invariant;

/// Reads a `--params` file. A run manifest contributes its `params` field.
pub fn read_overrides(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Default::default()));
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading params {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing params {}", path.display()))?;
    let v = match v {
        Value::Object(mut m) if m.contains_key("subcommand") && m.contains_key("params") => m.remove("params").unwrap_or_default(),
        other => other,
    };
    if !v.is_object() {
        return Err(Invariant(format!("params file {} must hold a JSON object", path.display())).into());
    }
    Ok(v)
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// `defaults` with the keys of `overrides` laid over them.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, overrides: &Value) -> Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    merge(&mut v, overrides);
    serde_json::from_value(v).map_err(|e| Invariant(format!("bad parameter: {e}")).into())
}

/// The `seed` a params object carries, if any.
pub fn seed_in(overrides: &Value) -> Result<Option<u64>> {
    match overrides.get("seed") {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| Invariant(format!("seed must be a non-negative integer, got {v}")).into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aat_core::ga::GaParams;
    use serde_json::json;

    #[test]
    fn overrides_are_layered() {
        let p: GaParams = resolve(&GaParams::default(), &json!({"population_size": 8, "k2": 0})).unwrap();
        assert_eq!(p.population_size, 8);
        assert_eq!(p.k2, 0);
        assert_eq!(p.tournament_size, GaParams::default().tournament_size);
        assert!(resolve::<GaParams>(&GaParams::default(), &json!({"population_size": "many"})).is_err());
    }

    #[test]
    fn nested_objects_merge() {
        let mut base = json!({"a": {"x": 1, "y": 2}, "b": 3});
        merge(&mut base, &json!({"a": {"y": 5}}));
        assert_eq!(base, json!({"a": {"x": 1, "y": 5}, "b": 3}));
    }
}
