//! Layered configuration: built-in defaults, then an optional JSON file, then
//! command-line flags.

use std::path::Path;

use bdbf::synth::Sparsity;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{usage, CliResult};

/// Resolves a command configuration. Flags that were not given serialize to
/// `null` (or `false` for switches) and leave lower layers untouched.
pub fn resolve<C, F>(file: Option<&Path>, flags: &F) -> CliResult<(C, Value)>
where
    C: Default + Serialize + DeserializeOwned,
    F: Serialize,
{
    let mut merged = to_object(serde_json::to_value(C::default()).expect("defaults serialize"));
    if let Some(path) = file {
        let text =
            std::fs::read_to_string(path).map_err(|source| bdbf::Error::Io { path: path.to_path_buf(), source })?;
        let value: Value =
            serde_json::from_str(&text).map_err(|source| bdbf::Error::Json { path: path.to_path_buf(), source })?;
        let Value::Object(layer) = value else {
            return Err(usage(format!("{}: config file must hold a JSON object", path.display())));
        };
        overlay(&mut merged, layer);
    }
    overlay(&mut merged, to_object(serde_json::to_value(flags).expect("flags serialize")));
    let value = Value::Object(merged);
    let config: C = serde_json::from_value(value.clone()).map_err(|e| usage(format!("invalid configuration: {e}")))?;
    // flattened option groups swallow unknown keys, so compare against what
    // the parsed configuration writes back out
    let known = to_object(serde_json::to_value(&config).expect("config serializes"));
    if let Some(key) = value.as_object().into_iter().flat_map(|m| m.keys()).find(|k| !known.contains_key(*k)) {
        return Err(usage(format!("unknown configuration key {key:?}")));
    }
    Ok((config, value))
}

fn to_object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn overlay(base: &mut Map<String, Value>, layer: Map<String, Value>) {
    for (k, v) in layer {
        let unset = match &v {
            Value::Null | Value::Bool(false) => true,
            Value::Array(a) => a.is_empty(),
            _ => false,
        };
        if !unset {
            base.insert(k, v);
        }
    }
}

/// A sparsity level given either as a JSON number or as a string such as
/// `"500"`, `"0.05"` or `"5%"`.
pub fn parse_level(v: &Value) -> CliResult<Sparsity> {
    let text = match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        other => return Err(usage(format!("invalid sparsity level {other}"))),
    };
    Ok(text.parse()?)
}

pub fn parse_levels(v: &[Value]) -> CliResult<Vec<Sparsity>> {
    if v.is_empty() {
        return Err(usage("at least one sparsity level is required"));
    }
    v.iter().map(parse_level).collect()
}
