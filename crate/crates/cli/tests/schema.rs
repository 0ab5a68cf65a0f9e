//! The published configuration schema matches the code and carries every default.

use alio_cli::config::{config_schema, RunConfig};
use alio_core::estimator::EstimatorConfig;
use serde_json::{Map, Value};
use std::path::PathBuf;

fn schema_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/config.schema.json")
}

fn resolve_ref<'a>(schema: &'a Value, node: &'a Value) -> &'a Value {
    match node.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let name = r.trim_start_matches("#/$defs/");
            resolve_ref(schema, &schema["$defs"][name])
        }
        None => node,
    }
}

/// Builds an instance from the `default` annotations, recursing into
/// objects whose property carries none.
fn instance_from_defaults(schema: &Value, node: &Value) -> Value {
    if let Some(d) = node.get("default") {
        return d.clone();
    }
    let target = resolve_ref(schema, node);
    let mut out = Map::new();
    for (k, v) in target.get("properties").and_then(Value::as_object).expect("property has a default or fields") {
        out.insert(k.clone(), instance_from_defaults(schema, v));
    }
    Value::Object(out)
}

#[test]
fn committed_schema_is_current() {
    let generated = serde_json::to_string_pretty(&config_schema()).unwrap() + "\n";
    if std::env::var_os("ALIO_BLESS_SCHEMA").is_some() {
        std::fs::write(schema_path(), &generated).unwrap();
    }
    let committed = std::fs::read_to_string(schema_path()).expect("docs/config.schema.json exists");
    assert_eq!(committed, generated, "regenerate with ALIO_BLESS_SCHEMA=1 cargo test -p alio-cli --test schema");
}

#[test]
fn schema_defaults_alone_reproduce_every_module_default() {
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(schema_path()).unwrap()).unwrap();
    let estimator = instance_from_defaults(&schema, &schema["properties"]["estimator"]);
    let parsed: EstimatorConfig = serde_json::from_value(estimator).unwrap();
    assert_eq!(parsed, RunConfig::default().estimator);
    assert_eq!(parsed, EstimatorConfig::default());
}
