use std::collections::BTreeSet;
use std::path::Path;

use serde_json::Value;
use stmlab::scenario::{preset, PRESETS};

fn schema() -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/scenario.schema.json");
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

/// Walk `doc` alongside its schema node; every object key must be declared.
fn check(doc: &Value, node: &Value, path: &str) {
    if let Some(alts) = node.get("oneOf") {
        let ok = alts.as_array().unwrap().iter().any(|a| {
            let fits = match (doc, a.get("const"), a.get("properties")) {
                (_, Some(c), _) => c == doc,
                (Value::Object(o), None, Some(p)) => {
                    o.keys().all(|k| p.get(k).is_some())
                        && a.get("required").map_or(true, |r| r.as_array().unwrap().iter().all(|k| o.contains_key(k.as_str().unwrap())))
                        && p.get("kind").and_then(|k| k.get("const")).map_or(true, |c| o.get("kind") == Some(c))
                }
                (Value::Null, None, None) => a.get("type") == Some(&Value::from("null")),
                _ => false,
            };
            if fits {
                check(doc, a, path);
            }
            fits
        });
        assert!(ok, "{path}: no alternative accepts {doc}");
        return;
    }
    match doc {
        Value::Object(o) => {
            let props = node.get("properties").unwrap_or_else(|| panic!("{path}: object without properties"));
            if node.get("additionalProperties") == Some(&Value::Bool(false)) {
                for (k, v) in o {
                    let sub = props.get(k).unwrap_or_else(|| panic!("{path}.{k} is not in the schema"));
                    check(v, sub, &format!("{path}.{k}"));
                }
            }
        }
        Value::Array(a) => {
            if let Some(items) = node.get("items") {
                for (i, v) in a.iter().enumerate() {
                    check(v, items, &format!("{path}[{i}]"));
                }
            }
        }
        _ => {}
    }
}

#[test]
fn top_level_keys_match_scenario_serialization() {
    let s = schema();
    let doc = serde_json::to_value(preset("sts").unwrap()).unwrap();
    assert_eq!(keys(&s["properties"]), keys(&doc));
}

#[test]
fn experiment_alternatives_cover_every_kind() {
    let s = schema();
    let declared: BTreeSet<String> = s["properties"]["experiment"]["oneOf"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|a| keys(&a["properties"]))
        .collect();
    let used: BTreeSet<String> = PRESETS.iter().map(|k| preset(k).unwrap().experiment.kind().to_string()).collect();
    assert_eq!(declared, used);
}

#[test]
fn every_preset_conforms() {
    let s = schema();
    for k in PRESETS {
        let doc = serde_json::to_value(preset(k).unwrap()).unwrap();
        check(&doc, &s, k);
    }
}

#[test]
fn undeclared_key_is_caught() {
    let s = schema();
    let mut doc = serde_json::to_value(preset("hdl").unwrap()).unwrap();
    doc["experiment"]["hdl"]["line"]["bogus"] = Value::from(1);
    let r = std::panic::catch_unwind(|| check(&doc, &s, "hdl"));
    assert!(r.is_err());
}
