mod common;

use std::collections::BTreeSet;
use std::fs;

use common::{quantize_args, repo_root, run, segquant};
use segquant::engine::{quantize_model, EngineConfig, CONFIG_KEYS};
use segquant::harness::{build_toy_dit, toy_calibration, NoiseSchedule, ToyModelSpec};

fn documented_keys() -> BTreeSet<String> {
    let text = fs::read_to_string(repo_root().join("docs/CONFIG.md")).unwrap();
    text.lines()
        .filter_map(|l| l.strip_prefix("| `"))
        .filter_map(|l| l.split('`').next())
        .map(str::to_string)
        .collect()
}

#[test]
fn config_doc_lists_exactly_the_engine_keys() {
    let code: BTreeSet<String> = CONFIG_KEYS.iter().map(|(k, _)| k.to_string()).collect();
    assert_eq!(documented_keys(), code);
}

#[test]
fn config_doc_defaults_match_engine_defaults() {
    let text = fs::read_to_string(repo_root().join("docs/CONFIG.md")).unwrap();
    let defaults: toml::Value = toml::Value::Table(toml::from_str(&EngineConfig::default().to_toml()).unwrap());
    for line in text.lines().filter(|l| l.starts_with("| `")) {
        let cells: Vec<&str> = line.split('|').map(str::trim).collect();
        let key = cells[1].trim_matches('`');
        let doc = cells[2].trim_matches('`');
        if doc.contains('…') {
            continue;
        }
        let mut v = &defaults;
        for part in key.split('.') {
            v = &v[part];
        }
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {doc}")).unwrap()["v"].clone();
        assert_eq!(&parsed, v, "default of {key}");
    }
}

fn schema() -> jsonschema::JSONSchema {
    let text = fs::read_to_string(repo_root().join("docs/report.schema.json")).unwrap();
    let value: &'static serde_json::Value = Box::leak(Box::new(serde_json::from_str(&text).unwrap()));
    jsonschema::JSONSchema::compile(value).unwrap()
}

fn assert_valid(schema: &jsonschema::JSONSchema, report: &str) {
    let value: serde_json::Value = serde_json::from_str(report).unwrap();
    if let Err(errors) = schema.validate(&value) {
        let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("report violates schema: {msgs:#?}");
    };
}

#[test]
fn reports_match_the_schema() {
    let schema = schema();
    let spec = ToyModelSpec::default();
    let g = build_toy_dit(&spec).unwrap();
    let calib = toy_calibration(&spec, &NoiseSchedule::linear(10).unwrap(), 4, 0).unwrap();
    let cases: &[&[&str]] = &[
        &[],
        &["weights.kind=fp32", "activations.kind=fp32"],
        &["calibrator.method=gptq", "optimizer.method=smooth_svd", "optimizer.lowrank.rank=64"],
        &["scope.layers=[\"time.\"]", "activations.granularity=per_token_dynamic"],
    ];
    for overrides in cases {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        let cfg = EngineConfig::from_toml_with("", &o).unwrap();
        let (_, report) = quantize_model(&g, &calib, &cfg).unwrap();
        assert_valid(&schema, &report.to_json());
    }
}

#[test]
fn cli_reports_match_the_schema() {
    let schema = schema();
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q");
    assert!(run(&quantize_args(q.to_str().unwrap(), &[])).status.success());
    assert_valid(&schema, &fs::read_to_string(q.join("report.json")).unwrap());
    let d = dir.path().join("d");
    assert!(segquant(&["demo-ddpm", "--out", d.to_str().unwrap()]).status.success());
    assert_valid(&schema, &fs::read_to_string(d.join("report.json")).unwrap());
}

#[test]
fn schema_rejects_malformed_reports() {
    let schema = schema();
    let bad = serde_json::json!({ "tool": { "name": "segquant", "version": "0" }, "config": {}, "layers": [], "metrics": [] });
    assert!(!schema.is_valid(&bad));
}
