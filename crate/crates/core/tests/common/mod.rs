#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn fixture(name: &str) -> PathBuf {
    repo_root().join("fixtures/toy_dit").join(name)
}

pub fn segquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segquant")).args(args).output().unwrap()
}

pub fn quantize_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "quantize".into(),
        "--graph".into(),
        fixture("graph.json").display().to_string(),
        "--weights".into(),
        fixture("weights.bin").display().to_string(),
        "--calib".into(),
        fixture("calib.bin").display().to_string(),
        "--config".into(),
        fixture("config.toml").display().to_string(),
        "--out".into(),
        out.into(),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

pub fn run(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    segquant(&refs)
}
