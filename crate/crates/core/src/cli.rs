//! `segquant` command line: quantize, analyze and demo-ddpm.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::calibstats::{polarity_row, CalibStats};
use crate::engine::{keys_help, quantize_model, save_bundle, write_report, Bindings, EngineConfig};
use crate::error::{Error, Result};
use crate::graphir::{execute_with, read_weights, write_weights, Graph, Hooks, Node, NodeKind};
use crate::harness::{build_toy_dit, curve_csv, run_demo, toy_calibration, NoiseSchedule, ToyModelSpec};
use crate::numerics::Tensor;
use crate::seginfer::find_act_to_linear;

#[derive(Debug, Parser)]
#[command(name = "segquant", version, about = "Segment-aware post-training quantization", after_long_help = keys_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a graph and write a bundle plus report.json.
    #[command(after_long_help = keys_help())]
    Quantize(QuantizeArgs),
    /// Print activation polarity statistics and write stats.json.
    Analyze(AnalyzeArgs),
    /// Quantize the toy denoiser and trace the per-timestep error.
    #[command(name = "demo-ddpm", after_long_help = keys_help())]
    DemoDdpm(DemoArgs),
    /// Write the toy denoiser fixture (graph, weights, calibration, config).
    BuildFixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Graph description (JSON).
    #[arg(long)]
    pub graph: PathBuf,
    /// Weights container (SQWT).
    #[arg(long)]
    pub weights: PathBuf,
    /// Calibration container (SQWT, entries named `<sample>/<input>`).
    #[arg(long)]
    pub calib: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set toggles.dualscale=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for qmodel.json, qweights.bin and report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory for stats.json.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for the CSV curves and report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 8)]
    pub tokens: usize,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Quantize(a) => cmd_quantize(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::DemoDdpm(a) => cmd_demo_ddpm(&a),
        Command::BuildFixture(a) => cmd_build_fixture(&a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn load_config(args: &ConfigArgs) -> Result<EngineConfig> {
    let text = match &args.config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let cfg = EngineConfig::from_toml_with(&text, &args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read a calibration container: entries `<sample>/<input>` grouped by
/// sample, samples in name order.
pub fn read_calib(path: &Path) -> Result<Vec<Bindings>> {
    let entries = read_weights(path)?;
    let mut samples: BTreeMap<String, Bindings> = BTreeMap::new();
    for (name, t) in entries {
        let (sample, input) = name
            .split_once('/')
            .ok_or_else(|| Error::parse(path.display().to_string(), format!("entry `{name}` is not `<sample>/<input>`")))?;
        samples.entry(sample.to_string()).or_default().insert(input.to_string(), t);
    }
    if samples.is_empty() {
        return Err(Error::parse(path.display().to_string(), "no calibration samples"));
    }
    Ok(samples.into_values().collect())
}

pub fn write_calib(path: &Path, samples: &[Bindings]) -> Result<()> {
    let mut entries = BTreeMap::new();
    for (i, b) in samples.iter().enumerate() {
        for (name, t) in b {
            entries.insert(format!("{i:04}/{name}"), t.clone());
        }
    }
    write_weights(path, &entries)
}

fn load_model(a: &ModelArgs) -> Result<(Graph, Vec<Bindings>)> {
    let g = Graph::load(&a.graph, &a.weights)?;
    let calib = read_calib(&a.calib)?;
    Ok((g, calib))
}

pub fn cmd_quantize(a: &QuantizeArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (g, calib) = load_model(&a.model)?;
    let (model, report) = quantize_model(&g, &calib, &cfg)?;
    save_bundle(&a.out, &model, &report)?;
    let quantized = report.layers.iter().filter(|l| l.quantized).count();
    eprintln!(
        "quantized {quantized} of {} linear layers into {}",
        report.layers.len(),
        a.out.display()
    );
    Ok(())
}

/// Statistics of one activation node's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationPoint {
    pub point: String,
    pub func: String,
    pub channels: usize,
    pub mean_neg_ratio: f64,
    pub mean_pos_ratio: f64,
    pub min: f32,
    pub max: f32,
    pub amax: f32,
    /// Linear layers reached from this activation without re-mixing.
    pub linears: Vec<String>,
    pub dualscale_eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub samples: usize,
    pub points: Vec<ActivationPoint>,
}

struct ActivationObserver {
    stats: CalibStats,
    failure: Option<Error>,
}

impl Hooks for ActivationObserver {
    fn observe(&mut self, node: &Node, outputs: &[Tensor]) {
        if let (NodeKind::Activation { .. }, Some(y)) = (&node.kind, outputs.first()) {
            if let Err(e) = self.stats.observe(&node.id, y) {
                self.failure.get_or_insert(e);
            }
        }
    }
}

/// Polarity and range statistics of every activation node over `calib`.
pub fn analyze(g: &Graph, calib: &[Bindings]) -> Result<StatsFile> {
    let mut obs = ActivationObserver {
        stats: CalibStats::default(),
        failure: None,
    };
    for b in calib {
        execute_with(g, b, &mut obs)?;
    }
    if let Some(e) = obs.failure {
        return Err(e);
    }
    let pairs = find_act_to_linear(g);
    let mut points = Vec::new();
    for node in g.nodes() {
        let NodeKind::Activation { func } = node.kind else {
            continue;
        };
        let Some(s) = obs.stats.get(&node.id) else {
            continue;
        };
        let row = polarity_row(&node.id, s)?;
        let linears: Vec<String> = pairs.iter().filter(|(a, _)| *a == node.id).map(|(_, l)| l.clone()).collect();
        points.push(ActivationPoint {
            point: node.id.clone(),
            func: func.name().to_string(),
            channels: row.channels,
            mean_neg_ratio: row.mean_neg_ratio,
            mean_pos_ratio: row.mean_pos_ratio,
            min: s.min.iter().copied().fold(f32::INFINITY, f32::min),
            max: s.max.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            amax: s.amax()?,
            dualscale_eligible: !linears.is_empty() && func.is_polarity_asymmetric(),
            linears,
        });
    }
    Ok(StatsFile {
        samples: calib.len(),
        points,
    })
}

pub fn format_polarity_table(stats: &StatsFile) -> String {
    let width = stats.points.iter().map(|p| p.point.len()).max().unwrap_or(5).max(5);
    let mut s = format!(
        "{:<width$}  {:<5}  {:>8}  {:>7}  {:>7}  {:>10}  dualscale\n",
        "point", "func", "channels", "neg", "pos", "amax"
    );
    for p in &stats.points {
        s.push_str(&format!(
            "{:<width$}  {:<5}  {:>8}  {:>7.3}  {:>7.3}  {:>10.4}  {}\n",
            p.point,
            p.func,
            p.channels,
            p.mean_neg_ratio,
            p.mean_pos_ratio,
            p.amax,
            if p.dualscale_eligible { "yes" } else { "no" }
        ));
    }
    s
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let (g, calib) = load_model(&a.model)?;
    let stats = analyze(&g, &calib)?;
    print!("{}", format_polarity_table(&stats));
    create_dir(&a.out)?;
    let mut json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    json.push('\n');
    write_text(&a.out.join("stats.json"), &json)
}

pub fn cmd_demo_ddpm(a: &DemoArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let demo = run_demo(&cfg)?;
    create_dir(&a.out)?;
    for (stem, curve) in &demo.curves {
        write_text(&a.out.join(format!("{stem}.csv")), &curve_csv(curve))?;
    }
    write_report(&a.out.join("report.json"), &demo.report)?;
    eprintln!("wrote {} curve(s) of {} steps to {}", demo.curves.len(), cfg.demo.steps, a.out.display());
    Ok(())
}

pub fn cmd_build_fixture(a: &FixtureArgs) -> Result<()> {
    let spec = ToyModelSpec {
        hidden: a.hidden,
        tokens: a.tokens,
        seed: a.seed,
        blocks: 1,
    };
    let g = build_toy_dit(&spec)?;
    let sched = NoiseSchedule::linear(a.steps)?;
    let calib = toy_calibration(&spec, &sched, a.samples, a.seed)?;
    create_dir(&a.out)?;
    g.save(&a.out.join("graph.json"), &a.out.join("weights.bin"))?;
    write_calib(&a.out.join("calib.bin"), &calib)?;
    let mut cfg = EngineConfig {
        seed: a.seed,
        ..EngineConfig::default()
    };
    cfg.demo.hidden = a.hidden;
    cfg.demo.tokens = a.tokens;
    cfg.demo.steps = a.steps;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphir::{ActivationFn, GraphBuilder};
    use crate::numerics::{gaussian, Rng};

    fn relu_graph() -> (Graph, Vec<Bindings>) {
        let mut rng = Rng::new(1);
        let mut b = GraphBuilder::new();
        let x = b.input("x", 4);
        let h = b.linear("fc1", &x, gaussian(&mut rng, vec![4, 6]).unwrap(), None);
        let r = b.act("act", ActivationFn::Relu, &h);
        let y = b.linear("fc2", &r, gaussian(&mut rng, vec![6, 3]).unwrap(), None);
        b.output("y", &y);
        let calib = (0..3)
            .map(|_| Bindings::from([("x".to_string(), gaussian(&mut rng, vec![5, 4]).unwrap())]))
            .collect();
        (b.build().unwrap(), calib)
    }

    #[test]
    fn relu_points_are_not_eligible() {
        let (g, calib) = relu_graph();
        let stats = analyze(&g, &calib).unwrap();
        assert_eq!(stats.points.len(), 1);
        let p = &stats.points[0];
        assert!(!p.dualscale_eligible);
        assert_eq!(p.mean_neg_ratio, 0.0);
        assert!(p.min >= 0.0);
    }

    #[test]
    fn toy_points_cover_every_activation() {
        let spec = ToyModelSpec::default();
        let g = build_toy_dit(&spec).unwrap();
        let calib = toy_calibration(&spec, &NoiseSchedule::linear(10).unwrap(), 4, 0).unwrap();
        let stats = analyze(&g, &calib).unwrap();
        let acts = g.nodes().iter().filter(|n| matches!(n.kind, NodeKind::Activation { .. })).count();
        assert_eq!(stats.points.len(), acts);
        assert!(stats.points.iter().filter(|p| p.dualscale_eligible).count() >= 2);
        let table = format_polarity_table(&stats);
        assert_eq!(table.lines().count(), acts + 1);
    }

    #[test]
    fn calib_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.bin");
        let (_, calib) = relu_graph();
        write_calib(&path, &calib).unwrap();
        assert_eq!(read_calib(&path).unwrap(), calib);
    }

    #[test]
    fn help_lists_config_keys() {
        use clap::CommandFactory;
        let help = Cli::command().render_long_help().to_string();
        for (key, _) in crate::engine::CONFIG_KEYS {
            assert!(help.contains(key), "{key} missing from help");
        }
    }
}
