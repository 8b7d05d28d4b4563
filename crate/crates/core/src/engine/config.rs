//! Engine configuration, loaded from TOML with `key=value` overrides.

use serde::{Deserialize, Serialize};

use crate::calibrators::{CalibMethod, GptqConfig};
use crate::error::{Error, Result};
use crate::optimizers::{LowRankConfig, SmoothConfig};
use crate::quantcore::{Granularity, Role, Scheme, SchemeKind};
use crate::seginfer::PlanToggles;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Fp32,
    IntSym,
    IntAsym,
    DualScale,
    Fp8E4m3Sim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorConfig {
    pub kind: TensorKind,
    #[serde(default = "default_bits")]
    pub bits: u8,
    pub granularity: Granularity,
}

fn default_bits() -> u8 {
    8
}

impl TensorConfig {
    /// `None` for FP32.
    pub fn scheme(&self) -> Result<Option<Scheme>> {
        let kind = match self.kind {
            TensorKind::Fp32 => return Ok(None),
            TensorKind::IntSym => SchemeKind::IntSym,
            TensorKind::IntAsym => SchemeKind::IntAsym,
            TensorKind::DualScale => SchemeKind::DualScale,
            TensorKind::Fp8E4m3Sim => SchemeKind::Fp8E4m3Sim,
        };
        Scheme::new(kind, self.bits, self.granularity)
            .map(Some)
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMethod {
    #[default]
    None,
    Smoothquant,
    Svd,
    SmoothSvd,
}

impl OptimizerMethod {
    pub fn smooths(self) -> bool {
        matches!(self, OptimizerMethod::Smoothquant | OptimizerMethod::SmoothSvd)
    }

    pub fn low_rank(self) -> bool {
        matches!(self, OptimizerMethod::Svd | OptimizerMethod::SmoothSvd)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub method: OptimizerMethod,
    pub smooth: SmoothConfig,
    pub lowrank: LowRankConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibratorConfig {
    pub method: CalibMethod,
    pub gptq: GptqConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub seglinear: bool,
    pub dualscale: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            seglinear: true,
            dualscale: true,
        }
    }
}

impl From<Toggles> for PlanToggles {
    fn from(t: Toggles) -> Self {
        PlanToggles {
            seglinear: t.seglinear,
            dualscale: t.dualscale,
        }
    }
}

/// Which linear layers are quantized. Empty means all of them.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScopeConfig {
    /// Layer id prefixes.
    pub layers: Vec<String>,
}

impl ScopeConfig {
    pub fn includes(&self, layer: &str) -> bool {
        self.layers.is_empty() || self.layers.iter().any(|p| layer.starts_with(p.as_str()))
    }
}

/// Settings for the toy diffusion demo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub steps: usize,
    pub hidden: usize,
    pub tokens: usize,
    pub calib_samples: usize,
    /// Also emit curves for time-branch-only and latent-branch-only runs.
    pub branches: bool,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            steps: 10,
            hidden: 16,
            tokens: 8,
            calib_samples: 4,
            branches: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub seed: u64,
    pub weights: TensorConfig,
    pub activations: TensorConfig,
    pub toggles: Toggles,
    pub optimizer: OptimizerConfig,
    pub calibrator: CalibratorConfig,
    pub scope: ScopeConfig,
    pub demo: DemoConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 0,
            weights: TensorConfig {
                kind: TensorKind::IntSym,
                bits: 8,
                granularity: Granularity::PerChannel,
            },
            activations: TensorConfig {
                kind: TensorKind::IntSym,
                bits: 8,
                granularity: Granularity::PerTensor,
            },
            toggles: Toggles::default(),
            optimizer: OptimizerConfig::default(),
            calibrator: CalibratorConfig::default(),
            scope: ScopeConfig::default(),
            demo: DemoConfig::default(),
        }
    }
}

/// Every configuration key with a one-line description, in dotted form.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "RNG seed for fixtures and demo runs"),
    ("weights.kind", "fp32 | int_sym | int_asym | fp8_e4m3_sim"),
    ("weights.bits", "4 or 8 (4 requires per_channel)"),
    ("weights.granularity", "per_tensor | per_channel"),
    ("activations.kind", "fp32 | int_sym | int_asym | dual_scale | fp8_e4m3_sim"),
    ("activations.bits", "4 or 8"),
    ("activations.granularity", "per_tensor | per_token_dynamic"),
    ("toggles.seglinear", "segment linear layers from chunk/split/concat/stack patterns"),
    ("toggles.dualscale", "dual-scale activations on act-to-linear layers"),
    ("optimizer.method", "none | smoothquant | svd | smooth_svd"),
    ("optimizer.smooth.alphas", "alpha grid for the smoothing sweep"),
    ("optimizer.smooth.per_segment", "choose alpha per input segment"),
    ("optimizer.lowrank.rank", "rank of the full-precision low-rank branch"),
    ("calibrator.method", "amax | gptq"),
    ("calibrator.gptq.block_size", "rows per lazy GPTQ update block"),
    ("calibrator.gptq.damping", "damping as a fraction of the mean Hessian diagonal"),
    ("scope.layers", "layer id prefixes to quantize; empty quantizes all"),
    ("demo.steps", "diffusion steps T for demo-ddpm"),
    ("demo.hidden", "hidden width of the toy model"),
    ("demo.tokens", "token rows of the toy model"),
    ("demo.calib_samples", "calibration trajectories for demo-ddpm"),
    ("demo.branches", "also emit time-only and latent-only curves"),
];

/// Human-readable key listing for `--help`.
pub fn keys_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (TOML file, or --set key=value):\n");
    for (k, d) in CONFIG_KEYS {
        s.push_str(&format!("  {k:width$}  {d}\n"));
    }
    s
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    if !CONFIG_KEYS.iter().any(|(k, _)| *k == key) {
        return Err(Error::parse("--set", format!("unknown config key `{key}`")));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::parse("--set", format!("`{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse an override value as TOML, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parse `text` over the defaults and apply `key=value` overrides;
    /// overrides win.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::parse("config", e))?;
        let mut table: toml::Table = toml::from_str(&EngineConfig::default().to_toml()).expect("defaults parse");
        merge(&mut table, user);
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::parse("--set", format!("expected key=value, got `{o}`")))?;
            set_path(&mut table, k.trim(), override_value(v.trim()))?;
        }
        let cfg: EngineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::parse("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.kind == TensorKind::DualScale {
            return Err(Error::Config("dual_scale applies to activations only".into()));
        }
        if self.activations.kind == TensorKind::DualScale && !self.toggles.dualscale {
            return Err(Error::Config(
                "activations.kind = dual_scale requires toggles.dualscale = true".into(),
            ));
        }
        if self.weights.kind != TensorKind::Fp32
            && self.weights.kind != TensorKind::Fp8E4m3Sim
            && self.weights.bits == 4
            && self.weights.granularity != Granularity::PerChannel
        {
            return Err(Error::Config("4-bit weights require granularity per_channel".into()));
        }
        if let Some(s) = self.weights.scheme()? {
            s.validate_for(Role::Weight).map_err(|e| Error::Config(format!("weights: {e}")))?;
        }
        if let Some(s) = self.activations.scheme()? {
            s.validate_for(Role::Activation)
                .map_err(|e| Error::Config(format!("activations: {e}")))?;
        }
        self.optimizer.smooth.validate()?;
        if self.optimizer.method.low_rank() && self.optimizer.lowrank.rank == 0 {
            return Err(Error::Config("optimizer.lowrank.rank must be positive".into()));
        }
        self.calibrator.gptq.validate()?;
        if self.demo.steps == 0 || self.demo.hidden == 0 || self.demo.tokens == 0 || self.demo.calib_samples == 0 {
            return Err(Error::Config("demo sizes must be positive".into()));
        }
        Ok(())
    }

    /// Configuration that leaves every layer in full precision.
    pub fn full_precision() -> Self {
        let mut c = EngineConfig::default();
        c.weights.kind = TensorKind::Fp32;
        c.activations.kind = TensorKind::Fp32;
        c
    }
}
