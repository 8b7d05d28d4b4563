use serde::{Deserialize, Serialize};

use super::{EngineConfig, OptimizerMethod};
use crate::calibrators::{ActivationQuant, CalibMethod, LayerWeight, QuantizedLayer};
use crate::calibstats::ErrorReportRow;
use crate::seginfer::SegmentPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorReport {
    pub method: CalibMethod,
    pub block_size: Option<usize>,
    pub damping: Option<f64>,
    pub fallback: Option<String>,
}

impl CalibratorReport {
    pub(crate) fn new(cfg: &EngineConfig, layer: &QuantizedLayer) -> Self {
        let gptq = layer.method == CalibMethod::Gptq;
        CalibratorReport {
            method: layer.method,
            block_size: gptq.then_some(cfg.calibrator.gptq.block_size),
            damping: gptq.then_some(cfg.calibrator.gptq.damping),
            fallback: layer.fallback.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub method: OptimizerMethod,
    /// Chosen α per input segment.
    #[serde(serialize_with = "crate::numerics::short_f32::serialize")]
    pub alphas: Vec<f32>,
    pub smooth_mse: Vec<f64>,
    pub rank: Option<usize>,
    pub residual_norm: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub id: String,
    pub quantized: bool,
    pub plan: SegmentPlan,
    pub weight_scheme: Option<String>,
    pub weight_groups: usize,
    pub weight_scale_min: Option<f32>,
    pub weight_scale_max: Option<f32>,
    pub activation_mode: String,
    pub activation_scheme: Option<String>,
    pub calibrator: Option<CalibratorReport>,
    pub optimizer: OptimizerReport,
    pub errors: Vec<ErrorReportRow>,
}

impl LayerReport {
    pub(crate) fn new(plan: SegmentPlan) -> Self {
        LayerReport {
            id: plan.layer_id.clone(),
            quantized: false,
            plan,
            weight_scheme: None,
            weight_groups: 0,
            weight_scale_min: None,
            weight_scale_max: None,
            activation_mode: "none".into(),
            activation_scheme: None,
            calibrator: None,
            optimizer: OptimizerReport {
                method: OptimizerMethod::None,
                alphas: Vec::new(),
                smooth_mse: Vec::new(),
                rank: None,
                residual_norm: None,
                note: None,
            },
            errors: Vec::new(),
        }
    }

    pub(crate) fn fill_schemes(&mut self, layer: &QuantizedLayer) {
        if let LayerWeight::Coded(q) = &layer.weight {
            self.weight_scheme = Some(q.scheme.to_string());
            self.weight_groups = q.params.len();
            let scales = q.params.iter().map(|p| p.scale());
            self.weight_scale_min = scales.clone().reduce(f32::min);
            self.weight_scale_max = scales.reduce(f32::max);
        }
        self.activation_mode = match layer.activation {
            ActivationQuant::None => "none",
            ActivationQuant::Dynamic { .. } => "dynamic",
            ActivationQuant::Static { .. } => "static",
        }
        .into();
        self.activation_scheme = layer.activation.scheme().map(|s| s.to_string());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub tool: ToolInfo,
    pub config: EngineConfig,
    pub layers: Vec<LayerReport>,
    /// End-to-end metrics on the calibration inputs, per graph output.
    pub metrics: Vec<ErrorReportRow>,
}

impl QuantReport {
    pub(crate) fn new(config: EngineConfig, layers: Vec<LayerReport>, metrics: Vec<ErrorReportRow>) -> Self {
        QuantReport {
            tool: ToolInfo {
                name: env!("CARGO_PKG_NAME").into(),
                version: env!("CARGO_PKG_VERSION").into(),
            },
            config,
            layers,
            metrics,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn layer(&self, id: &str) -> Option<&LayerReport> {
        self.layers.iter().find(|l| l.id == id)
    }
}
