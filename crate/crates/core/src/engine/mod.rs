//! End-to-end pipeline: plan, capture calibration inputs, optimize and
//! calibrate every linear layer, then evaluate against the FP32 graph.

mod bundle;
mod config;
mod report;

use std::collections::BTreeMap;

pub use bundle::{load_bundle, save_bundle, write_report, BUNDLE_FILES};
pub use config::{
    keys_help, CalibratorConfig, DemoConfig, EngineConfig, OptimizerConfig, OptimizerMethod, ScopeConfig,
    TensorConfig, TensorKind, Toggles, CONFIG_KEYS,
};
pub use report::{CalibratorReport, LayerReport, OptimizerReport, QuantReport, ToolInfo};

use crate::calibrators::{
    amax_calibrate, divide_columns, gptq_calibrate, stack_rows, CalibMethod, LayerSchemes, LayerWeight,
    LowRankBranch, QuantizedLayer,
};
use crate::calibstats::{frobenius, mse, psnr, ssim_default, ErrorReportRow, Metric, PointStats};
use crate::error::{Error, Result};
use crate::exec::{map_range, ExecMode};
use crate::graphir::{execute, execute_with, reference_linear, Graph, Hooks};
use crate::numerics::{matmul, Tensor};
use crate::optimizers::{svd_lowrank, sweep_alpha_with};
use crate::quantcore::{Scheme, SchemeKind};
use crate::seginfer::{build_plan, QuantPlan, SegmentPlan};

/// One set of graph input bindings.
pub type Bindings = BTreeMap<String, Tensor>;

/// Quantized replacements for the graph's linear layers. Layers absent
/// from `layers` run in full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub plan: QuantPlan,
    pub layers: BTreeMap<String, QuantizedLayer>,
}

struct ModelHooks<'a> {
    model: &'a QuantizedModel,
}

impl Hooks for ModelHooks<'_> {
    fn linear(&mut self, node: &str, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        match self.model.layers.get(node) {
            Some(layer) => layer.forward(x, bias).map_err(|e| e.in_layer(node)),
            None => reference_linear(x, weight, bias),
        }
    }
}

impl QuantizedModel {
    pub fn run(&self, g: &Graph, inputs: &Bindings) -> Result<Bindings> {
        execute_with(g, inputs, &mut ModelHooks { model: self })
    }

    /// Keep only the layers whose id starts with one of `prefixes`.
    pub fn restricted_to(&self, prefixes: &[&str]) -> QuantizedModel {
        QuantizedModel {
            plan: self.plan.clone(),
            layers: self
                .layers
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Check that every layer fits the graph's weights.
    pub fn check_against(&self, g: &Graph) -> Result<()> {
        for (id, layer) in &self.layers {
            let (w, _) = g
                .linear_params(id)
                .ok_or_else(|| Error::InvalidArgument(format!("bundle layer `{id}` is not a linear in the graph")))?;
            let (rows, cols) = match &layer.weight {
                LayerWeight::Full(t) => (t.rows(), t.cols()),
                LayerWeight::Coded(q) => (q.rows, q.cols),
            };
            if (rows, cols) != (w.rows(), w.cols()) {
                return Err(Error::Shape(format!(
                    "bundle layer `{id}` is [{rows}×{cols}], graph weight is {:?}",
                    w.shape()
                )));
            }
        }
        Ok(())
    }
}

struct Capture {
    inputs: BTreeMap<String, Vec<Tensor>>,
}

impl Hooks for Capture {
    fn linear(&mut self, node: &str, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        self.inputs.entry(node.to_string()).or_default().push(x.clone());
        reference_linear(x, weight, bias)
    }
}

/// The FP32 input of every linear layer for every calibration sample.
pub fn capture_linear_inputs(g: &Graph, calib: &[Bindings]) -> Result<BTreeMap<String, Vec<Tensor>>> {
    let mut cap = Capture {
        inputs: BTreeMap::new(),
    };
    for b in calib {
        execute_with(g, b, &mut cap)?;
    }
    Ok(cap.inputs)
}

/// Activation scheme for one layer: eligible layers are upgraded to dual
/// scale when the toggle is on and the configured scheme is integer.
pub fn activation_scheme(cfg: &EngineConfig, plan: &SegmentPlan) -> Result<Option<Scheme>> {
    let Some(base) = cfg.activations.scheme()? else {
        return Ok(None);
    };
    let upgrade = cfg.toggles.dualscale
        && plan.dualscale_eligible
        && matches!(base.kind, SchemeKind::IntSym | SchemeKind::IntAsym);
    Ok(Some(if upgrade {
        Scheme {
            kind: SchemeKind::DualScale,
            ..base
        }
    } else {
        base
    }))
}

fn row(layer: &str, metric: Metric, value: f64) -> ErrorReportRow {
    ErrorReportRow {
        layer: layer.to_string(),
        metric,
        value,
    }
}

fn effective_weight(layer: &QuantizedLayer) -> Result<Tensor> {
    let mut w = layer.weight.dequantized();
    if let Some(lr) = &layer.low_rank {
        w = w.add(&matmul(&lr.down, &lr.up)?)?;
    }
    if let Some(s) = &layer.smoothing {
        let inv: Vec<f32> = s.iter().map(|v| 1.0 / v).collect();
        w = crate::calibrators::scale_rows(&w, &inv)?;
    }
    Ok(w)
}

struct LayerOutcome {
    layer: Option<QuantizedLayer>,
    report: LayerReport,
}

fn quantize_layer(g: &Graph, plan: &SegmentPlan, xs: &[Tensor], cfg: &EngineConfig, mode: ExecMode) -> Result<LayerOutcome> {
    let id = plan.layer_id.as_str();
    let (w, bias) = g.linear_params(id).expect("plan covers linear layers");
    let weight_scheme = cfg.weights.scheme()?;
    let act_scheme = activation_scheme(cfg, plan)?;
    let mut report = LayerReport::new(plan.clone());
    if !cfg.scope.includes(id) {
        return Ok(LayerOutcome { layer: None, report });
    }
    let schemes = LayerSchemes {
        weight: weight_scheme,
        activation: act_scheme,
    };
    let method = cfg.optimizer.method;
    report.optimizer.method = method;

    let (w_opt, smoothing) = if method.smooths() {
        let r = sweep_alpha_with(mode, w, xs, plan, schemes, &cfg.optimizer.smooth)?;
        report.optimizer.alphas = r.alphas.clone();
        report.optimizer.smooth_mse = r.mse.clone();
        if act_scheme.map(|s| s.kind) == Some(SchemeKind::DualScale) {
            report.optimizer.note = Some("smoothing applied on the dual-scale activation path".into());
        }
        (r.weight, Some(r.smoothing))
    } else {
        (w.clone(), None)
    };
    let xs_opt: Vec<Tensor> = match &smoothing {
        Some(s) => xs.iter().map(|x| divide_columns(x, s)).collect::<Result<_>>()?,
        None => xs.to_vec(),
    };
    let (w_cal, low_rank) = if method.low_rank() {
        let rank = cfg.optimizer.lowrank.rank;
        if rank < w.rows().min(w.cols()) {
            let lr = svd_lowrank(&w_opt, &cfg.optimizer.lowrank)?;
            report.optimizer.rank = Some(rank);
            report.optimizer.residual_norm = Some(lr.residual_norm());
            let branch = LowRankBranch {
                down: lr.down,
                up: lr.up,
            };
            (lr.residual, Some(branch))
        } else {
            report.optimizer.note = Some(format!(
                "low-rank branch skipped: rank {rank} is not below min(k, n) = {}",
                w.rows().min(w.cols())
            ));
            (w_opt, None)
        }
    } else {
        (w_opt, None)
    };

    let mut layer = match cfg.calibrator.method {
        CalibMethod::Amax => {
            let x = stack_rows(&xs_opt, w.rows())?;
            let mut stats = PointStats::new(w.rows());
            stats.observe(&x)?;
            amax_calibrate(&w_cal, Some(&stats), plan, schemes)?
        }
        CalibMethod::Gptq => gptq_calibrate(&w_cal, &xs_opt, plan, schemes, &cfg.calibrator.gptq)?,
    };
    layer.smoothing = smoothing;
    layer.low_rank = low_rank;

    report.quantized = true;
    report.fill_schemes(&layer);
    report.calibrator = Some(CalibratorReport::new(cfg, &layer));

    let x = stack_rows(xs, w.rows())?;
    let y_ref = reference_linear(&x, w, bias)?;
    let y_q = layer.forward(&x, bias)?;
    report.errors.push(row(id, Metric::Mse, mse(&y_ref, &y_q)?));
    report.errors.push(row(id, Metric::Frobenius, frobenius(&y_ref, &y_q)?));
    report.errors.push(row(
        &format!("{id}.weight"),
        Metric::Frobenius,
        frobenius(w, &effective_weight(&layer)?)?,
    ));
    Ok(LayerOutcome {
        layer: Some(layer),
        report,
    })
}

/// Quantize every linear layer of `g`.
pub fn quantize_model(g: &Graph, calib: &[Bindings], cfg: &EngineConfig) -> Result<(QuantizedModel, QuantReport)> {
    quantize_model_with(ExecMode::default(), g, calib, cfg)
}

pub fn quantize_model_with(
    mode: ExecMode,
    g: &Graph,
    calib: &[Bindings],
    cfg: &EngineConfig,
) -> Result<(QuantizedModel, QuantReport)> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::InvalidArgument("no calibration samples".into()));
    }
    let plan = build_plan(g, cfg.toggles.into());
    let captured = capture_linear_inputs(g, calib)?;
    let plans: Vec<&SegmentPlan> = plan.layers.values().collect();
    let outcomes = map_range(mode, plans.len(), |i| {
        let p = plans[i];
        let xs = captured
            .get(&p.layer_id)
            .ok_or_else(|| Error::InvalidArgument("linear layer never executed".into()))
            .and_then(|xs| quantize_layer(g, p, xs, cfg, ExecMode::Sequential));
        xs.map_err(|e| e.in_layer(&p.layer_id))
    });
    let mut layers = BTreeMap::new();
    let mut reports = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let o = o?;
        if let Some(l) = o.layer {
            layers.insert(l.layer_id.clone(), l);
        }
        reports.push(o.report);
    }
    let model = QuantizedModel { plan, layers };
    let metrics = evaluate(g, &model, calib)?;
    let report = QuantReport::new(cfg.clone(), reports, metrics);
    Ok((model, report))
}

/// Per-output MSE, Frobenius, PSNR and SSIM of the quantized model against
/// the FP32 executor, with samples stacked by rows.
pub fn evaluate(g: &Graph, model: &QuantizedModel, inputs: &[Bindings]) -> Result<Vec<ErrorReportRow>> {
    model.check_against(g)?;
    let mut reference: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    let mut quantized: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    for b in inputs {
        for (k, v) in execute(g, b)? {
            reference.entry(k).or_default().push(v.as_matrix());
        }
        for (k, v) in model.run(g, b)? {
            quantized.entry(k).or_default().push(v.as_matrix());
        }
    }
    let mut rows = Vec::new();
    for (k, refs) in &reference {
        let r = Tensor::concat_rows(&refs.iter().collect::<Vec<_>>())?;
        let q = Tensor::concat_rows(&quantized[k].iter().collect::<Vec<_>>())?;
        if r.shape() != q.shape() {
            return Err(Error::Shape(format!("output `{k}` drifted from {:?} to {:?}", r.shape(), q.shape())));
        }
        let span = (r.max() - r.min()) as f64;
        let range = if span > 0.0 { span } else { 1.0 };
        rows.push(row(k, Metric::Mse, mse(&r, &q)?));
        rows.push(row(k, Metric::Frobenius, frobenius(&r, &q)?));
        rows.push(row(k, Metric::Psnr, psnr(&r, &q, range)?));
        rows.push(row(k, Metric::Ssim, ssim_default(&r, &q, range)?));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphir::{ActivationFn, GraphBuilder, NodeKind, Axis};
    use crate::numerics::{gaussian, Rng};

    fn small_graph() -> Graph {
        let mut rng = Rng::new(1);
        let mut b = GraphBuilder::new();
        let x = b.input("x", 6);
        let h = b.linear("fc1", &x, gaussian(&mut rng, vec![6, 8]).unwrap(), Some(gaussian(&mut rng, vec![8]).unwrap()));
        let a = b.act("act", ActivationFn::Silu, &h);
        let y = b.linear("fc2", &a, gaussian(&mut rng, vec![8, 6]).unwrap(), None);
        let c = b.node("chunk", NodeKind::Chunk { count: 2, axis: Axis::Features }, &[&y]);
        b.output("y0", &GraphBuilder::port("chunk", 0));
        b.output("y1", &GraphBuilder::port("chunk", 1));
        let _ = c;
        b.build().unwrap()
    }

    fn calib(n: usize) -> Vec<Bindings> {
        let mut rng = Rng::new(7);
        (0..n)
            .map(|_| BTreeMap::from([("x".to_string(), gaussian(&mut rng, vec![5, 6]).unwrap())]))
            .collect()
    }

    #[test]
    fn full_precision_is_bitwise_noop() {
        let g = small_graph();
        let c = calib(2);
        let (m, report) = quantize_model(&g, &c, &EngineConfig::full_precision()).unwrap();
        for b in &c {
            assert_eq!(m.run(&g, b).unwrap(), execute(&g, b).unwrap());
        }
        assert!(report.metrics.iter().filter(|r| r.metric == Metric::Mse).all(|r| r.value == 0.0));
    }

    #[test]
    fn int8_run_reports_every_layer() {
        let g = small_graph();
        let (m, report) = quantize_model(&g, &calib(3), &EngineConfig::default()).unwrap();
        assert_eq!(report.layers.len(), 2);
        assert_eq!(m.layers["fc2"].activation.scheme().unwrap().kind, SchemeKind::DualScale);
        assert_eq!(m.plan.layers["fc2"].out_segments, vec![3, 3]);
        assert!(report.metrics.iter().all(|r| r.value.is_finite()));
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let g = small_graph();
        let mut cfg = EngineConfig::default();
        cfg.optimizer.method = OptimizerMethod::SmoothSvd;
        cfg.optimizer.lowrank.rank = 2;
        cfg.calibrator.method = CalibMethod::Gptq;
        let a = quantize_model_with(ExecMode::Sequential, &g, &calib(2), &cfg).unwrap();
        let b = quantize_model_with(ExecMode::Parallel, &g, &calib(2), &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn scope_limits_quantized_layers() {
        let g = small_graph();
        let mut cfg = EngineConfig::default();
        cfg.scope.layers = vec!["fc2".into()];
        let (m, report) = quantize_model(&g, &calib(1), &cfg).unwrap();
        assert_eq!(m.layers.keys().collect::<Vec<_>>(), vec!["fc2"]);
        assert!(!report.layers[0].quantized);
    }

    #[test]
    fn empty_calibration_is_rejected() {
        assert!(quantize_model(&small_graph(), &[], &EngineConfig::default()).is_err());
    }
}
