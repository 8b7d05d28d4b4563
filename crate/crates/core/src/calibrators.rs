//! Weight and activation calibration: AMax and GPTQ, both segment-aware.

use serde::{Deserialize, Serialize};

use crate::calibstats::PointStats;
use crate::error::{Error, Result};
use crate::graphir::add_row_bias;
use crate::linalg::inverse_cholesky_upper;
use crate::numerics::{matmul, Tensor};
use crate::quantcore::{
    derive_params, dequantize, e4m3_round, encode_with, group_index, offsets, params_for_range, qgemm,
    quantize, quantize_static, Granularity, Payload, QParams, QuantizedTensor, Role, Scheme, SchemeKind,
    Segments,
};
use crate::seginfer::SegmentPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibMethod {
    #[default]
    Amax,
    Gptq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GptqConfig {
    pub block_size: usize,
    /// Fraction of the mean Hessian diagonal added to the diagonal.
    pub damping: f64,
}

impl Default for GptqConfig {
    fn default() -> Self {
        GptqConfig {
            block_size: 16,
            damping: 0.01,
        }
    }
}

impl GptqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("gptq.block_size must be positive".into()));
        }
        if !(self.damping > 0.0) || !self.damping.is_finite() {
            return Err(Error::Config("gptq.damping must be positive".into()));
        }
        Ok(())
    }
}

/// Weight and activation schemes for one layer; `None` keeps FP32.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSchemes {
    pub weight: Option<Scheme>,
    pub activation: Option<Scheme>,
}

/// How a layer's input is quantized at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ActivationQuant {
    None,
    /// Parameters derived from each incoming tensor.
    Dynamic { scheme: Scheme, col_segments: Vec<usize> },
    /// Parameters fixed from calibration statistics, one per column segment.
    Static {
        scheme: Scheme,
        col_segments: Vec<usize>,
        params: Vec<QParams>,
    },
}

impl ActivationQuant {
    pub fn scheme(&self) -> Option<Scheme> {
        match self {
            ActivationQuant::None => None,
            ActivationQuant::Dynamic { scheme, .. } | ActivationQuant::Static { scheme, .. } => Some(*scheme),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Option<QuantizedTensor>> {
        match self {
            ActivationQuant::None => Ok(None),
            ActivationQuant::Dynamic { scheme, col_segments } => Ok(Some(quantize(
                x,
                *scheme,
                Role::Activation,
                &Segments::columns(x.rows(), col_segments.clone()),
            )?)),
            ActivationQuant::Static {
                scheme,
                col_segments,
                params,
            } => Ok(Some(quantize_static(x, *scheme, col_segments, params)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeight {
    Full(Tensor),
    Coded(QuantizedTensor),
}

impl LayerWeight {
    pub fn dequantized(&self) -> Tensor {
        match self {
            LayerWeight::Full(t) => t.clone(),
            LayerWeight::Coded(q) => dequantize(q),
        }
    }
}

/// A full-precision low-rank branch `x·down·up` added to the layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankBranch {
    pub down: Tensor,
    pub up: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub layer_id: String,
    pub weight: LayerWeight,
    pub activation: ActivationQuant,
    /// Per-input-channel divisor applied to the input; the weight rows were
    /// multiplied by the same vector before quantization.
    pub smoothing: Option<Vec<f32>>,
    pub low_rank: Option<LowRankBranch>,
    pub method: CalibMethod,
    pub fallback: Option<String>,
}

impl QuantizedLayer {
    /// Simulated forward pass: smoothing, activation quantization, integer
    /// GEMM when both operands are coded, low-rank branch and bias.
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let smoothed;
        let x = match &self.smoothing {
            Some(s) => {
                smoothed = divide_columns(x, s)?;
                &smoothed
            }
            None => x,
        };
        let xq = self.activation.apply(x)?;
        let mut y = match (&xq, &self.weight) {
            (None, LayerWeight::Full(w)) => matmul(x, w)?,
            (None, LayerWeight::Coded(w)) => matmul(x, &dequantize(w))?,
            (Some(q), LayerWeight::Full(w)) => matmul(&dequantize(q), w)?,
            (Some(q), LayerWeight::Coded(w)) => {
                let integer_pair = !matches!(q.payload, Payload::Float(_)) && matches!(w.payload, Payload::Int(_));
                if integer_pair {
                    qgemm(q, w)?
                } else {
                    matmul(&dequantize(q), &dequantize(w))?
                }
            }
        };
        if let Some(lr) = &self.low_rank {
            y = y.add(&matmul(&matmul(x, &lr.down)?, &lr.up)?)?;
        }
        match bias {
            Some(b) => add_row_bias(&y, b),
            None => Ok(y),
        }
    }
}

pub(crate) fn divide_columns(x: &Tensor, s: &[f32]) -> Result<Tensor> {
    if x.cols() != s.len() {
        return Err(Error::Shape(format!(
            "smoothing vector of {} for width {}",
            s.len(),
            x.cols()
        )));
    }
    let k = s.len();
    let data = x.data().iter().enumerate().map(|(i, &v)| v / s[i % k]).collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn scale_rows(w: &Tensor, s: &[f32]) -> Result<Tensor> {
    if w.rows() != s.len() {
        return Err(Error::Shape(format!(
            "smoothing vector of {} for {} weight rows",
            s.len(),
            w.rows()
        )));
    }
    let n = w.cols();
    let data = w.data().iter().enumerate().map(|(i, &v)| v * s[i / n]).collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Activation quantization for a layer from its input statistics.
pub fn calibrate_activation(
    stats: Option<&PointStats>,
    plan: &SegmentPlan,
    scheme: Option<Scheme>,
) -> Result<ActivationQuant> {
    let Some(scheme) = scheme else {
        return Ok(ActivationQuant::None);
    };
    let col_segments = plan.in_segments.clone();
    if scheme.granularity == Granularity::PerTokenDynamic || scheme.kind == SchemeKind::Fp8E4m3Sim {
        return Ok(ActivationQuant::Dynamic { scheme, col_segments });
    }
    let stats = stats.ok_or_else(|| {
        Error::InvalidArgument(format!("no activation statistics for `{}`", plan.layer_id))
    })?;
    let off = offsets(&col_segments);
    let params = off
        .windows(2)
        .map(|w| {
            let (lo, hi) = stats.range(w[0], w[1] - w[0])?;
            Ok(params_for_range(scheme, lo, hi))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActivationQuant::Static {
        scheme,
        col_segments,
        params,
    })
}

fn quantize_weight(w: &Tensor, plan: &SegmentPlan, scheme: Option<Scheme>) -> Result<LayerWeight> {
    match scheme {
        None => Ok(LayerWeight::Full(w.clone())),
        Some(s) => Ok(LayerWeight::Coded(crate::quantcore::segmented_quantize_weight(w, plan, s)?)),
    }
}

/// Round-to-nearest weights with scales from block absolute maxima, and
/// activation parameters from `stats`.
pub fn amax_calibrate(
    w: &Tensor,
    stats: Option<&PointStats>,
    plan: &SegmentPlan,
    schemes: LayerSchemes,
) -> Result<QuantizedLayer> {
    Ok(QuantizedLayer {
        layer_id: plan.layer_id.clone(),
        weight: quantize_weight(w, plan, schemes.weight)?,
        activation: calibrate_activation(stats, plan, schemes.activation)?,
        smoothing: None,
        low_rank: None,
        method: CalibMethod::Amax,
        fallback: None,
    })
}

/// Stack calibration inputs by rows.
pub(crate) fn stack_rows(inputs: &[Tensor], k: usize) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no calibration inputs".into()));
    }
    if let Some(bad) = inputs.iter().find(|x| x.cols() != k) {
        return Err(Error::Shape(format!(
            "calibration input width {} for a layer of width {k}",
            bad.cols()
        )));
    }
    let mats: Vec<Tensor> = inputs.iter().map(|x| x.as_matrix()).collect();
    let refs: Vec<&Tensor> = mats.iter().collect();
    Tensor::concat_rows(&refs)
}

/// `XᵀX` restricted to columns `[start, start+len)`, in f64.
fn segment_hessian(x: &Tensor, start: usize, len: usize) -> Vec<f64> {
    let mut h = vec![0.0f64; len * len];
    for r in 0..x.rows() {
        let row = &x.row(r)[start..start + len];
        for i in 0..len {
            let xi = row[i] as f64;
            if xi == 0.0 {
                continue;
            }
            for j in i..len {
                h[i * len + j] += xi * row[j] as f64;
            }
        }
    }
    for i in 0..len {
        for j in 0..i {
            h[i * len + j] = h[j * len + i];
        }
    }
    h
}

/// Quantize-dequantize one weight entry with its group's parameters.
#[inline]
fn fake_quant(p: &QParams, v: f32) -> f32 {
    match p {
        QParams::Float => e4m3_round(v),
        _ => p.decode(p.encode(v)),
    }
}

/// GPTQ weights for one layer. Input rows of each input segment are
/// quantized in order, and each row's rounding error is propagated into the
/// not-yet-quantized rows of that segment through the inverse Hessian of
/// the segment's calibration inputs. Parameters for every weight block are
/// fixed from the original weight before compensation starts. A
/// numerically singular Hessian falls back to round-to-nearest.
pub fn gptq_weight(
    w: &Tensor,
    x: &Tensor,
    plan: &SegmentPlan,
    scheme: Scheme,
    cfg: &GptqConfig,
) -> Result<(QuantizedTensor, Option<String>)> {
    cfg.validate()?;
    scheme.validate_for(Role::Weight)?;
    let (k, n) = (w.rows(), w.cols());
    if x.cols() != k {
        return Err(Error::Shape(format!(
            "calibration width {} for weight {:?}",
            x.cols(),
            w.shape()
        )));
    }
    let segments = Segments {
        rows: plan.in_segments.clone(),
        cols: plan.out_segments.clone(),
    };
    let (layout, params) = derive_params(w, scheme, &segments)?;
    let rg = group_index(&layout.row_groups);
    let cg = group_index(&layout.col_groups);
    let ncg = layout.col_groups.len();
    let mut work: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let mut at_quant = vec![0.0f32; k * n];
    let rtn = || -> Result<(QuantizedTensor, Option<String>)> {
        Ok((quantize(w, scheme, Role::Weight, &segments)?, None))
    };

    for seg in offsets(&plan.in_segments).windows(2) {
        let (start, len) = (seg[0], seg[1] - seg[0]);
        let mut h = segment_hessian(x, start, len);
        for i in 0..len {
            if h[i * len + i] == 0.0 {
                h[i * len + i] = 1.0;
            }
        }
        let mean_diag = (0..len).map(|i| h[i * len + i]).sum::<f64>() / len as f64;
        for i in 0..len {
            h[i * len + i] += cfg.damping * mean_diag;
        }
        let Some(u) = inverse_cholesky_upper(&h, len) else {
            let (q, _) = rtn()?;
            return Ok((
                q,
                Some(format!(
                    "hessian of input segment at {start} is singular after damping; used round-to-nearest"
                )),
            ));
        };
        let mut err = vec![0.0f64; cfg.block_size.min(len) * n];
        let mut b0 = 0;
        while b0 < len {
            let b1 = (b0 + cfg.block_size).min(len);
            for i in b0..b1 {
                let r = start + i;
                let d = u[i * len + i];
                for c in 0..n {
                    let v = work[r * n + c] as f32;
                    at_quant[r * n + c] = v;
                    let q = fake_quant(&params[rg[r] * ncg + cg[c]], v);
                    err[(i - b0) * n + c] = (work[r * n + c] - q as f64) / d;
                }
                for j in i + 1..b1 {
                    let f = u[i * len + j];
                    let rj = start + j;
                    for c in 0..n {
                        work[rj * n + c] -= f * err[(i - b0) * n + c];
                    }
                }
            }
            for j in b1..len {
                let rj = start + j;
                for i in b0..b1 {
                    let f = u[i * len + j];
                    for c in 0..n {
                        work[rj * n + c] -= f * err[(i - b0) * n + c];
                    }
                }
            }
            b0 = b1;
        }
    }
    if at_quant.iter().any(|v| !v.is_finite()) {
        let (q, _) = rtn()?;
        return Ok((q, Some("non-finite compensation; used round-to-nearest".into())));
    }
    let updated = Tensor::new(vec![k, n], at_quant)?;
    Ok((encode_with(&updated, scheme, segments, layout, params)?, None))
}

/// GPTQ weights plus activation parameters from the calibration inputs.
pub fn gptq_calibrate(
    w: &Tensor,
    calib_inputs: &[Tensor],
    plan: &SegmentPlan,
    schemes: LayerSchemes,
    cfg: &GptqConfig,
) -> Result<QuantizedLayer> {
    let x = stack_rows(calib_inputs, w.rows())?;
    let mut stats = PointStats::new(w.rows());
    stats.observe(&x)?;
    let (weight, fallback) = match schemes.weight {
        None => (LayerWeight::Full(w.clone()), None),
        Some(s) => {
            let (q, f) = gptq_weight(w, &x, plan, s, cfg)?;
            (LayerWeight::Coded(q), f)
        }
    };
    Ok(QuantizedLayer {
        layer_id: plan.layer_id.clone(),
        weight,
        activation: calibrate_activation(Some(&stats), plan, schemes.activation)?,
        smoothing: None,
        low_rank: None,
        method: CalibMethod::Gptq,
        fallback,
    })
}
