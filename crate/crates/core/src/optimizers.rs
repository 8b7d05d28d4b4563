//! Pre-calibration transforms: SmoothQuant-style scale migration with an
//! α sweep, and a truncated-SVD low-rank branch.

use serde::{Deserialize, Serialize};

use crate::calibrators::{divide_columns, scale_rows, stack_rows, LayerSchemes};
use crate::calibstats::mse;
use crate::error::{Error, Result};
use crate::exec::{map_range, ExecMode};
use crate::linalg;
use crate::numerics::{matmul, Tensor};
use crate::quantcore::{dequantize, offsets, quantize, Role, Segments, SCALE_EPS};
use crate::seginfer::SegmentPlan;

pub fn default_alpha_grid() -> Vec<f32> {
    (0..=10).map(|i| i as f32 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothConfig {
    #[serde(serialize_with = "crate::numerics::short_f32::serialize")]
    pub alphas: Vec<f32>,
    /// Choose α independently for every input segment.
    pub per_segment: bool,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig {
            alphas: default_alpha_grid(),
            per_segment: true,
        }
    }
}

impl SmoothConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::Config("smooth.alphas must not be empty".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Config(format!("smooth.alphas value {a} is outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LowRankConfig {
    pub rank: usize,
}

impl Default for LowRankConfig {
    fn default() -> Self {
        LowRankConfig { rank: 8 }
    }
}

/// `s_j = act_j^α / w_j^(1−α)` with both inputs floored at a small epsilon.
pub fn smooth_factors(act_amax: &[f32], w_amax: &[f32], alpha: f32) -> Result<Vec<f32>> {
    if act_amax.len() != w_amax.len() {
        return Err(Error::Shape(format!(
            "{} activation maxima for {} weight maxima",
            act_amax.len(),
            w_amax.len()
        )));
    }
    Ok(act_amax
        .iter()
        .zip(w_amax)
        .map(|(&a, &w)| a.max(SCALE_EPS).powf(alpha) / w.max(SCALE_EPS).powf(1.0 - alpha))
        .collect())
}

/// Maximum magnitude of every weight row (one per input channel).
pub fn weight_row_amax(w: &Tensor) -> Vec<f32> {
    (0..w.rows())
        .map(|r| w.row(r).iter().fold(0.0f32, |m, v| m.max(v.abs())))
        .collect()
}

/// Maximum magnitude of every column of `x`.
pub fn column_amax(x: &Tensor) -> Vec<f32> {
    let mut out = vec![0.0f32; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in out.iter_mut().zip(x.row(r)) {
            *m = m.max(v.abs());
        }
    }
    out
}

/// Output MSE of one input segment's contribution `x·w` after smoothing
/// by `s` and quantizing both operands.
pub fn smoothed_segment_mse(
    x: &Tensor,
    w: &Tensor,
    s: &[f32],
    out_segments: &[usize],
    schemes: LayerSchemes,
) -> Result<f64> {
    let reference = matmul(x, w)?;
    let xs = divide_columns(x, s)?;
    let ws = scale_rows(w, s)?;
    let xd = match schemes.activation {
        Some(a) => dequantize(&quantize(&xs, a, Role::Activation, &Segments::whole(xs.rows(), xs.cols()))?),
        None => xs,
    };
    let wd = match schemes.weight {
        Some(sw) => dequantize(&quantize(
            &ws,
            sw,
            Role::Weight,
            &Segments {
                rows: vec![ws.rows()],
                cols: out_segments.to_vec(),
            },
        )?),
        None => ws,
    };
    mse(&reference, &matmul(&xd, &wd)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothResult {
    /// Chosen α per input segment.
    pub alphas: Vec<f32>,
    /// Quantized MSE of each input segment's contribution at its α.
    pub mse: Vec<f64>,
    /// Divisor per input channel.
    pub smoothing: Vec<f32>,
    /// Weight with rows multiplied by `smoothing`.
    pub weight: Tensor,
}

impl SmoothResult {
    pub fn total_mse(&self) -> f64 {
        self.mse.iter().sum()
    }
}

/// Smallest MSE, ties toward the smaller α.
fn argmin(alphas: &[f32], errors: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..alphas.len() {
        if errors[i] < errors[best] || (errors[i] == errors[best] && alphas[i] < alphas[best]) {
            best = i;
        }
    }
    best
}

/// Exhaustive α search on the calibration inputs.
pub fn sweep_alpha(
    w: &Tensor,
    calib_inputs: &[Tensor],
    plan: &SegmentPlan,
    schemes: LayerSchemes,
    cfg: &SmoothConfig,
) -> Result<SmoothResult> {
    sweep_alpha_with(ExecMode::default(), w, calib_inputs, plan, schemes, cfg)
}

pub fn sweep_alpha_with(
    mode: ExecMode,
    w: &Tensor,
    calib_inputs: &[Tensor],
    plan: &SegmentPlan,
    schemes: LayerSchemes,
    cfg: &SmoothConfig,
) -> Result<SmoothResult> {
    cfg.validate()?;
    let x = stack_rows(calib_inputs, w.rows())?;
    let act_amax = column_amax(&x);
    let w_amax = weight_row_amax(w);
    let bounds = offsets(&plan.in_segments);
    let segs: Vec<(usize, usize)> = bounds.windows(2).map(|b| (b[0], b[1] - b[0])).collect();
    let grid = &cfg.alphas;

    // errors[seg][alpha]
    let errors: Vec<Vec<f64>> = segs
        .iter()
        .map(|&(start, len)| {
            let xs = x.slice_cols(start, len)?;
            let ws = w.slice_rows(start, len)?;
            let (am, wm) = (&act_amax[start..start + len], &w_amax[start..start + len]);
            map_range(mode, grid.len(), |i| {
                let s = smooth_factors(am, wm, grid[i])?;
                smoothed_segment_mse(&xs, &ws, &s, &plan.out_segments, schemes)
            })
            .into_iter()
            .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let chosen: Vec<usize> = if cfg.per_segment {
        errors.iter().map(|e| argmin(grid, e)).collect()
    } else {
        let totals: Vec<f64> = (0..grid.len()).map(|i| errors.iter().map(|e| e[i]).sum()).collect();
        vec![argmin(grid, &totals); segs.len()]
    };
    let mut smoothing = Vec::with_capacity(w.rows());
    for (&(start, len), &ai) in segs.iter().zip(&chosen) {
        smoothing.extend(smooth_factors(
            &act_amax[start..start + len],
            &w_amax[start..start + len],
            grid[ai],
        )?);
    }
    Ok(SmoothResult {
        alphas: chosen.iter().map(|&i| grid[i]).collect(),
        mse: chosen.iter().zip(&errors).map(|(&i, e)| e[i]).collect(),
        weight: scale_rows(w, &smoothing)?,
        smoothing,
    })
}

/// `w ≈ down·up + residual` with `down = U_r·Σ_r` and `up = V_rᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub down: Tensor,
    pub up: Tensor,
    pub residual: Tensor,
    /// All singular values of `w`, non-increasing.
    pub singular_values: Vec<f64>,
}

impl LowRank {
    pub fn residual_norm(&self) -> f64 {
        self.residual.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }
}

pub fn svd_lowrank(w: &Tensor, cfg: &LowRankConfig) -> Result<LowRank> {
    let (k, n) = (w.rows(), w.cols());
    let r = cfg.rank;
    if r == 0 || r >= k.min(n) {
        return Err(Error::Config(format!(
            "lowrank.rank must be in 1..{} for a {k}×{n} weight, got {r}",
            k.min(n)
        )));
    }
    let a: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let svd = linalg::svd(&a, k, n)?;
    let p = k.min(n);
    let mut down = Vec::with_capacity(k * r);
    for i in 0..k {
        for j in 0..r {
            down.push(svd.u[i * p + j] * svd.sigma[j]);
        }
    }
    let mut up = Vec::with_capacity(r * n);
    for j in 0..r {
        for i in 0..n {
            up.push(svd.v[i * p + j]);
        }
    }
    let mut residual = Vec::with_capacity(k * n);
    for i in 0..k {
        for c in 0..n {
            let approx: f64 = (0..r).map(|j| down[i * r + j] * up[j * n + c]).sum();
            residual.push((a[i * n + c] - approx) as f32);
        }
    }
    Ok(LowRank {
        down: Tensor::new(vec![k, r], down.into_iter().map(|v| v as f32).collect())?,
        up: Tensor::new(vec![r, n], up.into_iter().map(|v| v as f32).collect())?,
        residual: Tensor::new(vec![k, n], residual)?,
        singular_values: svd.sigma,
    })
}
