//! Quantization schemes and their parameters.
//!
//! Conventions used throughout the crate:
//!
//! * integer symmetric codes live in `[-q_max, q_max]`, `q_max = 2^(b-1) - 1`;
//! * asymmetric and dual-scale codes live in `[-2^(b-1), 2^(b-1) - 1]`;
//! * asymmetric encode is `clip(round(x / s) + z)`, decode is `s · (x̂ - z)`;
//! * dual-scale keeps two code planes, `x̂₊ = round(max(x,0) / s₊)` and
//!   `x̂₋ = round(min(x,0) / s₋)`, decoding to `s₊·x̂₊ + s₋·x̂₋`;
//! * every scale is floored at [`SCALE_EPS`].

mod fp8;
mod gemm;
mod tensor;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::round_clip;

pub use fp8::{e4m3_round, fp8_sim, E4M3_MAX};
pub use gemm::{qgemm, seg_linear_forward};
pub use tensor::{
    dequantize, quantize, quantize_static, segmented_quantize_weight, BlockLayout, Payload,
    QuantizedTensor, Segments,
};
pub(crate) use tensor::{derive_params, encode_with, group_index, offsets};

pub const SCALE_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    IntSym,
    IntAsym,
    DualScale,
    Fp8E4m3Sim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
    PerTokenDynamic,
}

/// What a tensor is, for scheme validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scheme {
    pub kind: SchemeKind,
    pub bits: u8,
    pub granularity: Granularity,
}

impl Scheme {
    pub fn new(kind: SchemeKind, bits: u8, granularity: Granularity) -> Result<Self> {
        let s = Scheme {
            kind,
            bits,
            granularity,
        };
        s.check_bits()?;
        Ok(s)
    }

    pub fn int_sym(bits: u8) -> Self {
        Scheme {
            kind: SchemeKind::IntSym,
            bits,
            granularity: Granularity::PerTensor,
        }
    }

    pub fn int_asym(bits: u8) -> Self {
        Scheme {
            kind: SchemeKind::IntAsym,
            bits,
            granularity: Granularity::PerTensor,
        }
    }

    pub fn dual(bits: u8) -> Self {
        Scheme {
            kind: SchemeKind::DualScale,
            bits,
            granularity: Granularity::PerTensor,
        }
    }

    pub fn fp8() -> Self {
        Scheme {
            kind: SchemeKind::Fp8E4m3Sim,
            bits: 8,
            granularity: Granularity::PerTensor,
        }
    }

    pub fn with_granularity(mut self, g: Granularity) -> Self {
        self.granularity = g;
        self
    }

    fn check_bits(&self) -> Result<()> {
        if self.kind != SchemeKind::Fp8E4m3Sim && !matches!(self.bits, 4 | 8) {
            return Err(Error::SchemeMismatch(format!(
                "{} bits unsupported (4 or 8)",
                self.bits
            )));
        }
        Ok(())
    }

    /// Reject combinations that make no sense for `role`.
    pub fn validate_for(&self, role: Role) -> Result<()> {
        self.check_bits()?;
        let bad = |m: &str| Err(Error::SchemeMismatch(format!("{self}: {m}")));
        match (role, self.kind, self.granularity) {
            (Role::Weight, SchemeKind::DualScale, _) => bad("dual_scale applies to activations only"),
            (Role::Weight, _, Granularity::PerTokenDynamic) => bad("per_token_dynamic applies to activations only"),
            (Role::Activation, _, Granularity::PerChannel) => bad("per_channel applies to weights only"),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            SchemeKind::IntSym => "int_sym",
            SchemeKind::IntAsym => "int_asym",
            SchemeKind::DualScale => "dual_scale",
            SchemeKind::Fp8E4m3Sim => "fp8_e4m3_sim",
        };
        let granularity = match self.granularity {
            Granularity::PerTensor => "per_tensor",
            Granularity::PerChannel => "per_channel",
            Granularity::PerTokenDynamic => "per_token_dynamic",
        };
        write!(f, "{kind}/{}b/{granularity}", self.bits)
    }
}

/// Per-group quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QParams {
    Symmetric {
        scale: f32,
        q_max: i32,
    },
    Asymmetric {
        scale: f32,
        zero_point: i32,
        q_min: i32,
        q_max: i32,
    },
    Dual {
        pos_scale: f32,
        neg_scale: f32,
        q_min: i32,
        q_max: i32,
    },
    /// Simulated e4m3; values are stored, not coded.
    Float,
}

fn signed_range(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

pub fn qparams_symmetric(amax: f32, bits: u8) -> QParams {
    let q_max = (1i32 << (bits - 1)) - 1;
    QParams::Symmetric {
        scale: amax.max(SCALE_EPS) / q_max as f32,
        q_max,
    }
}

/// Affine parameters over `[min, max]` widened to contain zero.
pub fn qparams_asymmetric(min: f32, max: f32, bits: u8) -> QParams {
    let (lo, hi) = (min.min(0.0), max.max(0.0));
    let (q_min, q_max) = signed_range(bits);
    let scale = (hi - lo).max(SCALE_EPS) / (q_max - q_min) as f32;
    let z = q_min as i64 - (lo / scale).round() as i64;
    QParams::Asymmetric {
        scale,
        zero_point: z.clamp(q_min as i64, q_max as i64) as i32,
        q_min,
        q_max,
    }
}

/// Separate negative and positive step sizes over `[min, max]` widened to contain zero.
pub fn qparams_dual(min: f32, max: f32, bits: u8) -> QParams {
    let (q_min, q_max) = signed_range(bits);
    QParams::Dual {
        neg_scale: min.min(0.0).abs().max(SCALE_EPS) / q_min.unsigned_abs() as f32,
        pos_scale: max.max(0.0).max(SCALE_EPS) / q_max as f32,
        q_min,
        q_max,
    }
}

/// Parameters for `scheme` covering the observed range `[min, max]`.
pub fn params_for_range(scheme: Scheme, min: f32, max: f32) -> QParams {
    match scheme.kind {
        SchemeKind::IntSym => qparams_symmetric(min.abs().max(max.abs()), scheme.bits),
        SchemeKind::IntAsym => qparams_asymmetric(min, max, scheme.bits),
        SchemeKind::DualScale => qparams_dual(min, max, scheme.bits),
        SchemeKind::Fp8E4m3Sim => QParams::Float,
    }
}

impl QParams {
    /// Code range `[q_min, q_max]`.
    pub fn range(&self) -> (i32, i32) {
        match *self {
            QParams::Symmetric { q_max, .. } => (-q_max, q_max),
            QParams::Asymmetric { q_min, q_max, .. } | QParams::Dual { q_min, q_max, .. } => {
                (q_min, q_max)
            }
            QParams::Float => (0, 0),
        }
    }

    pub fn zero_point(&self) -> i32 {
        match *self {
            QParams::Asymmetric { zero_point, .. } => zero_point,
            _ => 0,
        }
    }

    /// Scale for single-plane schemes (`s₊` for dual).
    pub fn scale(&self) -> f32 {
        match *self {
            QParams::Symmetric { scale, .. } | QParams::Asymmetric { scale, .. } => scale,
            QParams::Dual { pos_scale, .. } => pos_scale,
            QParams::Float => 1.0,
        }
    }

    #[inline]
    pub fn encode(&self, x: f32) -> i32 {
        match *self {
            QParams::Symmetric { scale, q_max } => round_clip(x / scale, -q_max, q_max),
            QParams::Asymmetric {
                scale,
                zero_point,
                q_min,
                q_max,
            } => {
                let r = (x / scale).round() as i64 + zero_point as i64;
                r.clamp(q_min as i64, q_max as i64) as i32
            }
            QParams::Dual { .. } => {
                let (p, n) = self.encode_dual(x);
                p + n
            }
            QParams::Float => 0,
        }
    }

    /// `(x̂₊, x̂₋)`; at most one is nonzero.
    #[inline]
    pub fn encode_dual(&self, x: f32) -> (i32, i32) {
        match *self {
            QParams::Dual {
                pos_scale,
                neg_scale,
                q_min,
                q_max,
            } => {
                if x < 0.0 {
                    (0, round_clip(x / neg_scale, q_min, 0))
                } else {
                    (round_clip(x / pos_scale, 0, q_max), 0)
                }
            }
            _ => (self.encode(x), 0),
        }
    }

    #[inline]
    pub fn decode(&self, code: i32) -> f32 {
        match *self {
            QParams::Symmetric { scale, .. } => scale * code as f32,
            QParams::Asymmetric {
                scale, zero_point, ..
            } => scale * (code - zero_point) as f32,
            QParams::Dual {
                pos_scale,
                neg_scale,
                ..
            } => {
                if code < 0 {
                    neg_scale * code as f32
                } else {
                    pos_scale * code as f32
                }
            }
            QParams::Float => code as f32,
        }
    }

    #[inline]
    pub fn decode_dual(&self, pos: i32, neg: i32) -> f32 {
        match *self {
            QParams::Dual {
                pos_scale,
                neg_scale,
                ..
            } => pos_scale * pos as f32 + neg_scale * neg as f32,
            _ => self.decode(pos),
        }
    }
}
