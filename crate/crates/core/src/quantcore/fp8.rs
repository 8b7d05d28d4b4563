//! Simulated FP8 e4m3 (bias 7, no infinities, max 448).

use crate::numerics::Tensor;

pub const E4M3_MAX: f32 = 448.0;
const MIN_NORMAL_EXP: i32 = -6;
const MANTISSA_BITS: i32 = 3;

/// Nearest e4m3 value, ties to even mantissa, saturating at ±448.
pub fn e4m3_round(x: f32) -> f32 {
    let a = x.abs() as f64;
    if a == 0.0 {
        return 0.0;
    }
    if a >= E4M3_MAX as f64 {
        return E4M3_MAX.copysign(x);
    }
    let exp = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let quantum_exp = exp.max(MIN_NORMAL_EXP) - MANTISSA_BITS;
    let quantum = 2f64.powi(quantum_exp);
    let r = (a / quantum).round_ties_even() * quantum;
    (r.min(E4M3_MAX as f64) as f32).copysign(x)
}

pub fn fp8_sim(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| e4m3_round(v)).collect())
}
