//! Segment-aware post-training quantization.
//!
//! Linear layers are quantized per segment, where segment boundaries come
//! from `chunk`/`split` consumers and `concat`/`stack` producers in the
//! computation graph. Activations that follow SiLU/GELU/GEGLU are quantized
//! with separate negative and positive step sizes. AMax and GPTQ calibrators,
//! SmoothQuant and low-rank optimizers, and a toy DDPM harness sit on top.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrators;
pub mod calibstats;
pub mod cli;
pub mod engine;
pub mod error;
pub mod exec;
pub mod graphir;
pub mod harness;
pub mod linalg;
pub mod numerics;
pub mod optimizers;
pub mod quantcore;
pub mod seginfer;

pub use error::{Error, ErrorClass, Result};
pub use numerics::{IntTensor, Rng, Tensor};
