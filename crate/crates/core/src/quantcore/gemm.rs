//! Integer GEMM with scheme-specific output recovery.
//!
//! Per (row, column) the inner dimension is cut at every activation column
//! group boundary and every weight row group boundary. Within a piece all
//! codes share one activation and one weight parameter set, so the integer
//! dot product is exact and recovery is:
//!
//! * symmetric: `s_x · s_w · Σ x̂ŵ`
//! * asymmetric: `s_x · s_w · (Σ x̂ŵ − z_x·colsum(ŵ) − z_w·rowsum(x̂) + len·z_x·z_w)`
//! * dual-scale: `s₊·s_w·Σ x̂₊ŵ + s₋·s_w·Σ x̂₋ŵ` (with the same `z_w` rowsum
//!   correction when the weight is asymmetric)
//!
//! Pieces are summed within each weight row segment first, then segments are
//! summed in order, so [`seg_linear_forward`] reproduces [`qgemm`] bitwise.

use super::tensor::{group_index, offsets};
use super::{Payload, QuantizedTensor, SchemeKind};
use crate::error::{Error, Result};
use crate::numerics::{IntTensor, Tensor};

struct Piece {
    start: usize,
    len: usize,
    x_group: usize,
    w_group: usize,
    /// Index of the weight row segment containing this piece.
    segment: usize,
}

fn pieces(x: &QuantizedTensor, w: &QuantizedTensor) -> Vec<Piece> {
    let xo = offsets(&x.layout.col_groups);
    let wo = offsets(&w.layout.row_groups);
    let so = offsets(&w.segments.rows);
    let mut cuts: Vec<usize> = xo.iter().chain(&wo).chain(&so).copied().collect();
    cuts.sort_unstable();
    cuts.dedup();
    let xg = group_index(&x.layout.col_groups);
    let wg = group_index(&w.layout.row_groups);
    let sg = group_index(&w.segments.rows);
    cuts.windows(2)
        .map(|c| Piece {
            start: c[0],
            len: c[1] - c[0],
            x_group: xg[c[0]],
            w_group: wg[c[0]],
            segment: sg[c[0]],
        })
        .collect()
}

/// Per-row sums of codes over each piece: `[rows][pieces]`.
fn row_sums(codes: &IntTensor, pieces: &[Piece]) -> Vec<Vec<i64>> {
    (0..codes.rows())
        .map(|r| {
            pieces
                .iter()
                .map(|p| (p.start..p.start + p.len).map(|c| codes.at(r, c) as i64).sum())
                .collect()
        })
        .collect()
}

/// Per-column sums of codes over each piece: `[pieces][cols]`.
fn col_sums(codes: &IntTensor, pieces: &[Piece]) -> Vec<Vec<i64>> {
    pieces
        .iter()
        .map(|p| {
            (0..codes.cols())
                .map(|c| (p.start..p.start + p.len).map(|r| codes.at(r, c) as i64).sum())
                .collect()
        })
        .collect()
}

#[inline]
fn dot(x: &IntTensor, w: &IntTensor, i: usize, j: usize, p: &Piece) -> i64 {
    let k = x.cols();
    let n = w.cols();
    let xd = &x.data()[i * k..(i + 1) * k];
    let wd = w.data();
    (p.start..p.start + p.len)
        .map(|c| xd[c] as i64 * wd[c * n + j] as i64)
        .sum()
}

/// `dequant(xq) · dequant(wq)` computed on integer codes.
pub fn qgemm(xq: &QuantizedTensor, wq: &QuantizedTensor) -> Result<Tensor> {
    let wcodes = match (&wq.payload, wq.scheme.kind) {
        (Payload::Int(t), SchemeKind::IntSym | SchemeKind::IntAsym) => t,
        _ => {
            return Err(Error::SchemeMismatch(format!(
                "qgemm weights must be integer coded, got {}",
                wq.scheme
            )))
        }
    };
    if matches!(xq.payload, Payload::Float(_)) {
        return Err(Error::SchemeMismatch(format!(
            "qgemm activations must be integer coded, got {}",
            xq.scheme
        )));
    }
    if xq.cols != wq.rows {
        return Err(Error::Shape(format!(
            "qgemm inner extents differ: [{}×{}]·[{}×{}]",
            xq.rows, xq.cols, wq.rows, wq.cols
        )));
    }
    let (m, n) = (xq.rows, wq.cols);
    let pieces = pieces(xq, wq);
    let xrg = group_index(&xq.layout.row_groups);
    let wcg = group_index(&wq.layout.col_groups);
    let nseg = wq.segments.rows.len();
    let wcs = col_sums(wcodes, &pieces);
    let mut out = Vec::with_capacity(m * n);

    match &xq.payload {
        Payload::Int(xcodes) => {
            let xrs = row_sums(xcodes, &pieces);
            for i in 0..m {
                for j in 0..n {
                    let mut partial = vec![0.0f32; nseg];
                    for (pi, p) in pieces.iter().enumerate() {
                        let xp = xq.param(xrg[i], p.x_group);
                        let wp = wq.param(p.w_group, wcg[j]);
                        let (zx, zw) = (xp.zero_point() as i64, wp.zero_point() as i64);
                        let corrected = dot(xcodes, wcodes, i, j, p) - zx * wcs[pi][j] - zw * xrs[i][pi]
                            + p.len as i64 * zx * zw;
                        partial[p.segment] += xp.scale() * (wp.scale() * corrected as f32);
                    }
                    out.push(partial.iter().fold(0.0f32, |a, &b| a + b));
                }
            }
        }
        Payload::Dual { pos, neg } => {
            let prs = row_sums(pos, &pieces);
            let nrs = row_sums(neg, &pieces);
            for i in 0..m {
                for j in 0..n {
                    let mut partial = vec![0.0f32; nseg];
                    for (pi, p) in pieces.iter().enumerate() {
                        let (sp, sn) = match *xq.param(xrg[i], p.x_group) {
                            super::QParams::Dual {
                                pos_scale,
                                neg_scale,
                                ..
                            } => (pos_scale, neg_scale),
                            other => {
                                return Err(Error::SchemeMismatch(format!(
                                    "dual payload with {other:?} parameters"
                                )))
                            }
                        };
                        let wp = wq.param(p.w_group, wcg[j]);
                        let (sw, zw) = (wp.scale(), wp.zero_point() as i64);
                        let cp = dot(pos, wcodes, i, j, p) - zw * prs[i][pi];
                        let cn = dot(neg, wcodes, i, j, p) - zw * nrs[i][pi];
                        partial[p.segment] += sp * (sw * cp as f32) + sn * (sw * cn as f32);
                    }
                    out.push(partial.iter().fold(0.0f32, |a, &b| a + b));
                }
            }
        }
        Payload::Float(_) => unreachable!(),
    }
    Tensor::new(vec![m, n], out)
}

/// Segment-wise execution of a quantized linear layer: one GEMM per
/// (input segment, output segment) block, outputs concatenated across output
/// segments and summed across input segments.
pub fn seg_linear_forward(xq: &QuantizedTensor, wq: &QuantizedTensor) -> Result<Tensor> {
    let in_off = offsets(&wq.segments.rows);
    let out_off = offsets(&wq.segments.cols);
    let mut columns = Vec::with_capacity(wq.segments.cols.len());
    for ow in out_off.windows(2) {
        let mut acc: Option<Tensor> = None;
        for iw in in_off.windows(2) {
            let xs = xq.block(0, xq.rows, iw[0], iw[1] - iw[0])?;
            let ws = wq.block(iw[0], iw[1] - iw[0], ow[0], ow[1] - ow[0])?;
            let y = qgemm(&xs, &ws)?;
            acc = Some(match acc {
                None => y,
                Some(a) => a.add(&y)?,
            });
        }
        columns.push(acc.expect("at least one input segment"));
    }
    let refs: Vec<&Tensor> = columns.iter().collect();
    Tensor::concat_cols(&refs)
}
