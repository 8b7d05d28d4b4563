use serde::{Deserialize, Serialize};

use super::{fp8_sim, params_for_range, QParams, Role, Scheme, SchemeKind, Granularity};
use crate::error::{Error, Result};
use crate::numerics::{IntTensor, Tensor};
use crate::seginfer::SegmentPlan;

/// Segment boundaries of a matrix: row widths and column widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segments {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl Segments {
    pub fn whole(rows: usize, cols: usize) -> Self {
        Segments {
            rows: vec![rows],
            cols: vec![cols],
        }
    }

    pub fn columns(rows: usize, cols: Vec<usize>) -> Self {
        Segments {
            rows: vec![rows],
            cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        let ok = |w: &[usize], n: usize| !w.is_empty() && !w.contains(&0) && w.iter().sum::<usize>() == n;
        if !ok(&self.rows, rows) || !ok(&self.cols, cols) {
            return Err(Error::Shape(format!(
                "segments {:?}×{:?} do not tile [{rows}×{cols}]",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// Parameter groups: a grid of row groups × column groups, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub row_groups: Vec<usize>,
    pub col_groups: Vec<usize>,
}

pub(crate) fn offsets(widths: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(widths.len() + 1);
    let mut acc = 0;
    out.push(0);
    for &w in widths {
        acc += w;
        out.push(acc);
    }
    out
}

/// Map every index to its group.
pub(crate) fn group_index(widths: &[usize]) -> Vec<usize> {
    widths
        .iter()
        .enumerate()
        .flat_map(|(g, &w)| std::iter::repeat_n(g, w))
        .collect()
}

impl BlockLayout {
    fn refine(seg: &Segments, granularity: Granularity, rows: usize, cols: usize) -> Self {
        match granularity {
            Granularity::PerTensor => BlockLayout {
                row_groups: seg.rows.clone(),
                col_groups: seg.cols.clone(),
            },
            Granularity::PerChannel => BlockLayout {
                row_groups: seg.rows.clone(),
                col_groups: vec![1; cols],
            },
            Granularity::PerTokenDynamic => BlockLayout {
                row_groups: vec![1; rows],
                col_groups: seg.cols.clone(),
            },
        }
    }

    pub fn group_count(&self) -> usize {
        self.row_groups.len() * self.col_groups.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Int(IntTensor),
    Dual { pos: IntTensor, neg: IntTensor },
    Float(Tensor),
}

/// Codes plus the per-group parameters needed to decode them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub scheme: Scheme,
    pub segments: Segments,
    pub layout: BlockLayout,
    pub params: Vec<QParams>,
    pub payload: Payload,
}

impl QuantizedTensor {
    pub fn param(&self, row_group: usize, col_group: usize) -> &QParams {
        &self.params[row_group * self.layout.col_groups.len() + col_group]
    }

    /// True when every code is inside its group's range.
    pub fn codes_in_range(&self) -> bool {
        let rg = group_index(&self.layout.row_groups);
        let cg = group_index(&self.layout.col_groups);
        let check = |t: &IntTensor, pick: fn(i32, i32, i32) -> bool| {
            (0..self.rows).all(|r| {
                (0..self.cols).all(|c| {
                    let (lo, hi) = self.param(rg[r], cg[c]).range();
                    pick(t.at(r, c), lo, hi)
                })
            })
        };
        match &self.payload {
            Payload::Int(t) => check(t, |q, lo, hi| (lo..=hi).contains(&q)),
            Payload::Dual { pos, neg } => {
                check(pos, |q, _, hi| (0..=hi).contains(&q)) && check(neg, |q, lo, _| (lo..=0).contains(&q))
            }
            Payload::Float(_) => true,
        }
    }

    /// Sub-block covering rows `[r0, r0+nr)` and columns `[c0, c0+nc)`.
    /// Both ranges must fall on segment boundaries.
    pub fn block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<QuantizedTensor> {
        let sub = |widths: &[usize], start: usize, len: usize| -> Result<Vec<usize>> {
            let offs = offsets(widths);
            let a = offs.iter().position(|&o| o == start);
            let b = offs.iter().position(|&o| o == start + len);
            match (a, b) {
                (Some(a), Some(b)) if b > a => Ok(widths[a..b].to_vec()),
                _ => Err(Error::Shape(format!(
                    "block [{start}, {}) not aligned to groups {widths:?}",
                    start + len
                ))),
            }
        };
        let seg_rows = sub(&self.segments.rows, r0, nr)?;
        let seg_cols = sub(&self.segments.cols, c0, nc)?;
        let lay_rows = sub(&self.layout.row_groups, r0, nr)?;
        let lay_cols = sub(&self.layout.col_groups, c0, nc)?;
        let rg0 = offsets(&self.layout.row_groups).iter().position(|&o| o == r0).unwrap();
        let cg0 = offsets(&self.layout.col_groups).iter().position(|&o| o == c0).unwrap();
        let mut params = Vec::with_capacity(lay_rows.len() * lay_cols.len());
        for r in 0..lay_rows.len() {
            for c in 0..lay_cols.len() {
                params.push(*self.param(rg0 + r, cg0 + c));
            }
        }
        let cut_i = |t: &IntTensor| {
            let mut d = Vec::with_capacity(nr * nc);
            for r in r0..r0 + nr {
                d.extend_from_slice(&t.data()[r * self.cols + c0..r * self.cols + c0 + nc]);
            }
            IntTensor::new(vec![nr, nc], d)
        };
        let payload = match &self.payload {
            Payload::Int(t) => Payload::Int(cut_i(t)?),
            Payload::Dual { pos, neg } => Payload::Dual {
                pos: cut_i(pos)?,
                neg: cut_i(neg)?,
            },
            Payload::Float(t) => Payload::Float(t.slice_rows(r0, nr)?.slice_cols(c0, nc)?),
        };
        Ok(QuantizedTensor {
            rows: nr,
            cols: nc,
            scheme: self.scheme,
            segments: Segments {
                rows: seg_rows,
                cols: seg_cols,
            },
            layout: BlockLayout {
                row_groups: lay_rows,
                col_groups: lay_cols,
            },
            params,
            payload,
        })
    }
}

pub(crate) fn encode_with(
    x: &Tensor,
    scheme: Scheme,
    segments: Segments,
    layout: BlockLayout,
    params: Vec<QParams>,
) -> Result<QuantizedTensor> {
    let (rows, cols) = (x.rows(), x.cols());
    if scheme.kind == SchemeKind::Fp8E4m3Sim {
        return Ok(QuantizedTensor {
            rows,
            cols,
            scheme,
            segments,
            layout,
            params,
            payload: Payload::Float(fp8_sim(&x.as_matrix())),
        });
    }
    let rg = group_index(&layout.row_groups);
    let cg = group_index(&layout.col_groups);
    let ncg = layout.col_groups.len();
    let data = x.data();
    let payload = if scheme.kind == SchemeKind::DualScale {
        let mut pos = Vec::with_capacity(data.len());
        let mut neg = Vec::with_capacity(data.len());
        for r in 0..rows {
            for c in 0..cols {
                let (p, n) = params[rg[r] * ncg + cg[c]].encode_dual(data[r * cols + c]);
                pos.push(p);
                neg.push(n);
            }
        }
        Payload::Dual {
            pos: IntTensor::new(vec![rows, cols], pos)?,
            neg: IntTensor::new(vec![rows, cols], neg)?,
        }
    } else {
        let mut codes = Vec::with_capacity(data.len());
        for r in 0..rows {
            for c in 0..cols {
                codes.push(params[rg[r] * ncg + cg[c]].encode(data[r * cols + c]));
            }
        }
        Payload::Int(IntTensor::new(vec![rows, cols], codes)?)
    };
    Ok(QuantizedTensor {
        rows,
        cols,
        scheme,
        segments,
        layout,
        params,
        payload,
    })
}

/// `(min, max)` of every layout block.
fn block_ranges(x: &Tensor, layout: &BlockLayout) -> Vec<(f32, f32)> {
    let ro = offsets(&layout.row_groups);
    let co = offsets(&layout.col_groups);
    let mut out = Vec::with_capacity(layout.group_count());
    for rw in ro.windows(2) {
        for cw in co.windows(2) {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for r in rw[0]..rw[1] {
                for &v in &x.row(r)[cw[0]..cw[1]] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            out.push((lo, hi));
        }
    }
    out
}

/// Parameter layout for `x` under `scheme` and parameters derived from its
/// block ranges.
pub(crate) fn derive_params(x: &Tensor, scheme: Scheme, segments: &Segments) -> Result<(BlockLayout, Vec<QParams>)> {
    segments.check(x.rows(), x.cols())?;
    let layout = if scheme.kind == SchemeKind::Fp8E4m3Sim {
        BlockLayout {
            row_groups: segments.rows.clone(),
            col_groups: segments.cols.clone(),
        }
    } else {
        BlockLayout::refine(segments, scheme.granularity, x.rows(), x.cols())
    };
    let params = block_ranges(x, &layout)
        .into_iter()
        .map(|(lo, hi)| params_for_range(scheme, lo, hi))
        .collect();
    Ok((layout, params))
}

/// Quantize with parameters derived from `x` itself, one group per
/// segment block refined by the scheme's granularity.
pub fn quantize(x: &Tensor, scheme: Scheme, role: Role, segments: &Segments) -> Result<QuantizedTensor> {
    scheme.validate_for(role)?;
    let x = x.as_matrix();
    let (layout, params) = derive_params(&x, scheme, segments)?;
    encode_with(&x, scheme, segments.clone(), layout, params)
}

/// Quantize an activation with pre-calibrated parameters, one per column
/// segment, shared by every row.
pub fn quantize_static(
    x: &Tensor,
    scheme: Scheme,
    col_segments: &[usize],
    params: &[QParams],
) -> Result<QuantizedTensor> {
    scheme.validate_for(Role::Activation)?;
    if scheme.granularity == Granularity::PerTokenDynamic {
        return Err(Error::SchemeMismatch(
            "per_token_dynamic activations take no static parameters".into(),
        ));
    }
    if params.len() != col_segments.len() {
        return Err(Error::SchemeMismatch(format!(
            "{} parameter groups for {} segments",
            params.len(),
            col_segments.len()
        )));
    }
    let x = x.as_matrix();
    let segments = Segments::columns(x.rows(), col_segments.to_vec());
    segments.check(x.rows(), x.cols())?;
    let layout = BlockLayout {
        row_groups: vec![x.rows()],
        col_groups: col_segments.to_vec(),
    };
    encode_with(&x, scheme, segments, layout, params.to_vec())
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let rg = group_index(&q.layout.row_groups);
    let cg = group_index(&q.layout.col_groups);
    let mut out = Vec::with_capacity(q.rows * q.cols);
    match &q.payload {
        Payload::Float(t) => return t.clone(),
        Payload::Int(t) => {
            for r in 0..q.rows {
                for c in 0..q.cols {
                    out.push(q.param(rg[r], cg[c]).decode(t.at(r, c)));
                }
            }
        }
        Payload::Dual { pos, neg } => {
            for r in 0..q.rows {
                for c in 0..q.cols {
                    out.push(q.param(rg[r], cg[c]).decode_dual(pos.at(r, c), neg.at(r, c)));
                }
            }
        }
    }
    Tensor::from_parts(vec![q.rows, q.cols], out)
}

/// Quantize a `[k × n]` weight with independent parameters per
/// (input segment × output segment) block of `plan`.
pub fn segmented_quantize_weight(w: &Tensor, plan: &SegmentPlan, scheme: Scheme) -> Result<QuantizedTensor> {
    let segments = Segments {
        rows: plan.in_segments.clone(),
        cols: plan.out_segments.clone(),
    };
    if segments.check(w.rows(), w.cols()).is_err() {
        return Err(Error::Shape(format!(
            "plan for `{}` ({:?} × {:?}) does not match weight {:?}",
            plan.layer_id,
            plan.in_segments,
            plan.out_segments,
            w.shape()
        )));
    }
    quantize(w, scheme, Role::Weight, &segments)
}
