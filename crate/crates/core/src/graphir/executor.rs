//! Reference full-precision executor.

use std::collections::BTreeMap;

use super::{ActivationFn, Axis, Graph, Node, NodeKind, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
use crate::error::{Error, Result};
use crate::numerics::{matmul, Tensor};

/// Customization points for graph execution.
///
/// The engine swaps in quantized linear kernels; calibration observes the
/// tensors arriving at each linear layer and activation.
pub trait Hooks {
    fn linear(
        &mut self,
        node: &str,
        x: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let _ = node;
        reference_linear(x, weight, bias)
    }

    /// Called after every node with its outputs.
    fn observe(&mut self, node: &Node, outputs: &[Tensor]) {
        let _ = (node, outputs);
    }
}

/// Plain full-precision execution.
pub struct ReferenceHooks;

impl Hooks for ReferenceHooks {}

/// `x · W (+ b)`, bias broadcast over rows.
pub fn reference_linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = matmul(x, weight)?;
    match bias {
        None => Ok(y),
        Some(b) => add_row_bias(&y, b),
    }
}

pub(crate) fn add_row_bias(y: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = y.cols();
    if b.len() != n {
        return Err(Error::Shape(format!("bias of {} for width {n}", b.len())));
    }
    let bd = b.data();
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bd[i % n])
        .collect();
    Tensor::new(vec![y.rows(), n], data)
}

pub fn execute(g: &Graph, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    execute_with(g, inputs, &mut ReferenceHooks)
}

pub fn execute_with(
    g: &Graph,
    inputs: &BTreeMap<String, Tensor>,
    hooks: &mut dyn Hooks,
) -> Result<BTreeMap<String, Tensor>> {
    let mut values: Vec<Option<Vec<Tensor>>> = vec![None; g.nodes().len()];
    let mut outputs = BTreeMap::new();
    for &i in g.order_indices() {
        let node = g.node_at(i);
        let ins: Vec<&Tensor> = g
            .producers_of(i)
            .iter()
            .map(|&(s, p)| &values[s].as_ref().expect("topological order")[p])
            .collect();
        let outs = eval_node(g, node, &ins, inputs, hooks)?;
        hooks.observe(node, &outs);
        if matches!(node.kind, NodeKind::Output) {
            outputs.insert(node.id.clone(), ins[0].clone());
        }
        values[i] = Some(outs);
    }
    Ok(outputs)
}

fn eval_node(
    g: &Graph,
    node: &Node,
    ins: &[&Tensor],
    bindings: &BTreeMap<String, Tensor>,
    hooks: &mut dyn Hooks,
) -> Result<Vec<Tensor>> {
    let shape_err = |m: String| Error::ShapeConflict {
        node: node.id.clone(),
        message: m,
    };
    Ok(match &node.kind {
        NodeKind::Input { features, rows } => {
            let t = bindings
                .get(&node.id)
                .ok_or_else(|| Error::MissingInput(node.id.clone()))?
                .as_matrix();
            if t.cols() != *features || rows.is_some_and(|r| r != t.rows()) {
                return Err(shape_err(format!(
                    "bound tensor is {:?}, declared [{rows:?}, {features}]",
                    t.shape()
                )));
            }
            vec![t]
        }
        NodeKind::Linear { weight, bias } => {
            let w = &g.weights()[weight];
            let b = bias.as_ref().map(|b| &g.weights()[b]);
            vec![hooks.linear(&node.id, ins[0], w, b)?]
        }
        NodeKind::Chunk { count, axis } => {
            let x = ins[0];
            match axis {
                Axis::Features => {
                    let w = x.cols() / count;
                    (0..*count)
                        .map(|c| x.slice_cols(c * w, w))
                        .collect::<Result<_>>()?
                }
                Axis::Rows => {
                    if !x.rows().is_multiple_of(*count) {
                        return Err(shape_err(format!("{} rows not divisible by {count}", x.rows())));
                    }
                    let r = x.rows() / count;
                    (0..*count)
                        .map(|c| x.slice_rows(c * r, r))
                        .collect::<Result<_>>()?
                }
            }
        }
        NodeKind::Split { sizes, axis } => {
            let x = ins[0];
            let mut start = 0;
            let mut parts = Vec::with_capacity(sizes.len());
            for &s in sizes {
                parts.push(match axis {
                    Axis::Features => x.slice_cols(start, s)?,
                    Axis::Rows => x.slice_rows(start, s).map_err(|e| shape_err(e.to_string()))?,
                });
                start += s;
            }
            if *axis == Axis::Rows && start != x.rows() {
                return Err(shape_err(format!("split sizes cover {start} of {} rows", x.rows())));
            }
            parts
        }
        NodeKind::Concat { axis: Axis::Features } | NodeKind::Stack { .. } => {
            vec![Tensor::concat_cols(ins).map_err(|e| shape_err(e.to_string()))?]
        }
        NodeKind::Concat { axis: Axis::Rows } => {
            vec![Tensor::concat_rows(ins).map_err(|e| shape_err(e.to_string()))?]
        }
        NodeKind::Activation { func } => vec![activation_forward(*func, ins[0])?],
        NodeKind::Add => vec![broadcast(ins[0], ins[1], |a, b| a + b).map_err(|e| shape_err(e.to_string()))?],
        NodeKind::Mul => vec![broadcast(ins[0], ins[1], |a, b| a * b).map_err(|e| shape_err(e.to_string()))?],
        NodeKind::LayerNorm { eps, .. } => vec![layernorm_forward(ins[0], *eps)?],
        NodeKind::ScaleShift => {
            let scaled = broadcast(ins[0], ins[2], |x, s| x * (1.0 + s))
                .map_err(|e| shape_err(e.to_string()))?;
            vec![broadcast(&scaled, ins[1], |x, b| x + b).map_err(|e| shape_err(e.to_string()))?]
        }
        NodeKind::Output => vec![],
    })
}

/// Elementwise binary op; extent-1 rows or columns of either side broadcast.
fn broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    let (rows, cols) = match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => (r, c),
        _ => {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} with {:?}",
                a.shape(),
                b.shape()
            )))
        }
    };
    let pick = |t: &Tensor, r: usize, c: usize| {
        t.at(
            if t.rows() == 1 { 0 } else { r },
            if t.cols() == 1 { 0 } else { c },
        )
    };
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(f(pick(a, r, c), pick(b, r, c)));
        }
    }
    Tensor::new(vec![rows, cols], data)
}

#[inline]
fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

#[inline]
fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn activation_forward(func: ActivationFn, x: &Tensor) -> Result<Tensor> {
    match func {
        ActivationFn::Silu => x.map(silu),
        ActivationFn::Gelu => x.map(gelu),
        ActivationFn::Relu => x.map(|v| v.max(0.0)),
        ActivationFn::Geglu => {
            let half = x.cols() / 2;
            if half * 2 != x.cols() {
                return Err(Error::Shape("geglu needs an even width".into()));
            }
            let mut data = Vec::with_capacity(x.rows() * half);
            for r in 0..x.rows() {
                let row = x.row(r);
                for c in 0..half {
                    data.push(row[c] * gelu(row[half + c]));
                }
            }
            Tensor::new(vec![x.rows(), half], data)
        }
    }
}

/// Row-wise normalization without affine parameters.
pub fn layernorm_forward(x: &Tensor, eps: f32) -> Result<Tensor> {
    let n = x.cols();
    let mut data = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let inv = 1.0 / (var + eps).sqrt();
        data.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Tensor::new(vec![x.rows(), n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphir::GraphBuilder;
    use crate::numerics::{gaussian, Rng};

    fn bind(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), t)])
    }

    #[test]
    fn identity_linear() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 3);
        let l = b.linear("l", &x, Tensor::identity(3).unwrap(), None);
        b.output("y", &l);
        let g = b.build().unwrap();
        let input = gaussian(&mut Rng::new(2), vec![4, 3]).unwrap();
        let out = execute(&g, &bind("x", input.clone())).unwrap();
        assert_eq!(out["y"], input);
    }

    #[test]
    fn silu_zero() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 2);
        let a = b.act("a", ActivationFn::Silu, &x);
        b.output("y", &a);
        let g = b.build().unwrap();
        let out = execute(&g, &bind("x", Tensor::zeros(vec![1, 2]).unwrap())).unwrap();
        assert!(out["y"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunk_concat_inverse() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 6);
        b.node("c", NodeKind::Chunk { count: 3, axis: Axis::Features }, &[&x]);
        let parts: Vec<_> = (0..3).map(|p| GraphBuilder::port("c", p)).collect();
        let refs: Vec<&_> = parts.iter().collect();
        let cat = b.node("cat", NodeKind::Concat { axis: Axis::Features }, &refs);
        b.output("y", &cat);
        let g = b.build().unwrap();
        let input = gaussian(&mut Rng::new(5), vec![2, 6]).unwrap();
        assert_eq!(execute(&g, &bind("x", input.clone())).unwrap()["y"], input);
    }

    #[test]
    fn missing_binding() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 2);
        b.output("y", &x);
        let g = b.build().unwrap();
        assert!(matches!(execute(&g, &BTreeMap::new()), Err(Error::MissingInput(_))));
    }

    #[test]
    fn activation_shapes() {
        let x = Tensor::from_rows(&[vec![-1.0, 2.0, 0.5, -3.0]]).unwrap();
        assert_eq!(activation_forward(ActivationFn::Relu, &x).unwrap().data(), &[0.0, 2.0, 0.5, 0.0]);
        let gg = activation_forward(ActivationFn::Geglu, &x).unwrap();
        assert_eq!(gg.shape(), &[1, 2]);
        let g = activation_forward(ActivationFn::Gelu, &x).unwrap();
        // tanh-approximate GELU(2) = 1.954597...
        assert!((g.data()[1] - 1.954_597_7).abs() < 1e-6);
        let s = activation_forward(ActivationFn::Silu, &x).unwrap();
        assert!(s.data()[0] < 0.0 && s.data()[0] > -0.279);
    }

    #[test]
    fn broadcasting() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![10.0, 20.0]]).unwrap();
        let y = broadcast(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
        let c = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(broadcast(&a, &c, |x, y| x + y).is_err());
    }

    #[test]
    fn layernorm_unit_variance() {
        let x = gaussian(&mut Rng::new(8), vec![3, 16]).unwrap().scale(5.0).unwrap();
        let y = layernorm_forward(&x, 1e-5).unwrap();
        for r in 0..3 {
            let row = y.row(r);
            let mean: f32 = row.iter().sum::<f32>() / 16.0;
            let var: f32 = row.iter().map(|v| v * v).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
        }
    }
}
