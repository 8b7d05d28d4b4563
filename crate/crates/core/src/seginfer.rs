//! Segment-plan inference by pattern matching on the graph.
//!
//! Output segments come from a `chunk`/`split` consumer of a linear layer,
//! input segments from a `concat`/`stack` producer. Patterns may look through
//! shape-preserving unary nodes (activations other than GEGLU, layernorm, and
//! add/mul against a width-1 operand). DualScale eligibility is stricter:
//! the path from the activation to the linear may only cross width-1 add/mul,
//! since layernorm re-centres the distribution.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::graphir::{ActivationFn, Axis, Graph, NodeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Chunk,
    Split,
    Concat,
    Stack,
    None,
}

/// Which pattern fired and the node ids it matched through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternMatch {
    pub kind: PatternKind,
    pub nodes: Vec<String>,
}

impl PatternMatch {
    fn none() -> Self {
        PatternMatch {
            kind: PatternKind::None,
            nodes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub output: PatternMatch,
    pub input: PatternMatch,
    /// Activation node that makes the layer DualScale-eligible.
    pub dualscale_source: Option<String>,
    /// Both input and output patterns fired; blocks form a grid.
    pub grid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub layer_id: String,
    pub out_segments: Vec<usize>,
    pub in_segments: Vec<usize>,
    pub dualscale_eligible: bool,
    pub provenance: Provenance,
}

impl SegmentPlan {
    /// Single-block plan for a `[k × n]` weight.
    pub fn singleton(layer_id: &str, k: usize, n: usize) -> Self {
        SegmentPlan {
            layer_id: layer_id.to_string(),
            out_segments: vec![n],
            in_segments: vec![k],
            dualscale_eligible: false,
            provenance: Provenance {
                output: PatternMatch::none(),
                input: PatternMatch::none(),
                dualscale_source: None,
                grid: false,
            },
        }
    }

    pub fn is_segmented(&self) -> bool {
        self.out_segments.len() > 1 || self.in_segments.len() > 1
    }
}

/// Feature toggles that gate plan construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanToggles {
    pub seglinear: bool,
    pub dualscale: bool,
}

impl Default for PlanToggles {
    fn default() -> Self {
        PlanToggles {
            seglinear: true,
            dualscale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub toggles: PlanToggles,
    pub layers: BTreeMap<String, SegmentPlan>,
}

enum Step {
    Continue(usize, usize),
    Stop,
}

/// For a node reached along port `port`, the next hop if it is a traversable
/// add/mul whose other operand has width 1.
fn scalar_broadcast_peer(g: &Graph, node: usize, port: usize) -> bool {
    let other = 1 - port.min(1);
    let &(s, sp) = &g.producers_of(node)[other];
    g.width_at(s, sp) == 1
}

fn is_unary_passthrough(kind: &NodeKind) -> bool {
    match kind {
        NodeKind::Activation { func } => *func != ActivationFn::Geglu,
        NodeKind::LayerNorm { .. } => true,
        _ => false,
    }
}

fn linear_index(g: &Graph, layer: &str) -> Option<usize> {
    let i = g.idx(layer)?;
    matches!(g.node_at(i).kind, NodeKind::Linear { .. }).then_some(i)
}

fn layer_dims(g: &Graph, i: usize) -> (usize, usize) {
    match &g.node_at(i).kind {
        NodeKind::Linear { weight, .. } => {
            let s = g.weights()[weight].shape();
            (s[0], s[1])
        }
        _ => unreachable!("layer_dims on non-linear"),
    }
}

fn output_match(g: &Graph, li: usize) -> Option<(Vec<usize>, PatternMatch)> {
    let mut cur = (li, 0usize);
    let mut path = Vec::new();
    loop {
        let consumers = g.consumers_of(cur.0, cur.1);
        if consumers.len() != 1 {
            return None;
        }
        let (d, port) = consumers[0];
        let node = g.node_at(d);
        path.push(node.id.clone());
        let step = match &node.kind {
            NodeKind::Chunk {
                count,
                axis: Axis::Features,
            } => {
                let w = g.width_at(cur.0, cur.1) / count;
                return Some((vec![w; *count], pattern(PatternKind::Chunk, path)));
            }
            NodeKind::Split {
                sizes,
                axis: Axis::Features,
            } => return Some((sizes.clone(), pattern(PatternKind::Split, path))),
            k if is_unary_passthrough(k) => Step::Continue(d, 0),
            NodeKind::Add | NodeKind::Mul if scalar_broadcast_peer(g, d, port) => {
                Step::Continue(d, 0)
            }
            _ => Step::Stop,
        };
        match step {
            Step::Continue(n, p) => cur = (n, p),
            Step::Stop => return None,
        }
    }
}

fn input_match(g: &Graph, li: usize) -> Option<(Vec<usize>, PatternMatch)> {
    let mut cur = g.producers_of(li)[0].0;
    let mut path = Vec::new();
    loop {
        let node = g.node_at(cur);
        path.push(node.id.clone());
        let ins = g.producers_of(cur);
        match &node.kind {
            NodeKind::Concat {
                axis: Axis::Features,
            } => {
                let widths = ins.iter().map(|&(s, p)| g.width_at(s, p)).collect();
                return Some((widths, pattern(PatternKind::Concat, path)));
            }
            NodeKind::Stack { .. } => {
                let w = g.width_at(ins[0].0, ins[0].1);
                return Some((vec![w; ins.len()], pattern(PatternKind::Stack, path)));
            }
            k if is_unary_passthrough(k) => cur = ins[0].0,
            NodeKind::Add | NodeKind::Mul => {
                let wide: Vec<usize> = (0..2)
                    .filter(|&p| g.width_at(ins[p].0, ins[p].1) != 1)
                    .collect();
                match wide.as_slice() {
                    [p] => cur = ins[*p].0,
                    _ => return None,
                }
            }
            _ => return None,
        }
    }
}

fn pattern(kind: PatternKind, nodes: Vec<String>) -> PatternMatch {
    PatternMatch { kind, nodes }
}

/// Output-segment widths for `layer`; `[n]` when no pattern fires.
pub fn infer_output_segments(g: &Graph, layer: &str) -> Vec<usize> {
    let Some(li) = linear_index(g, layer) else {
        return Vec::new();
    };
    output_match(g, li)
        .map(|(w, _)| w)
        .unwrap_or_else(|| vec![layer_dims(g, li).1])
}

/// Input-segment widths for `layer`; `[k]` when no pattern fires.
pub fn infer_input_segments(g: &Graph, layer: &str) -> Vec<usize> {
    let Some(li) = linear_index(g, layer) else {
        return Vec::new();
    };
    input_match(g, li)
        .map(|(w, _)| w)
        .unwrap_or_else(|| vec![layer_dims(g, li).0])
}

/// `(activation id, linear id)` pairs forming act-to-linear segments.
pub fn find_act_to_linear(g: &Graph) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    for &a in g.order_indices() {
        let NodeKind::Activation { func } = g.node_at(a).kind else {
            continue;
        };
        if !func.is_polarity_asymmetric() {
            continue;
        }
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([a]);
        let mut hits = BTreeSet::new();
        while let Some(n) = queue.pop_front() {
            for &(d, port) in g.consumers_of(n, 0) {
                match &g.node_at(d).kind {
                    NodeKind::Linear { .. } => {
                        hits.insert(g.node_at(d).id.clone());
                    }
                    NodeKind::Add | NodeKind::Mul if scalar_broadcast_peer(g, d, port)
                        && seen.insert(d) => {
                            queue.push_back(d);
                        }
                    _ => {}
                }
            }
        }
        let aid = &g.node_at(a).id;
        pairs.extend(hits.into_iter().map(|l| (aid.clone(), l)));
    }
    pairs
}

/// One plan per linear node, gated by `toggles`.
pub fn build_plan(g: &Graph, toggles: PlanToggles) -> QuantPlan {
    let dual: BTreeMap<String, String> = if toggles.dualscale {
        find_act_to_linear(g)
            .into_iter()
            .map(|(a, l)| (l, a))
            .collect()
    } else {
        BTreeMap::new()
    };
    let mut layers = BTreeMap::new();
    for id in g.linear_ids() {
        let li = g.idx(&id).expect("linear id");
        let (k, n) = layer_dims(g, li);
        let mut plan = SegmentPlan::singleton(&id, k, n);
        if toggles.seglinear {
            if let Some((w, m)) = output_match(g, li) {
                plan.out_segments = w;
                plan.provenance.output = m;
            }
            if let Some((w, m)) = input_match(g, li) {
                plan.in_segments = w;
                plan.provenance.input = m;
            }
            plan.provenance.grid =
                plan.provenance.output.kind != PatternKind::None && plan.provenance.input.kind != PatternKind::None;
        }
        if let Some(a) = dual.get(&id) {
            plan.dualscale_eligible = true;
            plan.provenance.dualscale_source = Some(a.clone());
        }
        layers.insert(id, plan);
    }
    QuantPlan { toggles, layers }
}
