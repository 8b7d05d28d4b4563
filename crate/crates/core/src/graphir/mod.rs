//! Computation-graph model.
//!
//! Every tensor flowing through a graph is a `[rows, features]` matrix. Static
//! validation tracks feature widths only; row counts are checked when the graph
//! executes (rows of extent 1 broadcast in `add`, `mul` and `scale_shift`).

mod container;
mod executor;
mod json;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use container::{read_container, read_weights, write_container, write_weights, Stored};
pub use executor::{
    activation_forward, execute, execute_with, layernorm_forward, reference_linear, Hooks,
    ReferenceHooks,
};
pub(crate) use executor::add_row_bias;

pub const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_6;
pub const GELU_CUBIC: f32 = 0.044_715;
pub const LAYERNORM_DEFAULT_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationFn {
    Silu,
    Gelu,
    Geglu,
    Relu,
}

impl ActivationFn {
    pub fn name(self) -> &'static str {
        match self {
            ActivationFn::Silu => "silu",
            ActivationFn::Gelu => "gelu",
            ActivationFn::Geglu => "geglu",
            ActivationFn::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "silu" => ActivationFn::Silu,
            "gelu" => ActivationFn::Gelu,
            "geglu" => ActivationFn::Geglu,
            "relu" => ActivationFn::Relu,
            _ => return None,
        })
    }

    /// Activations whose output keeps a dense negative range.
    pub fn is_polarity_asymmetric(self) -> bool {
        !matches!(self, ActivationFn::Relu)
    }
}

impl fmt::Display for ActivationFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis of a 2-D tensor: `Rows` (0) or `Features` (1, or -1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Features,
}

impl Axis {
    pub fn from_index(i: i64) -> Option<Self> {
        match i {
            0 => Some(Axis::Rows),
            1 | -1 => Some(Axis::Features),
            _ => None,
        }
    }

    pub fn index(self) -> i64 {
        match self {
            Axis::Rows => 0,
            Axis::Features => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Input { features: usize, rows: Option<usize> },
    Linear { weight: String, bias: Option<String> },
    Chunk { count: usize, axis: Axis },
    Split { sizes: Vec<usize>, axis: Axis },
    Concat { axis: Axis },
    /// Stacks equal-width streams and flattens the stack axis into features.
    Stack { axis: Axis },
    Activation { func: ActivationFn },
    Add,
    Mul,
    LayerNorm { axis: Axis, eps: f32 },
    /// `x · (1 + scale) + shift` with inputs `(x, shift, scale)`.
    ScaleShift,
    Output,
}

impl NodeKind {
    pub fn tag(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Linear { .. } => "linear",
            NodeKind::Chunk { .. } => "chunk",
            NodeKind::Split { .. } => "split",
            NodeKind::Concat { .. } => "concat",
            NodeKind::Stack { .. } => "stack",
            NodeKind::Activation { .. } => "activation",
            NodeKind::Add => "add",
            NodeKind::Mul => "mul",
            NodeKind::LayerNorm { .. } => "layernorm",
            NodeKind::ScaleShift => "scale_shift",
            NodeKind::Output => "output",
        }
    }

    fn output_ports(&self) -> usize {
        match self {
            NodeKind::Chunk { count, .. } => *count,
            NodeKind::Split { sizes, .. } => sizes.len(),
            NodeKind::Output => 0,
            _ => 1,
        }
    }

    /// Fixed input arity, `None` for variadic nodes.
    fn input_ports(&self) -> Option<usize> {
        match self {
            NodeKind::Input { .. } => Some(0),
            NodeKind::Concat { .. } | NodeKind::Stack { .. } => None,
            NodeKind::Add | NodeKind::Mul => Some(2),
            NodeKind::ScaleShift => Some(3),
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
}

/// Producer port → consumer port link.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub src: String,
    pub src_port: usize,
    pub dst: String,
    pub dst_port: usize,
}

/// A validated computation DAG with its weights.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    weights: BTreeMap<String, Tensor>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    index: BTreeMap<String, usize>,
    /// Per node, the producing `(node index, port)` of each input port.
    producers: Vec<Vec<(usize, usize)>>,
    /// Per node and output port, the consuming `(node index, port)` list.
    consumers: Vec<Vec<Vec<(usize, usize)>>>,
    /// Per node and output port, the static feature width.
    widths: Vec<Vec<usize>>,
    order: Vec<usize>,
}

impl Graph {
    /// Validate and index a graph description.
    pub fn new(
        nodes: Vec<Node>,
        edges: Vec<Edge>,
        weights: BTreeMap<String, Tensor>,
        inputs: Vec<String>,
        outputs: Vec<String>,
    ) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::parse("graph", format!("duplicate node id `{}`", n.id)));
            }
            validate_attrs(n)?;
        }
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::parse("graph", format!("unknown node `{id}`")))
        };

        let mut slots: Vec<BTreeMap<usize, (usize, usize)>> = vec![BTreeMap::new(); nodes.len()];
        let mut consumers: Vec<Vec<Vec<(usize, usize)>>> = nodes
            .iter()
            .map(|n| vec![Vec::new(); n.kind.output_ports()])
            .collect();
        for e in &edges {
            let s = lookup(&e.src)?;
            let d = lookup(&e.dst)?;
            if e.src_port >= nodes[s].kind.output_ports() {
                return Err(conflict(&e.src, format!("no output port {}", e.src_port)));
            }
            if slots[d].insert(e.dst_port, (s, e.src_port)).is_some() {
                return Err(conflict(&e.dst, format!("input port {} bound twice", e.dst_port)));
            }
            consumers[s][e.src_port].push((d, e.dst_port));
        }
        for list in consumers.iter_mut().flatten() {
            list.sort_unstable();
        }

        let mut producers = Vec::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            let bound = &slots[i];
            let count = bound.len();
            if bound.keys().copied().ne(0..count) {
                return Err(conflict(&n.id, "input ports are not contiguous from 0".into()));
            }
            match n.kind.input_ports() {
                Some(k) if k != count => {
                    return Err(conflict(&n.id, format!("expects {k} inputs, has {count}")))
                }
                None if count == 0 => return Err(conflict(&n.id, "has no inputs".into())),
                _ => {}
            }
            producers.push(bound.values().copied().collect::<Vec<_>>());
        }

        for id in &inputs {
            let i = lookup(id)?;
            if !matches!(nodes[i].kind, NodeKind::Input { .. }) {
                return Err(Error::parse("graph", format!("`{id}` listed as input but is not an input node")));
            }
        }
        for id in &outputs {
            let i = lookup(id)?;
            if !matches!(nodes[i].kind, NodeKind::Output) {
                return Err(Error::parse("graph", format!("`{id}` listed as output but is not an output node")));
            }
        }
        let declared: BTreeSet<&String> = inputs.iter().collect();
        for n in &nodes {
            if matches!(n.kind, NodeKind::Input { .. }) && !declared.contains(&n.id) {
                return Err(Error::parse("graph", format!("input node `{}` missing from inputs", n.id)));
            }
        }

        for n in &nodes {
            if let NodeKind::Linear { weight, bias } = &n.kind {
                for name in std::iter::once(weight).chain(bias.iter()) {
                    if !weights.contains_key(name) {
                        return Err(Error::DanglingWeight {
                            node: n.id.clone(),
                            weight: name.clone(),
                        });
                    }
                }
            }
        }

        let order = topo_sort(&nodes, &producers, &consumers)?;
        let mut g = Graph {
            nodes,
            edges,
            weights,
            inputs,
            outputs,
            index,
            producers,
            consumers,
            widths: Vec::new(),
            order,
        };
        g.widths = g.infer_widths()?;
        Ok(g)
    }

    pub fn load(graph_file: &Path, weights_file: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(graph_file).map_err(|e| Error::io(graph_file, e))?;
        let weights = read_weights(weights_file)?;
        json::parse_graph(&text, weights)
    }

    pub fn from_json(text: &str, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        json::parse_graph(text, weights)
    }

    pub fn to_json(&self) -> String {
        json::render_graph(self)
    }

    pub fn save(&self, graph_file: &Path, weights_file: &Path) -> Result<()> {
        std::fs::write(graph_file, self.to_json()).map_err(|e| Error::io(graph_file, e))?;
        write_weights(weights_file, &self.weights)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.get(name)
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub(crate) fn idx(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub(crate) fn node_at(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub(crate) fn producers_of(&self, i: usize) -> &[(usize, usize)] {
        &self.producers[i]
    }

    pub(crate) fn consumers_of(&self, i: usize, port: usize) -> &[(usize, usize)] {
        &self.consumers[i][port]
    }

    pub(crate) fn width_at(&self, i: usize, port: usize) -> usize {
        self.widths[i][port]
    }

    /// Feature width of `(node, output port)`.
    pub fn output_width(&self, id: &str, port: usize) -> Option<usize> {
        let i = self.idx(id)?;
        self.widths[i].get(port).copied()
    }

    /// Feature width arriving at input `port` of `id`.
    pub fn input_width(&self, id: &str, port: usize) -> Option<usize> {
        let i = self.idx(id)?;
        let &(s, sp) = self.producers[i].get(port)?;
        Some(self.widths[s][sp])
    }

    /// Ids in execution order: producers before consumers, ties broken by id.
    pub fn topo_order(&self) -> Vec<String> {
        self.order.iter().map(|&i| self.nodes[i].id.clone()).collect()
    }

    pub(crate) fn order_indices(&self) -> &[usize] {
        &self.order
    }

    /// Linear node ids in execution order.
    pub fn linear_ids(&self) -> Vec<String> {
        self.order
            .iter()
            .filter(|&&i| matches!(self.nodes[i].kind, NodeKind::Linear { .. }))
            .map(|&i| self.nodes[i].id.clone())
            .collect()
    }

    /// `(weight, bias)` of a linear node.
    pub fn linear_params(&self, id: &str) -> Option<(&Tensor, Option<&Tensor>)> {
        match &self.node(id)?.kind {
            NodeKind::Linear { weight, bias } => Some((
                self.weights.get(weight)?,
                bias.as_ref().and_then(|b| self.weights.get(b)),
            )),
            _ => None,
        }
    }

    /// Copy of this graph with one weight tensor replaced (same shape).
    pub fn with_weight(&self, name: &str, value: Tensor) -> Result<Graph> {
        let old = self
            .weights
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no weight `{name}`")))?;
        if old.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "replacement for `{name}` has shape {:?}, expected {:?}",
                value.shape(),
                old.shape()
            )));
        }
        let mut g = self.clone();
        g.weights.insert(name.to_string(), value);
        Ok(g)
    }

    fn infer_widths(&self) -> Result<Vec<Vec<usize>>> {
        let mut widths: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for &i in &self.order {
            let n = &self.nodes[i];
            let ins: Vec<usize> = self.producers[i]
                .iter()
                .map(|&(s, p)| widths[s][p])
                .collect();
            let bad = |m: String| Err(conflict(&n.id, m));
            let out = match &n.kind {
                NodeKind::Input { features, .. } => vec![*features],
                NodeKind::Linear { weight, bias } => {
                    let w = &self.weights[weight];
                    if w.shape().len() != 2 {
                        return bad(format!("weight `{weight}` must be rank 2"));
                    }
                    let (k, m) = (w.shape()[0], w.shape()[1]);
                    if ins[0] != k {
                        return bad(format!("input width {} but weight is [{k}×{m}]", ins[0]));
                    }
                    if let Some(b) = bias {
                        if self.weights[b].len() != m {
                            return bad(format!("bias `{b}` length differs from {m}"));
                        }
                    }
                    vec![m]
                }
                NodeKind::Chunk { count, axis } => match axis {
                    Axis::Features if !ins[0].is_multiple_of(*count) => {
                        return bad(format!("width {} not divisible by {count}", ins[0]))
                    }
                    Axis::Features => vec![ins[0] / count; *count],
                    Axis::Rows => vec![ins[0]; *count],
                },
                NodeKind::Split { sizes, axis } => match axis {
                    Axis::Features if sizes.iter().sum::<usize>() != ins[0] => {
                        return bad(format!("split sizes {sizes:?} do not sum to {}", ins[0]))
                    }
                    Axis::Features => sizes.clone(),
                    Axis::Rows => vec![ins[0]; sizes.len()],
                },
                NodeKind::Concat { axis } => match axis {
                    Axis::Features => vec![ins.iter().sum()],
                    Axis::Rows if ins.iter().any(|&w| w != ins[0]) => {
                        return bad("row concat needs equal widths".into())
                    }
                    Axis::Rows => vec![ins[0]],
                },
                NodeKind::Stack { .. } => {
                    if ins.iter().any(|&w| w != ins[0]) {
                        return bad("stack needs equal widths".into());
                    }
                    vec![ins[0] * ins.len()]
                }
                NodeKind::Activation { func } => match func {
                    ActivationFn::Geglu if !ins[0].is_multiple_of(2) => {
                        return bad("geglu needs an even width".into())
                    }
                    ActivationFn::Geglu => vec![ins[0] / 2],
                    _ => vec![ins[0]],
                },
                NodeKind::Add | NodeKind::Mul => {
                    let (a, b) = (ins[0], ins[1]);
                    if a != b && a != 1 && b != 1 {
                        return bad(format!("operand widths {a} and {b} do not broadcast"));
                    }
                    vec![a.max(b)]
                }
                NodeKind::LayerNorm { .. } => vec![ins[0]],
                NodeKind::ScaleShift => {
                    for &w in &ins[1..] {
                        if w != ins[0] && w != 1 {
                            return bad(format!("modulation width {w} vs {}", ins[0]));
                        }
                    }
                    vec![ins[0]]
                }
                NodeKind::Output => vec![],
            };
            widths[i] = out;
        }
        Ok(widths)
    }
}

fn conflict(node: &str, message: String) -> Error {
    Error::ShapeConflict {
        node: node.to_string(),
        message,
    }
}

fn validate_attrs(n: &Node) -> Result<()> {
    let bad = |m: &str| Err(Error::parse(format!("node `{}`", n.id), m));
    match &n.kind {
        NodeKind::Input { features: 0, .. } => bad("input features must be positive"),
        NodeKind::Input { rows: Some(0), .. } => bad("input rows must be positive"),
        NodeKind::Chunk { count, .. } if *count < 2 => bad("chunk count must be >= 2"),
        NodeKind::Split { sizes, .. } if sizes.is_empty() || sizes.contains(&0) => {
            bad("split sizes must be positive")
        }
        NodeKind::Stack { axis: Axis::Rows } => bad("stack is only defined on the feature axis"),
        NodeKind::LayerNorm { axis: Axis::Rows, .. } => bad("layernorm normalizes the feature axis"),
        NodeKind::LayerNorm { eps, .. } if !(*eps > 0.0) => bad("layernorm eps must be positive"),
        _ => Ok(()),
    }
}

fn topo_sort(
    nodes: &[Node],
    producers: &[Vec<(usize, usize)>],
    consumers: &[Vec<Vec<(usize, usize)>>],
) -> Result<Vec<usize>> {
    let mut indegree: Vec<usize> = producers.iter().map(Vec::len).collect();
    let mut ready: BTreeSet<(&str, usize)> = indegree
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| (nodes[i].id.as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(first) = ready.pop_first() {
        let i = first.1;
        order.push(i);
        for &(d, _) in consumers[i].iter().flatten() {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                ready.insert((nodes[d].id.as_str(), d));
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = indegree
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0)
            .map(|(i, _)| nodes[i].id.clone())
            .min()
            .unwrap_or_default();
        return Err(Error::Cycle(stuck));
    }
    Ok(order)
}

/// Incremental graph construction used by fixtures and tests.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    weights: BTreeMap<String, Tensor>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

/// Reference to a node output port while building.
#[derive(Debug, Clone)]
pub struct Port {
    pub node: String,
    pub port: usize,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&mut self, id: &str, kind: NodeKind, inputs: &[&Port]) -> Port {
        for (k, p) in inputs.iter().enumerate() {
            self.edges.push(Edge {
                src: p.node.clone(),
                src_port: p.port,
                dst: id.to_string(),
                dst_port: k,
            });
        }
        if matches!(kind, NodeKind::Input { .. }) {
            self.inputs.push(id.to_string());
        }
        if matches!(kind, NodeKind::Output) {
            self.outputs.push(id.to_string());
        }
        self.nodes.push(Node {
            id: id.to_string(),
            kind,
        });
        Port {
            node: id.to_string(),
            port: 0,
        }
    }

    pub fn input(&mut self, id: &str, features: usize) -> Port {
        self.node(id, NodeKind::Input { features, rows: None }, &[])
    }

    /// Linear node whose weight is stored as `<id>.weight` (and `<id>.bias`).
    pub fn linear(&mut self, id: &str, x: &Port, weight: Tensor, bias: Option<Tensor>) -> Port {
        let wname = format!("{id}.weight");
        self.weights.insert(wname.clone(), weight);
        let bname = bias.map(|b| {
            let name = format!("{id}.bias");
            self.weights.insert(name.clone(), b);
            name
        });
        self.node(
            id,
            NodeKind::Linear {
                weight: wname,
                bias: bname,
            },
            &[x],
        )
    }

    pub fn act(&mut self, id: &str, func: ActivationFn, x: &Port) -> Port {
        self.node(id, NodeKind::Activation { func }, &[x])
    }

    pub fn output(&mut self, id: &str, x: &Port) {
        self.node(id, NodeKind::Output, &[x]);
    }

    pub fn port(node: &str, port: usize) -> Port {
        Port {
            node: node.to_string(),
            port,
        }
    }

    pub fn build(self) -> Result<Graph> {
        Graph::new(self.nodes, self.edges, self.weights, self.inputs, self.outputs)
    }
}
