//! `graph.json` reader and writer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{ActivationFn, Axis, Edge, Graph, Node, NodeKind, LAYERNORM_DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    version: u32,
    nodes: Vec<NodeFile>,
    edges: Vec<(String, usize, String, usize)>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    id: String,
    kind: String,
    #[serde(default)]
    attrs: Map<String, Value>,
}

pub(super) fn parse_graph(text: &str, weights: BTreeMap<String, Tensor>) -> Result<Graph> {
    let file: GraphFile = serde_json::from_str(text).map_err(|e| Error::parse("graph.json", e))?;
    if file.version != FORMAT_VERSION {
        return Err(Error::parse(
            "graph.json",
            format!("unsupported version {}", file.version),
        ));
    }
    let nodes = file
        .nodes
        .into_iter()
        .map(|n| {
            let kind = parse_kind(&n.id, &n.kind, n.attrs)?;
            Ok(Node { id: n.id, kind })
        })
        .collect::<Result<Vec<_>>>()?;
    let edges = file
        .edges
        .into_iter()
        .map(|(src, src_port, dst, dst_port)| Edge {
            src,
            src_port,
            dst,
            dst_port,
        })
        .collect();
    Graph::new(nodes, edges, weights, file.inputs, file.outputs)
}

pub(super) fn render_graph(g: &Graph) -> String {
    let file = GraphFile {
        version: FORMAT_VERSION,
        nodes: g
            .nodes()
            .iter()
            .map(|n| NodeFile {
                id: n.id.clone(),
                kind: n.kind.tag().to_string(),
                attrs: render_attrs(&n.kind),
            })
            .collect(),
        edges: g
            .edges()
            .iter()
            .map(|e| (e.src.clone(), e.src_port, e.dst.clone(), e.dst_port))
            .collect(),
        inputs: g.inputs().to_vec(),
        outputs: g.outputs().to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("graph serializes");
    s.push('\n');
    s
}

struct Attrs<'a> {
    node: &'a str,
    map: Map<String, Value>,
}

impl<'a> Attrs<'a> {
    fn err(&self, msg: String) -> Error {
        Error::parse(format!("node `{}`", self.node), msg)
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key)
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        self.take(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| self.err(format!("attribute `{key}` must be a non-negative integer")))
    }

    fn string(&mut self, key: &str) -> Result<String> {
        match self.take(key) {
            Some(Value::String(s)) => Ok(s),
            _ => Err(self.err(format!("attribute `{key}` must be a string"))),
        }
    }

    fn opt_string(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.err(format!("attribute `{key}` must be a string"))),
        }
    }

    fn axis(&mut self) -> Result<Axis> {
        match self.take("axis") {
            None => Ok(Axis::Features),
            Some(v) => v
                .as_i64()
                .and_then(Axis::from_index)
                .ok_or_else(|| self.err(format!("axis {v} is not 0, 1 or -1"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(self.err(format!("unknown attribute `{k}`"))),
            None => Ok(()),
        }
    }
}

fn parse_kind(id: &str, kind: &str, map: Map<String, Value>) -> Result<NodeKind> {
    let mut a = Attrs { node: id, map };
    let k = match kind {
        "input" => {
            let features = a.usize("features")?;
            let rows = match a.take("rows") {
                None | Some(Value::Null) => None,
                Some(v) => Some(
                    v.as_u64()
                        .ok_or_else(|| a.err("attribute `rows` must be an integer or null".into()))?
                        as usize,
                ),
            };
            NodeKind::Input { features, rows }
        }
        "linear" => NodeKind::Linear {
            weight: a.string("weight")?,
            bias: a.opt_string("bias")?,
        },
        "chunk" => NodeKind::Chunk {
            count: a.usize("count")?,
            axis: a.axis()?,
        },
        "split" => {
            let sizes = match a.take("sizes") {
                Some(Value::Array(v)) => v
                    .iter()
                    .map(|s| s.as_u64().map(|s| s as usize))
                    .collect::<Option<Vec<_>>>(),
                _ => None,
            }
            .ok_or_else(|| a.err("attribute `sizes` must be an integer array".into()))?;
            NodeKind::Split {
                sizes,
                axis: a.axis()?,
            }
        }
        "concat" => NodeKind::Concat { axis: a.axis()? },
        "stack" => NodeKind::Stack { axis: a.axis()? },
        "activation" => {
            let name = a.string("fn")?;
            let func = ActivationFn::parse(&name)
                .ok_or_else(|| a.err(format!("unknown activation `{name}`")))?;
            NodeKind::Activation { func }
        }
        "add" => NodeKind::Add,
        "mul" => NodeKind::Mul,
        "layernorm" => {
            let axis = a.axis()?;
            let eps = match a.take("eps") {
                None => LAYERNORM_DEFAULT_EPS,
                Some(v) => v
                    .as_f64()
                    .ok_or_else(|| a.err("attribute `eps` must be a number".into()))?
                    as f32,
            };
            NodeKind::LayerNorm { axis, eps }
        }
        "scale_shift" => NodeKind::ScaleShift,
        "output" => NodeKind::Output,
        other => return Err(a.err(format!("unknown node kind `{other}`"))),
    };
    a.finish()?;
    Ok(k)
}

fn render_attrs(kind: &NodeKind) -> Map<String, Value> {
    let v = match kind {
        NodeKind::Input { features, rows } => json!({ "features": features, "rows": rows }),
        NodeKind::Linear { weight, bias } => match bias {
            Some(b) => json!({ "weight": weight, "bias": b }),
            None => json!({ "weight": weight }),
        },
        NodeKind::Chunk { count, axis } => json!({ "count": count, "axis": axis.index() }),
        NodeKind::Split { sizes, axis } => json!({ "sizes": sizes, "axis": axis.index() }),
        NodeKind::Concat { axis } | NodeKind::Stack { axis } => json!({ "axis": axis.index() }),
        NodeKind::Activation { func } => json!({ "fn": func.name() }),
        NodeKind::LayerNorm { axis, eps } => json!({ "axis": axis.index(), "eps": eps }),
        NodeKind::Add | NodeKind::Mul | NodeKind::ScaleShift | NodeKind::Output => json!({}),
    };
    match v {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}
