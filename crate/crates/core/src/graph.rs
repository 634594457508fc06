//! Computation-graph data model and its JSON form.
//!
//! A [`GraphSpec`] is validated on construction: unique ids, correct arity,
//! resolvable producers, acyclic, and every node reachable from an input.
//! Shapes are inferred separately by [`GraphSpec::infer_shapes`] because an
//! otherwise well-formed graph can still disagree with its input size.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_dim, ConvAttrs, PointwiseKind, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Input,
    Conv,
    Pointwise,
    #[serde(rename = "maxpool")]
    MaxPool,
    Upsample,
    Add,
    Concat,
}

impl OpKind {
    pub fn arity(self) -> usize {
        match self {
            OpKind::Input => 0,
            OpKind::Add | OpKind::Concat => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv => "conv",
            OpKind::Pointwise => "pointwise",
            OpKind::MaxPool => "maxpool",
            OpKind::Upsample => "upsample",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "input" => OpKind::Input,
            "conv" => OpKind::Conv,
            "pointwise" => OpKind::Pointwise,
            "maxpool" => OpKind::MaxPool,
            "upsample" => OpKind::Upsample,
            "add" => OpKind::Add,
            "concat" => OpKind::Concat,
            _ => return None,
        })
    }
}

/// A layer operation with its parameter list.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Conv(ConvAttrs),
    Pointwise(PointwiseKind),
    MaxPool { kernel: usize, stride: usize },
    Upsample { scale: usize },
    Add,
    Concat,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Conv(_) => OpKind::Conv,
            Op::Pointwise(_) => OpKind::Pointwise,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Add => OpKind::Add,
            Op::Concat => OpKind::Concat,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str]) -> Self {
        NodeSpec {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A validated acyclic computation graph with one designated output.
#[derive(Debug, Clone)]
pub struct GraphSpec {
    nodes: Vec<NodeSpec>,
    output: usize,
    input_shape: Shape,
    index: HashMap<String, usize>,
    producers: Vec<Vec<usize>>,
    consumers: Vec<Vec<(usize, usize)>>,
    order: Vec<usize>,
}

impl GraphSpec {
    pub fn new(nodes: Vec<NodeSpec>, output: &str, input_shape: Shape) -> Result<Self> {
        if input_shape.numel() == 0 {
            return Err(Error::Validation(format!(
                "input shape {input_shape} has a zero dimension"
            )));
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate node id '{}'", n.id)));
            }
        }
        let mut producers = Vec::with_capacity(nodes.len());
        let mut consumers = vec![Vec::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            let kind = n.op.kind();
            if n.inputs.len() != kind.arity() {
                return Err(Error::Validation(format!(
                    "node '{}' ({}) takes {} inputs, got {}",
                    n.id,
                    kind.as_str(),
                    kind.arity(),
                    n.inputs.len()
                )));
            }
            let mut p = Vec::with_capacity(n.inputs.len());
            for (slot, src) in n.inputs.iter().enumerate() {
                let j = *index.get(src).ok_or_else(|| {
                    Error::Validation(format!("node '{}' references unknown node '{src}'", n.id))
                })?;
                p.push(j);
                consumers[j].push((i, slot));
            }
            producers.push(p);
        }
        let output = *index
            .get(output)
            .ok_or_else(|| Error::Validation(format!("output node '{output}' does not exist")))?;

        let order = kahn_order(&nodes, &producers, &consumers)?;

        // Reachability from the inputs.
        let mut seen = vec![false; nodes.len()];
        let mut stack: Vec<usize> = (0..nodes.len())
            .filter(|&i| nodes[i].op == Op::Input)
            .collect();
        if stack.is_empty() {
            return Err(Error::Validation("graph has no input node".into()));
        }
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            stack.extend(consumers[i].iter().map(|&(c, _)| c));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "node '{}' is not reachable from any input",
                nodes[i].id
            )));
        }

        Ok(GraphSpec {
            nodes,
            output,
            input_shape,
            index,
            producers,
            consumers,
            order,
        })
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &NodeSpec {
        &self.nodes[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub(crate) fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown node '{id}'")))
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn output_id(&self) -> &str {
        &self.nodes[self.output].id
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn producers(&self, i: usize) -> &[usize] {
        &self.producers[i]
    }

    /// `(consumer, input slot)` pairs reading node `i`.
    pub fn consumers(&self, i: usize) -> &[(usize, usize)] {
        &self.consumers[i]
    }

    /// Node indices in dependency order, ties broken by id.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn topo_order(&self) -> Vec<String> {
        self.order.iter().map(|&i| self.nodes[i].id.clone()).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.producers.iter().map(Vec::len).sum()
    }

    /// Marks every node that some target depends on, targets included.
    pub fn ancestors(&self, targets: &[usize]) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        let mut stack = targets.to_vec();
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut mark[i], true) {
                continue;
            }
            stack.extend_from_slice(&self.producers[i]);
        }
        mark
    }

    /// The same graph with a different designated output.
    pub fn with_output(&self, id: &str) -> Result<GraphSpec> {
        let output = self.require(id)?;
        Ok(GraphSpec {
            output,
            ..self.clone()
        })
    }

    /// Only the nodes the given output depends on.
    pub fn pruned_to(&self, id: &str) -> Result<GraphSpec> {
        let out = self.require(id)?;
        let keep = self.ancestors(&[out]);
        let nodes = self
            .nodes
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(n, _)| n.clone())
            .collect();
        GraphSpec::new(nodes, id, self.input_shape)
    }

    pub fn with_input_shape(&self, shape: Shape) -> Result<GraphSpec> {
        if shape.numel() == 0 {
            return Err(Error::Validation(format!(
                "input shape {shape} has a zero dimension"
            )));
        }
        Ok(GraphSpec {
            input_shape: shape,
            ..self.clone()
        })
    }

    /// Output shape of every node, indexed like [`GraphSpec::nodes`].
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Option<Shape>> = vec![None; self.nodes.len()];
        for &i in &self.order {
            let node = &self.nodes[i];
            let ins: Vec<Shape> = self.producers[i]
                .iter()
                .map(|&p| shapes[p].expect("producers precede consumers"))
                .collect();
            shapes[i] = Some(node_shape(node, &ins, self.input_shape)?);
        }
        Ok(shapes.into_iter().map(|s| s.unwrap()).collect())
    }

    pub fn infer_shapes(&self) -> Result<BTreeMap<String, Shape>> {
        let shapes = self.shapes()?;
        Ok(self
            .nodes
            .iter()
            .zip(shapes)
            .map(|(n, s)| (n.id.clone(), s))
            .collect())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawGraph = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        let [c, h, w] = raw.input_shape;
        let mut nodes = Vec::with_capacity(raw.nodes.len());
        for (i, rn) in raw.nodes.into_iter().enumerate() {
            nodes.push(rn.into_node(i)?);
        }
        GraphSpec::new(nodes, &raw.output, Shape::new(c, h, w))
    }

    pub fn to_json(&self) -> String {
        let raw = RawGraph {
            input_shape: [
                self.input_shape.channels,
                self.input_shape.height,
                self.input_shape.width,
            ],
            output: self.output_id().to_string(),
            nodes: self.nodes.iter().map(RawNode::from_node).collect(),
        };
        serde_json::to_string_pretty(&raw).expect("graph serializes")
    }
}

/// Parses and validates a graph-spec JSON document.
pub fn parse_graph(json_text: &str) -> Result<GraphSpec> {
    GraphSpec::from_json(json_text)
}

fn kahn_order(
    nodes: &[NodeSpec],
    producers: &[Vec<usize>],
    consumers: &[Vec<(usize, usize)>],
) -> Result<Vec<usize>> {
    let mut indegree: Vec<usize> = producers.iter().map(Vec::len).collect();
    let mut ready: BTreeSet<(&str, usize)> = indegree
        .iter()
        .enumerate()
        .filter(|(_, d)| **d == 0)
        .map(|(i, _)| (nodes[i].id.as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some((_, i)) = ready.pop_first() {
        order.push(i);
        for &(c, _) in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert((nodes[c].id.as_str(), c));
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = indegree.iter().position(|&d| d > 0).unwrap();
        return Err(Error::Cycle(nodes[stuck].id.clone()));
    }
    Ok(order)
}

pub(crate) fn node_shape(node: &NodeSpec, ins: &[Shape], input_shape: Shape) -> Result<Shape> {
    let bad = |detail: String| Error::shape("infer_shapes", format!("node '{}': {detail}", node.id));
    match &node.op {
        Op::Input => Ok(input_shape),
        Op::Conv(a) => {
            let s = ins[0];
            if s.channels != a.in_channels {
                return Err(bad(format!(
                    "expects {} input channels, producer has {}",
                    a.in_channels, s.channels
                )));
            }
            let (h, w) = a
                .output_size(s.height, s.width)
                .ok_or_else(|| bad(format!("kernel does not fit {}x{} input", s.height, s.width)))?;
            Ok(Shape::new(a.out_channels, h, w))
        }
        Op::Pointwise(_) => Ok(ins[0]),
        Op::MaxPool { kernel, stride } => {
            let s = ins[0];
            let h = conv_out_dim(s.height, *kernel, *stride, 0, 1);
            let w = conv_out_dim(s.width, *kernel, *stride, 0, 1);
            match (h, w) {
                (Some(h), Some(w)) => Ok(Shape::new(s.channels, h, w)),
                _ => Err(bad(format!(
                    "pool window {kernel} does not fit {}x{}",
                    s.height, s.width
                ))),
            }
        }
        Op::Upsample { scale } => {
            let s = ins[0];
            Ok(Shape::new(s.channels, s.height * scale, s.width * scale))
        }
        Op::Add => {
            if ins[0] != ins[1] {
                return Err(bad(format!("branch shapes differ: {} vs {}", ins[0], ins[1])));
            }
            Ok(ins[0])
        }
        Op::Concat => {
            if (ins[0].height, ins[0].width) != (ins[1].height, ins[1].width) {
                return Err(bad(format!(
                    "spatial dims differ: {} vs {}",
                    ins[0], ins[1]
                )));
            }
            Ok(Shape::new(
                ins[0].channels + ins[1].channels,
                ins[0].height,
                ins[0].width,
            ))
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    input_shape: [usize; 3],
    output: String,
    nodes: Vec<RawNode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    kind: String,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    attrs: serde_json::Value,
}

fn one_pair() -> [usize; 2] {
    [1, 1]
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvJson {
    kernel: [usize; 2],
    #[serde(default = "one_pair")]
    stride: [usize; 2],
    #[serde(default)]
    pad: [usize; 2],
    #[serde(default = "one_pair")]
    dilation: [usize; 2],
    in_channels: usize,
    out_channels: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointwiseJson {
    op: PointwiseKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaxPoolJson {
    kernel: usize,
    stride: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UpsampleJson {
    scale: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoAttrs {}

impl RawNode {
    fn into_node(self, position: usize) -> Result<NodeSpec> {
        let path = format!("nodes[{position}] (id '{}')", self.id);
        let kind = OpKind::parse(&self.kind).ok_or_else(|| Error::Parse {
            path: format!("{path}.kind"),
            message: format!("unknown kind '{}'", self.kind),
        })?;
        let attrs = if self.attrs.is_null() {
            serde_json::Value::Object(Default::default())
        } else {
            self.attrs
        };
        fn attr<T: serde::de::DeserializeOwned>(path: &str, v: serde_json::Value) -> Result<T> {
            serde_json::from_value(v).map_err(|e| Error::Parse {
                path: format!("{path}.attrs"),
                message: e.to_string(),
            })
        }
        let op = match kind {
            OpKind::Input => attr::<NoAttrs>(&path, attrs).map(|_| Op::Input)?,
            OpKind::Add => attr::<NoAttrs>(&path, attrs).map(|_| Op::Add)?,
            OpKind::Concat => attr::<NoAttrs>(&path, attrs).map(|_| Op::Concat)?,
            OpKind::Conv => {
                let c: ConvJson = attr(&path, attrs)?;
                let a = ConvAttrs {
                    kernel_h: c.kernel[0],
                    kernel_w: c.kernel[1],
                    stride_h: c.stride[0],
                    stride_w: c.stride[1],
                    pad_h: c.pad[0],
                    pad_w: c.pad[1],
                    dilation_h: c.dilation[0],
                    dilation_w: c.dilation[1],
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                };
                a.validate().map_err(|e| Error::Parse {
                    path: format!("{path}.attrs"),
                    message: e.to_string(),
                })?;
                Op::Conv(a)
            }
            OpKind::Pointwise => Op::Pointwise(attr::<PointwiseJson>(&path, attrs)?.op),
            OpKind::MaxPool => {
                let m: MaxPoolJson = attr(&path, attrs)?;
                if m.kernel == 0 || m.stride == 0 {
                    return Err(Error::Parse {
                        path: format!("{path}.attrs"),
                        message: "maxpool kernel and stride must be positive".into(),
                    });
                }
                Op::MaxPool {
                    kernel: m.kernel,
                    stride: m.stride,
                }
            }
            OpKind::Upsample => {
                let u: UpsampleJson = attr(&path, attrs)?;
                if !(u.scale == 2 || u.scale == 4) {
                    return Err(Error::Parse {
                        path: format!("{path}.attrs.scale"),
                        message: format!("upsample scale must be 2 or 4, got {}", u.scale),
                    });
                }
                Op::Upsample { scale: u.scale }
            }
        };
        Ok(NodeSpec {
            id: self.id,
            op,
            inputs: self.inputs,
        })
    }

    fn from_node(n: &NodeSpec) -> Self {
        let attrs = match &n.op {
            Op::Input | Op::Add | Op::Concat => serde_json::Value::Null,
            Op::Conv(a) => serde_json::to_value(ConvJson {
                kernel: [a.kernel_h, a.kernel_w],
                stride: [a.stride_h, a.stride_w],
                pad: [a.pad_h, a.pad_w],
                dilation: [a.dilation_h, a.dilation_w],
                in_channels: a.in_channels,
                out_channels: a.out_channels,
            })
            .unwrap(),
            Op::Pointwise(k) => serde_json::to_value(PointwiseJson { op: *k }).unwrap(),
            Op::MaxPool { kernel, stride } => serde_json::to_value(MaxPoolJson {
                kernel: *kernel,
                stride: *stride,
            })
            .unwrap(),
            Op::Upsample { scale } => {
                serde_json::to_value(UpsampleJson { scale: *scale }).unwrap()
            }
        };
        RawNode {
            id: n.id.clone(),
            kind: n.op.kind().as_str().to_string(),
            inputs: n.inputs.clone(),
            attrs,
        }
    }
}
