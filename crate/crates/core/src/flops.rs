//! Static FLOPs accounting for full and traced execution.
//!
//! Conventions: a multiply-accumulate counts as two operations; biases are
//! ignored; relu and add cost one operation per element, batch norm and
//! sigmoid two; max pooling one comparison per window element; bilinear
//! upsampling four per output element; input, concat, crop and pad are free.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{GraphSpec, Op};
use crate::rft::Trace;
use crate::tensor::{PointwiseKind, Shape};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeFlops {
    pub full: u64,
    pub traced: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_node: BTreeMap<String, NodeFlops>,
    pub total_full: u64,
    pub total_traced: u64,
    pub savings_ratio: f64,
}

/// FLOPs of one node producing `out` (channels × rows × cols of the
/// computed window).
pub fn node_flops(op: &Op, out: Shape) -> u64 {
    let hw = (out.height * out.width) as u64;
    let c = out.channels as u64;
    match op {
        Op::Input | Op::Concat => 0,
        Op::Conv(a) => 2 * (a.kernel_h * a.kernel_w * a.in_channels) as u64 * c * hw,
        Op::Pointwise(PointwiseKind::Relu) => hw * c,
        Op::Pointwise(PointwiseKind::BatchNorm | PointwiseKind::Sigmoid) => 2 * hw * c,
        Op::MaxPool { kernel, .. } => (kernel * kernel) as u64 * hw * c,
        Op::Upsample { .. } => 4 * hw * c,
        Op::Add => hw * c,
    }
}

impl FlopsReport {
    pub fn from_per_node(per_node: BTreeMap<String, NodeFlops>) -> Self {
        let total_full = per_node.values().map(|n| n.full).sum();
        let total_traced = per_node.values().map(|n| n.traced).sum();
        FlopsReport {
            per_node,
            total_full,
            total_traced,
            savings_ratio: savings(total_full, total_traced),
        }
    }

    /// Adds a node's counts (or accumulates into an existing entry).
    pub fn add_node(&mut self, id: &str, full: u64, traced: u64) {
        let e = self.per_node.entry(id.to_string()).or_default();
        e.full += full;
        e.traced += traced;
        *self = FlopsReport::from_per_node(std::mem::take(&mut self.per_node));
    }
}

fn savings(full: u64, traced: u64) -> f64 {
    if full == 0 {
        0.0
    } else {
        1.0 - traced as f64 / full as f64
    }
}

/// Counts FLOPs of the ancestors of the graph output (no trace), or of the
/// nodes a trace visits. Traced counts use each computed node's region;
/// nodes served from earlier patches cost nothing.
pub fn count_flops(g: &GraphSpec, trace: Option<&Trace>) -> Result<FlopsReport> {
    let shapes = g.shapes()?;
    let visited = match trace {
        Some(t) => (0..g.len()).map(|i| t.visited(i)).collect(),
        None => g.ancestors(&[g.output()]),
    };
    let mut per_node = BTreeMap::new();
    for i in (0..g.len()).filter(|&i| visited[i]) {
        let node = g.node(i);
        let full = node_flops(&node.op, shapes[i]);
        let traced = match trace {
            None => full,
            Some(t) => match t.region(i).filter(|_| t.computes(i)) {
                Some(r) => node_flops(
                    &node.op,
                    Shape::new(shapes[i].channels, r.height() as usize, r.width() as usize),
                ),
                None => 0,
            },
        };
        per_node.insert(node.id.clone(), NodeFlops { full, traced });
    }
    Ok(FlopsReport::from_per_node(per_node))
}

/// Full-execution FLOPs of every node in the graph, whatever the output.
pub fn count_all_nodes(g: &GraphSpec) -> Result<FlopsReport> {
    let shapes = g.shapes()?;
    let per_node = g
        .nodes()
        .iter()
        .zip(&shapes)
        .map(|(n, &s)| {
            let f = node_flops(&n.op, s);
            (n.id.clone(), NodeFlops { full: f, traced: f })
        })
        .collect();
    Ok(FlopsReport::from_per_node(per_node))
}
