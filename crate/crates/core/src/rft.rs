//! Receptive-field back-tracing.
//!
//! Starting from one or more target rectangles on output nodes, every node's
//! region is the rectangular hull of what its consumers need from it, mapped
//! back through each consumer's layer geometry. A node is finalized only once
//! all of its consumers are, so each node and each edge is processed exactly
//! once. The resulting [`Trace`] also memorizes, per edge, where the
//! consumer's need sits inside the producer's region and how far it overhangs
//! the producer's true bounds; the traced executor crops and pads with those.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, Op};
use crate::rect::{Margins, Rect};
use crate::tensor::Shape;

/// Clamped receptive-field region per node id.
pub type RegionMap = BTreeMap<String, Rect>;

/// Maps a region of a layer's output back to the region of its input that
/// the layer reads. The result is not clamped to the input bounds.
pub fn inverse_map(out: Rect, op: &Op) -> Rect {
    match op {
        Op::Conv(a) => {
            let (sh, sw) = (a.stride_h as i64, a.stride_w as i64);
            let (ph, pw) = (a.pad_h as i64, a.pad_w as i64);
            let span_h = (a.dilation_h * (a.kernel_h - 1)) as i64;
            let span_w = (a.dilation_w * (a.kernel_w - 1)) as i64;
            Rect::new(
                out.top * sh - ph,
                out.left * sw - pw,
                out.bottom * sh - ph + span_h,
                out.right * sw - pw + span_w,
            )
        }
        Op::MaxPool { kernel, stride } => {
            let (k, s) = (*kernel as i64, *stride as i64);
            Rect::new(
                out.top * s,
                out.left * s,
                out.bottom * s + k - 1,
                out.right * s + k - 1,
            )
        }
        Op::Upsample { scale } => {
            // Half-pixel centers: src = (dst + 0.5) / r - 0.5 = (2 dst + 1 - r) / 2r.
            let r = *scale as i64;
            let lo = |d: i64| (2 * d + 1 - r).div_euclid(2 * r);
            let hi = |d: i64| -(-(2 * d + 1 - r)).div_euclid(2 * r);
            Rect::new(lo(out.top), lo(out.left), hi(out.bottom), hi(out.right))
        }
        Op::Input | Op::Pointwise(_) | Op::Add | Op::Concat => out,
    }
}

/// Clamps `rect` to a map of the given shape, reporting the overhang.
pub fn clamp(rect: Rect, bounds: Shape) -> Result<(Rect, Margins)> {
    rect.clamp(bounds.height, bounds.width).ok_or_else(|| {
        Error::Trace(format!(
            "region {rect} lies entirely outside a {}x{} map",
            bounds.height, bounds.width
        ))
    })
}

/// Smallest rectangle covering every input rectangle.
pub fn rect_hull(rects: &[Rect]) -> Result<Rect> {
    let (first, rest) = rects
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("rect hull of an empty list".into()))?;
    Ok(rest.iter().fold(*first, |acc, r| acc.union(r)))
}

/// Memorized crop/pad instruction for one producer → consumer edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdgePlan {
    /// Producer node index.
    pub producer: usize,
    /// What the consumer reads, in producer coordinates, before clamping.
    pub needed: Rect,
    /// The in-bounds part of `needed`, relative to the producer's
    /// materialized patch.
    pub crop: Rect,
    /// Overhang of `needed` beyond the producer's bounds.
    pub margins: Margins,
    pub pad_value: f32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TraceStats {
    pub nodes_visited: usize,
    pub edges_traversed: usize,
}

/// Result of back-tracing: regions, crop plan and traversal statistics.
#[derive(Debug, Clone)]
pub struct Trace {
    targets: Vec<(usize, Rect)>,
    visited: Vec<bool>,
    regions: Vec<Option<Rect>>,
    reused: Vec<Option<Rect>>,
    edges: Vec<Vec<EdgePlan>>,
    stats: TraceStats,
}

impl Trace {
    pub fn targets(&self) -> &[(usize, Rect)] {
        &self.targets
    }

    /// Whether the traversal reached node `i` (every ancestor of a target).
    pub fn visited(&self, i: usize) -> bool {
        self.visited[i]
    }

    /// Clamped region node `i` must provide, if any consumer needs it.
    pub fn region(&self, i: usize) -> Option<Rect> {
        self.regions[i]
    }

    /// For nodes served from an existing patch, that patch's rect.
    pub fn reused(&self, i: usize) -> Option<Rect> {
        self.reused[i]
    }

    /// Whether node `i` has to be computed by this trace.
    pub fn computes(&self, i: usize) -> bool {
        self.regions[i].is_some() && self.reused[i].is_none()
    }

    /// Rect of the tensor node `i` holds during execution.
    pub fn materialized(&self, i: usize) -> Option<Rect> {
        self.reused[i].or(self.regions[i])
    }

    /// Crop plans of a computed node's inputs, in input-slot order.
    pub fn edges(&self, i: usize) -> &[EdgePlan] {
        &self.edges[i]
    }

    /// Mutable access to the plan, for tools that rewrite it.
    pub fn edges_mut(&mut self, i: usize) -> &mut [EdgePlan] {
        &mut self.edges[i]
    }

    pub fn stats(&self) -> TraceStats {
        self.stats
    }

    pub fn region_map(&self, g: &GraphSpec) -> RegionMap {
        self.regions
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.map(|r| (g.node(i).id.clone(), r)))
            .collect()
    }
}

/// Back-traces `out_rect` on the graph's designated output.
pub fn backtrace(g: &GraphSpec, out_rect: Rect) -> Result<Trace> {
    backtrace_targets(g, &[(g.output(), out_rect)], None)
}

/// Back-traces several target regions at once. Nodes shared by several
/// targets get the hull of all needs.
///
/// `available`, indexed by node, lists patches that already exist (for
/// example from an earlier trace over the same graph). A node whose region
/// is covered by an available patch is served from it and its producers are
/// not expanded on its behalf.
pub fn backtrace_targets(
    g: &GraphSpec,
    targets: &[(usize, Rect)],
    available: Option<&[Option<Rect>]>,
) -> Result<Trace> {
    if targets.is_empty() {
        return Err(Error::Trace("no target region given".into()));
    }
    let shapes = g.shapes()?;
    let n = g.len();
    let mut needs: Vec<Option<Rect>> = vec![None; n];
    for &(t, rect) in targets {
        if t >= n {
            return Err(Error::Trace(format!("target node index {t} out of range")));
        }
        if !rect.is_valid() || !shapes[t].full_rect().contains(&rect) {
            return Err(Error::Trace(format!(
                "target rect {rect} is not inside node '{}' ({})",
                g.node(t).id,
                shapes[t]
            )));
        }
        needs[t] = Some(needs[t].map_or(rect, |r| r.union(&rect)));
    }

    let tindex: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let visited = g.ancestors(&tindex);
    let mut pending: Vec<usize> = (0..n)
        .map(|i| {
            g.consumers(i)
                .iter()
                .filter(|&&(c, _)| visited[c])
                .count()
        })
        .collect();
    let mut ready: Vec<usize> = (0..n).filter(|&i| visited[i] && pending[i] == 0).collect();
    // Reverse id order so that popping visits nodes in a stable order.
    ready.sort_by(|&a, &b| g.node(b).id.cmp(&g.node(a).id));

    let mut regions: Vec<Option<Rect>> = vec![None; n];
    let mut reused: Vec<Option<Rect>> = vec![None; n];
    let mut raw_edges: Vec<Vec<(usize, Rect)>> = vec![Vec::new(); n];
    let mut stats = TraceStats::default();
    let mut finalized = vec![false; n];

    while let Some(i) = ready.pop() {
        debug_assert!(!finalized[i], "node finalized twice");
        finalized[i] = true;
        stats.nodes_visited += 1;

        let region = needs[i];
        regions[i] = region;
        let cached = match (region, available.and_then(|a| a.get(i).copied().flatten())) {
            (Some(r), Some(c)) if c.contains(&r) => Some(c),
            _ => None,
        };
        reused[i] = cached;
        let expand = region.filter(|_| cached.is_none());

        let node = g.node(i);
        for &p in g.producers(i) {
            stats.edges_traversed += 1;
            if let Some(r) = expand {
                let mut needed = inverse_map(r, &node.op);
                let (clamped, _) = clamp(needed, shapes[p]).map_err(|_| {
                    Error::Trace(format!(
                        "node '{}' needs {needed} from '{}', outside its {} map",
                        node.id,
                        g.node(p).id,
                        shapes[p]
                    ))
                })?;
                // Bilinear sampling clamps its source coordinates itself,
                // so an upsample never reads padding.
                if matches!(node.op, Op::Upsample { .. }) {
                    needed = clamped;
                }
                needs[p] = Some(needs[p].map_or(clamped, |h| h.union(&clamped)));
                raw_edges[i].push((p, needed));
            }
            pending[p] -= 1;
            if pending[p] == 0 {
                ready.push(p);
            }
        }
    }
    debug_assert!(
        (0..n).all(|i| finalized[i] == visited[i]),
        "every ancestor is finalized exactly once"
    );

    let materialized: Vec<Option<Rect>> = (0..n).map(|i| reused[i].or(regions[i])).collect();
    let mut edges = vec![Vec::new(); n];
    for (i, list) in raw_edges.into_iter().enumerate() {
        for (p, needed) in list {
            let (clamped, margins) = clamp(needed, shapes[p])?;
            let holder = materialized[p].expect("a needed producer has a region");
            edges[i].push(EdgePlan {
                producer: p,
                needed,
                crop: clamped.relative_to(&holder),
                margins,
                pad_value: 0.0,
            });
        }
    }

    Ok(Trace {
        targets: targets.to_vec(),
        visited,
        regions,
        reused,
        edges,
        stats,
    })
}
