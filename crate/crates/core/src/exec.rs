//! Full and traced forward execution, and the equivalence check between them.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, Op};
use crate::rect::Rect;
use crate::rft::{backtrace, backtrace_targets, Trace};
use crate::tensor::{self, PointwiseKind, Shape, Tensor};
use crate::weights::WeightStore;

#[derive(Debug, Clone)]
pub struct ExecResult {
    pub output: Tensor,
    /// `(row, col)` of `output`'s top-left pixel in the full output frame.
    pub output_origin: (usize, usize),
    /// Shape of every tensor the run produced, keyed by node id.
    pub node_shapes: BTreeMap<String, Shape>,
}

/// A computed window of one node's feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub rect: Rect,
    pub tensor: Tensor,
}

fn check_input(g: &GraphSpec, input: &Tensor) -> Result<()> {
    if input.shape() != g.input_shape() {
        return Err(Error::shape(
            "input",
            format!(
                "graph expects {}, got {}",
                g.input_shape(),
                input.shape()
            ),
        ));
    }
    Ok(())
}

fn apply(g: &GraphSpec, i: usize, w: &WeightStore, ins: &[&Tensor], padded: bool) -> Result<Tensor> {
    let node = g.node(i);
    match &node.op {
        Op::Input => unreachable!("inputs are not computed"),
        Op::Conv(a) => {
            let (weight, bias) = w.conv(&node.id)?;
            let attrs = if padded { a.unpadded() } else { *a };
            tensor::conv2d(ins[0], weight, bias, &attrs)
        }
        Op::Pointwise(kind) => {
            let affine = match kind {
                PointwiseKind::BatchNorm => Some(w.affine(&node.id)?),
                _ => None,
            };
            tensor::pointwise(ins[0], *kind, affine)
        }
        Op::MaxPool { kernel, stride } => tensor::maxpool2d(ins[0], *kernel, *stride),
        Op::Upsample { scale } => tensor::bilinear_upsample(ins[0], *scale),
        Op::Add => tensor::add(ins[0], ins[1]),
        Op::Concat => tensor::concat(ins[0], ins[1]),
    }
}

/// Runs every ancestor of `targets` over whole feature maps and returns the
/// computed tensors, indexed by node.
pub fn run_full_nodes(
    g: &GraphSpec,
    w: &WeightStore,
    input: &Tensor,
    targets: &[usize],
) -> Result<Vec<Option<Tensor>>> {
    check_input(g, input)?;
    let needed = g.ancestors(targets);
    let mut out: Vec<Option<Tensor>> = vec![None; g.len()];
    for &i in g.order() {
        if !needed[i] {
            continue;
        }
        let t = if g.node(i).op == Op::Input {
            input.clone()
        } else {
            let ins: Vec<&Tensor> = g
                .producers(i)
                .iter()
                .map(|&p| out[p].as_ref().expect("producer computed"))
                .collect();
            apply(g, i, w, &ins, false)?
        };
        out[i] = Some(t);
    }
    Ok(out)
}

fn shapes_of(g: &GraphSpec, tensors: impl Iterator<Item = (usize, Shape)>) -> BTreeMap<String, Shape> {
    tensors.map(|(i, s)| (g.node(i).id.clone(), s)).collect()
}

/// Plain forward pass over whole feature maps.
pub fn run_full(g: &GraphSpec, w: &WeightStore, input: &Tensor) -> Result<ExecResult> {
    let mut all = run_full_nodes(g, w, input, &[g.output()])?;
    let node_shapes = shapes_of(
        g,
        all.iter()
            .enumerate()
            .filter_map(|(i, t)| t.as_ref().map(|t| (i, t.shape()))),
    );
    let output = all[g.output()].take().expect("output computed");
    Ok(ExecResult {
        output,
        output_origin: (0, 0),
        node_shapes,
    })
}

/// Executes a trace: each computed node evaluates only its region, reading
/// its inputs through the memorized crop and pad of each edge.
///
/// `cache` supplies the patches for nodes the trace marks as reused.
pub fn execute_trace(
    g: &GraphSpec,
    w: &WeightStore,
    input: &Tensor,
    trace: &Trace,
    cache: Option<&[Option<Patch>]>,
) -> Result<Vec<Option<Patch>>> {
    check_input(g, input)?;
    let shapes = g.shapes()?;
    let mut patches: Vec<Option<Patch>> = vec![None; g.len()];
    for &i in g.order() {
        let Some(region) = trace.region(i) else {
            continue;
        };
        if let Some(rect) = trace.reused(i) {
            let patch = cache
                .and_then(|c| c.get(i).cloned().flatten())
                .filter(|p| p.rect == rect)
                .ok_or_else(|| {
                    Error::Trace(format!("no cached patch {rect} for node '{}'", g.node(i).id))
                })?;
            patches[i] = Some(patch);
            continue;
        }
        let node = g.node(i);
        let tensor = match &node.op {
            Op::Input => tensor::crop(input, region)?,
            Op::Upsample { scale } => {
                let e = trace.edges(i)[0];
                let src = patches[e.producer].as_ref().expect("producer computed");
                let window = tensor::crop(&src.tensor, e.crop)?;
                let full = shapes[e.producer];
                tensor::upsample_window(
                    &window,
                    (e.needed.top, e.needed.left),
                    (full.height, full.width),
                    *scale,
                    region,
                )?
            }
            _ => {
                let mut ins = Vec::with_capacity(2);
                for e in trace.edges(i) {
                    let src = patches[e.producer].as_ref().expect("producer computed");
                    let window = tensor::crop(&src.tensor, e.crop)?;
                    ins.push(tensor::pad(&window, e.margins, e.pad_value));
                }
                let refs: Vec<&Tensor> = ins.iter().collect();
                apply(g, i, w, &refs, true)?
            }
        };
        if tensor.height() as i64 != region.height() || tensor.width() as i64 != region.width() {
            return Err(Error::Trace(format!(
                "node '{}' produced {}x{} for region {region}",
                node.id,
                tensor.height(),
                tensor.width()
            )));
        }
        patches[i] = Some(Patch {
            rect: region,
            tensor,
        });
    }
    Ok(patches)
}

/// Output patch of a trace's first target, cut to the requested rect.
fn target_patch(trace: &Trace, patches: &[Option<Patch>]) -> Result<(Tensor, Rect)> {
    let (t, rect) = trace.targets()[0];
    let p = patches[t].as_ref().expect("target computed");
    Ok((tensor::crop(&p.tensor, rect.relative_to(&p.rect))?, rect))
}

/// Forward pass restricted to the receptive field of `out_rect`.
pub fn run_traced(
    g: &GraphSpec,
    w: &WeightStore,
    input: &Tensor,
    out_rect: Rect,
) -> Result<ExecResult> {
    let trace = backtrace(g, out_rect)?;
    run_with_trace(g, w, input, &trace)
}

/// Executes an already computed (possibly edited) trace of the graph output.
pub fn run_with_trace(
    g: &GraphSpec,
    w: &WeightStore,
    input: &Tensor,
    trace: &Trace,
) -> Result<ExecResult> {
    let patches = execute_trace(g, w, input, trace, None)?;
    let (output, rect) = target_patch(trace, &patches)?;
    let node_shapes = shapes_of(
        g,
        patches
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (i, p.tensor.shape()))),
    );
    Ok(ExecResult {
        output,
        output_origin: (rect.top as usize, rect.left as usize),
        node_shapes,
    })
}

/// Traced evaluation of several target regions sharing one trace.
pub fn run_traced_targets(
    g: &GraphSpec,
    w: &WeightStore,
    input: &Tensor,
    targets: &[(usize, Rect)],
) -> Result<(Trace, Vec<Option<Patch>>)> {
    let trace = backtrace_targets(g, targets, None)?;
    let patches = execute_trace(g, w, input, &trace, None)?;
    Ok((trace, patches))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub out_rect: Rect,
    pub max_abs_diff: f32,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Runs both executors and compares the traced output with the same window
/// of the full output.
pub fn verify_equivalence(
    g: &GraphSpec,
    w: &WeightStore,
    input: &Tensor,
    out_rect: Rect,
    tolerance: f32,
) -> Result<EquivalenceReport> {
    let trace = backtrace(g, out_rect)?;
    verify_trace(g, w, input, &trace, tolerance)
}

/// Like [`verify_equivalence`] for a given trace. A trace that cannot be
/// executed is reported as a failure rather than an error.
pub fn verify_trace(
    g: &GraphSpec,
    w: &WeightStore,
    input: &Tensor,
    trace: &Trace,
    tolerance: f32,
) -> Result<EquivalenceReport> {
    let full = run_full(g, w, input)?;
    let out_rect = trace.targets()[0].1;
    let expect = tensor::crop(&full.output, out_rect)?;
    let (max_abs_diff, error) = match run_with_trace(g, w, input, trace) {
        Ok(traced) => match traced.output.max_abs_diff(&expect) {
            Ok(d) => (if d.is_nan() { f32::INFINITY } else { d }, None),
            Err(e) => (f32::INFINITY, Some(e.to_string())),
        },
        Err(e) => (f32::INFINITY, Some(e.to_string())),
    };
    Ok(EquivalenceReport {
        out_rect,
        max_abs_diff,
        pass: error.is_none() && max_abs_diff <= tolerance,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeSpec;
    use crate::tensor::ConvAttrs;
    use crate::weights::TensorRole;

    fn identity_graph() -> (GraphSpec, WeightStore) {
        let g = GraphSpec::new(
            vec![
                NodeSpec::new("x", Op::Input, &[]),
                NodeSpec::new("c", Op::Conv(ConvAttrs::square(1, 1, 1, 1, 0)), &["x"]),
            ],
            "c",
            Shape::new(1, 3, 3),
        )
        .unwrap();
        let mut w = WeightStore::new();
        w.insert("c", TensorRole::Weight, vec![1, 1, 1, 1], vec![1.0]).unwrap();
        w.insert("c", TensorRole::Bias, vec![1], vec![0.0]).unwrap();
        (g, w)
    }

    #[test]
    fn identity_graph_returns_input() {
        let (g, w) = identity_graph();
        let x = Tensor::new(1, 3, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        let r = run_full(&g, &w, &x).unwrap();
        assert_eq!(r.output, x);
        assert_eq!(r.output_origin, (0, 0));
        let t = run_traced(&g, &w, &x, Rect::pixel(1, 2)).unwrap();
        assert_eq!(t.output.data(), &[5.0]);
        assert_eq!(t.output_origin, (1, 2));
    }

    #[test]
    fn conv_relu_chain_values() {
        let g = GraphSpec::new(
            vec![
                NodeSpec::new("x", Op::Input, &[]),
                NodeSpec::new("c", Op::Conv(ConvAttrs::square(1, 1, 3, 1, 1)), &["x"]),
                NodeSpec::new("r", Op::Pointwise(PointwiseKind::Relu), &["c"]),
            ],
            "r",
            Shape::new(1, 3, 3),
        )
        .unwrap();
        let mut w = WeightStore::new();
        w.insert("c", TensorRole::Weight, vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        w.insert("c", TensorRole::Bias, vec![1], vec![-20.0]).unwrap();
        let x = Tensor::new(1, 3, 3, (1..=9).map(|v| v as f32).collect()).unwrap();
        let r = run_full(&g, &w, &x).unwrap();
        // Window sums with zero padding, shifted by the bias, then clamped.
        let sums = [12., 21., 16., 27., 45., 33., 24., 39., 28.];
        let expect: Vec<f32> = sums.iter().map(|s: &f32| (s - 20.0).max(0.0)).collect();
        assert_eq!(r.output.data(), &expect[..]);
    }

    #[test]
    fn missing_weights_and_bad_input_are_errors() {
        let (g, _) = identity_graph();
        let x = Tensor::zeros(Shape::new(1, 3, 3));
        assert!(matches!(
            run_full(&g, &WeightStore::new(), &x),
            Err(Error::MissingWeights { .. })
        ));
        let (g, w) = identity_graph();
        assert!(run_full(&g, &w, &Tensor::zeros(Shape::new(1, 4, 3))).is_err());
    }

    #[test]
    fn zero_input_gives_bias_constants() {
        let g = GraphSpec::new(
            vec![
                NodeSpec::new("x", Op::Input, &[]),
                NodeSpec::new("c", Op::Conv(ConvAttrs::square(1, 2, 3, 1, 1)), &["x"]),
            ],
            "c",
            Shape::new(1, 6, 6),
        )
        .unwrap();
        let w = WeightStore::random(&g, 4).unwrap();
        let x = Tensor::zeros(g.input_shape());
        let rep = verify_equivalence(&g, &w, &x, Rect::new(0, 0, 2, 2), 0.0).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.max_abs_diff, 0.0);
        let bias = &w.conv("c").unwrap().1;
        let out = run_traced(&g, &w, &x, Rect::new(0, 0, 2, 2)).unwrap().output;
        for c in 0..2 {
            assert!(out.plane(c).iter().all(|&v| v == bias[c]));
        }
    }
}
