//! Graph fixtures: conv chains, a residual diamond, a small ResNet-18-style
//! FPN, a ResNet-50 FPN approximation, and seeded random graphs.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{node_shape, GraphSpec, NodeSpec, Op};
use crate::tensor::{ConvAttrs, PointwiseKind, Shape};

/// Incremental graph construction with shape tracking.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<NodeSpec>,
    shapes: HashMap<String, Shape>,
    input_shape: Shape,
}

impl GraphBuilder {
    pub fn new(input_id: &str, input_shape: Shape) -> Self {
        let mut b = GraphBuilder {
            nodes: Vec::new(),
            shapes: HashMap::new(),
            input_shape,
        };
        b.push(NodeSpec::new(input_id, Op::Input, &[]))
            .expect("input node");
        b
    }

    pub fn shape(&self, id: &str) -> Shape {
        self.shapes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.id.as_str())
    }

    pub fn push(&mut self, node: NodeSpec) -> Result<String> {
        if self.shapes.contains_key(&node.id) {
            return Err(Error::Validation(format!("duplicate node id '{}'", node.id)));
        }
        let ins: Vec<Shape> = node
            .inputs
            .iter()
            .map(|s| {
                self.shapes
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("unknown node '{s}'")))
            })
            .collect::<Result<_>>()?;
        let shape = node_shape(&node, &ins, self.input_shape)?;
        let id = node.id.clone();
        self.shapes.insert(id.clone(), shape);
        self.nodes.push(node);
        Ok(id)
    }

    pub fn conv_attrs(&mut self, id: &str, src: &str, attrs: ConvAttrs) -> Result<String> {
        self.push(NodeSpec::new(id, Op::Conv(attrs), &[src]))
    }

    /// Square conv reading all channels of `src`.
    pub fn conv(
        &mut self,
        id: &str,
        src: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<String> {
        let cin = self.shape(src).channels;
        self.conv_attrs(
            id,
            src,
            ConvAttrs::square(cin, out_channels, kernel, stride, pad),
        )
    }

    pub fn pointwise(&mut self, id: &str, src: &str, kind: PointwiseKind) -> Result<String> {
        self.push(NodeSpec::new(id, Op::Pointwise(kind), &[src]))
    }

    pub fn relu(&mut self, id: &str, src: &str) -> Result<String> {
        self.pointwise(id, src, PointwiseKind::Relu)
    }

    pub fn bn(&mut self, id: &str, src: &str) -> Result<String> {
        self.pointwise(id, src, PointwiseKind::BatchNorm)
    }

    pub fn maxpool(&mut self, id: &str, src: &str, kernel: usize, stride: usize) -> Result<String> {
        self.push(NodeSpec::new(id, Op::MaxPool { kernel, stride }, &[src]))
    }

    pub fn upsample(&mut self, id: &str, src: &str, scale: usize) -> Result<String> {
        self.push(NodeSpec::new(id, Op::Upsample { scale }, &[src]))
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> Result<String> {
        self.push(NodeSpec::new(id, Op::Add, &[a, b]))
    }

    pub fn concat(&mut self, id: &str, a: &str, b: &str) -> Result<String> {
        self.push(NodeSpec::new(id, Op::Concat, &[a, b]))
    }

    pub fn finish(self, output: &str) -> Result<GraphSpec> {
        GraphSpec::new(self.nodes, output, self.input_shape)
    }
}

/// `n` 3×3 same-size convolutions with relu between them.
pub fn chain(n: usize, input: Shape, channels: usize) -> Result<GraphSpec> {
    if n == 0 {
        return Err(Error::InvalidArgument("chain needs at least one conv".into()));
    }
    let mut b = GraphBuilder::new("input", input);
    let mut cur = "input".to_string();
    for i in 1..=n {
        cur = b.conv(&format!("conv{i}"), &cur, channels, 3, 1, 1)?;
        if i < n {
            cur = b.relu(&format!("relu{i}"), &cur)?;
        }
    }
    b.finish(&cur)
}

/// A stem conv feeding a 3×3 branch and a 1×1 branch merged by addition.
pub fn diamond(input: Shape) -> Result<GraphSpec> {
    let mut b = GraphBuilder::new("input", input);
    b.conv("stem", "input", 4, 3, 1, 1)?;
    b.conv("branch3", "stem", 4, 3, 1, 1)?;
    b.conv("branch1", "stem", 4, 1, 1, 0)?;
    b.add("sum", "branch3", "branch1")?;
    b.finish("sum")
}

/// Ids of the pyramid levels emitted by the FPN builders, finest first.
pub const PYRAMID_LEVELS: [(&str, usize); 5] =
    [("p3", 8), ("p4", 16), ("p5", 32), ("p6", 64), ("p7", 128)];

fn check_fpn_input(input: Shape) -> Result<()> {
    if input.height < 128 || input.width < 128 {
        return Err(Error::InvalidArgument(format!(
            "input {}x{} is smaller than the deepest pyramid stride 128",
            input.height, input.width
        )));
    }
    if input.height % 32 != 0 || input.width % 32 != 0 {
        return Err(Error::InvalidArgument(format!(
            "input {}x{} must be a multiple of 32 for the top-down merges",
            input.height, input.width
        )));
    }
    Ok(())
}

fn basic_block(b: &mut GraphBuilder, name: &str, src: &str, out: usize, stride: usize) -> Result<String> {
    let c1 = b.conv(&format!("{name}.conv1"), src, out, 3, stride, 1)?;
    let n1 = b.bn(&format!("{name}.bn1"), &c1)?;
    let r1 = b.relu(&format!("{name}.relu1"), &n1)?;
    let c2 = b.conv(&format!("{name}.conv2"), &r1, out, 3, 1, 1)?;
    let n2 = b.bn(&format!("{name}.bn2"), &c2)?;
    let shortcut = if stride == 1 && b.shape(src).channels == out {
        src.to_string()
    } else {
        let d = b.conv(&format!("{name}.down"), src, out, 1, stride, 0)?;
        b.bn(&format!("{name}.down_bn"), &d)?
    };
    let s = b.add(&format!("{name}.add"), &n2, &shortcut)?;
    b.relu(&format!("{name}.out"), &s)
}

fn bottleneck(
    b: &mut GraphBuilder,
    name: &str,
    src: &str,
    width: usize,
    stride: usize,
) -> Result<String> {
    let out = width * 4;
    let c1 = b.conv(&format!("{name}.conv1"), src, width, 1, 1, 0)?;
    let n1 = b.bn(&format!("{name}.bn1"), &c1)?;
    let r1 = b.relu(&format!("{name}.relu1"), &n1)?;
    let c2 = b.conv(&format!("{name}.conv2"), &r1, width, 3, stride, 1)?;
    let n2 = b.bn(&format!("{name}.bn2"), &c2)?;
    let r2 = b.relu(&format!("{name}.relu2"), &n2)?;
    let c3 = b.conv(&format!("{name}.conv3"), &r2, out, 1, 1, 0)?;
    let n3 = b.bn(&format!("{name}.bn3"), &c3)?;
    let shortcut = if stride == 1 && b.shape(src).channels == out {
        src.to_string()
    } else {
        let d = b.conv(&format!("{name}.down"), src, out, 1, stride, 0)?;
        b.bn(&format!("{name}.down_bn"), &d)?
    };
    let s = b.add(&format!("{name}.add"), &n3, &shortcut)?;
    b.relu(&format!("{name}.out"), &s)
}

/// Top-down pyramid over C3..C5 with extra P6/P7 levels, in place.
fn fpn(b: &mut GraphBuilder, c3: &str, c4: &str, c5: &str, width: usize) -> Result<()> {
    let l5 = b.conv("fpn.lat5", c5, width, 1, 1, 0)?;
    let l4 = b.conv("fpn.lat4", c4, width, 1, 1, 0)?;
    let l3 = b.conv("fpn.lat3", c3, width, 1, 1, 0)?;
    let u5 = b.upsample("fpn.up5", &l5, 2)?;
    let m4 = b.add("fpn.merge4", &l4, &u5)?;
    let u4 = b.upsample("fpn.up4", &m4, 2)?;
    let m3 = b.add("fpn.merge3", &l3, &u4)?;
    b.conv("p5", &l5, width, 3, 1, 1)?;
    b.conv("p4", &m4, width, 3, 1, 1)?;
    b.conv("p3", &m3, width, 3, 1, 1)?;
    b.conv("p6", "p5", width, 3, 2, 1)?;
    b.relu("p6.relu", "p6")?;
    b.conv("p7", "p6.relu", width, 3, 2, 1)?;
    Ok(())
}

/// Layer widths of the small residual backbone.
pub const TOY_WIDTHS: [usize; 4] = [16, 32, 64, 128];
/// Channel width of every toy pyramid level.
pub const TOY_FPN_WIDTH: usize = 32;

/// A small ResNet-18-style backbone (one basic block per stage) with a
/// five-level FPN, in a builder so callers can attach heads. Level maps are
/// the nodes named in [`PYRAMID_LEVELS`].
pub fn toy_r18_fpn_builder(input: Shape) -> Result<GraphBuilder> {
    check_fpn_input(input)?;
    let mut b = GraphBuilder::new("input", input);
    b.conv("stem.conv", "input", TOY_WIDTHS[0], 3, 2, 1)?;
    b.bn("stem.bn", "stem.conv")?;
    b.relu("stem.relu", "stem.bn")?;
    b.maxpool("stem.pool", "stem.relu", 2, 2)?;
    let c2 = basic_block(&mut b, "layer1", "stem.pool", TOY_WIDTHS[0], 1)?;
    let c3 = basic_block(&mut b, "layer2", &c2, TOY_WIDTHS[1], 2)?;
    let c4 = basic_block(&mut b, "layer3", &c3, TOY_WIDTHS[2], 2)?;
    let c5 = basic_block(&mut b, "layer4", &c4, TOY_WIDTHS[3], 2)?;
    fpn(&mut b, &c3, &c4, &c5, TOY_FPN_WIDTH)?;
    Ok(b)
}

/// [`toy_r18_fpn_builder`] with the P3 level as output.
pub fn toy_r18_fpn(input: Shape) -> Result<GraphSpec> {
    toy_r18_fpn_builder(input)?.finish("p3")
}

/// ResNet-50 (bottleneck stages 3-4-6-3) with a 256-wide FPN, P3 as output.
///
/// The stem pool is 2×2/2 instead of 3×3/2 with padding, which gives the
/// same output size without padded pooling.
pub fn r50_fpn_approx(input: Shape) -> Result<GraphSpec> {
    check_fpn_input(input)?;
    let mut b = GraphBuilder::new("input", input);
    b.conv("stem.conv", "input", 64, 7, 2, 3)?;
    b.bn("stem.bn", "stem.conv")?;
    b.relu("stem.relu", "stem.bn")?;
    b.maxpool("stem.pool", "stem.relu", 2, 2)?;
    let mut cur = "stem.pool".to_string();
    let mut outs = Vec::new();
    for (stage, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
        for blk in 0..blocks {
            let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
            cur = bottleneck(&mut b, &format!("layer{}.{blk}", stage + 1), &cur, width, stride)?;
        }
        outs.push(cur.clone());
    }
    fpn(&mut b, &outs[1], &outs[2], &outs[3], 256)?;
    b.finish("p3")
}

#[derive(Debug, Clone, Copy)]
pub struct RandomGraphConfig {
    /// Upper bound on node count, input included.
    pub max_nodes: usize,
    pub input: Shape,
    pub max_channels: usize,
}

impl Default for RandomGraphConfig {
    fn default() -> Self {
        RandomGraphConfig {
            max_nodes: 30,
            input: Shape::new(2, 16, 16),
            max_channels: 4,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Step {
    Conv,
    Pointwise,
    Pool,
    Upsample,
    Diamond,
    Concat,
    Skip,
}

/// A seeded random DAG over every supported op. Each graph contains at
/// least one add diamond, one concat merge and one upsample, so the
/// non-chain back-tracing rules are always exercised.
pub fn random_graph(seed: u64, cfg: RandomGraphConfig) -> Result<GraphSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new("x", cfg.input);
    let mut cur = "x".to_string();
    let mut counter = 0usize;
    let mut fresh = |prefix: &str| {
        counter += 1;
        format!("{prefix}{counter:02}")
    };

    let mut forced = vec![Step::Diamond, Step::Concat, Step::Upsample];
    forced.shuffle(&mut rng);
    let budget = cfg.max_nodes.max(8);

    let reserve = |f: &[Step]| {
        f.iter()
            .map(|s| match s {
                Step::Diamond => 3,
                Step::Concat => 2,
                _ => 1,
            })
            .sum::<usize>()
    };
    // A loop step adds at most four nodes.
    while b.len() + 4 + reserve(&forced) <= budget {
        let s = b.shape(&cur);
        let step = if !forced.is_empty() && rng.gen_bool(0.35) {
            forced.pop().unwrap()
        } else {
            *[
                Step::Conv,
                Step::Conv,
                Step::Pointwise,
                Step::Pool,
                Step::Upsample,
                Step::Diamond,
                Step::Concat,
                Step::Skip,
            ]
            .choose(&mut rng)
            .unwrap()
        };
        match step {
            Step::Conv => {
                let k = *[1usize, 3, 3, 5].choose(&mut rng).unwrap();
                let stride = if s.height >= 8 && s.width >= 8 && rng.gen_bool(0.3) { 2 } else { 1 };
                let dil = if k > 1 && rng.gen_bool(0.2) { 2 } else { 1 };
                let span = dil * (k - 1) + 1;
                let pad = rng.gen_range(0..=span / 2);
                let attrs = ConvAttrs {
                    kernel_h: k,
                    kernel_w: k,
                    stride_h: stride,
                    stride_w: stride,
                    pad_h: pad,
                    pad_w: pad,
                    dilation_h: dil,
                    dilation_w: dil,
                    in_channels: s.channels,
                    out_channels: rng.gen_range(1..=cfg.max_channels),
                };
                match attrs.output_size(s.height, s.width) {
                    Some((h, w)) if h >= 2 && w >= 2 => {
                        cur = b.conv_attrs(&fresh("conv"), &cur, attrs)?;
                    }
                    _ => {}
                }
            }
            Step::Pointwise => {
                let kind = *[PointwiseKind::Relu, PointwiseKind::Sigmoid, PointwiseKind::BatchNorm]
                    .choose(&mut rng)
                    .unwrap();
                cur = b.pointwise(&fresh("pw"), &cur, kind)?;
            }
            Step::Pool => {
                let (k, st) = *[(2usize, 2usize), (3, 1), (3, 2)].choose(&mut rng).unwrap();
                if s.height >= k + 2 && s.width >= k + 2 {
                    cur = b.maxpool(&fresh("pool"), &cur, k, st)?;
                } else {
                    forced.retain(|f| *f != Step::Pool);
                }
            }
            Step::Upsample => {
                if s.height <= 24 && s.width <= 24 {
                    let up = b.upsample(&fresh("up"), &cur, 2)?;
                    // Usually merge with an earlier map of the new size.
                    let target = b.shape(&up);
                    let partner = b
                        .ids()
                        .filter(|id| *id != up && b.shape(id).height == target.height && b.shape(id).width == target.width)
                        .map(str::to_string)
                        .collect::<Vec<_>>();
                    cur = match partner.choose(&mut rng) {
                        Some(p) if rng.gen_bool(0.6) => {
                            let c = b.shape(p).channels;
                            let lat = b.conv(&fresh("lat"), &up, c, 1, 1, 0)?;
                            b.add(&fresh("fpn"), &lat, p)?
                        }
                        _ => up,
                    };
                } else {
                    let down = b.conv(&fresh("down"), &cur, s.channels, 3, 2, 1)?;
                    cur = b.upsample(&fresh("up"), &down, 2)?;
                }
            }
            Step::Diamond => {
                let c = rng.gen_range(1..=cfg.max_channels);
                let a = b.conv(&fresh("dia"), &cur, c, 3, 1, 1)?;
                let other = if rng.gen_bool(0.5) {
                    b.conv(&fresh("dib"), &cur, c, 1, 1, 0)?
                } else {
                    let t = b.conv(&fresh("dib"), &cur, c, 5, 1, 2)?;
                    b.relu(&fresh("pw"), &t)?
                };
                cur = b.add(&fresh("sum"), &a, &other)?;
            }
            Step::Concat => {
                let c = rng.gen_range(1..=cfg.max_channels);
                let side = b.conv(&fresh("side"), &cur, c, 3, 1, 1)?;
                cur = b.concat(&fresh("cat"), &cur, &side)?;
                if b.shape(&cur).channels > cfg.max_channels * 2 {
                    cur = b.conv(&fresh("squeeze"), &cur, cfg.max_channels, 1, 1, 0)?;
                }
            }
            Step::Skip => {
                let same: Vec<String> = b
                    .ids()
                    .filter(|id| *id != cur && b.shape(id) == s)
                    .map(str::to_string)
                    .collect();
                if let Some(p) = same.choose(&mut rng) {
                    cur = b.add(&fresh("skip"), &cur, p)?;
                }
            }
        }
    }
    // Anything the budget did not reach is appended now.
    for step in forced {
        let s = b.shape(&cur);
        match step {
            Step::Diamond => {
                let a = b.conv(&fresh("dia"), &cur, s.channels, 3, 1, 1)?;
                let o = b.conv(&fresh("dib"), &cur, s.channels, 1, 1, 0)?;
                cur = b.add(&fresh("sum"), &a, &o)?;
            }
            Step::Concat => {
                let side = b.pointwise(&fresh("pw"), &cur, PointwiseKind::Relu)?;
                cur = b.concat(&fresh("cat"), &cur, &side)?;
            }
            Step::Upsample => {
                cur = b.upsample(&fresh("up"), &cur, 2)?;
            }
            _ => {}
        }
    }
    b.finish(&cur)
}
