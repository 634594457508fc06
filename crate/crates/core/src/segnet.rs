//! Click-conditioned instance segmentation on a toy FPN.
//!
//! Phase one evaluates the per-level heads at the clicked location only;
//! phase two runs the mask branch over a P3 window bounded by the predicted
//! box and applies the dynamic mask head emitted by the chosen level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{execute_trace, run_full_nodes, Patch};
use crate::flops::{count_all_nodes, count_flops, node_flops, FlopsReport};
use crate::graph::{GraphSpec, Op};
use crate::mask::{BinaryMask, Click};
use crate::rect::Rect;
use crate::rft::{backtrace_targets, inverse_map, Trace};
use crate::tensor::{self, ConvAttrs, PointwiseKind, Shape, Tensor};
use crate::weights::{blob_path_for, TensorRole, WeightStore};
use crate::zoo::{self, GraphBuilder};

pub const NUM_MASK_PARAMS: usize = 169;
pub const CONTROLLER_CHANNELS: usize = NUM_MASK_PARAMS;
pub const BOX_CHANNELS: usize = 4;
pub const TOWER_DEPTH: usize = 4;
pub const MASK_FEATURE_CHANNELS: usize = 8;
pub const MASK_UPSAMPLE: usize = 4;
pub const REL_COORD_NORM: f32 = 64.0;
pub const BOX_MARGIN: f32 = 0.1;
pub const FALLBACK_WINDOW: usize = 64;
pub const MASK_THRESHOLD: f32 = 0.5;
/// Stride of the upsampled mask relative to the image.
pub const MASK_STRIDE: usize = 2;

const P3_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub levels: Vec<(String, usize)>,
    pub width: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            levels: zoo::PYRAMID_LEVELS
                .iter()
                .map(|&(n, s)| (n.to_string(), s))
                .collect(),
            width: zoo::TOY_FPN_WIDTH,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidArgument("pyramid has no levels".into()));
        }
        for w in self.levels.windows(2) {
            if w[1].1 <= w[0].1 {
                return Err(Error::InvalidArgument(format!(
                    "pyramid strides must increase: {} then {}",
                    w[0].1, w[1].1
                )));
            }
        }
        if let Some((n, s)) = self.levels.iter().find(|(_, s)| !s.is_power_of_two()) {
            return Err(Error::InvalidArgument(format!(
                "stride {s} of level {n} is not a power of two"
            )));
        }
        // The builder has one fixed layout.
        if *self != PyramidConfig::default() {
            return Err(Error::InvalidArgument(
                "only the default P3..P7 pyramid of width 32 is available".into(),
            ));
        }
        Ok(())
    }

    pub fn deepest_stride(&self) -> usize {
        self.levels.last().map_or(1, |l| l.1)
    }
}

/// One graph per pyramid level (pruned to that level) and shared weights.
pub fn build_backbone(
    cfg: &PyramidConfig,
    input: Shape,
    seed: u64,
) -> Result<(Vec<(String, GraphSpec)>, WeightStore)> {
    cfg.validate()?;
    let b = zoo::toy_r18_fpn_builder(input)?;
    let full = b.finish(&cfg.levels[0].0)?;
    let weights = WeightStore::random(&full, seed)?;
    let graphs = cfg
        .levels
        .iter()
        .map(|(n, _)| Ok((n.clone(), full.pruned_to(n)?)))
        .collect::<Result<_>>()?;
    Ok((graphs, weights))
}

/// Inverse of the cell-to-image map `⌊s/2⌋ + a·s`, rounding halves down and
/// clamping to the level's `(width, height)`.
pub fn click_to_location(c: Click, stride: usize, dims: (usize, usize)) -> (usize, usize) {
    let map = |v: usize, extent: usize| {
        let n = v as i64 - (stride / 2) as i64;
        let s = stride as i64;
        // round-half-down(n / s) = ceil((2n - s) / 2s)
        let r = (2 * n - s).div_euclid(2 * s) + ((2 * n - s).rem_euclid(2 * s) != 0) as i64;
        r.clamp(0, extent as i64 - 1) as usize
    };
    (map(c.x, dims.0), map(c.y, dims.1))
}

/// Image pixel at the center of cell `(a, b)`.
pub fn location_to_image(loc: (usize, usize), stride: usize) -> (usize, usize) {
    (stride / 2 + loc.0 * stride, stride / 2 + loc.1 * stride)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub l: f32,
    pub t: f32,
    pub r: f32,
    pub b: f32,
    pub centerness: f32,
}

/// Lowest-stride argmax of the centerness scores unless `forced`.
pub fn select_level(scores: &[f32], forced: Option<usize>) -> Result<usize> {
    if let Some(f) = forced {
        if f >= scores.len() {
            return Err(Error::InvalidArgument(format!(
                "level index {f} out of range for {} levels",
                scores.len()
            )));
        }
        return Ok(f);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no level scores".into()));
    }
    Ok(best)
}

/// Weights of the dynamic mask head: three 1×1 layers 10→8→8→1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskHeadParams {
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub w3: Vec<f32>,
    pub b3: Vec<f32>,
}

const SPLIT: [usize; 6] = [80, 8, 64, 8, 8, 1];

pub fn unpack_mask_params(theta: &[f32]) -> Result<MaskHeadParams> {
    if theta.len() != NUM_MASK_PARAMS {
        return Err(Error::ParamLength {
            expected: NUM_MASK_PARAMS,
            actual: theta.len(),
        });
    }
    let mut parts = Vec::with_capacity(6);
    let mut at = 0;
    for n in SPLIT {
        parts.push(theta[at..at + n].to_vec());
        at += n;
    }
    let mut it = parts.into_iter();
    let mut next = || it.next().expect("six parts");
    Ok(MaskHeadParams {
        w1: next(),
        b1: next(),
        w2: next(),
        b2: next(),
        w3: next(),
        b3: next(),
    })
}

impl MaskHeadParams {
    pub fn pack(&self) -> Vec<f32> {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
            .into_iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    fn layers(&self) -> [(&[f32], &[f32], ConvAttrs); 3] {
        [
            (&self.w1, &self.b1, ConvAttrs::square(10, 8, 1, 1, 0)),
            (&self.w2, &self.b2, ConvAttrs::square(8, 8, 1, 1, 0)),
            (&self.w3, &self.b3, ConvAttrs::square(8, 1, 1, 1, 0)),
        ]
    }
}

/// Relative coordinates of every cell of `window` (in P3 cells) to the
/// click cell `(a, b)`: channel 0 is the column offset, channel 1 the row
/// offset, both divided by [`REL_COORD_NORM`].
pub fn rel_coord_window(window: Rect, click: (usize, usize)) -> Tensor {
    let shape = Shape::new(2, window.height() as usize, window.width() as usize);
    Tensor::from_fn(shape, |c, y, x| {
        let d = if c == 0 {
            window.left + x as i64 - click.0 as i64
        } else {
            window.top + y as i64 - click.1 as i64
        };
        d as f32 / REL_COORD_NORM
    })
}

pub fn rel_coord_map(level: Shape, click: (usize, usize)) -> Tensor {
    rel_coord_window(level.full_rect(), click)
}

/// Sigmoid probabilities of the dynamic head at the resolution of the input
/// patch.
pub fn mask_logits_to_probs(features: &Tensor, coords: &Tensor, p: &MaskHeadParams) -> Result<Tensor> {
    if features.channels() != MASK_FEATURE_CHANNELS || coords.channels() != 2 {
        return Err(Error::shape(
            "mask head",
            format!(
                "expected {MASK_FEATURE_CHANNELS} feature and 2 coordinate channels, got {} and {}",
                features.channels(),
                coords.channels()
            ),
        ));
    }
    let mut x = tensor::concat(features, coords)?;
    for (i, (w, b, attrs)) in p.layers().into_iter().enumerate() {
        x = tensor::conv2d(&x, w, b, &attrs)?;
        if i < 2 {
            x = tensor::pointwise(&x, PointwiseKind::Relu, None)?;
        }
    }
    tensor::pointwise(&x, PointwiseKind::Sigmoid, None)
}

/// Dynamic mask head followed by the ×4 bilinear upsample of the patch.
pub fn mask_forward(features: &Tensor, coords: &Tensor, p: &MaskHeadParams) -> Result<Tensor> {
    tensor::bilinear_upsample(&mask_logits_to_probs(features, coords, p)?, MASK_UPSAMPLE)
}

/// FLOPs of the dynamic head and sigmoid over `h × w` P3 cells, and of the
/// upsample of that window.
fn dynamic_flops(h: usize, w: usize) -> (u64, u64) {
    let s = |c| Shape::new(c, h, w);
    let head = node_flops(&Op::Conv(ConvAttrs::square(10, 8, 1, 1, 0)), s(8))
        + node_flops(&Op::Pointwise(PointwiseKind::Relu), s(8))
        + node_flops(&Op::Conv(ConvAttrs::square(8, 8, 1, 1, 0)), s(8))
        + node_flops(&Op::Pointwise(PointwiseKind::Relu), s(8))
        + node_flops(&Op::Conv(ConvAttrs::square(8, 1, 1, 1, 0)), s(1))
        + node_flops(&Op::Pointwise(PointwiseKind::Sigmoid), s(1));
    let up = node_flops(
        &Op::Upsample { scale: MASK_UPSAMPLE },
        Shape::new(1, h * MASK_UPSAMPLE, w * MASK_UPSAMPLE),
    );
    (head, up)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub name: String,
    pub stride: usize,
    /// Pyramid feature node.
    pub feature: String,
    /// Head output node: controller, box and centerness channels.
    pub head: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleIndex {
    levels: Vec<LevelInfo>,
    mask: String,
    p3: String,
    rel_coord_norm: f32,
    graph: String,
    weights: String,
}

/// Graph, weights and level wiring of the segmentation network.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub graph: GraphSpec,
    pub weights: WeightStore,
    pub levels: Vec<LevelInfo>,
    /// Mask-branch output node (8 channels on the P3 grid).
    pub mask: String,
    pub p3: String,
}

fn head_prefix(level: &str) -> String {
    format!("head.{level}")
}

fn add_head(b: &mut GraphBuilder, level: &str) -> Result<String> {
    let p = head_prefix(level);
    let mut cur = level.to_string();
    for i in 0..TOWER_DEPTH {
        let c = b.conv(&format!("{p}.tower{i}.conv"), &cur, zoo::TOY_FPN_WIDTH, 3, 1, 1)?;
        let r = b.relu(&format!("{p}.tower{i}.relu"), &c)?;
        cur = b.bn(&format!("{p}.tower{i}.bn"), &r)?;
    }
    let ctrl = b.conv(&format!("{p}.ctrl"), &cur, CONTROLLER_CHANNELS, 3, 1, 1)?;
    let bx = b.conv(&format!("{p}.box"), &cur, BOX_CHANNELS, 3, 1, 1)?;
    let ctr = b.conv(&format!("{p}.ctr"), &cur, 1, 3, 1, 1)?;
    let ctr = b.pointwise(&format!("{p}.ctr_sig"), &ctr, PointwiseKind::Sigmoid)?;
    let cat = b.concat(&format!("{p}.cat"), &ctrl, &bx)?;
    b.concat(&format!("{p}.out"), &cat, &ctr)
}

impl SegModel {
    /// Seeded random model for `input`-sized images.
    pub fn build(input: Shape, seed: u64) -> Result<SegModel> {
        let cfg = PyramidConfig::default();
        let mut b = zoo::toy_r18_fpn_builder(input)?;
        let mut levels = Vec::new();
        for (name, stride) in &cfg.levels {
            let head = add_head(&mut b, name)?;
            levels.push(LevelInfo {
                name: name.clone(),
                stride: *stride,
                feature: name.clone(),
                head,
            });
        }
        let p3 = cfg.levels[0].0.clone();
        b.conv("mask.conv0", &p3, MASK_FEATURE_CHANNELS, 3, 1, 1)?;
        b.relu("mask.relu0", "mask.conv0")?;
        let mask = b.conv("mask.out", "mask.relu0", MASK_FEATURE_CHANNELS, 3, 1, 1)?;
        let graph = b.finish(&mask)?;
        let mut weights = WeightStore::random(&graph, seed)?;
        share_head_weights(&graph, &mut weights, &levels)?;
        Ok(SegModel {
            graph,
            weights,
            levels,
            mask,
            p3,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.graph.input_shape()
    }

    /// The same model for another image size.
    pub fn for_image(&self, height: usize, width: usize) -> Result<SegModel> {
        let shape = Shape::new(self.input_shape().channels, height, width);
        if shape == self.input_shape() {
            return Ok(self.clone());
        }
        check_image(shape, self.levels.last().map_or(1, |l| l.stride))?;
        Ok(SegModel {
            graph: self.graph.with_input_shape(shape)?,
            ..self.clone()
        })
    }

    fn index(&self, id: &str) -> Result<usize> {
        self.graph
            .index_of(id)
            .ok_or_else(|| Error::Validation(format!("model has no node '{id}'")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("model.json"), self.graph.to_json())?;
        let manifest = dir.join("weights.json");
        self.weights.save(&manifest, &blob_path_for(&manifest))?;
        for l in &self.levels {
            let g = self.graph.pruned_to(&l.head)?;
            std::fs::write(dir.join(format!("head_{}.json", l.name)), g.to_json())?;
        }
        let index = BundleIndex {
            levels: self.levels.clone(),
            mask: self.mask.clone(),
            p3: self.p3.clone(),
            rel_coord_norm: REL_COORD_NORM,
            graph: "model.json".into(),
            weights: "weights.json".into(),
        };
        std::fs::write(dir.join("bundle.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SegModel> {
        let index: BundleIndex = serde_json::from_str(&std::fs::read_to_string(dir.join("bundle.json"))?)?;
        if index.rel_coord_norm != REL_COORD_NORM {
            return Err(Error::Validation(format!(
                "bundle uses coordinate normalization {}, this build uses {REL_COORD_NORM}",
                index.rel_coord_norm
            )));
        }
        let graph = GraphSpec::from_json(&std::fs::read_to_string(dir.join(&index.graph))?)?;
        let manifest: PathBuf = dir.join(&index.weights);
        let weights = WeightStore::load(&manifest, &blob_path_for(&manifest))?;
        weights.validate(&graph)?;
        let m = SegModel {
            graph,
            weights,
            levels: index.levels,
            mask: index.mask,
            p3: index.p3,
        };
        for id in m.levels.iter().flat_map(|l| [&l.feature, &l.head]).chain([&m.mask, &m.p3]) {
            m.index(id)?;
        }
        Ok(m)
    }
}

fn check_image(shape: Shape, deepest: usize) -> Result<()> {
    if shape.height < deepest || shape.width < deepest || shape.height % 32 != 0 || shape.width % 32 != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} must be at least {deepest} pixels and a multiple of 32 on each side",
            shape.height, shape.width
        )));
    }
    Ok(())
}

/// Copies the first level's head weights to every other level.
fn share_head_weights(g: &GraphSpec, w: &mut WeightStore, levels: &[LevelInfo]) -> Result<()> {
    let src = head_prefix(&levels[0].name);
    let copies: Vec<(String, TensorRole, Vec<usize>, Vec<f32>)> = w
        .iter()
        .filter(|(id, _, _)| id.starts_with(&format!("{src}.")))
        .flat_map(|(id, role, t)| {
            let suffix = id[src.len()..].to_string();
            levels[1..].iter().map(move |l| {
                (
                    format!("{}{suffix}", head_prefix(&l.name)),
                    role,
                    t.shape.clone(),
                    t.data.clone(),
                )
            })
        })
        .collect();
    for (id, role, shape, data) in copies {
        w.insert(id, role, shape, data)?;
    }
    w.validate(g)
}

/// Head values of one level at one location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelHead {
    pub level: String,
    pub stride: usize,
    /// `(a, b)`: column and row on the level grid.
    pub location: (usize, usize),
    pub theta: Vec<f32>,
    pub box_pred: BoxPrediction,
}

fn read_head(column: &[f32], info: &LevelInfo, location: (usize, usize)) -> LevelHead {
    let theta = column[..CONTROLLER_CHANNELS].to_vec();
    let bx = &column[CONTROLLER_CHANNELS..CONTROLLER_CHANNELS + BOX_CHANNELS];
    let s = info.stride as f32;
    LevelHead {
        level: info.name.clone(),
        stride: info.stride,
        location,
        theta,
        box_pred: BoxPrediction {
            l: bx[0].exp() * s,
            t: bx[1].exp() * s,
            r: bx[2].exp() * s,
            b: bx[3].exp() * s,
            centerness: column[CONTROLLER_CHANNELS + BOX_CHANNELS],
        },
    }
}

fn check_click(model: &SegModel, c: Click) -> Result<()> {
    let s = model.input_shape();
    if c.x >= s.width || c.y >= s.height {
        return Err(Error::InvalidArgument(format!(
            "click ({}, {}) outside {}x{} image",
            c.x, c.y, s.width, s.height
        )));
    }
    Ok(())
}

fn level_targets(model: &SegModel, c: Click) -> Result<(Vec<(usize, Rect)>, Vec<(usize, usize)>)> {
    let shapes = model.graph.shapes()?;
    let mut targets = Vec::new();
    let mut locs = Vec::new();
    for l in &model.levels {
        let i = model.index(&l.head)?;
        let loc = click_to_location(c, l.stride, (shapes[i].width, shapes[i].height));
        targets.push((i, Rect::pixel(loc.1 as i64, loc.0 as i64)));
        locs.push(loc);
    }
    Ok((targets, locs))
}

/// Phase one: every level's head at the clicked cell, from one trace.
pub struct PhaseOne {
    pub trace: Trace,
    pub patches: Vec<Option<Patch>>,
    pub heads: Vec<LevelHead>,
}

pub fn phase_one(model: &SegModel, image: &Tensor, c: Click) -> Result<PhaseOne> {
    check_click(model, c)?;
    let (targets, locs) = level_targets(model, c)?;
    let trace = backtrace_targets(&model.graph, &targets, None)?;
    let patches = execute_trace(&model.graph, &model.weights, image, &trace, None)?;
    let heads = model
        .levels
        .iter()
        .zip(&targets)
        .zip(&locs)
        .map(|((l, &(i, rect)), &loc)| {
            let p = patches[i].as_ref().expect("target computed");
            let r = rect.relative_to(&p.rect);
            read_head(&p.tensor.column(r.top as usize, r.left as usize), l, loc)
        })
        .collect();
    Ok(PhaseOne {
        trace,
        patches,
        heads,
    })
}

/// Head values read from whole-map execution, for comparison with
/// [`phase_one`].
pub fn full_heads(model: &SegModel, image: &Tensor, c: Click) -> Result<Vec<LevelHead>> {
    check_click(model, c)?;
    let (targets, locs) = level_targets(model, c)?;
    let idx: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let maps = run_full_nodes(&model.graph, &model.weights, image, &idx)?;
    Ok(model
        .levels
        .iter()
        .zip(&idx)
        .zip(&locs)
        .map(|((l, &i), &loc)| {
            read_head(&maps[i].as_ref().expect("computed").column(loc.1, loc.0), l, loc)
        })
        .collect())
}

/// Where phase two runs, in image pixels and on the P3 and mask grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskWindow {
    /// `[x0, y0, x1, y1]` of the expanded box, clamped to the image.
    pub image_box: [f32; 4],
    pub fallback: bool,
    pub p3_rect: Rect,
    /// Window of the stride-2 mask grid.
    pub mask_rect: Rect,
}

/// Expands the box around the cell center by [`BOX_MARGIN`] per side and
/// maps it onto P3. Non-finite or empty boxes fall back to a
/// [`FALLBACK_WINDOW`] square centered at the click.
pub fn mask_window(head: &LevelHead, c: Click, image: (usize, usize), p3: (usize, usize)) -> MaskWindow {
    let (h, w) = image;
    let (cx, cy) = location_to_image(head.location, head.stride);
    let bp = head.box_pred;
    let (cx, cy) = (cx as f32, cy as f32);
    let (mut x0, mut y0, mut x1, mut y1) = (cx - bp.l, cy - bp.t, cx + bp.r, cy + bp.b);
    let (mx, my) = ((x1 - x0) * BOX_MARGIN, (y1 - y0) * BOX_MARGIN);
    x0 -= mx;
    x1 += mx;
    y0 -= my;
    y1 += my;
    let clamp = |v: f32, hi: usize| v.clamp(0.0, hi as f32 - 1.0);
    let finite = [x0, y0, x1, y1].iter().all(|v| v.is_finite());
    let mut fallback = !finite;
    if finite {
        (x0, x1, y0, y1) = (clamp(x0, w), clamp(x1, w), clamp(y0, h), clamp(y1, h));
        fallback = x1 < x0 || y1 < y0;
    }
    if fallback {
        let half = (FALLBACK_WINDOW / 2) as f32;
        x0 = clamp(c.x as f32 - half, w);
        y0 = clamp(c.y as f32 - half, h);
        x1 = clamp(c.x as f32 + half - 1.0, w);
        y1 = clamp(c.y as f32 + half - 1.0, h);
    }
    let cell = |v: f32, extent: usize| ((v as usize) / P3_STRIDE).min(extent - 1) as i64;
    let p3_rect = Rect::new(cell(y0, p3.0), cell(x0, p3.1), cell(y1, p3.0), cell(x1, p3.1));
    let k = MASK_UPSAMPLE as i64;
    let mask_rect = Rect::new(
        p3_rect.top * k,
        p3_rect.left * k,
        p3_rect.bottom * k + k - 1,
        p3_rect.right * k + k - 1,
    );
    MaskWindow {
        image_box: [x0, y0, x1, y1],
        fallback,
        p3_rect,
        mask_rect,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentDiagnostics {
    pub level: String,
    pub level_index: usize,
    pub scores: Vec<f32>,
    pub location: (usize, usize),
    pub box_pred: BoxPrediction,
    pub window: MaskWindow,
    /// P3 window the dynamic head ran on (the sources of `mask_rect`).
    pub source_rect: Rect,
    pub mask_area: usize,
    pub flops: FlopsReport,
}

#[derive(Debug, Clone)]
pub struct SegmentOutput {
    pub mask: BinaryMask,
    /// Probabilities on `window.mask_rect` of the stride-2 grid.
    pub probs: Tensor,
    pub diagnostics: SegmentDiagnostics,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SegmentOptions {
    /// Forces a pyramid level by index.
    pub level: Option<usize>,
}

pub fn segment(model: &SegModel, image: &Tensor, c: Click, opts: SegmentOptions) -> Result<SegmentOutput> {
    let one = phase_one(model, image, c)?;
    let scores: Vec<f32> = one.heads.iter().map(|h| h.box_pred.centerness).collect();
    let li = select_level(&scores, opts.level)?;
    let head = &one.heads[li];
    let params = unpack_mask_params(&head.theta)?;

    let g = &model.graph;
    let shapes = g.shapes()?;
    let p3i = model.index(&model.p3)?;
    let maski = model.index(&model.mask)?;
    let p3 = shapes[p3i];
    let img = image.shape();
    let window = mask_window(head, c, (img.height, img.width), (p3.height, p3.width));

    let up = Op::Upsample { scale: MASK_UPSAMPLE };
    let (source_rect, _) = inverse_map(window.mask_rect, &up)
        .clamp(p3.height, p3.width)
        .ok_or_else(|| Error::Trace(format!("mask window {} has no P3 sources", window.mask_rect)))?;

    let available: Vec<Option<Rect>> = (0..g.len()).map(|i| one.trace.materialized(i)).collect();
    let two = backtrace_targets(g, &[(maski, source_rect)], Some(&available))?;
    let patches = execute_trace(g, &model.weights, image, &two, Some(&one.patches))?;
    let fp = patches[maski].as_ref().expect("mask features computed");
    let features = tensor::crop(&fp.tensor, source_rect.relative_to(&fp.rect))?;

    let loc3 = click_to_location(c, P3_STRIDE, (p3.width, p3.height));
    let coords = rel_coord_window(source_rect, loc3);
    let probs = mask_logits_to_probs(&features, &coords, &params)?;
    let probs = tensor::upsample_window(
        &probs,
        (source_rect.top, source_rect.left),
        (p3.height, p3.width),
        MASK_UPSAMPLE,
        window.mask_rect,
    )?;

    let r = window.mask_rect;
    let mask = BinaryMask::from_fn(img.height, img.width, |y, x| {
        let (my, mx) = ((y / MASK_STRIDE) as i64, (x / MASK_STRIDE) as i64);
        r.contains_point(my, mx)
            && probs.get(0, (my - r.top) as usize, (mx - r.left) as usize) >= MASK_THRESHOLD
    });

    let flops = segment_flops(model, &one.trace, &two, p3, source_rect, r)?;
    let diagnostics = SegmentDiagnostics {
        level: head.level.clone(),
        level_index: li,
        scores,
        location: head.location,
        box_pred: head.box_pred,
        window,
        source_rect,
        mask_area: mask.area(),
        flops,
    };
    Ok(SegmentOutput {
        mask,
        probs,
        diagnostics,
    })
}

/// Full: every node over whole maps plus the dynamic head on all of P3.
/// Traced: both phases' traces plus the dynamic head on the mask window.
fn segment_flops(
    model: &SegModel,
    one: &Trace,
    two: &Trace,
    p3: Shape,
    source: Rect,
    mask_rect: Rect,
) -> Result<FlopsReport> {
    let full = count_all_nodes(&model.graph)?;
    let t1 = count_flops(&model.graph, Some(one))?;
    let t2 = count_flops(&model.graph, Some(two))?;
    let mut per_node = full.per_node;
    for n in per_node.values_mut() {
        n.traced = 0;
    }
    for t in [&t1, &t2] {
        for (id, n) in &t.per_node {
            per_node.get_mut(id).expect("same graph").traced += n.traced;
        }
    }
    let mut rep = FlopsReport::from_per_node(per_node);
    let (head_full, up_full) = dynamic_flops(p3.height, p3.width);
    let (head_traced, _) = dynamic_flops(source.height() as usize, source.width() as usize);
    let up_traced = node_flops(
        &Op::Upsample { scale: MASK_UPSAMPLE },
        Shape::new(1, mask_rect.height() as usize, mask_rect.width() as usize),
    );
    rep.add_node("dynamic.mask_head", head_full, head_traced);
    rep.add_node("dynamic.upsample", up_full, up_traced);
    Ok(rep)
}

/// The phase-two probabilities computed from whole-map mask features, for
/// comparison with [`segment`].
pub fn full_mask_probs(model: &SegModel, image: &Tensor, c: Click, level: usize) -> Result<Tensor> {
    let heads = full_heads(model, image, c)?;
    let params = unpack_mask_params(&heads[level].theta)?;
    let maski = model.index(&model.mask)?;
    let maps = run_full_nodes(&model.graph, &model.weights, image, &[maski])?;
    let feats = maps[maski].as_ref().expect("computed");
    let loc3 = click_to_location(c, P3_STRIDE, (feats.width(), feats.height()));
    let coords = rel_coord_map(feats.shape(), loc3);
    mask_forward(feats, &coords, &params)
}
