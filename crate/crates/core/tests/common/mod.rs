//! Independent reference implementations and fixture generators.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rftrace::segnet::MaskHeadParams;
use rftrace::{BinaryMask, ConvAttrs, Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Convolution as an explicit patch matrix times the weight matrix, in f64.
pub fn conv_im2col(x: &Tensor, w: &[f32], b: &[f32], a: &ConvAttrs) -> Vec<f64> {
    let oh = (x.height() + 2 * a.pad_h - a.dilation_h * (a.kernel_h - 1) - 1) / a.stride_h + 1;
    let ow = (x.width() + 2 * a.pad_w - a.dilation_w * (a.kernel_w - 1) - 1) / a.stride_w + 1;
    let k = a.in_channels * a.kernel_h * a.kernel_w;
    // cols[p][j]: p = output pixel, j = (ic, ky, kx)
    let mut cols = vec![vec![0.0f64; k]; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[oy * ow + ox];
            let mut j = 0;
            for ic in 0..a.in_channels {
                for ky in 0..a.kernel_h {
                    for kx in 0..a.kernel_w {
                        let iy = (oy * a.stride_h + ky * a.dilation_h) as i64 - a.pad_h as i64;
                        let ix = (ox * a.stride_w + kx * a.dilation_w) as i64 - a.pad_w as i64;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.height() && (ix as usize) < x.width() {
                            row[j] = x.get(ic, iy as usize, ix as usize) as f64;
                        }
                        j += 1;
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; a.out_channels * oh * ow];
    for oc in 0..a.out_channels {
        for p in 0..oh * ow {
            let dot: f64 = cols[p]
                .iter()
                .zip(&w[oc * k..(oc + 1) * k])
                .map(|(&c, &wv)| c * wv as f64)
                .sum();
            out[oc * oh * ow + p] = dot + b[oc] as f64;
        }
    }
    out
}

/// Bilinear upsample with half-pixel centers and edge clamping, in f64.
pub fn bilinear_f64(x: &Tensor, scale: usize) -> Vec<f64> {
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = (h * scale, w * scale);
    let coord = |d: usize, n: usize| {
        let s = ((d as f64 + 0.5) / scale as f64 - 0.5).max(0.0).min((n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(x.channels() * oh * ow);
    for c in 0..x.channels() {
        for oy in 0..oh {
            let (y0, y1, ty) = coord(oy, h);
            for ox in 0..ow {
                let (x0, x1, tx) = coord(ox, w);
                let g = |y: usize, xx: usize| x.get(c, y, xx) as f64;
                let top = g(y0, x0) * (1.0 - tx) + g(y0, x1) * tx;
                let bot = g(y1, x0) * (1.0 - tx) + g(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

pub fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

/// Per-pixel dense evaluation of the dynamic head: for each cell, the
/// 10-vector of features and coordinates goes through three matrix-vector
/// products. Returns sigmoid probabilities at patch resolution.
pub fn dense_mask_head(features: &Tensor, coords: &Tensor, p: &MaskHeadParams) -> Tensor {
    let matvec = |w: &[f32], b: &[f32], v: &[f32], rows: usize| -> Vec<f32> {
        let cols = v.len();
        (0..rows)
            .map(|r| {
                let mut s = 0.0f32;
                for c in 0..cols {
                    s += w[r * cols + c] * v[c];
                }
                s + b[r]
            })
            .collect()
    };
    let relu = |v: Vec<f32>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    Tensor::from_fn(Shape::new(1, features.height(), features.width()), |_, y, x| {
        let mut v = features.column(y, x);
        v.extend(coords.column(y, x));
        let h1 = relu(matvec(&p.w1, &p.b1, &v, 8));
        let h2 = relu(matvec(&p.w2, &p.b2, &h1, 8));
        let o = matvec(&p.w3, &p.b3, &h2, 1)[0];
        1.0 / (1.0 + (-o).exp())
    })
}

/// A union of random ellipses and rectangles, never empty.
pub fn blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let shapes: Vec<(bool, f64, f64, f64, f64)> = (0..rng.gen_range(1..=4))
        .map(|_| {
            (
                rng.gen_bool(0.6),
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(1.0..h as f64 / 3.0),
                rng.gen_range(1.0..w as f64 / 3.0),
            )
        })
        .collect();
    let mut m = BinaryMask::from_fn(h, w, |r, c| {
        shapes.iter().any(|&(ellipse, cy, cx, ry, rx)| {
            let (dy, dx) = ((r as f64 - cy) / ry, (c as f64 - cx) / rx);
            if ellipse {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            }
        })
    });
    if m.is_empty() {
        m.set(h / 2, w / 2, true);
    }
    m
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    let bits = (0..h * w).map(|_| rng.gen_bool(p)).collect();
    BinaryMask::from_bits(h, w, bits).unwrap()
}

pub fn pixel_set(m: &BinaryMask) -> HashSet<(usize, usize)> {
    m.pixels().collect()
}

/// One instance of an evaluation collection: ground truth and one
/// prediction per clicked pixel.
pub struct OracleInstance {
    pub id: String,
    pub category: String,
    pub gt: BinaryMask,
    pub preds: Vec<BinaryMask>,
}

pub fn oracle_miou_t(insts: &[OracleInstance]) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for inst in insts {
        let g = pixel_set(&inst.gt);
        for p in &inst.preds {
            let p = pixel_set(p);
            i += p.intersection(&g).count();
            u += p.union(&g).count();
        }
    }
    i as f64 / u as f64
}

pub fn oracle_mta(insts: &[OracleInstance], beta: f64) -> f64 {
    let mut pass = 0usize;
    let mut area = 0usize;
    for inst in insts {
        let g = pixel_set(&inst.gt);
        area += g.len();
        for p in &inst.preds {
            let p = pixel_set(p);
            let u = p.union(&g).count();
            let iou = if u == 0 { 0.0 } else { p.intersection(&g).count() as f64 / u as f64 };
            if iou >= beta {
                pass += 1;
            }
        }
    }
    pass as f64 / area as f64
}

/// A random collection for the exhaustive protocol: every ground-truth
/// pixel gets one prediction.
pub fn random_collection(rng: &mut ChaCha8Rng, side: usize) -> Vec<OracleInstance> {
    (0..rng.gen_range(1..=4))
        .map(|k| {
            let d = rng.gen_range(0.1..0.6);
            let mut gt = random_mask(rng, side, side, d);
            if gt.is_empty() {
                gt.set(0, 0, true);
            }
            let preds = (0..gt.area())
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        // Small edits of the ground truth, so some pass β.
                        let mut p = gt.clone();
                        for _ in 0..rng.gen_range(0..3) {
                            let (r, c) = (rng.gen_range(0..side), rng.gen_range(0..side));
                            p.set(r, c, !p.get(r, c));
                        }
                        p
                    } else {
                        {
                        let d = rng.gen_range(0.0..0.7);
                        random_mask(rng, side, side, d)
                    }
                    }
                })
                .collect();
            OracleInstance {
                id: format!("inst{k}"),
                category: ["cat", "dog", "bird"][k % 3].to_string(),
                gt,
                preds,
            }
        })
        .collect()
}

pub fn records(insts: &[OracleInstance]) -> Vec<rftrace::EvalRecord> {
    insts
        .iter()
        .flat_map(|inst| {
            inst.preds.iter().enumerate().map(move |(j, p)| {
                rftrace::EvalRecord::new(inst.id.clone(), j, p, &inst.gt)
                    .unwrap()
                    .with_category(inst.category.clone())
            })
        })
        .collect()
}

pub fn group_by<T: Clone, K: Ord>(items: &[T], key: impl Fn(&T) -> K) -> BTreeMap<K, Vec<T>> {
    let mut out: BTreeMap<K, Vec<T>> = BTreeMap::new();
    for it in items {
        out.entry(key(it)).or_default().push(it.clone());
    }
    out
}
