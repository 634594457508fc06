mod common;

use common::*;
use rand::Rng;
use rftrace::segnet::*;
use rftrace::tensor;
use rftrace::{Click, Shape, Tensor};

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(Shape::new(3, h, w), |_, _, _| r.gen_range(0.0..1.0))
}

#[test]
fn traced_heads_match_full_heads() {
    for seed in 0..50u64 {
        let model = SegModel::build(Shape::new(3, 128, 128), seed).unwrap();
        let img = image(seed, 128, 128);
        let mut r = rng(seed + 1000);
        let c = Click::new(r.gen_range(0..128), r.gen_range(0..128));
        let traced = phase_one(&model, &img, c).unwrap().heads;
        let full = full_heads(&model, &img, c).unwrap();
        for (t, f) in traced.iter().zip(&full) {
            assert_eq!(t.location, f.location);
            let d = t
                .theta
                .iter()
                .zip(&f.theta)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(d <= 1e-4, "seed {seed} level {}: {d}", t.level);
            assert!((t.box_pred.centerness - f.box_pred.centerness).abs() <= 1e-4);
            assert!(t.box_pred.l >= 0.0 && t.box_pred.t >= 0.0 && t.box_pred.r >= 0.0 && t.box_pred.b >= 0.0);
        }
    }
}

#[test]
fn mask_patch_matches_full_branch() {
    for seed in 0..10u64 {
        let model = SegModel::build(Shape::new(3, 128, 160), seed).unwrap();
        let img = image(seed, 128, 160);
        let mut r = rng(seed);
        let c = Click::new(r.gen_range(0..160), r.gen_range(0..128));
        let out = segment(&model, &img, c, SegmentOptions::default()).unwrap();
        let d = &out.diagnostics;
        let full = full_mask_probs(&model, &img, c, d.level_index).unwrap();
        let want = tensor::crop(&full, d.window.mask_rect).unwrap();
        assert!(out.probs.max_abs_diff(&want).unwrap() <= 1e-4);
    }
}

#[test]
fn placement_law_and_economy() {
    let model = SegModel::build(Shape::new(3, 128, 128), 8).unwrap();
    let img = image(8, 128, 128);
    for (x, y) in [(0, 0), (64, 64), (127, 3), (90, 120)] {
        let c = Click::new(x, y);
        let out = segment(&model, &img, c, SegmentOptions::default()).unwrap();
        assert_eq!((out.mask.height(), out.mask.width()), (128, 128));
        let r = out.diagnostics.window.mask_rect;
        let (my, mx) = ((y / MASK_STRIDE) as i64, (x / MASK_STRIDE) as i64);
        if r.contains_point(my, mx) {
            let p = out.probs.get(0, (my - r.top) as usize, (mx - r.left) as usize);
            let cell = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .map(|(dy, dx)| out.mask.get(my as usize * 2 + dy, mx as usize * 2 + dx));
            assert_eq!(cell.iter().all(|&b| b), p >= MASK_THRESHOLD);
        }
        let f = &out.diagnostics.flops;
        assert!(f.total_traced < f.total_full);
    }
}

#[test]
fn forced_level_is_used() {
    let model = SegModel::build(Shape::new(3, 128, 128), 2).unwrap();
    let img = image(2, 128, 128);
    for lvl in 0..5 {
        let out = segment(&model, &img, Click::new(50, 70), SegmentOptions { level: Some(lvl) }).unwrap();
        assert_eq!(out.diagnostics.level_index, lvl);
        assert_eq!(out.diagnostics.level, format!("p{}", lvl + 3));
    }
}

#[test]
fn bundle_round_trip() {
    let dir = std::env::temp_dir().join(format!("rftrace-bundle-{}", std::process::id()));
    let model = SegModel::build(Shape::new(3, 128, 128), 6).unwrap();
    model.save(&dir).unwrap();
    let back = SegModel::load(&dir).unwrap();
    assert_eq!(back.levels, model.levels);
    assert_eq!(back.weights.to_manifest_and_blob(), model.weights.to_manifest_and_blob());
    // A loaded bundle serves other image sizes.
    let big = back.for_image(160, 192).unwrap();
    let out = segment(&big, &image(1, 160, 192), Click::new(10, 150), SegmentOptions::default()).unwrap();
    assert_eq!((out.mask.height(), out.mask.width()), (160, 192));
    assert!(back.for_image(100, 128).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn mask_forward_matches_dense_oracle() {
    let mut r = rng(21);
    for _ in 0..20 {
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        let feats = random_tensor(Shape::new(8, h, w), &mut r);
        let coords = rel_coord_window(rftrace::Rect::new(0, 0, h as i64 - 1, w as i64 - 1), (r.gen_range(0..w), r.gen_range(0..h)));
        let theta: Vec<f32> = (0..NUM_MASK_PARAMS).map(|_| r.gen_range(-1.0..1.0)).collect();
        let p = unpack_mask_params(&theta).unwrap();
        let probs = mask_logits_to_probs(&feats, &coords, &p).unwrap();
        assert_eq!(probs, dense_mask_head(&feats, &coords, &p));
        let up = mask_forward(&feats, &coords, &p).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 4 * h, 4 * w));
        assert!(max_diff(up.data(), &bilinear_f64(&probs, 4)) < 1e-6);
    }
}
