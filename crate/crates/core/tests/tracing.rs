mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use rftrace::exec::{run_full, verify_equivalence};
use rftrace::rft::{backtrace, backtrace_targets};
use rftrace::zoo::{self, RandomGraphConfig};
use rftrace::{count_flops, GraphSpec, Rect, Shape, WeightStore};

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

#[test]
fn fixtures_trace_equal_full() {
    let mut r = rng(5);
    let graphs = [
        zoo::chain(5, Shape::new(3, 24, 24), 4).unwrap(),
        zoo::diamond(Shape::new(2, 17, 13)).unwrap(),
        zoo::toy_r18_fpn(Shape::new(3, 128, 160)).unwrap(),
    ];
    for g in &graphs {
        let w = WeightStore::random(g, 9).unwrap();
        let x = random_tensor(g.input_shape(), &mut r);
        for _ in 0..10 {
            let rect = random_rect(&mut r, out_shape(g), 8);
            let rep = verify_equivalence(g, &w, &x, rect, 1e-4).unwrap();
            assert!(rep.pass, "{rep:?}");
        }
    }
}

#[test]
fn every_pyramid_level_traces() {
    let b = zoo::toy_r18_fpn_builder(Shape::new(3, 128, 128)).unwrap();
    let full = b.finish("p3").unwrap();
    let w = WeightStore::random(&full, 2).unwrap();
    let x = random_tensor(full.input_shape(), &mut rng(1));
    for (lvl, _) in zoo::PYRAMID_LEVELS {
        let g = full.with_output(lvl).unwrap();
        let s = out_shape(&g);
        for rect in [Rect::pixel(0, 0), Rect::pixel(s.height as i64 - 1, s.width as i64 - 1), s.full_rect()] {
            assert!(verify_equivalence(&g, &w, &x, rect, 1e-4).unwrap().pass, "{lvl} {rect}");
        }
    }
}

#[test]
fn full_rect_trace_is_bitwise_full() {
    let g = zoo::random_graph(4, RandomGraphConfig::default()).unwrap();
    let w = WeightStore::random(&g, 4).unwrap();
    let x = random_tensor(g.input_shape(), &mut rng(4));
    let rep = verify_equivalence(&g, &w, &x, out_shape(&g).full_rect(), 0.0).unwrap();
    assert!(rep.pass);
    assert_eq!(rep.max_abs_diff, 0.0);
}

#[test]
fn reuse_serves_covered_nodes() {
    let g = zoo::chain(4, Shape::new(1, 20, 20), 2).unwrap();
    let wide = backtrace(&g, Rect::new(2, 2, 12, 12)).unwrap();
    let avail: Vec<_> = (0..g.len()).map(|i| wide.materialized(i)).collect();
    let narrow = backtrace_targets(&g, &[(g.output(), Rect::pixel(6, 6))], Some(&avail)).unwrap();
    // The output region is inside the earlier one, so nothing is recomputed.
    assert_eq!(narrow.reused(g.output()), wide.region(g.output()));
    assert_eq!(count_flops(&g, Some(&narrow)).unwrap().total_traced, 0);
}

#[test]
fn out_of_bounds_rect_rejected() {
    let g = zoo::chain(2, Shape::new(1, 8, 8), 1).unwrap();
    assert!(backtrace(&g, Rect::pixel(8, 0)).is_err());
    assert!(backtrace(&g, Rect::new(3, 3, 2, 2)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn regions_are_clamped_and_contain_needs(seed in 0u64..10_000, pick in any::<u64>()) {
        let g = zoo::random_graph(seed, RandomGraphConfig::default()).unwrap();
        let shapes = g.shapes().unwrap();
        let mut r = rng(pick);
        let rect = random_rect(&mut r, shapes[g.output()], 8);
        let t = backtrace(&g, rect).unwrap();
        for i in 0..g.len() {
            if let Some(reg) = t.region(i) {
                prop_assert!(shapes[i].full_rect().contains(&reg));
                for e in t.edges(i) {
                    let pr = t.region(e.producer).unwrap();
                    let (clamped, _) = e.needed.clamp(shapes[e.producer].height, shapes[e.producer].width).unwrap();
                    prop_assert!(pr.contains(&clamped));
                }
            }
        }
        let anc = g.ancestors(&[g.output()]);
        prop_assert_eq!(t.stats().nodes_visited, anc.iter().filter(|&&a| a).count());
    }

    #[test]
    fn savings_in_unit_interval(seed in 0u64..10_000, pick in any::<u64>()) {
        let g = zoo::random_graph(seed, RandomGraphConfig::default()).unwrap();
        let rect = random_rect(&mut rng(pick), out_shape(&g), 8);
        let rep = count_flops(&g, Some(&backtrace(&g, rect).unwrap())).unwrap();
        prop_assert!(rep.total_traced <= rep.total_full);
        prop_assert!((0.0..=1.0).contains(&rep.savings_ratio));
    }

    #[test]
    fn random_graph_equivalence(seed in 0u64..10_000, pick in any::<u64>()) {
        let g = zoo::random_graph(seed, RandomGraphConfig::default()).unwrap();
        let w = WeightStore::random(&g, seed).unwrap();
        let mut r = rng(pick);
        let x = random_tensor(g.input_shape(), &mut r);
        let rect = random_rect(&mut r, out_shape(&g), 8);
        let rep = verify_equivalence(&g, &w, &x, rect, 1e-4).unwrap();
        prop_assert!(rep.pass, "{:?}", rep);
        // Determinism of the full executor.
        prop_assert_eq!(run_full(&g, &w, &x).unwrap().output, run_full(&g, &w, &x).unwrap().output);
    }
}
