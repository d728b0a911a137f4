mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sedet::autodiff::Graph;
use sedet::boxes::{ciou, ciou_graph, ciou_terms, confidence, decode, decode_box, iou, BBox};
use sedet::net::{NetworkConfig, RawPredictions};
use sedet::Tensor;

fn corners(c: [i64; 4]) -> BBox {
    BBox::from_corners(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64)
}

fn int_box() -> impl Strategy<Value = [i64; 4]> {
    (0i64..=64, 0i64..=64, 0i64..=64, 0i64..=64).prop_map(|(a, b, c, d)| [a.min(c), b.min(d), a.max(c), b.max(d)])
}

#[test]
fn corner_conversion_round_trips() {
    let b = BBox::from_corners(50.0, 80.0, 10.0, 20.0);
    assert_eq!(b, BBox::new(30.0, 50.0, 40.0, 60.0));
    assert_eq!(b.corners(), [10.0, 20.0, 50.0, 80.0]);
}

#[test]
fn iou_simple_cases() {
    let a = BBox::new(5.0, 5.0, 4.0, 2.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BBox::new(50.0, 50.0, 4.0, 2.0)), 0.0);
    let p = corners([0, 0, 2, 2]);
    let q = corners([1, 1, 3, 3]);
    assert!((iou(&p, &q) - 1.0 / 7.0).abs() < 1e-15);
    assert_eq!(raster_iou([0, 0, 2, 2], [1, 1, 3, 3]), 1.0 / 7.0);
    let z = BBox::new(3.0, 3.0, 0.0, 0.0);
    assert_eq!(iou(&z, &z), 0.0);
    assert_eq!(iou(&z, &BBox::new(9.0, 9.0, 0.0, 0.0)), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn iou_matches_raster_oracle(a in int_box(), b in int_box()) {
        let got = iou(&corners(a), &corners(b));
        prop_assert_eq!(got, raster_iou(a, b));
        prop_assert_eq!(got, iou(&corners(b), &corners(a)));
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn ciou_never_exceeds_iou(a in int_box(), b in int_box()) {
        let (p, g) = (corners(a), corners(b));
        prop_assume!(g.w > 0.0 && g.h > 0.0);
        let t = ciou_terms(&p, &g);
        prop_assert!(t.value() <= t.iou + 1e-15);
        prop_assert!((0.0..=1.0).contains(&t.alpha));
    }

    #[test]
    fn ciou_is_translation_invariant(a in int_box(), b in int_box(), dx in -100i64..100, dy in -100i64..100) {
        let (p, g) = (corners(a), corners(b));
        prop_assume!(g.w > 0.0 && g.h > 0.0);
        let shift = |b: BBox| BBox::new(b.x + dx as f64, b.y + dy as f64, b.w, b.h);
        prop_assert!((ciou(&p, &g) - ciou(&shift(p), &shift(g))).abs() < 1e-12);
    }
}

#[test]
fn iou_equals_one_only_for_identical_boxes() {
    let mut r = rng(3);
    for _ in 0..2000 {
        let a = [r.random_range(0..8), r.random_range(0..8), r.random_range(8..16), r.random_range(8..16)];
        let b = [r.random_range(0..8), r.random_range(0..8), r.random_range(8..16), r.random_range(8..16)];
        assert_eq!(iou(&corners(a), &corners(b)) == 1.0, a == b);
    }
}

#[test]
fn ciou_reference_values() {
    let a = BBox::new(10.0, 10.0, 6.0, 3.0);
    assert!((ciou(&a, &a) - 1.0).abs() < 1e-12);

    let big = BBox::new(10.0, 10.0, 12.0, 6.0);
    assert_eq!(ciou(&a, &big), iou(&a, &big));
    assert_eq!(iou(&a, &big), 0.25);

    // iou 0, rho^2 = 4, enclosing diagonal^2 = 32, v = 4/pi^2 (atan(1/2) - atan(1))^2
    let pred = BBox::new(0.0, 0.0, 2.0, 2.0);
    let gt = BBox::new(2.0, 0.0, 2.0, 4.0);
    let t = ciou_terms(&pred, &gt);
    assert_eq!(t.iou, 0.0);
    assert_eq!(t.rho2, 4.0);
    assert_eq!(t.c2, 32.0);
    assert!((t.v - 0.04195646149429057).abs() < 1e-15);
    assert!((t.alpha - 0.04026700063275193).abs() < 1e-15);
    assert!((t.value() - -0.12668946086153862).abs() < 1e-14);
}

#[test]
fn ciou_equals_iou_exactly_when_centers_and_aspects_match() {
    let mut r = rng(5);
    for _ in 0..500 {
        let (x, y) = (r.random_range(0.0..50.0), r.random_range(0.0..50.0));
        let (w, h) = (r.random_range(1.0..20.0), r.random_range(1.0..20.0));
        let k = r.random_range(0.2..3.0);
        let a = BBox::new(x, y, w, h);
        let b = BBox::new(x, y, w * k, h * k);
        let t = ciou_terms(&a, &b);
        assert!(t.rho2 == 0.0 && t.v < 1e-30);
        assert!((t.value() - t.iou).abs() < 1e-15);
        let c = BBox::new(x + 1.0, y, w, h);
        assert!(ciou(&c, &a) < iou(&c, &a));
    }
}

#[test]
fn zero_height_prediction_stays_finite() {
    let gt = BBox::new(5.0, 5.0, 4.0, 4.0);
    let p = BBox::new(5.0, 5.0, 3.0, 0.0);
    assert!(ciou(&p, &gt).is_finite());
    let mut g = Graph::new();
    let v = |g: &mut Graph, x: f64| g.leaf(&Tensor::new(vec![1], vec![x]).unwrap().with_requires_grad(true));
    let vars = [v(&mut g, 5.0), v(&mut g, 5.0), v(&mut g, 3.0), v(&mut g, 0.0)];
    let c = ciou_graph(&mut g, vars, &[gt]).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert!(vars.iter().all(|&x| g.grad(x).unwrap()[0].is_finite()));
}

fn random_pairs(r: &mut impl Rng, m: usize) -> (Vec<BBox>, Vec<BBox>) {
    let mut p = Vec::new();
    let mut g = Vec::new();
    for _ in 0..m {
        let c = (r.random_range(5.0..30.0), r.random_range(5.0..30.0));
        g.push(BBox::new(c.0, c.1, r.random_range(2.0..12.0), r.random_range(2.0..12.0)));
        p.push(BBox::new(
            c.0 + r.random_range(-4.0..4.0),
            c.1 + r.random_range(-4.0..4.0),
            r.random_range(2.0..12.0),
            r.random_range(2.0..12.0),
        ));
    }
    (p, g)
}

fn columns(p: &[BBox]) -> Vec<Tensor> {
    let col = |f: fn(&BBox) -> f64| Tensor::new(vec![p.len()], p.iter().map(f).collect()).unwrap();
    vec![col(|b| b.x), col(|b| b.y), col(|b| b.w), col(|b| b.h)]
}

#[test]
fn graph_ciou_matches_scalar_ciou() {
    let mut r = rng(7);
    let (p, gt) = random_pairs(&mut r, 200);
    let mut g = Graph::new();
    let cols = columns(&p);
    let v: Vec<_> = cols.iter().map(|t| g.constant(t.clone())).collect();
    let c = ciou_graph(&mut g, [v[0], v[1], v[2], v[3]], &gt).unwrap();
    for (i, (a, b)) in p.iter().zip(&gt).enumerate() {
        assert!((g.value(c).data()[i] - ciou(a, b)).abs() < 1e-12);
    }
}

#[test]
fn graph_ciou_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut r = rng(200 + seed);
        let (p, gt) = random_pairs(&mut r, 12);
        let e = fd_check(
            &columns(&p),
            |g, v| ciou_graph(g, [v[0], v[1], v[2], v[3]], &gt),
            48,
            seed,
        );
        assert!(e < FD_TOL, "seed {seed}: {e:e}");
    }
}

fn toy() -> NetworkConfig {
    NetworkConfig {
        input_size: 64,
        ..NetworkConfig::toy()
    }
}

fn raw_from(cfg: &NetworkConfig, f: &mut impl FnMut() -> f64) -> RawPredictions {
    let map = |s: usize, f: &mut dyn FnMut() -> f64| {
        let g = cfg.grid_size(s);
        Tensor::from_fn(&[1, cfg.head_channels(), g, g], |_| f())
    };
    RawPredictions {
        maps: [map(0, f), map(1, f), map(2, f)],
    }
}

#[test]
fn decode_of_zero_logits_sits_on_cell_centers_with_anchor_sizes() {
    let cfg = toy();
    let raw = raw_from(&cfg, &mut || 0.0);
    let preds = decode(&raw, &cfg).unwrap().remove(0);
    let expected: usize = (0..3).map(|s| 3 * cfg.grid_size(s).pow(2)).sum();
    assert_eq!(preds.len(), expected);
    for p in &preds {
        let s = cfg.strides[p.scale] as f64;
        assert_eq!(p.bbox.x, (p.cell_x as f64 + 0.5) * s);
        assert_eq!(p.bbox.y, (p.cell_y as f64 + 0.5) * s);
        let a = cfg.scale_anchors(p.scale)[p.anchor];
        assert_eq!((p.bbox.w, p.bbox.h), (a[0], a[1]));
        assert_eq!(p.objectness, 0.5);
        assert!(p.class_scores.iter().all(|&c| c == 0.5));
    }
}

#[test]
fn decode_respects_bounds_for_random_logits() {
    let cfg = toy();
    let mut r = rng(11);
    for _ in 0..20 {
        let raw = raw_from(&cfg, &mut || r.random_range(-30.0..30.0));
        for p in decode(&raw, &cfg).unwrap().remove(0) {
            let a = cfg.scale_anchors(p.scale)[p.anchor];
            let lim = cfg.input_size as f64;
            assert!((0.0..=lim).contains(&p.bbox.x) && (0.0..=lim).contains(&p.bbox.y));
            assert!(p.bbox.w > 0.0 && p.bbox.w <= 4.0 * a[0]);
            assert!(p.bbox.h > 0.0 && p.bbox.h <= 4.0 * a[1]);
            assert!((0.0..=1.0).contains(&p.objectness));
            assert!(p.class_scores.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}

#[test]
fn decode_rejects_mismatched_shapes() {
    let cfg = toy();
    let mut raw = raw_from(&cfg, &mut || 0.0);
    raw.maps[1] = Tensor::zeros(&[1, 36, 3, 3]);
    assert!(decode(&raw, &cfg).is_err());
}

#[test]
fn decode_box_formula() {
    let b = decode_box([0.0, 0.0, 0.0, 0.0], (3, 1), 8.0, [10.0, 13.0]);
    assert_eq!(b, BBox::new(28.0, 12.0, 10.0, 13.0));
    let b = decode_box([50.0, -50.0, 50.0, 50.0], (0, 0), 8.0, [10.0, 13.0]);
    assert!((b.x - 12.0).abs() < 1e-12 && (b.y + 4.0).abs() < 1e-12);
    assert!((b.w - 40.0).abs() < 1e-12 && (b.h - 52.0).abs() < 1e-12);
}

#[test]
fn confidence_follows_match_state() {
    let cfg = toy();
    let raw = raw_from(&cfg, &mut || 0.0);
    let mut p = decode(&raw, &cfg).unwrap().remove(0).remove(0);
    assert_eq!(confidence(&p, None), 0.0);
    let same = p.bbox;
    assert_eq!(confidence(&p, Some(&same)), 1.0);
    p.bbox = corners([0, 0, 2, 2]);
    assert!((confidence(&p, Some(&corners([1, 1, 3, 3]))) - 1.0 / 7.0).abs() < 1e-15);
}
