mod common;

use common::*;
use rand::Rng;
use sedet::autodiff::Graph;
use sedet::boxes::{decode_box, head_index, BBox};
use sedet::loss::{
    assign_targets, detection_loss, detection_loss_graph, detection_loss_with_objectness, objectness_targets,
    LossWeights, Target,
};
use sedet::net::{NetworkConfig, RawPredictions};
use sedet::{Error, Tensor};

fn toy() -> NetworkConfig {
    NetworkConfig {
        input_size: 64,
        num_classes: 2,
        anchors: vec![
            [6.0, 8.0],
            [10.0, 6.0],
            [12.0, 12.0],
            [16.0, 20.0],
            [24.0, 16.0],
            [24.0, 24.0],
            [32.0, 40.0],
            [48.0, 32.0],
            [60.0, 60.0],
        ],
        ..NetworkConfig::toy()
    }
}

fn raw_filled(cfg: &NetworkConfig, batch: usize, f: &mut impl FnMut() -> f64) -> RawPredictions {
    let mut map = |s: usize| {
        let g = cfg.grid_size(s);
        Tensor::from_fn(&[batch, cfg.head_channels(), g, g], |_| f())
    };
    RawPredictions {
        maps: [map(0), map(1), map(2)],
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bce(z: f64, t: f64) -> f64 {
    -(t * sig(z).ln() + (1.0 - t) * (1.0 - sig(z)).ln())
}

/// CIoU straight from the corner formulas, kept separate from the library.
fn ref_ciou(p: BBox, g: BBox) -> f64 {
    let (px0, px1, py0, py1) = (p.x - p.w / 2.0, p.x + p.w / 2.0, p.y - p.h / 2.0, p.y + p.h / 2.0);
    let (gx0, gx1, gy0, gy1) = (g.x - g.w / 2.0, g.x + g.w / 2.0, g.y - g.h / 2.0, g.y + g.h / 2.0);
    let inter = (px1.min(gx1) - px0.max(gx0)).max(0.0) * (py1.min(gy1) - py0.max(gy0)).max(0.0);
    let iou = inter / (p.w * p.h + g.w * g.h - inter);
    let c2 = (px1.max(gx1) - px0.min(gx0)).powi(2) + (py1.max(gy1) - py0.min(gy0)).powi(2);
    let rho2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
    let v = 4.0 / std::f64::consts::PI.powi(2) * ((g.w / g.h).atan() - (p.w / p.h).atan()).powi(2);
    let alpha = v / (1.0 - iou + v);
    iou - rho2 / c2 - alpha * v
}

#[test]
fn centered_box_goes_to_middle_cell_of_coarse_grid() {
    let cfg = toy();
    let gt = BBox::new(32.0, 32.0, 24.0, 24.0);
    let t = assign_targets(&[(gt, 1)], &cfg);
    let coarse: Vec<&Target> = t.iter().filter(|t| t.scale == 2).collect();
    assert!(!coarse.is_empty());
    for t in &coarse {
        assert_eq!((t.cell_x, t.cell_y), (1, 1));
        assert_eq!(t.class_id, 1);
    }
    // anchors 32x40, 48x32 fit 24x24; 60x60 is 2.5x, also within the limit
    assert_eq!(coarse.iter().map(|t| t.anchor).collect::<Vec<_>>(), vec![0, 1, 2]);
    let mid: Vec<usize> = t.iter().filter(|t| t.scale == 1).map(|t| t.cell_x).collect();
    assert!(mid.iter().all(|&c| c == 2));
}

#[test]
fn anchor_shaped_box_always_fits() {
    let cfg = toy();
    for (i, a) in cfg.anchors.iter().enumerate() {
        let gt = BBox::new(20.0, 20.0, a[0], a[1]);
        let t = assign_targets(&[(gt, 0)], &cfg);
        assert!(t.iter().any(|t| t.scale * 3 + t.anchor == i));
    }
    let huge = BBox::new(32.0, 32.0, 64.0, 2.0);
    assert!(assign_targets(&[(huge, 0)], &cfg).is_empty());
}

fn brute_force_assign(gt: &[(BBox, usize)], cfg: &NetworkConfig) -> Vec<Target> {
    let mut out = Vec::new();
    for scale in 0..3 {
        let g = cfg.grid_size(scale);
        let s = cfg.strides[scale] as f64;
        for anchor in 0..3 {
            let a = cfg.anchors[scale * 3 + anchor];
            for cy in 0..g {
                for cx in 0..g {
                    let mut best: Option<(BBox, usize)> = None;
                    for &(b, c) in gt {
                        let bx = ((b.x / s) as usize).min(g - 1);
                        let by = ((b.y / s) as usize).min(g - 1);
                        let r = [b.w / a[0], a[0] / b.w, b.h / a[1], a[1] / b.h];
                        let fits = r.iter().all(|&v| v < 4.0);
                        if bx == cx && by == cy && fits && best.is_none_or(|(o, _)| b.w * b.h > o.w * o.h) {
                            best = Some((b, c));
                        }
                    }
                    if let Some((b, c)) = best {
                        out.push(Target {
                            scale,
                            cell_x: cx,
                            cell_y: cy,
                            anchor,
                            gt: b,
                            class_id: c,
                        });
                    }
                }
            }
        }
    }
    out
}

#[test]
fn assignment_matches_exhaustive_enumeration() {
    let cfg = toy();
    let mut r = rng(9);
    for _ in 0..300 {
        let n = r.random_range(0..8);
        let gt: Vec<(BBox, usize)> = (0..n)
            .map(|_| {
                let w = r.random_range(2.0..60.0);
                let h = r.random_range(2.0..60.0);
                let x = r.random_range(w / 2.0..=64.0 - w / 2.0);
                let y = r.random_range(h / 2.0..=64.0 - h / 2.0);
                (BBox::new(x, y, w, h), r.random_range(0..2))
            })
            .collect();
        let got = assign_targets(&gt, &cfg);
        assert_eq!(got, brute_force_assign(&gt, &cfg));
        let mut slots: Vec<_> = got.iter().map(|t| (t.scale, t.anchor, t.cell_x, t.cell_y)).collect();
        slots.dedup();
        assert_eq!(slots.len(), got.len());
    }
}

#[test]
fn no_ground_truth_leaves_only_background_objectness() {
    let cfg = toy();
    let mut r = rng(10);
    let raw = raw_filled(&cfg, 1, &mut || r.random_range(-3.0..3.0));
    let w = LossWeights::default();
    let b = detection_loss(&raw, &[vec![]], &w, &cfg).unwrap();
    assert_eq!(b.box_loss, 0.0);
    assert_eq!(b.cls_loss, 0.0);
    let mut expect = 0.0;
    for s in 0..3 {
        let g = cfg.grid_size(s);
        let mut sum = 0.0;
        for a in 0..3 {
            for cy in 0..g {
                for cx in 0..g {
                    sum += bce(raw.maps[s].data()[head_index(&cfg, s, 0, a, 4, (cx, cy))], 0.0);
                }
            }
        }
        expect += w.obj_balance[s] * sum / (3 * g * g) as f64;
    }
    assert!((b.obj_loss - expect).abs() < 1e-12);
    assert!((b.total - expect).abs() < 1e-12);
}

#[test]
fn exact_box_prediction_has_zero_box_loss() {
    let cfg = toy();
    let raw = raw_filled(&cfg, 1, &mut || 0.0);
    let gt = decode_box([0.0; 4], (1, 1), 32.0, cfg.anchors[8]);
    let t = vec![Target {
        scale: 2,
        cell_x: 1,
        cell_y: 1,
        anchor: 2,
        gt,
        class_id: 0,
    }];
    let b = detection_loss(&raw, &[t], &LossWeights::default(), &cfg).unwrap();
    assert!(b.box_loss.abs() < 1e-12);
}

#[test]
fn single_match_matches_hand_computation() {
    let cfg = toy();
    let mut raw = raw_filled(&cfg, 1, &mut || 0.0);
    // scale 2 is the 2x2 grid; slot (anchor 1, cell (0, 1))
    let t_box = [0.3, -0.2, 0.1, -0.4];
    let logits = [0.7, -1.1];
    let obj = 0.25;
    let cell = (0, 1);
    let map = raw.maps[2].data_mut();
    for (f, v) in t_box.iter().enumerate() {
        map[head_index(&cfg, 2, 0, 1, f, cell)] = *v;
    }
    map[head_index(&cfg, 2, 0, 1, 4, cell)] = obj;
    map[head_index(&cfg, 2, 0, 1, 5, cell)] = logits[0];
    map[head_index(&cfg, 2, 0, 1, 6, cell)] = logits[1];
    let gt = BBox::new(20.0, 44.0, 40.0, 30.0);
    let target = Target {
        scale: 2,
        cell_x: 0,
        cell_y: 1,
        anchor: 1,
        gt,
        class_id: 1,
    };
    let w = LossWeights::default();
    let got = detection_loss(&raw, &[vec![target]], &w, &cfg).unwrap();

    let s = 32.0;
    let pred = BBox::new(
        (2.0 * sig(0.3) - 0.5) * s,
        (2.0 * sig(-0.2) - 0.5 + 1.0) * s,
        48.0 * (2.0 * sig(0.1)).powi(2),
        32.0 * (2.0 * sig(-0.4)).powi(2),
    );
    let c = ref_ciou(pred, gt);
    let box_loss = 1.0 - c;
    let cls_loss = (bce(logits[0], 0.0) + bce(logits[1], 1.0)) / 2.0;
    let bg = bce(0.0, 0.0);
    let obj2 = (bce(obj, c.clamp(0.0, 1.0)) + 11.0 * bg) / 12.0;
    let obj_loss = 4.0 * bg + 1.0 * bg + 0.4 * obj2;
    assert!((got.box_loss - box_loss).abs() < 1e-12);
    assert!((got.cls_loss - cls_loss).abs() < 1e-12);
    assert!((got.obj_loss - obj_loss).abs() < 1e-12);
    let total = 0.05 * box_loss + obj_loss + 0.5 * cls_loss;
    assert!((got.total - total).abs() < 1e-12);
}

fn random_case(seed: u64, batch: usize) -> (NetworkConfig, RawPredictions, Vec<Vec<Target>>) {
    let cfg = toy();
    let mut r = rng(seed);
    let raw = raw_filled(&cfg, batch, &mut || r.random_range(-2.0..2.0));
    let targets = (0..batch)
        .map(|_| {
            let gt: Vec<(BBox, usize)> = (0..3)
                .map(|_| {
                    let w = r.random_range(4.0..40.0);
                    let h = r.random_range(4.0..40.0);
                    let x = r.random_range(w / 2.0..64.0 - w / 2.0);
                    let y = r.random_range(h / 2.0..64.0 - h / 2.0);
                    (BBox::new(x, y, w, h), r.random_range(0..2))
                })
                .collect();
            assign_targets(&gt, &cfg)
        })
        .collect();
    (cfg, raw, targets)
}

#[test]
fn loss_terms_are_finite_and_non_negative() {
    for seed in 0..50 {
        let (cfg, raw, targets) = random_case(seed, 2);
        let b = detection_loss(&raw, &targets, &LossWeights::default(), &cfg).unwrap();
        for v in [b.box_loss, b.obj_loss, b.cls_loss, b.total] {
            assert!(v.is_finite() && v >= 0.0, "{b:?}");
        }
        let w = LossWeights::default();
        let t = w.box_weight * b.box_loss + w.obj_weight * b.obj_loss + w.cls_weight * b.cls_loss;
        assert!((t - b.total).abs() < 1e-12);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..5 {
        let (cfg, raw, targets) = random_case(100 + seed, 2);
        // objectness targets are constants of the loss, so they stay fixed
        // while the inputs are perturbed
        let obj = objectness_targets([&raw.maps[0], &raw.maps[1], &raw.maps[2]], &targets, &cfg);
        let e = fd_check(
            &raw.maps,
            |g, v| {
                detection_loss_with_objectness(
                    g,
                    [v[0], v[1], v[2]],
                    &targets,
                    obj.clone(),
                    &LossWeights::default(),
                    &cfg,
                )
                .map(|(t, _)| t)
            },
            200,
            seed,
        );
        assert!(e < FD_TOL, "seed {seed}: {e:e}");
    }
}

#[test]
fn box_gradient_step_improves_ciou() {
    let cfg = toy();
    let w = LossWeights {
        obj_weight: 0.0,
        cls_weight: 0.0,
        ..LossWeights::default()
    };
    let mut r = rng(12);
    for _ in 0..50 {
        let mut raw = raw_filled(&cfg, 1, &mut || r.random_range(-1.5..1.5));
        let gt = BBox::new(
            r.random_range(10.0..54.0),
            r.random_range(10.0..54.0),
            r.random_range(8.0..40.0),
            r.random_range(8.0..40.0),
        );
        let t = vec![Target {
            scale: 1,
            cell_x: (gt.x / 16.0) as usize,
            cell_y: (gt.y / 16.0) as usize,
            anchor: 0,
            gt,
            class_id: 0,
        }];
        let before = detection_loss(&raw, std::slice::from_ref(&t), &w, &cfg).unwrap().box_loss;

        let mut g = Graph::new();
        let leaves: Vec<_> = raw.maps.iter().map(|m| g.leaf(&m.clone().with_requires_grad(true))).collect();
        let (total, _) = detection_loss_graph(&mut g, [leaves[0], leaves[1], leaves[2]], std::slice::from_ref(&t), &w, &cfg).unwrap();
        g.backward(total).unwrap();
        let grad = g.grad(leaves[1]).unwrap().to_vec();
        for (v, d) in raw.maps[1].data_mut().iter_mut().zip(&grad) {
            *v -= 1e-3 * d;
        }
        let after = detection_loss(&raw, &[t], &w, &cfg).unwrap().box_loss;
        assert!(after < before, "{after} !< {before}");
    }
}

#[test]
fn empty_batch_is_rejected() {
    let cfg = toy();
    let raw = raw_filled(&cfg, 1, &mut || 0.0);
    assert!(matches!(
        detection_loss(&raw, &[], &LossWeights::default(), &cfg),
        Err(Error::Empty(_))
    ));
    let raw0 = RawPredictions {
        maps: [Tensor::zeros(&[0, 21, 8, 8]), Tensor::zeros(&[0, 21, 4, 4]), Tensor::zeros(&[0, 21, 2, 2])],
    };
    assert!(detection_loss(&raw0, &[], &LossWeights::default(), &cfg).is_err());
}

#[test]
fn negative_weights_are_invalid() {
    let w = LossWeights {
        box_weight: -1.0,
        ..LossWeights::default()
    };
    assert!(w.validate().is_err());
    LossWeights::default().validate().unwrap();
}
