//! Test-only oracles shared by the integration suites. Nothing here calls the
//! kernels it is used to check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sedet::autodiff::{Graph, Var};
use sedet::boxes::{iou, BBox};
use sedet::postprocess::Detection;
use sedet::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Relative error with a 1e-6 magnitude floor so that exact zeros compare
/// absolutely instead of dividing by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Builds `f` on fresh leaves, projects its output onto a fixed random
/// direction to get a scalar, and compares reverse-mode gradients with central
/// differences. At most `max_coords` coordinates per input are probed (all of
/// them when the input is small enough). Returns the worst relative error.
pub fn fd_check<F>(inputs: &[Tensor], f: F, max_coords: usize, seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed ^ 0x9e37_79b9);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars).expect("forward");
        let n = g.value(out).numel();
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>()
    };
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.value(out)
            .data()
            .iter()
            .zip(&probe)
            .map(|(a, b)| a * b)
            .sum()
    };

    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars).expect("forward");
    let w = g.constant(Tensor::new(g.value(out).shape().to_vec(), probe.clone()).unwrap());
    let prod = g.mul(out, w).expect("probe");
    let s = g.sum(prod);
    g.backward(s).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[i])
            .map(|x| x.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let coords: Vec<usize> = if t.numel() <= max_coords {
            (0..t.numel()).collect()
        } else {
            (0..max_coords).map(|_| r.random_range(0..t.numel())).collect()
        };
        for k in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k], numeric));
        }
    }
    worst
}

/// Direct six-loop convolution with zero padding.
pub fn naive_conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let s = x.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let ws = w.shape();
    let (cout, k) = (ws[0], ws[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()
                                    [((bi * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * cin + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

/// Sliding-window maximum that skips padded positions.
pub fn naive_maxpool(x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            m = m.max(x.data()[(p * h + iy as usize) * w + ix as usize]);
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// IoU of two corner-form boxes by painting unit cells on a grid and counting;
/// exact for integer coordinates.
pub fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let x0 = a[0].min(b[0]);
    let y0 = a[1].min(b[1]);
    let w = (a[2].max(b[2]) - x0).max(0) as usize;
    let h = (a[3].max(b[3]) - y0).max(0) as usize;
    let mut grid = vec![0u8; w * h];
    for (bit, r) in [(1u8, a), (2u8, b)] {
        for y in r[1]..r[3] {
            for x in r[0]..r[2] {
                grid[(y - y0) as usize * w + (x - x0) as usize] |= bit;
            }
        }
    }
    let inter = grid.iter().filter(|&&c| c == 3).count();
    let union = grid.iter().filter(|&&c| c != 0).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Finite-difference check of a parameterized forward pass in training mode,
/// over the input and every trainable parameter (up to `max_coords` sampled
/// coordinates each). Returns the worst relative error.
pub fn fd_check_module<M, F>(module: &M, input: &Tensor, forward: F, max_coords: usize, seed: u64) -> f64
where
    M: sedet::nn::Module + Clone,
    F: Fn(&M, &mut sedet::nn::Ctx, Var) -> Result<Var>,
{
    fd_check_module_sampled(module, input, forward, max_coords, usize::MAX, seed)
}

/// Like [`fd_check_module`] but probes only `max_tensors` randomly chosen
/// parameter tensors.
pub fn fd_check_module_sampled<M, F>(
    module: &M,
    input: &Tensor,
    forward: F,
    max_coords: usize,
    max_tensors: usize,
    seed: u64,
) -> f64
where
    M: sedet::nn::Module + Clone,
    F: Fn(&M, &mut sedet::nn::Ctx, Var) -> Result<Var>,
{
    use rand::seq::SliceRandom;
    use sedet::nn::Ctx;
    let mut r = rng(seed ^ 0x51f1_5eed);
    let run = |m: &M, x: &Tensor| -> (Ctx, Var, Var) {
        let mut ctx = Ctx::training();
        let xv = ctx.graph.leaf(x);
        let y = forward(m, &mut ctx, xv).expect("forward");
        (ctx, xv, y)
    };
    let probe: Vec<f64> = {
        let (ctx, _, y) = run(module, input);
        (0..ctx.graph.value(y).numel()).map(|_| r.random_range(-1.0..1.0)).collect()
    };
    let scalar = |m: &M, x: &Tensor| -> f64 {
        let (ctx, _, y) = run(m, x);
        ctx.graph.value(y).data().iter().zip(&probe).map(|(a, b)| a * b).sum()
    };

    let x_leaf = input.clone().with_requires_grad(true);
    let (mut ctx, xv, y) = run(module, &x_leaf);
    let shape = ctx.graph.value(y).shape().to_vec();
    let w = ctx.graph.constant(Tensor::new(shape, probe.clone()).unwrap());
    let p = ctx.graph.mul(y, w).unwrap();
    let s = ctx.graph.sum(p);
    ctx.graph.backward(s).unwrap();
    let mut with_grads = module.clone();
    with_grads.visit_mut("", &mut |_, p| p.value.zero_grad());
    ctx.write_back(&mut with_grads).unwrap();

    let mut worst: f64 = 0.0;
    let mut probe_coord = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    };

    let gx = ctx.graph.grad(xv).unwrap().to_vec();
    let coords: Vec<usize> = if input.numel() <= max_coords {
        (0..input.numel()).collect()
    } else {
        (0..max_coords).map(|_| r.random_range(0..input.numel())).collect()
    };
    for k in coords {
        let mut a = input.clone();
        a.data_mut()[k] += FD_STEP;
        let mut b = input.clone();
        b.data_mut()[k] -= FD_STEP;
        probe_coord(gx[k], scalar(module, &a), scalar(module, &b));
    }

    let mut params: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut idx = 0;
    with_grads.visit("", &mut |_, p| {
        if p.kind.trainable() {
            let g = p.value.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.value.numel()]);
            params.push((idx, g));
        }
        idx += 1;
    });
    params.shuffle(&mut r);
    params.truncate(max_tensors);
    for (pi, grad) in params {
        let n = grad.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| r.random_range(0..n)).collect()
        };
        for k in coords {
            let shifted = |delta: f64| {
                let mut m = module.clone();
                let mut i = 0;
                m.visit_mut("", &mut |_, p| {
                    if i == pi {
                        p.value.data_mut()[k] += delta;
                    }
                    i += 1;
                });
                scalar(&m, input)
            };
            probe_coord(grad[k], shifted(FD_STEP), shifted(-FD_STEP));
        }
    }
    worst
}

/// A scored candidate from corner coordinates.
pub fn nms_candidate(b: [f64; 4], class_id: usize, score: f64) -> Detection {
    Detection {
        bbox: BBox::from_corners(b[0], b[1], b[2], b[3]),
        class_id,
        score,
    }
}

/// Classic formulation: walk the ranking, keep the next unsuppressed box and
/// mark everything after it that overlaps too much.
pub fn reference_nms(c: &[Detection], thr: f64, max: usize) -> Vec<usize> {
    let n = c.len();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n - 1 - i {
            let (a, b) = (&c[idx[j]], &c[idx[j + 1]]);
            let swap = a.score < b.score
                || (a.score == b.score && a.bbox.area() > b.bbox.area())
                || (a.score == b.score && a.bbox.area() == b.bbox.area() && idx[j] > idx[j + 1]);
            if swap {
                idx.swap(j, j + 1);
            }
        }
    }
    let mut suppressed = vec![false; n];
    let mut keep = Vec::new();
    for p in 0..n {
        if suppressed[p] {
            continue;
        }
        keep.push(idx[p]);
        for q in p + 1..n {
            let (a, b) = (&c[idx[p]], &c[idx[q]]);
            if a.class_id == b.class_id && iou(&a.bbox, &b.bbox) > thr {
                suppressed[q] = true;
            }
        }
    }
    keep.truncate(max);
    keep
}

pub fn random_set(r: &mut impl Rng) -> Vec<Detection> {
    let n = r.random_range(0..=64);
    let classes = r.random_range(1..=7);
    (0..n)
        .map(|_| {
            let x0 = r.random_range(0..60) as f64;
            let y0 = r.random_range(0..60) as f64;
            let w = r.random_range(1..30) as f64;
            let h = r.random_range(1..30) as f64;
            // coarse scores so ties actually happen
            let score = r.random_range(0..20) as f64 / 19.0;
            nms_candidate([x0, y0, x0 + w, y0 + h], r.random_range(0..classes), score)
        })
        .collect()
}

/// Area under `r ↦ max{P(t) : R(t) ≥ r}` over every score threshold `t`,
/// integrated piece by piece between consecutive recall levels.
pub fn sweep_ap(scored: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut levels: Vec<f64> = scored.iter().map(|s| s.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let pr: Vec<(f64, f64)> = levels
        .iter()
        .map(|&t| {
            let tp = scored.iter().filter(|s| s.0 >= t && s.1).count() as f64;
            let n = scored.iter().filter(|s| s.0 >= t).count() as f64;
            (tp / num_gt as f64, tp / n)
        })
        .collect();
    let mut cuts: Vec<f64> = pr.iter().map(|p| p.0).chain([0.0, 1.0]).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut area = 0.0;
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let p = pr.iter().filter(|q| q.0 >= mid).map(|q| q.1).fold(0.0, f64::max);
        area += (w[1] - w[0]) * p;
    }
    area
}
