//! Axis-aligned boxes, overlap measures and decoding of head outputs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::Result;
use crate::net::{NetworkConfig, RawPredictions, BOX_FIELDS};
use crate::tensor::Tensor;

/// Smallest height used inside the aspect-ratio arctangent.
pub const MIN_ASPECT_H: f64 = 1e-9;
const TINY: f64 = 1e-12;

/// Center-form box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// From two opposite corners given in any order.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        let (xa, xb) = (x0.min(x1), x0.max(x1));
        let (ya, yb) = (y0.min(y1), y0.max(y1));
        Self {
            x: (xa + xb) / 2.0,
            y: (ya + yb) / 2.0,
            w: xb - xa,
            h: yb - ya,
        }
    }

    /// `[x_min, y_min, x_max, y_max]`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    iw * ih
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// The pieces of the CIoU penalty for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiouTerms {
    pub iou: f64,
    /// Squared distance between centers.
    pub rho2: f64,
    /// Squared diagonal of the smallest enclosing box.
    pub c2: f64,
    pub v: f64,
    pub alpha: f64,
}

impl CiouTerms {
    pub fn value(&self) -> f64 {
        self.iou - self.rho2 / self.c2.max(TINY) - self.alpha * self.v
    }
}

pub fn ciou_terms(pred: &BBox, gt: &BBox) -> CiouTerms {
    let [px0, py0, px1, py1] = pred.corners();
    let [gx0, gy0, gx1, gy1] = gt.corners();
    let iou = iou(pred, gt);
    let rho2 = (pred.x - gt.x).powi(2) + (pred.y - gt.y).powi(2);
    let c2 = (px1.max(gx1) - px0.min(gx0)).powi(2) + (py1.max(gy1) - py0.min(gy0)).powi(2);
    let d = (gt.w / gt.h.max(MIN_ASPECT_H)).atan() - (pred.w / pred.h.max(MIN_ASPECT_H)).atan();
    let v = 4.0 / (PI * PI) * d * d;
    let alpha = v / (1.0 - iou + v).max(TINY);
    CiouTerms {
        iou,
        rho2,
        c2,
        v,
        alpha,
    }
}

/// IoU minus the normalized center distance and the weighted aspect-ratio
/// divergence.
pub fn ciou(pred: &BBox, gt: &BBox) -> f64 {
    ciou_terms(pred, gt).value()
}

/// Confidence target of a prediction: the IoU with its matched ground truth,
/// or 0 without one.
pub fn confidence(pred: &DecodedPrediction, matched_gt: Option<&BBox>) -> f64 {
    matched_gt.map_or(0.0, |gt| iou(&pred.bbox, gt))
}

/// Differentiable CIoU of `m` predicted boxes (each coordinate a length-`m`
/// variable) against fixed ground truths. Returns a length-`m` variable.
pub fn ciou_graph(g: &mut Graph, pred: [Var; 4], gt: &[BBox]) -> Result<Var> {
    let m = gt.len();
    let col = |g: &mut Graph, f: &dyn Fn(&BBox) -> f64| {
        g.constant(Tensor::new(vec![m], gt.iter().map(f).collect()).expect("length m"))
    };
    let full = |g: &mut Graph, v: f64| g.constant(Tensor::full(&[m], v));
    let [x, y, w, h] = pred;

    let hw = g.affine(w, 0.5, 0.0);
    let hh = g.affine(h, 0.5, 0.0);
    let px0 = g.sub(x, hw)?;
    let px1 = g.add(x, hw)?;
    let py0 = g.sub(y, hh)?;
    let py1 = g.add(y, hh)?;
    let gx0 = col(g, &|b| b.corners()[0]);
    let gy0 = col(g, &|b| b.corners()[1]);
    let gx1 = col(g, &|b| b.corners()[2]);
    let gy1 = col(g, &|b| b.corners()[3]);

    let a = g.minimum(px1, gx1)?;
    let b = g.maximum(px0, gx0)?;
    let iw = g.sub(a, b)?;
    let iw = g.relu(iw);
    let a = g.minimum(py1, gy1)?;
    let b = g.maximum(py0, gy0)?;
    let ih = g.sub(a, b)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let parea = g.mul(w, h)?;
    let garea = col(g, &|b| b.area());
    let union = g.add(parea, garea)?;
    let union = g.sub(union, inter)?;
    let tiny = full(g, TINY);
    let union = g.maximum(union, tiny)?;
    let iou = g.div(inter, union)?;

    let a = g.maximum(px1, gx1)?;
    let b = g.minimum(px0, gx0)?;
    let cw = g.sub(a, b)?;
    let a = g.maximum(py1, gy1)?;
    let b = g.minimum(py0, gy0)?;
    let ch = g.sub(a, b)?;
    let cw2 = g.mul(cw, cw)?;
    let ch2 = g.mul(ch, ch)?;
    let c2 = g.add(cw2, ch2)?;
    let c2 = g.maximum(c2, tiny)?;
    let gx = col(g, &|b| b.x);
    let gy = col(g, &|b| b.y);
    let dx = g.sub(x, gx)?;
    let dy = g.sub(y, gy)?;
    let dx2 = g.mul(dx, dx)?;
    let dy2 = g.mul(dy, dy)?;
    let rho2 = g.add(dx2, dy2)?;
    let dist = g.div(rho2, c2)?;

    let hmin = full(g, MIN_ASPECT_H);
    let hc = g.maximum(h, hmin)?;
    let ratio = g.div(w, hc)?;
    let pa = g.atan(ratio);
    let ga = col(g, &|b| (b.w / b.h.max(MIN_ASPECT_H)).atan());
    let d = g.sub(ga, pa)?;
    let d2 = g.mul(d, d)?;
    let v = g.affine(d2, 4.0 / (PI * PI), 0.0);
    let one_minus = g.affine(iou, -1.0, 1.0);
    let den = g.add(one_minus, v)?;
    let den = g.maximum(den, tiny)?;
    let alpha = g.div(v, den)?;
    let av = g.mul(alpha, v)?;

    let out = g.sub(iou, dist)?;
    g.sub(out, av)
}

/// One decoded anchor slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPrediction {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
    pub scale: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    pub anchor: usize,
}

/// The box transform without any clamping:
/// center `(2σ(t) − 0.5 + cell)·stride`, size `anchor·(2σ(t))²`.
pub fn decode_box(t: [f64; 4], cell: (usize, usize), stride: f64, anchor: [f64; 2]) -> BBox {
    let (cx, cy) = cell;
    BBox {
        x: (2.0 * sigmoid(t[0]) - 0.5 + cx as f64) * stride,
        y: (2.0 * sigmoid(t[1]) - 0.5 + cy as f64) * stride,
        w: anchor[0] * (2.0 * sigmoid(t[2])).powi(2),
        h: anchor[1] * (2.0 * sigmoid(t[3])).powi(2),
    }
}

/// Flat offset of `field` for (`item`, `anchor`, `cell`) in a head map.
pub fn head_index(cfg: &NetworkConfig, scale: usize, item: usize, anchor: usize, field: usize, cell: (usize, usize)) -> usize {
    let g = cfg.grid_size(scale);
    let ch = anchor * cfg.outputs_per_anchor() + field;
    ((item * cfg.head_channels() + ch) * g + cell.1) * g + cell.0
}

/// Decodes every anchor slot of every image. Centers are clamped into the
/// input frame.
pub fn decode(raw: &RawPredictions, cfg: &NetworkConfig) -> Result<Vec<Vec<DecodedPrediction>>> {
    raw.check(cfg)?;
    let limit = cfg.input_size as f64;
    let per = cfg.outputs_per_anchor();
    let mut out = Vec::with_capacity(raw.batch());
    for item in 0..raw.batch() {
        let mut preds = Vec::new();
        for scale in 0..crate::net::NUM_SCALES {
            let data = raw.maps[scale].data();
            let g = cfg.grid_size(scale);
            let stride = cfg.strides[scale] as f64;
            for (a, &anchor) in cfg.scale_anchors(scale).iter().enumerate() {
                for cy in 0..g {
                    for cx in 0..g {
                        let at = |f| data[head_index(cfg, scale, item, a, f, (cx, cy))];
                        let mut bbox = decode_box([at(0), at(1), at(2), at(3)], (cx, cy), stride, anchor);
                        bbox.x = bbox.x.clamp(0.0, limit);
                        bbox.y = bbox.y.clamp(0.0, limit);
                        preds.push(DecodedPrediction {
                            bbox,
                            objectness: sigmoid(at(4)),
                            class_scores: (BOX_FIELDS..per).map(|f| sigmoid(at(f))).collect(),
                            scale,
                            cell_x: cx,
                            cell_y: cy,
                            anchor: a,
                        });
                    }
                }
            }
        }
        out.push(preds);
    }
    Ok(out)
}
