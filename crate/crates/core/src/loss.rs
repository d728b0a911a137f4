//! Target assignment and the composite detection loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::boxes::{ciou, ciou_graph, decode_box, head_index, BBox};
use crate::error::{Error, Result};
use crate::net::{NetworkConfig, RawPredictions, BOX_FIELDS, NUM_SCALES};
use crate::tensor::Tensor;

/// Largest allowed ratio between a ground-truth side and an anchor side.
pub const ANCHOR_RATIO_LIMIT: f64 = 4.0;

/// A ground truth made responsible for one anchor slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub scale: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    pub anchor: usize,
    pub gt: BBox,
    pub class_id: usize,
}

/// Matched pairs of one image, ordered by scale, anchor, row, column.
pub type TargetAssignment = Vec<Target>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    /// Objectness weight of each scale, finest first.
    pub obj_balance: [f64; NUM_SCALES],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            box_weight: 0.05,
            obj_weight: 1.0,
            cls_weight: 0.5,
            obj_balance: [4.0, 1.0, 0.4],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.box_weight, self.obj_weight, self.cls_weight];
        if all.iter().chain(&self.obj_balance).any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
}

/// Whether an anchor may take a ground truth of this size.
pub fn anchor_fits(gt: &BBox, anchor: [f64; 2]) -> bool {
    let rw = gt.w / anchor[0];
    let rh = gt.h / anchor[1];
    rw.max(1.0 / rw).max(rh).max(1.0 / rh) < ANCHOR_RATIO_LIMIT
}

/// Makes the cell holding each box center responsible for it at every scale,
/// on every anchor whose shape is within the ratio limit. When two boxes claim
/// the same slot the larger one keeps it (the earlier one on equal areas).
pub fn assign_targets(gt: &[(BBox, usize)], cfg: &NetworkConfig) -> TargetAssignment {
    let mut slots: std::collections::BTreeMap<(usize, usize, usize, usize), Target> =
        std::collections::BTreeMap::new();
    for &(b, class_id) in gt {
        for scale in 0..NUM_SCALES {
            let g = cfg.grid_size(scale);
            let stride = cfg.strides[scale] as f64;
            let cell = |v: f64| ((v / stride).floor().max(0.0) as usize).min(g - 1);
            let (cx, cy) = (cell(b.x), cell(b.y));
            for (a, &anchor) in cfg.scale_anchors(scale).iter().enumerate() {
                if !anchor_fits(&b, anchor) {
                    continue;
                }
                let t = Target {
                    scale,
                    cell_x: cx,
                    cell_y: cy,
                    anchor: a,
                    gt: b,
                    class_id,
                };
                slots
                    .entry((scale, a, cy, cx))
                    .and_modify(|old| {
                        if b.area() > old.gt.area() {
                            *old = t;
                        }
                    })
                    .or_insert(t);
            }
        }
    }
    slots.into_values().collect()
}

fn vector(data: Vec<f64>) -> Tensor {
    let n = data.len();
    Tensor::new(vec![n], data).expect("1-d")
}

/// Objectness targets of every anchor slot, per scale in head-map order
/// (item, anchor, row, column): the CIoU of the current prediction with its
/// assigned ground truth, clamped to `[0, 1]`, and 0 for unassigned slots.
/// These are treated as constants by the loss.
pub fn objectness_targets(
    maps: [&Tensor; NUM_SCALES],
    targets: &[TargetAssignment],
    cfg: &NetworkConfig,
) -> [Vec<f64>; NUM_SCALES] {
    let batch = targets.len();
    std::array::from_fn(|scale| {
        let gsz = cfg.grid_size(scale);
        let na = cfg.anchors_per_scale;
        let data = maps[scale].data();
        let mut out = vec![0.0; batch * na * gsz * gsz];
        for (item, ts) in targets.iter().enumerate() {
            for t in ts.iter().filter(|t| t.scale == scale) {
                let cell = (t.cell_x, t.cell_y);
                let raw = std::array::from_fn(|f| data[head_index(cfg, scale, item, t.anchor, f, cell)]);
                let anchor = cfg.scale_anchors(scale)[t.anchor];
                let pred = decode_box(raw, cell, cfg.strides[scale] as f64, anchor);
                out[((item * na + t.anchor) * gsz + t.cell_y) * gsz + t.cell_x] =
                    ciou(&pred, &t.gt).clamp(0.0, 1.0);
            }
        }
        out
    })
}

/// Records the loss over a batch of head maps and returns the weighted total
/// together with its parts. `targets[i]` belongs to batch item `i`.
pub fn detection_loss_graph(
    g: &mut Graph,
    maps: [Var; NUM_SCALES],
    targets: &[TargetAssignment],
    weights: &LossWeights,
    cfg: &NetworkConfig,
) -> Result<(Var, LossBreakdown)> {
    check_inputs(g, maps, targets, cfg)?;
    let obj = objectness_targets([g.value(maps[0]), g.value(maps[1]), g.value(maps[2])], targets, cfg);
    detection_loss_with_objectness(g, maps, targets, obj, weights, cfg)
}

fn check_inputs(g: &Graph, maps: [Var; NUM_SCALES], targets: &[TargetAssignment], cfg: &NetworkConfig) -> Result<()> {
    let batch = g.shape(maps[0]).first().copied().unwrap_or(0);
    if batch == 0 || targets.is_empty() {
        return Err(Error::Empty("image batch"));
    }
    if targets.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "{} target lists for a batch of {batch}",
            targets.len()
        )));
    }
    for (s, &m) in maps.iter().enumerate() {
        let gsz = cfg.grid_size(s);
        let want = [batch, cfg.head_channels(), gsz, gsz];
        if g.shape(m) != want {
            return Err(Error::ShapeMismatch {
                op: "detection loss",
                lhs: g.shape(m).to_vec(),
                rhs: want.to_vec(),
            });
        }
    }
    Ok(())
}

/// [`detection_loss_graph`] with explicitly supplied objectness targets.
pub fn detection_loss_with_objectness(
    g: &mut Graph,
    maps: [Var; NUM_SCALES],
    targets: &[TargetAssignment],
    obj_targets: [Vec<f64>; NUM_SCALES],
    weights: &LossWeights,
    cfg: &NetworkConfig,
) -> Result<(Var, LossBreakdown)> {
    check_inputs(g, maps, targets, cfg)?;
    let batch = targets.len();
    let n_pairs: usize = targets.iter().map(Vec::len).sum();
    let ncls = cfg.num_classes;
    let zero = g.constant(Tensor::scalar(0.0));
    let mut box_sum = zero;
    let mut cls_sum = zero;
    let mut obj_total = zero;

    for (scale, obj_target) in obj_targets.into_iter().enumerate() {
        let map = maps[scale];
        let gsz = cfg.grid_size(scale);
        let stride = cfg.strides[scale] as f64;
        let anchors = cfg.scale_anchors(scale);
        let pairs: Vec<(usize, &Target)> = targets
            .iter()
            .enumerate()
            .flat_map(|(i, ts)| ts.iter().filter(|t| t.scale == scale).map(move |t| (i, t)))
            .collect();
        if obj_target.len() != batch * anchors.len() * gsz * gsz {
            return Err(Error::InvalidArgument(format!(
                "{} objectness targets for scale {scale}",
                obj_target.len()
            )));
        }

        if !pairs.is_empty() {
            let field = |g: &mut Graph, f: usize| {
                let idx = pairs
                    .iter()
                    .map(|&(i, t)| head_index(cfg, scale, i, t.anchor, f, (t.cell_x, t.cell_y)))
                    .collect();
                g.gather(map, idx)
            };
            let tx = field(g, 0)?;
            let ty = field(g, 1)?;
            let tw = field(g, 2)?;
            let th = field(g, 3)?;

            let sx = g.sigmoid(tx);
            let sx = g.affine(sx, 2.0 * stride, -0.5 * stride);
            let ox = g.constant(vector(pairs.iter().map(|(_, t)| t.cell_x as f64 * stride).collect()));
            let x = g.add(sx, ox)?;
            let sy = g.sigmoid(ty);
            let sy = g.affine(sy, 2.0 * stride, -0.5 * stride);
            let oy = g.constant(vector(pairs.iter().map(|(_, t)| t.cell_y as f64 * stride).collect()));
            let y = g.add(sy, oy)?;
            let sw = g.sigmoid(tw);
            let sw = g.mul(sw, sw)?;
            let aw = g.constant(vector(pairs.iter().map(|(_, t)| 4.0 * anchors[t.anchor][0]).collect()));
            let w = g.mul(sw, aw)?;
            let sh = g.sigmoid(th);
            let sh = g.mul(sh, sh)?;
            let ah = g.constant(vector(pairs.iter().map(|(_, t)| 4.0 * anchors[t.anchor][1]).collect()));
            let h = g.mul(sh, ah)?;

            let gts: Vec<BBox> = pairs.iter().map(|(_, t)| t.gt).collect();
            let ciou = ciou_graph(g, [x, y, w, h], &gts)?;
            let s = g.sum(ciou);
            let one_minus = g.affine(s, -1.0, pairs.len() as f64);
            box_sum = g.add(box_sum, one_minus)?;

            let cls_idx = pairs
                .iter()
                .flat_map(|&(i, t)| {
                    (0..ncls).map(move |c| head_index(cfg, scale, i, t.anchor, BOX_FIELDS + c, (t.cell_x, t.cell_y)))
                })
                .collect();
            let logits = g.gather(map, cls_idx)?;
            let onehot = pairs
                .iter()
                .flat_map(|(_, t)| (0..ncls).map(move |c| if c == t.class_id { 1.0 } else { 0.0 }))
                .collect();
            let bce = g.bce_with_logits(logits, onehot)?;
            let s = g.sum(bce);
            cls_sum = g.add(cls_sum, s)?;
        }

        let mut obj_idx = Vec::with_capacity(obj_target.len());
        for item in 0..batch {
            for a in 0..anchors.len() {
                for cy in 0..gsz {
                    for cx in 0..gsz {
                        obj_idx.push(head_index(cfg, scale, item, a, 4, (cx, cy)));
                    }
                }
            }
        }
        let logits = g.gather(map, obj_idx)?;
        let bce = g.bce_with_logits(logits, obj_target)?;
        let mean = g.mean(bce);
        let weighted = g.affine(mean, weights.obj_balance[scale], 0.0);
        obj_total = g.add(obj_total, weighted)?;
    }

    let box_loss = if n_pairs > 0 {
        g.affine(box_sum, 1.0 / n_pairs as f64, 0.0)
    } else {
        box_sum
    };
    let cls_loss = if n_pairs > 0 {
        g.affine(cls_sum, 1.0 / (n_pairs * ncls) as f64, 0.0)
    } else {
        cls_sum
    };
    let wb = g.affine(box_loss, weights.box_weight, 0.0);
    let wo = g.affine(obj_total, weights.obj_weight, 0.0);
    let wc = g.affine(cls_loss, weights.cls_weight, 0.0);
    let total = g.add(wb, wo)?;
    let total = g.add(total, wc)?;

    let scalar = |v: Var| g.value(v).data()[0];
    let parts = LossBreakdown {
        box_loss: scalar(box_loss),
        obj_loss: scalar(obj_total),
        cls_loss: scalar(cls_loss),
        total: scalar(total),
    };
    Ok((total, parts))
}

/// Loss of fixed head outputs.
pub fn detection_loss(
    raw: &RawPredictions,
    targets: &[TargetAssignment],
    weights: &LossWeights,
    cfg: &NetworkConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let maps = [
        g.constant(raw.maps[0].clone()),
        g.constant(raw.maps[1].clone()),
        g.constant(raw.maps[2].clone()),
    ];
    detection_loss_graph(&mut g, maps, targets, weights, cfg).map(|(_, b)| b)
}
