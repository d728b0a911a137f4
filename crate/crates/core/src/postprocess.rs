//! Confidence filtering, per-class non-maximum suppression and detection
//! records.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{decode, iou, BBox, DecodedPrediction};
use crate::data::{letterbox_image, Image, Letterbox, Vocabulary};
use crate::error::{Error, Result};
use crate::net::DetectorModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub max_detections: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.25,
            iou_threshold: 0.45,
            max_detections: 300,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("score_threshold", self.score_threshold), ("iou_threshold", self.iou_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("nms.{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Scores every prediction as objectness times its best class score (lowest
/// class index on ties) and keeps those at or above the threshold, in input
/// order.
pub fn confidence_filter(preds: &[DecodedPrediction], cfg: &NmsConfig) -> Vec<Detection> {
    preds
        .iter()
        .filter_map(|p| {
            let (class_id, best) = p
                .class_scores
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
            let score = p.objectness * best;
            (score >= cfg.score_threshold).then_some(Detection {
                bbox: p.bbox,
                class_id,
                score,
            })
        })
        .collect()
}

/// Descending score, then smaller area, then earlier position.
fn rank(a: &(usize, &Detection), b: &(usize, &Detection)) -> Ordering {
    b.1.score
        .total_cmp(&a.1.score)
        .then(a.1.bbox.area().total_cmp(&b.1.bbox.area()))
        .then(a.0.cmp(&b.0))
}

/// Greedy suppression within each class. The result is ordered by the same
/// ranking used for suppression and truncated to `max_detections`.
pub fn nms(candidates: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut order: Vec<(usize, &Detection)> = candidates.iter().enumerate().collect();
    order.sort_by(rank);
    let mut kept: Vec<(usize, &Detection)> = Vec::new();
    let mut by_class: std::collections::BTreeMap<usize, Vec<BBox>> = Default::default();
    for (i, d) in order {
        let same = by_class.entry(d.class_id).or_default();
        if same.iter().all(|k| iou(k, &d.bbox) <= cfg.iou_threshold) {
            same.push(d.bbox);
            kept.push((i, d));
        }
    }
    kept.truncate(cfg.max_detections);
    kept.into_iter().map(|(_, d)| *d).collect()
}

/// Runs the model on already letterboxed images (`N×3×S×S`), returning
/// per-image detections in network-input coordinates.
pub fn detect_tensor(model: &DetectorModel, images: &crate::Tensor, cfg: &NmsConfig) -> Result<Vec<Vec<Detection>>> {
    let raw = model.forward(images)?;
    let decoded = decode(&raw, &model.config)?;
    Ok(crate::par::map_slice(&decoded, |preds| nms(&confidence_filter(preds, cfg), cfg)))
}

/// Maps detections through the inverse letterbox and clips them to the
/// original frame. Boxes left without area are dropped.
pub fn to_original(dets: Vec<Detection>, lb: &Letterbox) -> Vec<Detection> {
    let (w, h) = (lb.orig_width as f64, lb.orig_height as f64);
    dets.into_iter()
        .filter_map(|d| {
            let [x0, y0, x1, y1] = lb.invert(&d.bbox).corners();
            let (x0, x1) = (x0.clamp(0.0, w), x1.clamp(0.0, w));
            let (y0, y1) = (y0.clamp(0.0, h), y1.clamp(0.0, h));
            (x1 > x0 && y1 > y0).then(|| Detection {
                bbox: BBox::from_corners(x0, y0, x1, y1),
                ..d
            })
        })
        .collect()
}

/// Letterboxes `image`, runs the model and returns detections in the
/// image's own pixel coordinates.
pub fn detect(model: &DetectorModel, image: &Image, cfg: &NmsConfig) -> Result<Vec<Detection>> {
    let (input, lb) = letterbox_image(image, model.config.input_size);
    let mut per_image = detect_tensor(model, &input.to_tensor(), cfg)?;
    Ok(to_original(per_image.pop().unwrap_or_default(), &lb))
}

/// One line of the detection interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image: String,
    pub class: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl DetectionRecord {
    pub fn new(image: &str, d: &Detection, vocab: &Vocabulary) -> Self {
        Self {
            image: image.to_string(),
            class: vocab.name(d.class_id).to_string(),
            score: d.score,
            bbox: d.bbox.corners(),
        }
    }

    pub fn to_detection(&self, vocab: &Vocabulary) -> Result<Detection> {
        let class_id = vocab.index(&self.class).ok_or_else(|| Error::UnknownLabel(self.class.clone()))?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::MalformedAnnotation(format!("detection score {} outside [0, 1]", self.score)));
        }
        let [x0, y0, x1, y1] = self.bbox;
        Ok(Detection {
            bbox: BBox::from_corners(x0, y0, x1, y1),
            class_id,
            score: self.score,
        })
    }
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records).expect("records serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
