//! Detection matching, precision/recall, average precision and run
//! comparison.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::postprocess::Detection;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Outcome of one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMatch {
    pub class_id: usize,
    pub score: f64,
    /// Index of the matched ground truth; `None` marks a false positive.
    pub gt: Option<usize>,
}

impl DetectionMatch {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One entry per detection, in input order.
    pub detections: Vec<DetectionMatch>,
    /// Whether each ground truth was matched.
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.detections.iter().filter(|d| d.is_tp()).count()
    }

    pub fn fp(&self) -> usize {
        self.detections.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_matched.iter().filter(|m| !**m).count()
    }
}

/// Per class, highest score first (earlier input first on ties), each
/// detection takes the unmatched same-class ground truth of highest IoU, if
/// that IoU reaches the threshold.
pub fn match_detections(dets: &[Detection], gts: &[(BBox, usize)], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut gt_matched = vec![false; gts.len()];
    let mut detections: Vec<DetectionMatch> = dets
        .iter()
        .map(|d| DetectionMatch {
            class_id: d.class_id,
            score: d.score,
            gt: None,
        })
        .collect();
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, (g, c)) in gts.iter().enumerate() {
            if *c != d.class_id || gt_matched[j] {
                continue;
            }
            let v = iou(&d.bbox, g);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            gt_matched[j] = true;
            detections[i].gt = Some(j);
        }
    }
    MatchResult {
        detections,
        gt_matched,
    }
}

/// `TP/(TP+FP)` and `TP/(TP+FN)`, each 0 when its denominator is 0.
pub fn precision_recall(tp: usize, fp: usize, fn_count: usize) -> (f64, f64) {
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    (ratio(tp, tp + fp), ratio(tp, tp + fn_count))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub confidence: f64,
}

/// Precision and recall after each distinct confidence level, highest first.
/// Detections sharing a score enter together.
pub fn pr_curve(scored: &[(f64, bool)], num_gt: usize) -> Vec<PrPoint> {
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let level = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == level {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (precision, recall) = precision_recall(tp, fp, num_gt.saturating_sub(tp));
        points.push(PrPoint {
            recall,
            precision,
            confidence: level,
        });
    }
    points
}

/// All-points interpolated area: the precision envelope is made
/// non-increasing in recall and the resulting step function is integrated
/// over `[0, 1]`.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut rec = Vec::with_capacity(curve.len() + 2);
    let mut pre = Vec::with_capacity(curve.len() + 2);
    rec.push(0.0);
    pre.push(0.0);
    for p in curve {
        rec.push(p.recall);
        pre.push(p.precision);
    }
    rec.push(1.0);
    pre.push(0.0);
    for i in (0..pre.len() - 1).rev() {
        pre[i] = pre[i].max(pre[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..rec.len() {
        if rec[i] > rec[i - 1] {
            ap += (rec[i] - rec[i - 1]) * pre[i];
        }
    }
    ap.clamp(0.0, 1.0)
}

/// Mean over the classes that have an AP. Errors when none does.
pub fn mean_ap(aps: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::NoEvaluableClasses);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub precision: f64,
    pub recall: f64,
    /// `None` for classes without ground truth.
    pub ap: Option<f64>,
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub images: usize,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub classes: Vec<ClassReport>,
}

/// Accumulates matches image by image.
#[derive(Debug, Clone)]
pub struct Evaluator {
    iou_threshold: f64,
    images: usize,
    scored: Vec<Vec<(f64, bool)>>,
    num_gt: Vec<usize>,
}

impl Evaluator {
    pub fn new(num_classes: usize, iou_threshold: f64) -> Self {
        Self {
            iou_threshold,
            images: 0,
            scored: vec![Vec::new(); num_classes],
            num_gt: vec![0; num_classes],
        }
    }

    pub fn add_image(&mut self, dets: &[Detection], gts: &[(BBox, usize)]) -> Result<()> {
        let k = self.num_gt.len();
        if let Some(bad) = dets.iter().map(|d| d.class_id).chain(gts.iter().map(|g| g.1)).find(|&c| c >= k) {
            return Err(Error::InvalidArgument(format!("class id {bad} outside a {k}-class vocabulary")));
        }
        let m = match_detections(dets, gts, self.iou_threshold);
        for d in &m.detections {
            self.scored[d.class_id].push((d.score, d.is_tp()));
        }
        for (_, c) in gts {
            self.num_gt[*c] += 1;
        }
        self.images += 1;
        Ok(())
    }

    pub fn report(&self, vocab: &Vocabulary) -> Result<EvalReport> {
        if vocab.len() != self.num_gt.len() {
            return Err(Error::InvalidArgument(format!(
                "vocabulary has {} classes, evaluator {}",
                vocab.len(),
                self.num_gt.len()
            )));
        }
        let classes: Vec<ClassReport> = crate::par::map_range(vocab.len(), |c| {
            let scored = &self.scored[c];
            let num_gt = self.num_gt[c];
            let tp = scored.iter().filter(|s| s.1).count();
            let fp = scored.len() - tp;
            let fn_count = num_gt - tp;
            let (precision, recall) = precision_recall(tp, fp, fn_count);
            let curve = pr_curve(scored, num_gt);
            let ap = (num_gt > 0).then(|| average_precision(&curve));
            ClassReport {
                class: vocab.name(c).to_string(),
                num_gt,
                tp,
                fp,
                fn_count,
                precision,
                recall,
                ap,
                curve,
            }
        });
        let map = mean_ap(&classes.iter().map(|c| c.ap).collect::<Vec<_>>())?;
        let tp = classes.iter().map(|c| c.tp).sum();
        let fp = classes.iter().map(|c| c.fp).sum();
        let fn_count = classes.iter().map(|c| c.fn_count).sum();
        let (precision, recall) = precision_recall(tp, fp, fn_count);
        Ok(EvalReport {
            iou_threshold: self.iou_threshold,
            images: self.images,
            map,
            precision,
            recall,
            tp,
            fp,
            fn_count,
            classes,
        })
    }
}

impl EvalReport {
    pub fn vocabulary(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.class.clone()).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// `class,recall,precision,confidence`, one row per curve point.
    pub fn pr_csv(&self) -> String {
        let mut out = String::from("class,recall,precision,confidence\n");
        for c in &self.classes {
            for p in &c.curve {
                writeln!(out, "{},{},{},{}", c.class, p.recall, p.precision, p.confidence).unwrap();
            }
        }
        out
    }

    pub fn save_pr_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.pr_csv()).map_err(|e| Error::io(path, e))
    }

    /// Per-class AP table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {:>6} {:>6} {:>6} {:>8}\n", "class", "gt", "tp", "fp", "AP");
        for c in &self.classes {
            let ap = c.ap.map_or("-".to_string(), |a| format!("{a:.4}"));
            writeln!(out, "{:<12} {:>6} {:>6} {:>6} {:>8}", c.class, c.num_gt, c.tp, c.fp, ap).unwrap();
        }
        writeln!(out, "{:<12} {:>6} {:>6} {:>6} {:>8.4}", "mAP", "", "", "", self.map).unwrap();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassDelta {
    pub class: String,
    pub ap_a: Option<f64>,
    pub ap_b: Option<f64>,
    /// `b − a`; `None` unless both sides have an AP.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub classes: Vec<ClassDelta>,
    pub map_a: f64,
    pub map_b: f64,
    pub map_delta: f64,
}

pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<Comparison> {
    let (va, vb) = (a.vocabulary(), b.vocabulary());
    if va != vb {
        return Err(Error::VocabularyMismatch(va, vb));
    }
    let classes = a
        .classes
        .iter()
        .zip(&b.classes)
        .map(|(x, y)| ClassDelta {
            class: x.class.clone(),
            ap_a: x.ap,
            ap_b: y.ap,
            delta: x.ap.zip(y.ap).map(|(p, q)| q - p),
        })
        .collect();
    Ok(Comparison {
        classes,
        map_a: a.map,
        map_b: b.map,
        map_delta: b.map - a.map,
    })
}

impl Comparison {
    pub fn table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut out = format!("{:<12} {:>8} {:>8} {:>8}\n", "class", "AP(a)", "AP(b)", "delta");
        for c in &self.classes {
            let d = c.delta.map_or("-".to_string(), |v| format!("{v:+.4}"));
            writeln!(out, "{:<12} {:>8} {:>8} {:>8}", c.class, f(c.ap_a), f(c.ap_b), d).unwrap();
        }
        writeln!(out, "{:<12} {:>8.4} {:>8.4} {:>+8.4}", "mAP", self.map_a, self.map_b, self.map_delta).unwrap();
        out
    }
}
