//! The operations behind each CLI verb.

use std::path::{Path, PathBuf};

use crate::data::anchors::{kmeans_anchors, mean_distortion, AnchorSet};
use crate::data::draw::{draw_label, draw_rect};
use crate::data::labelme::write_labelme;
use crate::data::synth::{class_color, generate_scene};
use crate::data::{load_dataset, write_manifest, Image, ManifestEntry};
use crate::error::{Error, Result};
use crate::metrics::{compare_runs, Comparison, EvalReport};
use crate::postprocess::{detect, DetectionRecord, NmsConfig};
use crate::train::{derive_seed, evaluate, letterboxed_sizes, train, Checkpoint, EpochLog, RunConfig, TrainOutcome};

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `count` seeded scenes as PPM images and labelme files plus
/// `manifest.txt` under `out_dir`. Returns the manifest path.
pub fn cmd_synth(cfg: &RunConfig, count: usize, out_dir: &Path) -> Result<PathBuf> {
    cfg.classes.validate()?;
    cfg.scene.validate(cfg.classes.len())?;
    let images = out_dir.join("images");
    let labels = out_dir.join("annotations");
    mkdir(&images)?;
    mkdir(&labels)?;
    let base = derive_seed(cfg.seed, 4);
    let entries = crate::par::map_range(count, |i| -> Result<ManifestEntry> {
        let mut s = generate_scene(&cfg.scene, &cfg.classes, derive_seed(base, i as u64))?;
        let name = format!("scene_{i:05}");
        let img = images.join(format!("{name}.ppm"));
        let ann = labels.join(format!("{name}.json"));
        s.annotation.image = format!("../images/{name}.ppm");
        s.image.write_ppm(&img)?;
        write_labelme(&ann, &s.annotation, &cfg.classes)?;
        Ok(ManifestEntry {
            image: img,
            annotation: ann,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = out_dir.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct AnchorReport {
    pub anchors: AnchorSet,
    pub boxes: usize,
    pub distortion_default: f64,
    pub distortion_adapted: f64,
}

impl AnchorReport {
    pub fn table(&self) -> String {
        let mut out = String::from("scale  width    height\n");
        for (i, a) in self.anchors.anchors.iter().enumerate() {
            out.push_str(&format!("{:<6} {:<8.2} {:<8.2}\n", i * 3 / self.anchors.anchors.len(), a[0], a[1]));
        }
        out.push_str(&format!(
            "mean 1-IoU over {} boxes: default {:.4}, adapted {:.4}\n",
            self.boxes, self.distortion_default, self.distortion_adapted
        ));
        out
    }
}

/// Clusters the manifest's box sizes (in network-input pixels) into `k`
/// anchors and writes them to `out_path`.
pub fn cmd_anchors(cfg: &RunConfig, manifest: &Path, k: usize, out_path: &Path) -> Result<AnchorReport> {
    let samples = load_dataset(manifest, &cfg.classes)?;
    let sizes = letterboxed_sizes(&samples, cfg.network.input_size);
    let anchors = AnchorSet::new(kmeans_anchors(&sizes, k, derive_seed(cfg.seed, 3))?)?;
    if let Some(dir) = out_path.parent() {
        mkdir(dir)?;
    }
    anchors.save(out_path)?;
    Ok(AnchorReport {
        distortion_default: mean_distortion(&sizes, &cfg.network.anchors),
        distortion_adapted: mean_distortion(&sizes, &anchors.anchors),
        boxes: sizes.len(),
        anchors,
    })
}

/// Trains on `cfg.train_manifest`, writing everything under `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("train_manifest is not set".into()))?;
    let train_set = load_dataset(manifest, &cfg.classes)?;
    let val_set = cfg.val_manifest.as_ref().map(|m| load_dataset(m, &cfg.classes)).transpose()?;
    mkdir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("run_config.json");
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    train(cfg, &train_set, val_set.as_deref(), on_epoch)
}

/// Evaluates a checkpoint on a manifest; writes `report.json` and `pr.csv`
/// into `out_dir`.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path, nms: &NmsConfig, iou_threshold: f64, out_dir: &Path) -> Result<EvalReport> {
    nms.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let samples = load_dataset(manifest, &ck.classes)?;
    if samples.is_empty() {
        return Err(Error::Empty("evaluation manifest"));
    }
    let report = evaluate(&ck.model, &samples, &ck.classes, nms, iou_threshold)?;
    mkdir(out_dir)?;
    report.save_json(&out_dir.join("report.json"))?;
    report.save_pr_csv(&out_dir.join("pr.csv"))?;
    Ok(report)
}

pub fn cmd_compare(a: &Path, b: &Path) -> Result<Comparison> {
    compare_runs(&EvalReport::load_json(a)?, &EvalReport::load_json(b)?)
}

#[derive(Debug)]
pub struct DetectOutput {
    pub records: Vec<DetectionRecord>,
    /// Images that could not be processed, with the reason.
    pub failures: Vec<(PathBuf, Error)>,
}

/// Runs detection on each image in turn. A failing image is recorded and
/// skipped. With `annotate_dir`, a copy of each image with its boxes drawn
/// is written there.
pub fn cmd_detect(checkpoint: &Path, images: &[PathBuf], nms: &NmsConfig, annotate_dir: Option<&Path>) -> Result<DetectOutput> {
    nms.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(dir) = annotate_dir {
        mkdir(dir)?;
    }
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for path in images {
        let run = || -> Result<Vec<DetectionRecord>> {
            let img = Image::read_ppm(path)?;
            let dets = detect(&ck.model, &img, nms)?;
            let name = path.to_string_lossy().into_owned();
            if let Some(dir) = annotate_dir {
                let mut canvas = img.clone();
                for d in &dets {
                    let color = class_color(d.class_id);
                    draw_rect(&mut canvas, &d.bbox, color, 1);
                    let [x0, y0, ..] = d.bbox.corners();
                    let label = format!("{} {:.2}", ck.classes.name(d.class_id), d.score);
                    draw_label(&mut canvas, x0.round() as i64, (y0.round() as i64 - 7).max(0), &label, color);
                }
                let file = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                canvas.write_ppm(&dir.join(format!("{file}_det.ppm")))?;
            }
            Ok(dets.iter().map(|d| DetectionRecord::new(&name, d, &ck.classes)).collect())
        };
        match run() {
            Ok(r) => records.extend(r),
            Err(e) => failures.push((path.clone(), e)),
        }
    }
    Ok(DetectOutput { records, failures })
}
