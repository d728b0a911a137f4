//! Run configuration, SGD with momentum, checkpoints and the training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::anchors::{kmeans_anchors, AnchorSet};
use crate::data::augment::{training_sample, AugmentConfig};
use crate::data::synth::SceneConfig;
use crate::data::{Sample, Vocabulary};
use crate::error::{Error, Result};
use crate::loss::{assign_targets, detection_loss_graph, LossBreakdown, LossWeights};
use crate::metrics::{EvalReport, Evaluator};
use crate::net::{DetectorModel, NetworkConfig};
use crate::nn::{Ctx, Module};
use crate::postprocess::{detect, NmsConfig};
use crate::tensor::Tensor;

/// SplitMix64 of `base` and `stream`; independent seeds for sub-tasks.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub momentum: f64,
    /// Applied to convolution and fully connected weights only.
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    /// Learning rate at the end of the cosine decay, as a fraction of `lr0`.
    pub final_lr_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient norm limit; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr0: 0.2,
            momentum: 0.937,
            weight_decay: 5e-4,
            warmup_epochs: 3.0,
            final_lr_fraction: 0.01,
            epochs: 100,
            batch_size: 4,
            max_grad_norm: Some(10.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("optimizer.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("optimizer.batch_size must be at least 1".into());
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("optimizer.lr0 must be finite and non-negative, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("optimizer.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("optimizer.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs.is_finite()) {
            return bad(format!("optimizer.warmup_epochs must be non-negative, got {}", self.warmup_epochs));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad(format!("optimizer.final_lr_fraction must lie in [0, 1], got {}", self.final_lr_fraction));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return bad(format!("optimizer.max_grad_norm must be positive, got {n}"));
            }
        }
        Ok(())
    }

    /// Learning rate at fractional epoch `t`: linear warmup from zero, then
    /// cosine decay to `lr0 · final_lr_fraction` at the last epoch.
    pub fn lr_at(&self, t: f64) -> f64 {
        let total = self.epochs as f64;
        let warm = self.warmup_epochs.min(total);
        let cosine = |t: f64| {
            let span = (total - warm).max(1e-12);
            let p = ((t - warm) / span).clamp(0.0, 1.0);
            let f = self.final_lr_fraction + (1.0 - self.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
            self.lr0 * f
        };
        if t < warm {
            cosine(warm) * t / warm
        } else {
            cosine(t)
        }
    }
}

/// Everything one run needs. Loaded from a single JSON document; missing
/// fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub classes: Vocabulary,
    pub network: NetworkConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub nms: NmsConfig,
    pub optimizer: OptimizerConfig,
    pub scene: SceneConfig,
    pub train_manifest: Option<PathBuf>,
    /// Evaluated after training epochs; the training set is used when absent.
    pub val_manifest: Option<PathBuf>,
    /// Evaluate every this many epochs (the last epoch always).
    pub val_interval: usize,
    pub eval_iou_threshold: f64,
    /// Anchor file replacing `network.anchors`.
    pub anchors_file: Option<PathBuf>,
    /// Cluster anchors from the training set before building the model.
    pub auto_anchor: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            classes: Vocabulary::default(),
            network: NetworkConfig::toy(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            nms: NmsConfig::default(),
            optimizer: OptimizerConfig::default(),
            scene: SceneConfig::default(),
            train_manifest: None,
            val_manifest: None,
            val_interval: 1,
            eval_iou_threshold: crate::metrics::DEFAULT_IOU_THRESHOLD,
            anchors_file: None,
            auto_anchor: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        // manifest paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_manifest, &mut cfg.val_manifest, &mut cfg.anchors_file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Makes `seed` the root of every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.network.seed = derive_seed(seed, 1);
        self.augment.seed = derive_seed(seed, 2);
    }

    pub fn validate(&self) -> Result<()> {
        self.classes.validate()?;
        if self.network.num_classes != self.classes.len() {
            return Err(Error::InvalidConfig(format!(
                "network.num_classes is {} but {} class names are given",
                self.network.num_classes,
                self.classes.len()
            )));
        }
        self.network.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.nms.validate()?;
        self.optimizer.validate()?;
        self.scene.validate(self.classes.len())?;
        if self.val_interval == 0 {
            return Err(Error::InvalidConfig("val_interval must be at least 1".into()));
        }
        if !(self.eval_iou_threshold > 0.0 && self.eval_iou_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eval_iou_threshold must lie in (0, 1], got {}",
                self.eval_iou_threshold
            )));
        }
        Ok(())
    }
}

/// A model plus the class names it was trained on.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: DetectorModel,
    pub classes: Vocabulary,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let path = dir.join("classes.json");
        let text = serde_json::to_string_pretty(&self.classes).expect("classes serialize");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = DetectorModel::load(dir)?;
        let path = dir.join("classes.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let classes: Vocabulary = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if classes.len() != model.config.num_classes {
            return Err(Error::InvalidConfig(format!(
                "{}: {} class names for a {}-class network",
                path.display(),
                classes.len(),
                model.config.num_classes
            )));
        }
        Ok(Self { model, classes })
    }
}

/// SGD with momentum and decoupled-from-bias weight decay.
#[derive(Debug)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &dyn Module) -> Self {
        let mut velocity = Vec::new();
        model.visit("", &mut |_, p| {
            if p.kind.trainable() {
                velocity.push(vec![0.0; p.value.numel()]);
            }
        });
        Self { velocity }
    }

    /// Applies one update from the accumulated gradients and clears them.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, model: &mut dyn Module, cfg: &OptimizerConfig, lr: f64) -> Result<f64> {
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.velocity.len());
        model.visit_mut("", &mut |_, p| {
            if p.kind.trainable() {
                let n = p.value.numel();
                grads.push(p.value.take_grad().unwrap_or_else(|| vec![0.0; n]));
            }
        });
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {norm}")));
        }
        let clip = match cfg.max_grad_norm {
            Some(m) if norm > m => m / norm,
            _ => 1.0,
        };
        let mut i = 0;
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |_, p| {
            if !p.kind.trainable() {
                return;
            }
            let decay = if p.kind.decays() { cfg.weight_decay } else { 0.0 };
            let v = &mut velocity[i];
            let g = &grads[i];
            for ((w, vel), gr) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                let d = gr * clip + decay * *w;
                *vel = cfg.momentum * *vel + d;
                *w -= lr * *vel;
            }
            i += 1;
        });
        Ok(norm)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub map: Option<f64>,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch\tprecision\trecall\tmAP\tbox_loss\tobj_loss\tcls_loss\ttotal_loss\tlr";

impl EpochLog {
    pub fn tsv(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
        format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}",
            self.epoch,
            f(self.precision),
            f(self.recall),
            f(self.map),
            self.loss.box_loss,
            self.loss.obj_loss,
            self.loss.cls_loss,
            self.loss.total,
            self.lr
        )
    }
}

/// Runs detection over samples and scores the result.
pub fn evaluate(model: &DetectorModel, samples: &[Sample], classes: &Vocabulary, nms: &NmsConfig, iou_threshold: f64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let dets = samples
        .iter()
        .map(|s| detect(model, &s.image, nms))
        .collect::<Result<Vec<_>>>()?;
    let mut ev = Evaluator::new(classes.len(), iou_threshold);
    for (d, s) in dets.iter().zip(samples) {
        ev.add_image(d, &s.annotation.objects)?;
    }
    ev.report(classes)
}

/// Box sizes of a dataset after letterboxing to `input` pixels.
pub fn letterboxed_sizes(samples: &[Sample], input: usize) -> Vec<[f64; 2]> {
    samples
        .iter()
        .flat_map(|s| {
            let scale = (input as f64 / s.image.width as f64).min(input as f64 / s.image.height as f64);
            s.annotation.objects.iter().map(move |(b, _)| [b.w * scale, b.h * scale])
        })
        .collect()
}

pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_map: Option<f64>,
    pub checkpoint: Checkpoint,
}

/// One forward/backward pass over a batch; gradients are left accumulated in
/// the model.
pub fn train_step(model: &mut DetectorModel, batch: &[Sample], weights: &LossWeights) -> Result<LossBreakdown> {
    let cfg = model.config.clone();
    let images = Tensor::stack_batch(&batch.iter().map(|s| s.image.to_tensor()).collect::<Vec<_>>())?;
    let targets: Vec<_> = batch.iter().map(|s| assign_targets(&s.annotation.objects, &cfg)).collect();
    let mut ctx = Ctx::training();
    let x = ctx.graph.constant(images);
    let maps = model.forward_graph(&mut ctx, x)?;
    let (loss, parts) = detection_loss_graph(&mut ctx.graph, maps, &targets, weights, &cfg)?;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {:?}", parts)));
    }
    ctx.graph.backward(loss)?;
    ctx.write_back(model)?;
    Ok(parts)
}

/// Trains from scratch on `train`, evaluating on `val` (or `train`), writing
/// `train_log.tsv`, `best/` and `last/` under `cfg.out_dir`.
pub fn train(cfg: &RunConfig, train_set: &[Sample], val_set: Option<&[Sample]>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut net = cfg.network.clone();
    if let Some(path) = &cfg.anchors_file {
        net.anchors = AnchorSet::load(path)?.anchors;
    } else if cfg.auto_anchor {
        let k = 3 * net.anchors_per_scale;
        net.anchors = AnchorSet::new(kmeans_anchors(&letterboxed_sizes(train_set, net.input_size), k, derive_seed(cfg.seed, 3))?)?.anchors;
    }
    let mut model = DetectorModel::build(net)?;
    let input = model.config.input_size;
    let opt = &cfg.optimizer;
    let mut sgd = Sgd::new(&model);
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("train_log.tsv");
    let mut log_text = format!("{LOG_HEADER}\n");
    std::fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;

    let eval_set: Vec<Sample> = val_set.unwrap_or(train_set).to_vec();
    let batches_per_epoch = train_set.len().div_ceil(opt.batch_size);
    let mut best_map: Option<f64> = None;
    let mut log = Vec::with_capacity(opt.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..opt.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.augment.seed, epoch as u64));
        order.shuffle(&mut rng);
        let prepared: Vec<Sample> = crate::par::map_slice(&order, |&i| {
            let seed = derive_seed(cfg.augment.seed, ((epoch as u64) << 32) | i as u64);
            training_sample(train_set, i, input, &cfg.augment, seed)
        });
        let mut sum = LossBreakdown::default();
        let mut lr = 0.0;
        for (b, batch) in prepared.chunks(opt.batch_size).enumerate() {
            let t = epoch as f64 + (b + 1) as f64 / batches_per_epoch as f64;
            lr = opt.lr_at(t);
            let parts = train_step(&mut model, batch, &cfg.loss)?;
            sgd.step(&mut model, opt, lr)?;
            sum.box_loss += parts.box_loss;
            sum.obj_loss += parts.obj_loss;
            sum.cls_loss += parts.cls_loss;
            sum.total += parts.total;
        }
        let n = batches_per_epoch as f64;
        let mean = LossBreakdown {
            box_loss: sum.box_loss / n,
            obj_loss: sum.obj_loss / n,
            cls_loss: sum.cls_loss / n,
            total: sum.total / n,
        };
        let last = epoch + 1 == opt.epochs;
        let report = if last || (epoch + 1) % cfg.val_interval == 0 {
            Some(evaluate(&model, &eval_set, &cfg.classes, &cfg.nms, cfg.eval_iou_threshold)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            precision: report.as_ref().map(|r| r.precision),
            recall: report.as_ref().map(|r| r.recall),
            map: report.as_ref().map(|r| r.map),
            loss: mean,
            lr,
        };
        if let Some(m) = entry.map {
            if best_map.is_none_or(|b| m > b) {
                best_map = Some(m);
                Checkpoint { model: model.clone(), classes: cfg.classes.clone() }.save(&out.join("best"))?;
            }
        }
        writeln!(log_text, "{}", entry.tsv()).unwrap();
        std::fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
        on_epoch(&entry);
        log.push(entry);
    }
    let checkpoint = Checkpoint {
        model,
        classes: cfg.classes.clone(),
    };
    checkpoint.save(&out.join("last"))?;
    Ok(TrainOutcome {
        log,
        best_map,
        checkpoint,
    })
}
