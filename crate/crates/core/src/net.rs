//! The detector: focus stem, CSP backbone with SE attention and SPPF, an
//! FPN+PAN neck and three 1×1 prediction heads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{join, Cbs, Conv2d, Csp, Ctx, Module, Param, ParamBuilder, SeBlock, Sppf};
use crate::tensor::Tensor;

pub const NUM_SCALES: usize = 3;

/// Values per anchor in front of the class scores: tx, ty, tw, th, objectness.
pub const BOX_FIELDS: usize = 5;

fn default_anchors() -> Vec<[f64; 2]> {
    vec![
        [10.0, 13.0],
        [16.0, 30.0],
        [33.0, 23.0],
        [30.0, 61.0],
        [62.0, 45.0],
        [59.0, 119.0],
        [116.0, 90.0],
        [156.0, 198.0],
        [373.0, 326.0],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub anchors_per_scale: usize,
    /// `(w, h)` in input pixels, `anchors_per_scale` per scale, finest scale first.
    pub anchors: Vec<[f64; 2]>,
    pub strides: [usize; NUM_SCALES],
    pub width_multiple: f64,
    pub depth_multiple: f64,
    pub se_enabled: bool,
    /// Backbone stage (0..4) whose output passes through the SE block.
    pub se_stage: usize,
    pub se_reduction: usize,
    pub sppf_kernel: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 640,
            num_classes: 7,
            anchors_per_scale: 3,
            anchors: default_anchors(),
            strides: [8, 16, 32],
            width_multiple: 1.0,
            depth_multiple: 1.0,
            se_enabled: true,
            se_stage: 3,
            se_reduction: SeBlock::DEFAULT_REDUCTION,
            sppf_kernel: 5,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// The small configuration used for desk-scale training.
    pub fn toy() -> Self {
        Self {
            input_size: 160,
            width_multiple: 0.25,
            depth_multiple: 0.34,
            anchors: default_anchors().iter().map(|[w, h]| [w / 4.0, h / 4.0]).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.anchors_per_scale == 0 {
            return bad("anchors_per_scale must be at least 1".into());
        }
        if self.anchors.len() != NUM_SCALES * self.anchors_per_scale {
            return bad(format!(
                "anchors must list {} sizes (3 scales x {}), got {}",
                NUM_SCALES * self.anchors_per_scale,
                self.anchors_per_scale,
                self.anchors.len()
            ));
        }
        if let Some(a) = self
            .anchors
            .iter()
            .find(|a| !(a[0] > 0.0 && a[1] > 0.0 && a[0].is_finite() && a[1].is_finite()))
        {
            return bad(format!("anchor sizes must be positive, got {a:?}"));
        }
        if self.strides != [8, 16, 32] {
            return bad(format!("strides must be [8, 16, 32], got {:?}", self.strides));
        }
        if !(self.width_multiple > 0.0 && self.width_multiple.is_finite()) {
            return bad(format!("width_multiple must be > 0, got {}", self.width_multiple));
        }
        if !(self.depth_multiple > 0.0 && self.depth_multiple.is_finite()) {
            return bad(format!("depth_multiple must be > 0, got {}", self.depth_multiple));
        }
        if self.se_stage >= 4 {
            return bad(format!("se_stage must be in 0..4, got {}", self.se_stage));
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be at least 1".into());
        }
        if self.sppf_kernel.is_multiple_of(2) {
            return bad(format!("sppf_kernel must be odd, got {}", self.sppf_kernel));
        }
        Ok(())
    }

    pub fn outputs_per_anchor(&self) -> usize {
        BOX_FIELDS + self.num_classes
    }

    pub fn head_channels(&self) -> usize {
        self.anchors_per_scale * self.outputs_per_anchor()
    }

    pub fn grid_size(&self, scale: usize) -> usize {
        self.input_size / self.strides[scale]
    }

    pub fn scale_anchors(&self, scale: usize) -> &[[f64; 2]] {
        let a = self.anchors_per_scale;
        &self.anchors[scale * a..(scale + 1) * a]
    }

    /// Base width scaled by the width multiple, rounded up to a multiple of 8.
    pub fn width(&self, base: usize) -> usize {
        let c = (base as f64 * self.width_multiple / 8.0).ceil() as usize * 8;
        c.max(8)
    }

    /// Base depth scaled by the depth multiple and rounded up.
    pub fn depth(&self, base: usize) -> usize {
        ((base as f64 * self.depth_multiple) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Head outputs, finest scale first; scale `i` is `N × A(5+C) × G_i × G_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPredictions {
    pub maps: [Tensor; NUM_SCALES],
}

impl RawPredictions {
    pub fn batch(&self) -> usize {
        self.maps[0].shape()[0]
    }

    pub fn check(&self, cfg: &NetworkConfig) -> Result<()> {
        let n = self.batch();
        for (s, m) in self.maps.iter().enumerate() {
            let g = cfg.grid_size(s);
            let want = [n, cfg.head_channels(), g, g];
            if m.shape() != want {
                return Err(Error::ShapeMismatch {
                    op: "raw predictions",
                    lhs: m.shape().to_vec(),
                    rhs: want.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Predictions of batch item `i` as a batch of one.
    pub fn item(&self, i: usize) -> Result<Self> {
        Ok(Self {
            maps: [
                self.maps[0].batch_item(i)?,
                self.maps[1].batch_item(i)?,
                self.maps[2].batch_item(i)?,
            ],
        })
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub down: Cbs,
    pub csp: Csp,
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub config: NetworkConfig,
    pub stem: Cbs,
    pub stages: Vec<Stage>,
    pub se: SeBlock,
    pub sppf: Sppf,
    pub lateral5: Cbs,
    pub td4: Csp,
    pub lateral4: Cbs,
    pub td3: Csp,
    pub down3: Cbs,
    pub bu4: Csp,
    pub down4: Cbs,
    pub bu5: Csp,
    pub heads: Vec<Conv2d>,
    se_active: bool,
}

impl DetectorModel {
    pub fn build(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let pb = &mut ParamBuilder::new(config.seed);
        let w = |b| config.width(b);
        let (c0, c1, c2, c3, c4) = (w(64), w(128), w(256), w(512), w(1024));
        let d = |b| config.depth(b);

        let stem = Cbs::new(pb, 12, c0, 3, 1)?;
        let mut stages = Vec::new();
        let mut prev = c0;
        for (out, n) in [(c1, d(1)), (c2, d(2)), (c3, d(3)), (c4, d(1))] {
            stages.push(Stage {
                down: Cbs::new(pb, prev, out, 3, 2)?,
                csp: Csp::new(pb, out, out, n, true)?,
            });
            prev = out;
        }
        let se_ch = [c1, c2, c3, c4][config.se_stage];
        let se = SeBlock::new(pb, se_ch, config.se_reduction)?;
        let sppf = Sppf::new(pb, c4, c4, config.sppf_kernel)?;

        let n = d(1);
        let lateral5 = Cbs::new(pb, c4, c3, 1, 1)?;
        let td4 = Csp::new(pb, 2 * c3, c3, n, false)?;
        let lateral4 = Cbs::new(pb, c3, c2, 1, 1)?;
        let td3 = Csp::new(pb, 2 * c2, c2, n, false)?;
        let down3 = Cbs::new(pb, c2, c2, 3, 2)?;
        let bu4 = Csp::new(pb, 2 * c2, c3, n, false)?;
        let down4 = Cbs::new(pb, c3, c3, 3, 2)?;
        let bu5 = Csp::new(pb, 2 * c3, c4, n, false)?;

        let mut heads = Vec::new();
        for (s, ch) in [c2, c3, c4].into_iter().enumerate() {
            let mut h = Conv2d::new(pb, ch, config.head_channels(), 1, 1, true)?;
            prior_bias(&mut h, &config, s);
            heads.push(h);
        }

        Ok(Self {
            se_active: config.se_enabled,
            config,
            stem,
            stages,
            se,
            sppf,
            lateral5,
            td4,
            lateral4,
            td3,
            down3,
            bu4,
            down4,
            bu5,
            heads,
        })
    }

    /// Switches the SE block on or off without touching its weights.
    pub fn set_se_active(&mut self, on: bool) {
        self.se_active = on;
    }

    pub fn se_active(&self) -> bool {
        self.se_active
    }

    /// Space-to-depth slicing followed by the stem CBS.
    pub fn stem_forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.graph.space_to_depth(x)?;
        self.stem.forward(ctx, s)
    }

    /// Records the full forward pass and returns the three head maps.
    pub fn forward_graph(&self, ctx: &mut Ctx, images: Var) -> Result<[Var; NUM_SCALES]> {
        let shape = ctx.graph.shape(images);
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::ShapeMismatch {
                op: "detector input",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), 3, s, s],
            });
        }
        let mut x = self.stem_forward(ctx, images)?;
        let mut feats = Vec::with_capacity(4);
        for (i, st) in self.stages.iter().enumerate() {
            x = st.down.forward(ctx, x)?;
            x = st.csp.forward(ctx, x)?;
            if self.se_active && i == self.config.se_stage {
                x = self.se.forward(ctx, x)?;
            }
            feats.push(x);
        }
        let p5 = self.sppf.forward(ctx, feats[3])?;

        let h5 = self.lateral5.forward(ctx, p5)?;
        let up = ctx.graph.upsample_nearest2x(h5)?;
        let cat = ctx.graph.concat_channels(&[up, feats[2]])?;
        let t4 = self.td4.forward(ctx, cat)?;
        let h4 = self.lateral4.forward(ctx, t4)?;
        let up = ctx.graph.upsample_nearest2x(h4)?;
        let cat = ctx.graph.concat_channels(&[up, feats[1]])?;
        let o3 = self.td3.forward(ctx, cat)?;

        let dn = self.down3.forward(ctx, o3)?;
        let cat = ctx.graph.concat_channels(&[dn, h4])?;
        let o4 = self.bu4.forward(ctx, cat)?;
        let dn = self.down4.forward(ctx, o4)?;
        let cat = ctx.graph.concat_channels(&[dn, h5])?;
        let o5 = self.bu5.forward(ctx, cat)?;

        Ok([
            self.heads[0].forward(ctx, o3)?,
            self.heads[1].forward(ctx, o4)?,
            self.heads[2].forward(ctx, o5)?,
        ])
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, images: &Tensor) -> Result<RawPredictions> {
        let mut ctx = Ctx::inference();
        let x = ctx.graph.constant(images.clone());
        let [a, b, c] = self.forward_graph(&mut ctx, x)?;
        let g = &ctx.graph;
        let maps = [g.value(a).clone(), g.value(b).clone(), g.value(c).clone()];
        if let Some(m) = maps.iter().find(|m| !m.all_finite()) {
            return Err(Error::NonFinite(format!(
                "detector output of shape {:?} contains non-finite values",
                m.shape()
            )));
        }
        Ok(RawPredictions { maps })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::nn::save_params(self, dir)?;
        let path = dir.join("network.json");
        let text = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = NetworkConfig::load(&dir.join("network.json"))?;
        let mut model = Self::build(config)?;
        crate::nn::load_params(&mut model, dir)?;
        Ok(model)
    }
}

/// Starting biases: objectness near the expected object density of each
/// scale, classes near a uniform prior.
fn prior_bias(head: &mut Conv2d, cfg: &NetworkConfig, scale: usize) {
    let cells = (cfg.grid_size(scale) * cfg.grid_size(scale)) as f64;
    let obj = (8.0 / cells).ln();
    let cls = (0.6 / (cfg.num_classes as f64 - 0.99)).ln();
    let per = cfg.outputs_per_anchor();
    let bias = head.bias.as_mut().expect("heads carry a bias");
    for (i, b) in bias.value.data_mut().iter_mut().enumerate() {
        match i % per {
            4 => *b += obj,
            k if k >= BOX_FIELDS => *b += cls,
            _ => {}
        }
    }
}

impl Module for DetectorModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, st) in self.stages.iter().enumerate() {
            st.down.visit(&join(prefix, &format!("stage{i}.down")), f);
            st.csp.visit(&join(prefix, &format!("stage{i}.csp")), f);
        }
        self.se.visit(&join(prefix, "se"), f);
        self.sppf.visit(&join(prefix, "sppf"), f);
        self.lateral5.visit(&join(prefix, "lateral5"), f);
        self.td4.visit(&join(prefix, "td4"), f);
        self.lateral4.visit(&join(prefix, "lateral4"), f);
        self.td3.visit(&join(prefix, "td3"), f);
        self.down3.visit(&join(prefix, "down3"), f);
        self.bu4.visit(&join(prefix, "bu4"), f);
        self.down4.visit(&join(prefix, "down4"), f);
        self.bu5.visit(&join(prefix, "bu5"), f);
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("head{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, st) in self.stages.iter_mut().enumerate() {
            st.down.visit_mut(&join(prefix, &format!("stage{i}.down")), f);
            st.csp.visit_mut(&join(prefix, &format!("stage{i}.csp")), f);
        }
        self.se.visit_mut(&join(prefix, "se"), f);
        self.sppf.visit_mut(&join(prefix, "sppf"), f);
        self.lateral5.visit_mut(&join(prefix, "lateral5"), f);
        self.td4.visit_mut(&join(prefix, "td4"), f);
        self.lateral4.visit_mut(&join(prefix, "lateral4"), f);
        self.td3.visit_mut(&join(prefix, "td3"), f);
        self.down3.visit_mut(&join(prefix, "down3"), f);
        self.bu4.visit_mut(&join(prefix, "bu4"), f);
        self.down4.visit_mut(&join(prefix, "down4"), f);
        self.bu5.visit_mut(&join(prefix, "bu5"), f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("head{i}")), f);
        }
    }
}
