//! Synthetic scenes: one geometric glyph per class on a textured background.

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::{Annotation, Sample, Vocabulary};
use crate::boxes::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side lengths in whole pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Relative class frequencies; empty means uniform.
    pub class_weights: Vec<f64>,
    /// Free pixels kept between glyphs.
    pub gap: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 160,
            height: 160,
            min_objects: 1,
            max_objects: 4,
            min_size: 24,
            max_size: 56,
            class_weights: Vec::new(),
            gap: 2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.width == 0 || self.height == 0 {
            return bad("scene width and height must be positive".into());
        }
        if self.min_objects > self.max_objects {
            return bad("scene.min_objects exceeds max_objects".into());
        }
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size > self.width.min(self.height) {
            return bad(format!(
                "scene sizes must satisfy 2 <= min_size <= max_size <= image side, got {}..{}",
                self.min_size, self.max_size
            ));
        }
        if !self.class_weights.is_empty() {
            if self.class_weights.len() != num_classes {
                return bad(format!(
                    "scene.class_weights has {} entries for {num_classes} classes",
                    self.class_weights.len()
                ));
            }
            if self.class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
                || self.class_weights.iter().sum::<f64>() <= 0.0
            {
                return bad("scene.class_weights must be non-negative with a positive sum".into());
            }
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Colour of class `c`; classes past the seventh reuse the palette darkened.
pub fn class_color(c: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 7] = [
        [0.90, 0.10, 0.10],
        [0.10, 0.80, 0.20],
        [0.15, 0.25, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.15, 0.85],
        [0.10, 0.85, 0.90],
        [1.00, 0.55, 0.05],
    ];
    let base = PALETTE[c % 7];
    let dim = 0.7f64.powi((c / 7) as i32);
    base.map(|v| quantize(v * dim))
}

/// Whether the point `(u, v)` in the unit square belongs to glyph `c`.
fn inside(c: usize, u: f64, v: f64) -> bool {
    let (du, dv) = (u - 0.5, v - 0.5);
    match c % 7 {
        // disc
        0 => du * du + dv * dv <= 0.25,
        // upward triangle
        1 => (du.abs() * 2.0) <= v,
        // solid block with a vertical slot
        2 => !(du.abs() < 0.08 && dv.abs() < 0.35),
        // diamond
        3 => du.abs() + dv.abs() <= 0.5,
        // plus
        4 => du.abs() <= 0.17 || dv.abs() <= 0.17,
        // ring
        5 => {
            let r2 = du * du + dv * dv;
            (0.09..=0.25).contains(&r2)
        }
        // checkerboard
        _ => ((u * 4.0).floor() as i64 + (v * 4.0).floor() as i64) % 2 == 0,
    }
}

fn background(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Image {
    let base = [
        rng.random_range(0.30..0.55),
        rng.random_range(0.30..0.55),
        rng.random_range(0.30..0.55),
    ];
    let period = rng.random_range(6.0..14.0);
    let mut img = Image::filled(width, height, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            let stripe = 0.04 * ((x + y) as f64 / period * std::f64::consts::TAU).sin();
            let noise = rng.random_range(-0.03..0.03);
            img.put_pixel(y, x, base.map(|b| quantize(b + stripe + noise)));
        }
    }
    img
}

/// Paints glyph `class` filling the integer-pixel box `b`.
pub fn draw_glyph(img: &mut Image, b: &BBox, class: usize) {
    let [x0, y0, x1, y1] = b.corners();
    let (x0, y0) = (x0.round().max(0.0) as usize, y0.round().max(0.0) as usize);
    let (x1, y1) = (
        (x1.round() as usize).min(img.width),
        (y1.round() as usize).min(img.height),
    );
    let (w, h) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let color = class_color(class);
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x - x0) as f64 / (w - 1.0).max(1.0);
            let v = (y - y0) as f64 / (h - 1.0).max(1.0);
            if inside(class, u, v) {
                img.put_pixel(y, x, color);
            }
        }
    }
}

/// Background from `seed` with the given boxes drawn on it.
pub fn render_scene(cfg: &SceneConfig, objects: &[(BBox, usize)], seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = background(cfg.width, cfg.height, &mut rng);
    for (b, c) in objects {
        draw_glyph(&mut image, b, *c);
    }
    Sample {
        image,
        annotation: Annotation {
            image: format!("scene_{seed}"),
            width: cfg.width,
            height: cfg.height,
            objects: objects.to_vec(),
        },
    }
}

fn overlaps(a: &BBox, b: &BBox, gap: f64) -> bool {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    ax0 < bx1 + gap && bx0 < ax1 + gap && ay0 < by1 + gap && by0 < ay1 + gap
}

/// Draws a seeded scene: object count, classes, sizes and non-overlapping
/// integer positions. A glyph that finds no free spot after 200 tries is
/// left out.
pub fn generate_scene(cfg: &SceneConfig, vocab: &Vocabulary, seed: u64) -> Result<Sample> {
    cfg.validate(vocab.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9e);
    let weights = if cfg.class_weights.is_empty() {
        vec![1.0; vocab.len()]
    } else {
        cfg.class_weights.clone()
    };
    let classes = WeightedIndex::new(&weights).map_err(|e| Error::InvalidConfig(format!("scene.class_weights: {e}")))?;
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<(BBox, usize)> = Vec::with_capacity(n);
    for _ in 0..n {
        let class = classes.sample(&mut rng);
        let w = rng.random_range(cfg.min_size..=cfg.max_size);
        let h = rng.random_range(cfg.min_size..=cfg.max_size);
        for _ in 0..200 {
            let x0 = rng.random_range(0..=cfg.width - w);
            let y0 = rng.random_range(0..=cfg.height - h);
            let b = BBox::from_corners(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
            if objects.iter().all(|(o, _)| !overlaps(o, &b, cfg.gap as f64)) {
                objects.push((b, class));
                break;
            }
        }
    }
    Ok(render_scene(cfg, &objects, seed))
}
