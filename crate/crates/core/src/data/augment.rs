//! Seeded mosaic and random-affine augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{letterbox_image, Image, PAD_VALUE};
use super::{Annotation, Sample};
use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Boxes keeping less than this fraction of their area after clipping are
/// dropped.
pub const MIN_VISIBLE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub mosaic_prob: f64,
    /// Extra zoom applied on top of quadrant-covering scale, drawn from `[1, 1 + j]`.
    pub mosaic_jitter: f64,
    /// Rotation drawn from `[-degrees, degrees]`.
    pub degrees: f64,
    /// Translation drawn from `[-t, t]` times the image size.
    pub translate: f64,
    pub scale: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mosaic_prob: 1.0,
            mosaic_jitter: 0.25,
            degrees: 0.0,
            translate: 0.1,
            scale: [0.5, 1.5],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.mosaic_prob) {
            return bad(format!("augment.mosaic_prob must lie in [0, 1], got {}", self.mosaic_prob));
        }
        if !(self.scale[0] > 0.0 && self.scale[0] <= self.scale[1] && self.scale[1].is_finite()) {
            return bad(format!("augment.scale must be a positive range, got {:?}", self.scale));
        }
        if !(self.mosaic_jitter >= 0.0 && self.mosaic_jitter.is_finite()) {
            return bad(format!("augment.mosaic_jitter must be non-negative, got {}", self.mosaic_jitter));
        }
        if !(self.degrees >= 0.0 && self.degrees <= 180.0) {
            return bad(format!("augment.degrees must lie in [0, 180], got {}", self.degrees));
        }
        if !(0.0..=1.0).contains(&self.translate) {
            return bad(format!("augment.translate must lie in [0, 1], got {}", self.translate));
        }
        Ok(())
    }
}

/// Clips `b` to the rectangle `[x0, x1] × [y0, y1]`; `None` when what is left
/// is empty or smaller than [`MIN_VISIBLE_FRACTION`] of `reference_area`.
pub fn clip_box(b: &BBox, rect: [f64; 4], reference_area: f64) -> Option<BBox> {
    let [bx0, by0, bx1, by1] = b.corners();
    let x0 = bx0.max(rect[0]);
    let y0 = by0.max(rect[1]);
    let x1 = bx1.min(rect[2]);
    let y1 = by1.min(rect[3]);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let clipped = BBox::from_corners(x0, y0, x1, y1);
    (clipped.area() >= MIN_VISIBLE_FRACTION * reference_area).then_some(clipped)
}

/// Letterboxes a sample to `target`, moving its boxes along.
pub fn letterbox_sample(sample: &Sample, target: usize) -> Sample {
    let (image, lb) = letterbox_image(&sample.image, target);
    let frame = [0.0, 0.0, target as f64, target as f64];
    let objects = sample
        .annotation
        .objects
        .iter()
        .filter_map(|(b, c)| {
            let m = lb.apply(b);
            clip_box(&m, frame, m.area()).map(|b| (b, *c))
        })
        .collect();
    Sample {
        image,
        annotation: Annotation {
            image: sample.annotation.image.clone(),
            width: target,
            height: target,
            objects,
        },
    }
}

/// Fixed choices of one mosaic: the split point on the `2·target` canvas and
/// each quadrant's extra zoom (≥ 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MosaicParams {
    pub center: (usize, usize),
    pub zoom: [f64; 4],
}

impl MosaicParams {
    pub fn sample(target: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let lo = target / 2;
        let hi = 3 * target / 2;
        let center = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let mut zoom = [1.0; 4];
        for z in &mut zoom {
            *z = 1.0 + cfg.mosaic_jitter * rng.random::<f64>();
        }
        Self { center, zoom }
    }
}

/// Stitches four samples around `params.center` on a `2·target` canvas,
/// then halves it to `target`. Quadrants are top-left, top-right,
/// bottom-left, bottom-right; each source is scaled to cover its quadrant
/// and anchored at the center point.
pub fn mosaic_with(samples: [&Sample; 4], target: usize, params: &MosaicParams) -> Sample {
    let big = 2 * target;
    let (xc, yc) = params.center;
    let (xc, yc) = (xc.clamp(1, big - 1), yc.clamp(1, big - 1));
    let mut canvas = Image::filled(big, big, [PAD_VALUE; 3]);
    let mut objects = Vec::new();
    let quads = [
        [0, 0, xc, yc],
        [xc, 0, big, yc],
        [0, yc, xc, big],
        [xc, yc, big, big],
    ];
    for (q, (sample, rect)) in samples.iter().zip(quads).enumerate() {
        let [qx0, qy0, qx1, qy1] = rect;
        let (qw, qh) = (qx1 - qx0, qy1 - qy0);
        let src = &sample.image;
        let s = (qw as f64 / src.width as f64).max(qh as f64 / src.height as f64) * params.zoom[q];
        let nw = ((src.width as f64 * s).ceil() as usize).max(qw);
        let nh = ((src.height as f64 * s).ceil() as usize).max(qh);
        let resized = src.resize(nw, nh);
        // the corner touching the center point stays fixed
        let ox = if q % 2 == 0 { xc as i64 - nw as i64 } else { xc as i64 };
        let oy = if q < 2 { yc as i64 - nh as i64 } else { yc as i64 };
        for y in qy0..qy1 {
            let sy = (y as i64 - oy) as usize;
            for x in qx0..qx1 {
                let sx = (x as i64 - ox) as usize;
                canvas.put_pixel(y, x, resized.pixel(sy, sx));
            }
        }
        let (fx, fy) = (nw as f64 / src.width as f64, nh as f64 / src.height as f64);
        let region = [qx0 as f64, qy0 as f64, qx1 as f64, qy1 as f64];
        for (b, c) in &sample.annotation.objects {
            let m = BBox::new(b.x * fx + ox as f64, b.y * fy + oy as f64, b.w * fx, b.h * fy);
            if let Some(kept) = clip_box(&m, region, m.area()) {
                objects.push((kept, *c));
            }
        }
    }
    let image = canvas.resize(target, target);
    let objects = objects
        .into_iter()
        .map(|(b, c)| (BBox::new(b.x / 2.0, b.y / 2.0, b.w / 2.0, b.h / 2.0), c))
        .collect();
    Sample {
        image,
        annotation: Annotation {
            image: "mosaic".into(),
            width: target,
            height: target,
            objects,
        },
    }
}

pub fn mosaic(samples: [&Sample; 4], target: usize, cfg: &AugmentConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = MosaicParams::sample(target, cfg, &mut rng);
    mosaic_with(samples, target, &params)
}

/// Rotation (degrees, counter-clockwise on screen), isotropic scale, both about
/// the image center, then a translation in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub degrees: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: Self = Self {
        degrees: 0.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn sample(width: usize, height: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let degrees = sym(rng, cfg.degrees);
        let scale = if cfg.scale[0] < cfg.scale[1] {
            rng.random_range(cfg.scale[0]..=cfg.scale[1])
        } else {
            cfg.scale[0]
        };
        let tx = sym(rng, cfg.translate) * width as f64;
        let ty = sym(rng, cfg.translate) * height as f64;
        Self { degrees, scale, tx, ty }
    }

    /// Row-major 2×3 forward matrix for an image of the given size.
    fn matrix(&self, width: usize, height: usize) -> [[f64; 3]; 2] {
        let (sin, cos) = (-self.degrees.to_radians()).sin_cos();
        let (a, b) = (self.scale * cos, -self.scale * sin);
        let (c, d) = (self.scale * sin, self.scale * cos);
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        [
            [a, b, cx + self.tx - a * cx - b * cy],
            [c, d, cy + self.ty - c * cx - d * cy],
        ]
    }
}

fn apply(m: &[[f64; 3]; 2], x: f64, y: f64) -> (f64, f64) {
    (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
}

/// Warps the image with nearest-neighbour sampling at pixel centers and maps
/// the boxes through their four corners.
pub fn affine_with(sample: &Sample, params: &AffineParams) -> Sample {
    let (w, h) = (sample.image.width, sample.image.height);
    let m = params.matrix(w, h);
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv_lin = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let mut out = Image::filled(w, h, [PAD_VALUE; 3]);
    for y in 0..h {
        for x in 0..w {
            let (qx, qy) = (x as f64 + 0.5 - m[0][2], y as f64 + 0.5 - m[1][2]);
            let px = inv_lin[0][0] * qx + inv_lin[0][1] * qy;
            let py = inv_lin[1][0] * qx + inv_lin[1][1] * qy;
            let (fx, fy) = (px.floor(), py.floor());
            if fx >= 0.0 && fy >= 0.0 && (fx as usize) < w && (fy as usize) < h {
                out.put_pixel(y, x, sample.image.pixel(fy as usize, fx as usize));
            }
        }
    }
    let frame = [0.0, 0.0, w as f64, h as f64];
    let objects = sample
        .annotation
        .objects
        .iter()
        .filter_map(|(b, c)| {
            let [x0, y0, x1, y1] = b.corners();
            let pts = [apply(&m, x0, y0), apply(&m, x1, y0), apply(&m, x0, y1), apply(&m, x1, y1)];
            let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let moved = BBox::from_corners(min_x, min_y, max_x, max_y);
            clip_box(&moved, frame, moved.area()).map(|b| (b, *c))
        })
        .collect();
    Sample {
        image: out,
        annotation: Annotation {
            objects,
            ..sample.annotation.clone()
        },
    }
}

pub fn random_affine(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AffineParams::sample(sample.image.width, sample.image.height, cfg, &mut rng);
    affine_with(sample, &params)
}

/// Training view of `pool[index]` at `target × target`: mosaic with three
/// seeded partners (with probability `mosaic_prob`) or a plain letterbox,
/// then a random affine. With augmentation disabled this is the letterbox
/// alone.
pub fn training_sample(pool: &[Sample], index: usize, target: usize, cfg: &AugmentConfig, seed: u64) -> Sample {
    let base = letterbox_sample(&pool[index], target);
    if !cfg.enabled {
        return base;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stitched = if rng.random::<f64>() < cfg.mosaic_prob {
        let picks: Vec<usize> = (0..3).map(|_| rng.random_range(0..pool.len())).collect();
        let others: Vec<&Sample> = picks.iter().map(|&i| &pool[i]).collect();
        let mseed = rng.random();
        mosaic([&pool[index], others[0], others[1], others[2]], target, cfg, mseed)
    } else {
        base
    };
    let params = AffineParams::sample(target, target, cfg, &mut rng);
    let mut out = affine_with(&stitched, &params);
    out.annotation.image = pool[index].annotation.image.clone();
    out
}
