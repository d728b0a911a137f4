//! Anchor sizes from k-means over box shapes with a `1 − IoU` distance.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;

/// IoU of two boxes sharing a center.
pub fn shape_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = a[0].min(b[0]) * a[1].min(b[1]);
    let union = a[0] * a[1] + b[0] * b[1] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn shape_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    1.0 - shape_iou(a, b)
}

fn nearest(b: [f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &c) in centroids.iter().enumerate() {
        let d = shape_distance(b, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Mean over boxes of the distance to the closest anchor.
pub fn mean_distortion(boxes: &[[f64; 2]], anchors: &[[f64; 2]]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    boxes.iter().map(|&b| nearest(b, anchors).1).sum::<f64>() / boxes.len() as f64
}

/// Anchor sizes sorted by ascending area, consecutive groups of three per
/// detection scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<[f64; 2]>,
}

impl AnchorSet {
    pub fn new(mut anchors: Vec<[f64; 2]>) -> Result<Self> {
        if anchors.is_empty() || !anchors.len().is_multiple_of(3) {
            return Err(Error::InvalidArgument(format!(
                "anchor count must be a positive multiple of 3, got {}",
                anchors.len()
            )));
        }
        if anchors.iter().flatten().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("anchor sizes must be positive".into()));
        }
        anchors.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])));
        Ok(Self { anchors })
    }

    pub fn scale(&self, s: usize) -> &[[f64; 2]] {
        let per = self.anchors.len() / 3;
        &self.anchors[s * per..(s + 1) * per]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("anchors serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: AnchorSet = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::new(raw.anchors)
    }
}

fn plus_plus_init(boxes: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centroids = vec![boxes[rng.random_range(0..boxes.len())]];
    while centroids.len() < k {
        let d2: Vec<f64> = boxes.iter().map(|&b| nearest(b, &centroids).1.powi(2)).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..boxes.len())
        };
        centroids.push(boxes[pick]);
    }
    centroids
}

/// Clusters `(w, h)` shapes into `k` anchors. Seeded k-means++ start, then
/// Lloyd iterations until assignments stop changing. An emptied cluster is
/// moved onto the box farthest from its current centroid.
pub fn kmeans_anchors(boxes: &[[f64; 2]], k: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if boxes.len() < k {
        return Err(Error::InsufficientBoxes {
            needed: k,
            got: boxes.len(),
        });
    }
    if boxes.iter().flatten().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("box sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(boxes, k, &mut rng);
    let mut assign: Vec<usize> = vec![usize::MAX; boxes.len()];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        let mut dist = vec![0.0; boxes.len()];
        for (i, &b) in boxes.iter().enumerate() {
            let (c, d) = nearest(b, &centroids);
            dist[i] = d;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..boxes.len())
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&i, &j| dist[i].total_cmp(&dist[j]).then(j.cmp(&i)));
                if let Some(i) = far {
                    counts[assign[i]] -= 1;
                    assign[i] = c;
                    counts[c] = 1;
                    dist[i] = 0.0;
                    changed = true;
                }
            }
        }
        // running means stay exact when every member is identical
        let mut next = vec![[0.0; 2]; k];
        let mut seen = vec![0usize; k];
        for (&b, &a) in boxes.iter().zip(&assign) {
            seen[a] += 1;
            let n = seen[a] as f64;
            next[a][0] += (b[0] - next[a][0]) / n;
            next[a][1] += (b[1] - next[a][1]) / n;
        }
        for c in 0..k {
            if seen[c] > 0 {
                centroids[c] = next[c];
            }
        }
        if !changed {
            break;
        }
    }
    centroids.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])).then(a[0].total_cmp(&b[0])));
    Ok(centroids)
}
