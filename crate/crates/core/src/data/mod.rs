//! Annotations, datasets on disk, augmentation, anchor clustering and
//! synthetic scenes.

pub mod anchors;
pub mod augment;
pub mod draw;
pub mod image;
pub mod labelme;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

pub use self::image::{letterbox_image, Image, Letterbox, PAD_VALUE};

/// Ordered class names; a label's index is its class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary(pub Vec<String>);

pub const DEFAULT_CLASSES: [&str; 7] = ["uphead", "uphand", "reading", "writing", "stand", "turn", "discuss"];

impl Default for Vocabulary {
    fn default() -> Self {
        Self(DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect())
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.0.iter().position(|n| n == label)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.0[id]
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidConfig("classes: vocabulary is empty".into()));
        }
        for (i, n) in self.0.iter().enumerate() {
            if self.0[..i].contains(n) {
                return Err(Error::InvalidConfig(format!("classes: duplicate name `{n}`")));
            }
        }
        Ok(())
    }
}

/// Boxes of one image, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<(BBox, usize)>,
}

impl Annotation {
    pub fn empty(image: impl Into<String>, width: usize, height: usize) -> Self {
        Self {
            image: image.into(),
            width,
            height,
            objects: Vec::new(),
        }
    }

    /// Every box inside the frame with positive area and a known class.
    pub fn check(&self, num_classes: usize) -> Result<()> {
        for (b, c) in &self.objects {
            if *c >= num_classes {
                return Err(Error::MalformedAnnotation(format!(
                    "{}: class id {c} outside a {num_classes}-class vocabulary",
                    self.image
                )));
            }
            let [x0, y0, x1, y1] = b.corners();
            let tol = 1e-6;
            if !(b.w > 0.0 && b.h > 0.0)
                || x0 < -tol
                || y0 < -tol
                || x1 > self.width as f64 + tol
                || y1 > self.height as f64 + tol
            {
                return Err(Error::OutOfBounds(b.corners(), self.width, self.height));
            }
        }
        Ok(())
    }
}

/// One training or evaluation item.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub annotation: Annotation,
}

/// Resolved paths of one manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub annotation: PathBuf,
}

/// Writes `image<TAB>annotation` lines, paths relative to the manifest's
/// directory where possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    };
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\n", rel(&e.image), rel(&e.annotation)));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a manifest; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(img), Some(ann), None) if !img.is_empty() && !ann.is_empty() => out.push(ManifestEntry {
                image: base.join(img),
                annotation: base.join(ann),
            }),
            _ => {
                return Err(Error::MalformedAnnotation(format!(
                    "{}:{}: expected `image<TAB>annotation`",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Loads one manifest entry and checks the annotation against the image.
pub fn load_sample(entry: &ManifestEntry, vocab: &Vocabulary) -> Result<Sample> {
    let image = Image::read_ppm(&entry.image)?;
    let annotation = labelme::read_labelme(&entry.annotation, vocab)?;
    if (annotation.width, annotation.height) != (image.width, image.height) {
        return Err(Error::MalformedAnnotation(format!(
            "{}: annotation says {}x{}, image is {}x{}",
            entry.annotation.display(),
            annotation.width,
            annotation.height,
            image.width,
            image.height
        )));
    }
    Ok(Sample { image, annotation })
}

/// Loads every sample of a manifest, in order.
pub fn load_dataset(manifest: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let entries = read_manifest(manifest)?;
    crate::par::map_slice(&entries, |e| load_sample(e, vocab))
        .into_iter()
        .collect()
}
