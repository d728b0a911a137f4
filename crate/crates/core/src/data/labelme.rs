//! Rectangle annotations in labelme's JSON layout.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{Annotation, Vocabulary};
use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Parses a labelme document. Shapes without `shape_type` count as
/// rectangles; any other shape type is rejected.
pub fn parse_labelme(text: &str, vocab: &Vocabulary) -> Result<Annotation> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| Error::MalformedAnnotation(format!("invalid JSON: {e}")))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::MalformedAnnotation("top level is not an object".into()))?;
    let dim = |key: &'static str| -> Result<usize> {
        let v = obj.get(key).ok_or(Error::MissingField(key))?;
        v.as_u64()
            .filter(|&n| n > 0)
            .map(|n| n as usize)
            .ok_or_else(|| Error::MalformedAnnotation(format!("`{key}` must be a positive integer, got {v}")))
    };
    let width = dim("imageWidth")?;
    let height = dim("imageHeight")?;
    let image = obj.get("imagePath").and_then(Value::as_str).unwrap_or("").to_string();
    let shapes = obj
        .get("shapes")
        .ok_or(Error::MissingField("shapes"))?
        .as_array()
        .ok_or_else(|| Error::MalformedAnnotation("`shapes` is not an array".into()))?;

    let mut objects = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        let label = shape
            .get("label")
            .ok_or(Error::MissingField("label"))?
            .as_str()
            .ok_or_else(|| Error::MalformedAnnotation(format!("shape {i}: `label` is not a string")))?;
        match shape.get("shape_type") {
            None | Some(Value::Null) => {}
            Some(Value::String(t)) if t == "rectangle" => {}
            Some(t) => {
                return Err(Error::MalformedAnnotation(format!(
                    "shape {i}: only rectangles are supported, got shape_type {t}"
                )))
            }
        }
        let points = shape
            .get("points")
            .ok_or(Error::MissingField("points"))?
            .as_array()
            .ok_or_else(|| Error::MalformedAnnotation(format!("shape {i}: `points` is not an array")))?;
        let pts: Vec<[f64; 2]> = points
            .iter()
            .map(|p| match p.as_array().map(|a| a.as_slice()) {
                Some([x, y]) => match (x.as_f64(), y.as_f64()) {
                    (Some(x), Some(y)) if x.is_finite() && y.is_finite() => Ok([x, y]),
                    _ => Err(()),
                },
                _ => Err(()),
            })
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::MalformedAnnotation(format!("shape {i}: points must be [x, y] number pairs")))?;
        if pts.len() != 2 {
            return Err(Error::MalformedAnnotation(format!(
                "shape {i}: a rectangle needs 2 points, got {}",
                pts.len()
            )));
        }
        let class_id = vocab.index(label).ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        let bbox = BBox::from_corners(pts[0][0], pts[0][1], pts[1][0], pts[1][1]);
        if bbox.w <= 0.0 || bbox.h <= 0.0 {
            return Err(Error::DegenerateRectangle {
                label: label.to_string(),
                width: bbox.w,
                height: bbox.h,
            });
        }
        objects.push((bbox, class_id));
    }
    let ann = Annotation {
        image,
        width,
        height,
        objects,
    };
    ann.check(vocab.len())?;
    Ok(ann)
}

pub fn read_labelme(path: &Path, vocab: &Vocabulary) -> Result<Annotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labelme(&text, vocab).map_err(|e| match e {
        Error::MalformedAnnotation(m) => Error::MalformedAnnotation(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Serialize)]
struct Doc<'a> {
    version: &'static str,
    flags: serde_json::Map<String, Value>,
    shapes: Vec<Shape<'a>>,
    #[serde(rename = "imagePath")]
    image_path: &'a str,
    #[serde(rename = "imageData")]
    image_data: Option<()>,
    #[serde(rename = "imageHeight")]
    image_height: usize,
    #[serde(rename = "imageWidth")]
    image_width: usize,
}

#[derive(Serialize)]
struct Shape<'a> {
    label: &'a str,
    points: [[f64; 2]; 2],
    group_id: Option<()>,
    shape_type: &'static str,
    flags: serde_json::Map<String, Value>,
}

pub fn to_labelme(ann: &Annotation, vocab: &Vocabulary) -> String {
    let shapes = ann
        .objects
        .iter()
        .map(|(b, c)| {
            let [x0, y0, x1, y1] = b.corners();
            Shape {
                label: vocab.name(*c),
                points: [[x0, y0], [x1, y1]],
                group_id: None,
                shape_type: "rectangle",
                flags: Default::default(),
            }
        })
        .collect();
    let doc = Doc {
        version: "5.0.1",
        flags: Default::default(),
        shapes,
        image_path: &ann.image,
        image_data: None,
        image_height: ann.height,
        image_width: ann.width,
    };
    serde_json::to_string_pretty(&doc).expect("annotation serializes")
}

pub fn write_labelme(path: &Path, ann: &Annotation, vocab: &Vocabulary) -> Result<()> {
    std::fs::write(path, to_labelme(ann, vocab)).map_err(|e| Error::io(path, e))
}
