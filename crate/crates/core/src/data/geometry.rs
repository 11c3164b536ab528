use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IoU above which a body box counts as overlapping a face box for the
/// ambiguity rule in [`assign_labels_by_face_overlap`].
pub const DEFAULT_FACE_IOU_THRESHOLD: f64 = 0.75;

/// Axis-aligned pixel box with `x_min < x_max` and `y_min < y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::invalid(format!(
                "box coordinates must be finite and non-negative: {coords:?}"
            )));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::invalid(format!(
                "degenerate box (zero area): {coords:?}"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BoundingBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Intersection over union. Both boxes have positive area by construction.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Labels each body box with the subject of the face box it overlaps most.
///
/// A body box is left unlabeled when it has zero overlap with every face,
/// when it exceeds `threshold` IoU with two or more face boxes, or when the
/// maximum IoU is shared by faces of different subjects (so the result does
/// not depend on face order).
pub fn assign_labels_by_face_overlap(
    body_boxes: &[BoundingBox],
    face_boxes: &[(BoundingBox, String)],
    threshold: f64,
) -> Result<Vec<(BoundingBox, Option<String>)>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let labeled = body_boxes
        .iter()
        .map(|body| {
            let mut best = 0.0f64;
            let mut best_subjects: Vec<&str> = Vec::new();
            let mut above = 0usize;
            for (face, subject) in face_boxes {
                let v = iou(body, face);
                if v > threshold {
                    above += 1;
                }
                if v > best {
                    best = v;
                    best_subjects.clear();
                    best_subjects.push(subject);
                } else if v == best && v > 0.0 {
                    best_subjects.push(subject);
                }
            }
            best_subjects.sort_unstable();
            best_subjects.dedup();
            let label = if above >= 2 || best == 0.0 || best_subjects.len() != 1 {
                None
            } else {
                Some(best_subjects[0].to_string())
            };
            (*body, label)
        })
        .collect();
    Ok(labeled)
}
