//! Axis-aligned boxes, IoU, non-maximum suppression and VOC-style matching.
//!
//! Boxes use continuous pixel coordinates with `area = (x_max - x_min) * (y_max - y_min)`;
//! there is no `+1` pixel adjustment anywhere.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image/RoI class with the fixed total order `background < class_1 < class_2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "background")]
    Background,
    #[serde(rename = "class_1", alias = "benign")]
    Class1,
    #[serde(rename = "class_2", alias = "malignant")]
    Class2,
}

impl ClassLabel {
    pub const COUNT: usize = 3;
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Background, ClassLabel::Class1, ClassLabel::Class2];
    pub const FOREGROUND: [ClassLabel; 2] = [ClassLabel::Class1, ClassLabel::Class2];

    /// Column of this class in a score row.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Background => 0,
            ClassLabel::Class1 => 1,
            ClassLabel::Class2 => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ClassLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn is_background(self) -> bool {
        self == ClassLabel::Background
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Background => "background",
            ClassLabel::Class1 => "class_1",
            ClassLabel::Class2 => "class_2",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "background" => Ok(ClassLabel::Background),
            "class_1" | "benign" => Ok(ClassLabel::Class1),
            "class_2" | "malignant" => Ok(ClassLabel::Class2),
            other => Err(Error::invalid(format!("unknown class label {other:?}"))),
        }
    }
}

/// Axis-aligned box with strictly positive area and finite coordinates.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
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
        Self::try_new(x_min, y_min, x_max, y_max).ok_or_else(|| {
            Error::invalid(format!(
                "degenerate or non-finite box ({x_min}, {y_min}, {x_max}, {y_max})"
            ))
        })
    }

    /// Like [`BoundingBox::new`] but returns `None` for degenerate input.
    pub fn try_new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Option<Self> {
        let finite = x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite();
        (finite && x_min < x_max && y_min < y_max).then_some(BoundingBox {
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

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Clip to `[0, width] x [0, height]`; `None` if nothing with positive area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BoundingBox> {
        BoundingBox::try_new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    /// Mirror across the vertical axis of an image of the given width.
    pub fn flip_horizontal(&self, image_width: f64) -> BoundingBox {
        BoundingBox {
            x_min: image_width - self.x_max,
            y_min: self.y_min,
            x_max: image_width - self.x_min,
            y_max: self.y_max,
        }
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
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

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, and exactly 1 for identical boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A scored, class-labelled prediction. The label is never background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection", into = "RawDetection")]
pub struct Detection {
    pub bbox: BoundingBox,
    pub label: ClassLabel,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
struct RawDetection {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    label: ClassLabel,
    score: f64,
}

impl TryFrom<RawDetection> for Detection {
    type Error = Error;

    fn try_from(r: RawDetection) -> Result<Self> {
        Detection::new(r.bbox, r.label, r.score)
    }
}

impl From<Detection> for RawDetection {
    fn from(d: Detection) -> Self {
        RawDetection {
            bbox: d.bbox,
            label: d.label,
            score: d.score,
        }
    }
}

impl Detection {
    pub fn new(bbox: BoundingBox, label: ClassLabel, score: f64) -> Result<Self> {
        if label.is_background() {
            return Err(Error::invalid("detection label must not be background"));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Detection { bbox, label, score })
    }
}

/// A strong annotation: one box plus its class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsMode {
    ClassAgnostic,
    PerClass,
}

/// Indices in descending score order; equal scores keep input order.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap_or(Ordering::Equal));
    order
}

/// Greedy NMS over raw boxes. Returns kept indices in descending score order.
///
/// When `classes` is given, suppression only happens between equal classes.
pub fn nms_indices(
    boxes: &[BoundingBox],
    scores: &[f64],
    classes: Option<&[ClassLabel]>,
    iou_threshold: f64,
) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        let suppressed = kept.iter().any(|&k| {
            let same_class = classes.is_none_or(|c| c[k] == c[i]);
            same_class && iou(&boxes[k], &boxes[i]) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[Detection], iou_threshold: f64, mode: NmsMode) -> Vec<Detection> {
    let boxes: Vec<BoundingBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let labels: Vec<ClassLabel> = dets.iter().map(|d| d.label).collect();
    let classes = match mode {
        NmsMode::ClassAgnostic => None,
        NmsMode::PerClass => Some(labels.as_slice()),
    };
    nms_indices(&boxes, &scores, classes, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Per-image outcome of matching detections against the single ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    /// Some detection overlaps the GT above the threshold, whatever its label.
    pub localized: bool,
    /// Some detection overlaps the GT and carries the GT label.
    pub true_positive: bool,
    /// Per-detection TP flag; every `false` entry is a false positive.
    pub detection_tp: Vec<bool>,
    pub best_iou: f64,
}

pub fn match_to_gt(dets: &[Detection], gt: &Annotation, iou_threshold: f64) -> MatchRecord {
    let mut localized = false;
    let mut best_iou = 0.0f64;
    let detection_tp: Vec<bool> = dets
        .iter()
        .map(|d| {
            let overlap = iou(&d.bbox, &gt.bbox);
            best_iou = best_iou.max(overlap);
            let hit = overlap > iou_threshold;
            localized |= hit;
            hit && d.label == gt.label
        })
        .collect();
    MatchRecord {
        localized,
        true_positive: detection_tp.iter().any(|&t| t),
        detection_tp,
        best_iou,
    }
}
