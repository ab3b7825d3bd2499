//! CorLoc, fraction of lesions detected and mean average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{match_to_gt, score_order, Annotation, ClassLabel, Detection, MatchRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApConvention {
    /// Area under the monotone precision envelope at every recall change.
    #[default]
    Continuous,
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalThresholds {
    pub iou: f64,
    /// Minimum detection score counted by CorLoc and fraction detected.
    pub corloc_score: f64,
    /// Minimum detection score counted by mAP.
    pub map_score: f64,
    pub ap_convention: ApConvention,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        EvalThresholds {
            iou: 0.5,
            corloc_score: 0.5,
            map_score: 0.05,
            ap_convention: ApConvention::Continuous,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub gt: Annotation,
    #[serde(flatten)]
    pub record: MatchRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub corloc: f64,
    pub fraction_detected: f64,
    pub map: Option<f64>,
    pub per_class_ap: BTreeMap<ClassLabel, f64>,
    pub num_images: usize,
    /// Detections at or above the CorLoc threshold.
    pub num_detections: usize,
    pub thresholds: EvalThresholds,
    pub images: Vec<ImageRecord>,
}

fn check_lengths(dets: &[Vec<Detection>], gts: &[Annotation]) -> Result<()> {
    if dets.len() != gts.len() {
        return Err(Error::Validation {
            sample: format!("{} detection lists", dets.len()),
            message: format!("expected one ground truth per image, got {}", gts.len()),
        });
    }
    Ok(())
}

fn percent(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

fn matches(dets: &[Vec<Detection>], gts: &[Annotation], iou: f64) -> Result<Vec<MatchRecord>> {
    check_lengths(dets, gts)?;
    Ok(dets.iter().zip(gts).map(|(d, g)| match_to_gt(d, g, iou)).collect())
}

/// Percent of images holding a detection with the GT label and IoU above `iou`.
pub fn corloc(dets: &[Vec<Detection>], gts: &[Annotation], iou: f64) -> Result<f64> {
    let m = matches(dets, gts, iou)?;
    Ok(percent(m.iter().filter(|r| r.true_positive).count(), m.len()))
}

/// Percent of images whose GT is overlapped above `iou` by any detection.
pub fn fraction_detected(dets: &[Vec<Detection>], gts: &[Annotation], iou: f64) -> Result<f64> {
    let m = matches(dets, gts, iou)?;
    Ok(percent(m.iter().filter(|r| r.localized).count(), m.len()))
}

/// Average precision (percent) for one class; `None` when the class has no GT.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Annotation],
    label: ClassLabel,
    iou: f64,
    convention: ApConvention,
) -> Result<Option<f64>> {
    check_lengths(dets, gts)?;
    let n_gt = gts.iter().filter(|g| g.label == label).count();
    if n_gt == 0 {
        return Ok(None);
    }
    let ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.label == label).map(move |d| (i, d)))
        .collect();
    let scores: Vec<f64> = ranked.iter().map(|(_, d)| d.score).collect();
    let mut consumed = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for k in score_order(&scores) {
        let (img, d) = ranked[k];
        let g = &gts[img];
        if g.label == label && !consumed[img] && crate::geometry::iou(&d.bbox, &g.bbox) > iou {
            consumed[img] = true;
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let ap = match convention {
        ApConvention::Continuous => {
            let mut mrec = vec![0.0];
            mrec.extend(&recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend(&precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum::<f64>()
        }
        ApConvention::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Ok(Some(100.0 * ap))
}

/// Mean AP over foreground classes that have ground truth; `None` if none do.
pub fn mean_average_precision(
    dets: &[Vec<Detection>],
    gts: &[Annotation],
    iou: f64,
    convention: ApConvention,
) -> Result<(Option<f64>, BTreeMap<ClassLabel, f64>)> {
    let mut per_class = BTreeMap::new();
    for label in ClassLabel::FOREGROUND {
        match average_precision(dets, gts, label, iou, convention)? {
            Some(ap) => {
                per_class.insert(label, ap);
            }
            None => log::warn!("no ground truth for {label}; excluded from mAP"),
        }
    }
    let map = if per_class.is_empty() {
        None
    } else {
        Some(per_class.values().sum::<f64>() / per_class.len() as f64)
    };
    Ok((map, per_class))
}

fn above(dets: &[Vec<Detection>], threshold: f64) -> Vec<Vec<Detection>> {
    dets.iter()
        .map(|ds| ds.iter().filter(|d| d.score >= threshold).copied().collect())
        .collect()
}

/// Full report: CorLoc and fraction detected at `corloc_score`, mAP at `map_score`.
pub fn evaluate_detections(
    image_ids: &[String],
    dets: &[Vec<Detection>],
    gts: &[Annotation],
    thresholds: EvalThresholds,
) -> Result<MetricsReport> {
    check_lengths(dets, gts)?;
    if image_ids.len() != gts.len() {
        return Err(Error::invalid("image id count does not match ground-truth count"));
    }
    let strict = above(dets, thresholds.corloc_score);
    let records = matches(&strict, gts, thresholds.iou)?;
    let n = records.len();
    let (map, per_class_ap) =
        mean_average_precision(&above(dets, thresholds.map_score), gts, thresholds.iou, thresholds.ap_convention)?;
    Ok(MetricsReport {
        corloc: percent(records.iter().filter(|r| r.true_positive).count(), n),
        fraction_detected: percent(records.iter().filter(|r| r.localized).count(), n),
        map,
        per_class_ap,
        num_images: n,
        num_detections: strict.iter().map(Vec::len).sum(),
        thresholds,
        images: image_ids
            .iter()
            .zip(gts)
            .zip(records)
            .map(|((id, gt), record)| ImageRecord {
                image_id: id.clone(),
                gt: *gt,
                record,
            })
            .collect(),
    })
}
