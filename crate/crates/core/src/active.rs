//! Promotion of weak images to strong ones through double predictions: two
//! differently labelled detections on the same object, disambiguated by the
//! image label.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, GrayImage, Origin, Sample, Split, Supervision};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::geometry::{iou, Annotation, ClassLabel, Detection};

/// IoU a differing-label pair must exceed to count as a double prediction.
pub const DOUBLE_PREDICTION_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublePrediction {
    pub image_id: String,
    pub det_a: Detection,
    pub det_b: Detection,
    pub pair_iou: f64,
    /// Positions of the pair in the input detection list.
    pub indices: (usize, usize),
}

/// The differing-label pair with the highest IoU above the threshold. Ties go to
/// the higher combined score, then to the lexicographically first index pair.
pub fn find_double_prediction(image_id: &str, dets: &[Detection]) -> Option<DoublePrediction> {
    let mut best: Option<(f64, f64, usize, usize)> = None;
    for i in 0..dets.len() {
        for j in i + 1..dets.len() {
            if dets[i].label == dets[j].label {
                continue;
            }
            let v = iou(&dets[i].bbox, &dets[j].bbox);
            if v <= DOUBLE_PREDICTION_IOU {
                continue;
            }
            let score = dets[i].score + dets[j].score;
            let better = match best {
                None => true,
                Some((bv, bs, _, _)) => v > bv || (v == bv && score > bs),
            };
            if better {
                best = Some((v, score, i, j));
            }
        }
    }
    best.map(|(v, _, i, j)| DoublePrediction {
        image_id: image_id.to_string(),
        det_a: dets[i],
        det_b: dets[j],
        pair_iou: v,
        indices: (i, j),
    })
}

/// The pair member carrying the image label, as a strong annotation.
pub fn annotate_from_pair(pair: &DoublePrediction, image_label: ClassLabel) -> Option<Annotation> {
    let a = pair.det_a.label == image_label;
    let b = pair.det_b.label == image_label;
    let d = match (a, b) {
        (true, false) => pair.det_a,
        (false, true) => pair.det_b,
        _ => return None,
    };
    Some(Annotation {
        bbox: d.bbox,
        label: image_label,
    })
}

/// One line of the detection dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveConfig {
    /// Minimum score of final detections considered during curation.
    pub score_threshold: f64,
    pub class_filter: BTreeSet<ClassLabel>,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        ActiveConfig {
            score_threshold: 0.5,
            class_filter: BTreeSet::from([ClassLabel::Class2]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    /// Strong manifest with `origin = active`, in weak-manifest order.
    pub manifest: DatasetManifest,
    pub dump: Vec<ImageDetections>,
    pub pairs: Vec<DoublePrediction>,
    /// Weak images whose inference failed.
    pub skipped: Vec<String>,
}

/// Curation from precomputed detections; `dump` must follow the weak manifest order.
pub fn curate(weak: &DatasetManifest, dump: &[ImageDetections], class_filter: &BTreeSet<ClassLabel>) -> Result<(DatasetManifest, Vec<DoublePrediction>)> {
    let mut samples = Vec::new();
    let mut pairs = Vec::new();
    let by_id: std::collections::HashMap<&str, &ImageDetections> = dump.iter().map(|d| (d.image_id.as_str(), d)).collect();
    for s in weak.samples() {
        let Some(entry) = by_id.get(s.image_id.as_str()) else {
            continue;
        };
        let Some(pair) = find_double_prediction(&s.image_id, &entry.detections) else {
            continue;
        };
        let Some(ann) = annotate_from_pair(&pair, s.label) else {
            continue;
        };
        pairs.push(pair);
        if !class_filter.contains(&ann.label) {
            continue;
        }
        samples.push(Sample {
            image_id: s.image_id.clone(),
            image_path: s.image_path.clone(),
            supervision: Supervision::Strong,
            label: ann.label,
            bbox: Some(ann.bbox),
            origin: Origin::Active,
        });
    }
    let mut manifest = DatasetManifest::new(Split::TrainStrong, samples)?;
    if let Some(base) = weak.base_dir() {
        manifest = manifest.with_base_dir(base);
    }
    Ok((manifest, pairs))
}

/// Runs the detector over every weak image and keeps label-consistent double predictions.
pub fn build_active_set(det: &Detector, weak: &DatasetManifest, cfg: &ActiveConfig) -> Result<ActiveSet> {
    if weak.split() != Split::TrainWeak {
        return Err(Error::invalid("active set must be built from a weak manifest"));
    }
    let mut dump = Vec::with_capacity(weak.len());
    let mut skipped = Vec::new();
    for s in weak.samples() {
        let result = GrayImage::load_png(weak.image_path(s)).and_then(|img| det.detect(&img, cfg.score_threshold));
        match result {
            Ok(detections) => dump.push(ImageDetections {
                image_id: s.image_id.clone(),
                detections,
            }),
            Err(e) => {
                log::warn!("skipping {} during curation: {e}", s.image_id);
                skipped.push(s.image_id.clone());
            }
        }
    }
    let (manifest, pairs) = curate(weak, &dump, &cfg.class_filter)?;
    Ok(ActiveSet {
        manifest,
        dump,
        pairs,
        skipped,
    })
}
