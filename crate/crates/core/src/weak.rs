//! Training signal for image-level labels: pick the RoI the head most believes
//! carries the image label, pair it with the least convincing RoI as background,
//! and weight both cross-entropy terms by inverse class frequency.

use std::collections::BTreeMap;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::detector::{ClassScores, StrongLosses};
use crate::error::{Error, Result};
use crate::geometry::ClassLabel;

/// Per-class multipliers for the weak loss, indexed by [`ClassLabel::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "BTreeMap<ClassLabel, f64>", try_from = "BTreeMap<ClassLabel, f64>")]
pub struct ClassWeights([f64; ClassLabel::COUNT]);

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights([1.0; ClassLabel::COUNT]);

    pub fn new(weights: [f64; ClassLabel::COUNT]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("class weights must be positive and finite"));
        }
        Ok(ClassWeights(weights))
    }

    pub fn get(&self, label: ClassLabel) -> f64 {
        self.0[label.index()]
    }

    /// Inverse-frequency foreground weights normalized to mean 1; background stays 1.
    /// A class with no samples gets weight 1.
    pub fn from_counts(counts: &BTreeMap<ClassLabel, usize>) -> Self {
        let present: Vec<ClassLabel> = ClassLabel::FOREGROUND
            .into_iter()
            .filter(|l| counts.get(l).copied().unwrap_or(0) > 0)
            .collect();
        let mut w = [1.0; ClassLabel::COUNT];
        for l in ClassLabel::FOREGROUND {
            if !present.contains(&l) {
                log::warn!("no weak samples of {l}; its class weight is fixed at 1");
            }
        }
        if present.is_empty() {
            return ClassWeights(w);
        }
        let inv: Vec<f64> = present.iter().map(|l| 1.0 / counts[l] as f64).collect();
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        for (l, v) in present.iter().zip(inv) {
            w[l.index()] = v / mean;
        }
        ClassWeights(w)
    }
}

impl From<ClassWeights> for BTreeMap<ClassLabel, f64> {
    fn from(w: ClassWeights) -> Self {
        ClassLabel::ALL.into_iter().map(|l| (l, w.get(l))).collect()
    }
}

impl TryFrom<BTreeMap<ClassLabel, f64>> for ClassWeights {
    type Error = Error;

    fn try_from(map: BTreeMap<ClassLabel, f64>) -> Result<Self> {
        let mut w = [1.0; ClassLabel::COUNT];
        for (l, v) in map {
            w[l.index()] = v;
        }
        ClassWeights::new(w)
    }
}

/// Class weights from a weak manifest's label counts.
pub fn class_weights(weak: &DatasetManifest) -> Result<ClassWeights> {
    if weak.is_empty() {
        return Err(Error::invalid("class weights need a non-empty weak manifest"));
    }
    Ok(ClassWeights::from_counts(weak.class_counts()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakTarget {
    pub positive_index: usize,
    /// Absent when the proposal set holds a single RoI.
    pub negative_index: Option<usize>,
    pub image_label: ClassLabel,
    pub class_weights: ClassWeights,
}

/// Positive = argmax of the image-label probability over RoIs, negative = argmin
/// over the remaining RoIs; ties go to the lowest index.
pub fn select_weak_target(scores: &ClassScores, image_label: ClassLabel, class_weights: ClassWeights) -> Result<WeakTarget> {
    if image_label.is_background() {
        return Err(Error::invalid("weak image label cannot be background"));
    }
    if scores.is_empty() {
        return Err(Error::NoProposals);
    }
    let col = scores.probs.column(image_label.index());
    let mut pos = 0;
    for (i, &p) in col.iter().enumerate() {
        if p > col[pos] {
            pos = i;
        }
    }
    let mut neg: Option<usize> = None;
    for (i, &p) in col.iter().enumerate() {
        if i != pos && neg.is_none_or(|n| p < col[n]) {
            neg = Some(i);
        }
    }
    Ok(WeakTarget {
        positive_index: pos,
        negative_index: neg,
        image_label,
        class_weights,
    })
}

fn log_softmax_at(logits: ArrayView1<f64>, target: usize) -> f64 {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits[target] - lse
}

fn terms(target: &WeakTarget) -> Vec<(usize, ClassLabel)> {
    let mut t = vec![(target.positive_index, target.image_label)];
    if let Some(n) = target.negative_index {
        t.push((n, ClassLabel::Background));
    }
    t
}

/// Mean of the weighted cross-entropy terms for the selected rows.
pub fn weak_loss(scores: &ClassScores, target: &WeakTarget) -> f64 {
    let terms = terms(target);
    let n = terms.len() as f64;
    terms
        .iter()
        .map(|&(row, label)| -target.class_weights.get(label) * log_softmax_at(scores.logits.row(row), label.index()))
        .sum::<f64>()
        / n
}

/// Loss and its gradient with respect to the logits of each selected row
/// (all other rows have zero gradient).
pub fn weak_loss_grad(scores: &ClassScores, target: &WeakTarget) -> (f64, Vec<(usize, [f64; ClassLabel::COUNT])>) {
    let terms = terms(target);
    let n = terms.len() as f64;
    let mut grads = Vec::with_capacity(terms.len());
    for &(row, label) in &terms {
        let w = target.class_weights.get(label) / n;
        let mut g = [0.0; ClassLabel::COUNT];
        for (c, gc) in g.iter_mut().enumerate() {
            let p = scores.probs[[row, c]];
            *gc = w * (p - if c == label.index() { 1.0 } else { 0.0 });
        }
        grads.push((row, g));
    }
    (weak_loss(scores, target), grads)
}

/// `L_strong + alpha * L_weak`, with `L_strong` the sum of the four strong terms.
pub fn combined_loss(strong: &StrongLosses, weak: f64, alpha: f64) -> f64 {
    strong.total() + alpha * weak
}
