use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::anchors::BoxCoder;
use crate::geometry::{iou, Annotation, BoundingBox, ClassLabel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    /// Candidates strictly above this IoU with the GT become foreground.
    pub fg_iou: f64,
    pub batch_size: usize,
    pub fg_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignedTarget {
    pub index: usize,
    pub label: ClassLabel,
    /// Regression target, present on foreground candidates only.
    pub regression: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TargetAssignment {
    /// Foreground entries first, each group in ascending candidate order.
    pub sampled: Vec<AssignedTarget>,
}

impl TargetAssignment {
    pub fn positives(&self) -> impl Iterator<Item = &AssignedTarget> {
        self.sampled.iter().filter(|t| !t.label.is_background())
    }

    pub fn num_positives(&self) -> usize {
        self.positives().count()
    }
}

/// Labels every candidate: GT label above `fg_iou`, background otherwise, and the
/// highest-IoU candidate (lowest index on ties) is always foreground.
pub fn label_candidates(candidates: &[BoundingBox], gt: &Annotation, fg_iou: f64) -> Vec<ClassLabel> {
    let ious: Vec<f64> = candidates.iter().map(|c| iou(c, &gt.bbox)).collect();
    let mut labels: Vec<ClassLabel> = ious
        .iter()
        .map(|&v| if v > fg_iou { gt.label } else { ClassLabel::Background })
        .collect();
    let best = ious
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, &v)| match acc {
            Some((_, b)) if b >= v => acc,
            _ => Some((i, v)),
        });
    if let Some((i, _)) = best {
        labels[i] = gt.label;
    }
    labels
}

/// Labels candidates against the GT and samples a fixed-size minibatch.
pub fn assign_targets<R: Rng + ?Sized>(
    candidates: &[BoundingBox],
    gt: &Annotation,
    coder: &BoxCoder,
    cfg: &TargetConfig,
    rng: &mut R,
) -> TargetAssignment {
    let labels = label_candidates(candidates, gt, cfg.fg_iou);
    let fg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].is_background()).collect();
    let bg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_background()).collect();

    let max_fg = ((cfg.batch_size as f64 * cfg.fg_fraction).round() as usize).max(1);
    let fg = subsample(fg, max_fg, rng);
    let bg = subsample(bg, cfg.batch_size.saturating_sub(fg.len()), rng);

    let sampled = fg
        .into_iter()
        .map(|i| AssignedTarget {
            index: i,
            label: labels[i],
            regression: Some(coder.encode(&candidates[i], &gt.bbox)),
        })
        .chain(bg.into_iter().map(|i| AssignedTarget {
            index: i,
            label: ClassLabel::Background,
            regression: None,
        }))
        .collect();
    TargetAssignment { sampled }
}

fn subsample<R: Rng + ?Sized>(pool: Vec<usize>, n: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() <= n {
        return pool;
    }
    let mut picked: Vec<usize> = sample(rng, pool.len(), n).into_iter().map(|k| pool[k]).collect();
    picked.sort_unstable();
    picked
}
