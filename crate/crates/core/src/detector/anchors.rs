use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Anchor grid and proposal budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// Square-root areas of the anchors, in pixels.
    pub sizes: Vec<f64>,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
    pub stride: usize,
    pub train_pre_nms: usize,
    pub train_post_nms: usize,
    pub test_pre_nms: usize,
    pub test_post_nms: usize,
    pub nms_iou: f64,
    /// Proposals narrower or shorter than this are dropped.
    pub min_size: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            sizes: vec![24.0, 40.0, 64.0],
            ratios: vec![0.5, 1.0, 2.0],
            stride: 8,
            train_pre_nms: 256,
            train_post_nms: 64,
            test_pre_nms: 128,
            test_post_nms: 32,
            nms_iou: 0.5,
            min_size: 2.0,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("anchor sizes and ratios must be non-empty".into()));
        }
        if self.sizes.iter().chain(&self.ratios).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("anchor sizes and ratios must be positive".into()));
        }
        if [self.train_pre_nms, self.train_post_nms, self.test_pre_nms, self.test_post_nms, self.stride]
            .contains(&0)
        {
            return Err(Error::Config("proposal counts and stride must be positive".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config("rpn nms threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }

    /// Anchors ordered by `(row, col, anchor)`, centred on feature cells.
    pub fn grid(&self, feat_h: usize, feat_w: usize) -> Vec<BoundingBox> {
        let mut shapes = Vec::with_capacity(self.per_cell());
        for &size in &self.sizes {
            for &ratio in &self.ratios {
                let w = size / ratio.sqrt();
                let h = size * ratio.sqrt();
                shapes.push((w, h));
            }
        }
        let s = self.stride as f64;
        let mut anchors = Vec::with_capacity(feat_h * feat_w * shapes.len());
        for y in 0..feat_h {
            for x in 0..feat_w {
                let cx = (x as f64 + 0.5) * s;
                let cy = (y as f64 + 0.5) * s;
                for &(w, h) in &shapes {
                    anchors.push(
                        BoundingBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
                            .expect("positive anchor shape"),
                    );
                }
            }
        }
        anchors
    }
}

/// Centre/log-size box parameterisation with per-coordinate weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    /// Upper clamp on decoded log-scale deltas.
    pub clip: f64,
}

impl BoxCoder {
    pub const RPN: BoxCoder = BoxCoder {
        weights: [1.0, 1.0, 1.0, 1.0],
        clip: 4.135_166_556_742_356, // ln(1000 / 16)
    };
    pub const HEAD: BoxCoder = BoxCoder {
        weights: [10.0, 10.0, 5.0, 5.0],
        clip: 4.135_166_556_742_356,
    };

    pub fn encode(&self, reference: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
        let (rx, ry) = reference.center();
        let (tx, ty) = target.center();
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - rx) / reference.width(),
            wy * (ty - ry) / reference.height(),
            ww * (target.width() / reference.width()).ln(),
            wh * (target.height() / reference.height()).ln(),
        ]
    }

    /// Decoded box; `None` when the result is degenerate or non-finite.
    pub fn decode(&self, reference: &BoundingBox, deltas: [f64; 4]) -> Option<BoundingBox> {
        let (rx, ry) = reference.center();
        let [wx, wy, ww, wh] = self.weights;
        let cx = rx + deltas[0] / wx * reference.width();
        let cy = ry + deltas[1] / wy * reference.height();
        let w = (deltas[2] / ww).min(self.clip).exp() * reference.width();
        let h = (deltas[3] / wh).min(self.clip).exp() * reference.height();
        BoundingBox::try_new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}
