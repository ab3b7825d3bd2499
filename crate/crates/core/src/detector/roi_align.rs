//! Bilinear RoI pooling onto a fixed `pool x pool` grid.

use ndarray::{Array2, Array3};

use crate::geometry::BoundingBox;

const SAMPLES: usize = 2;

/// Sparse map from pooled cells to feature-map cells; identical for every channel.
#[derive(Debug, Clone)]
pub struct RoiAlignPlan {
    pool: usize,
    /// Per RoI: `(bin, spatial index, weight)` taps.
    taps: Vec<Vec<(usize, usize, f64)>>,
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return Vec::new();
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let y1;
    let x1;
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    vec![
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ]
}

/// Pools each RoI to a `C * pool * pool` row (channel-major).
pub fn roi_align(feat: &Array3<f64>, rois: &[BoundingBox], stride: usize, pool: usize) -> (Array2<f64>, RoiAlignPlan) {
    let (c, h, w) = feat.dim();
    let scale = 1.0 / stride as f64;
    let fs = feat.as_slice().expect("standard layout");
    let bins = pool * pool;
    let mut out = Array2::<f64>::zeros((rois.len(), c * bins));
    let mut taps_all = Vec::with_capacity(rois.len());
    let norm = 1.0 / (SAMPLES * SAMPLES) as f64;
    for (r, roi) in rois.iter().enumerate() {
        let x1 = roi.x_min() * scale - 0.5;
        let y1 = roi.y_min() * scale - 0.5;
        let bin_w = roi.width() * scale / pool as f64;
        let bin_h = roi.height() * scale / pool as f64;
        let mut taps = Vec::with_capacity(bins * SAMPLES * SAMPLES * 4);
        for py in 0..pool {
            for px in 0..pool {
                let bin = py * pool + px;
                for sy in 0..SAMPLES {
                    let y = y1 + py as f64 * bin_h + (sy as f64 + 0.5) * bin_h / SAMPLES as f64;
                    for sx in 0..SAMPLES {
                        let x = x1 + px as f64 * bin_w + (sx as f64 + 0.5) * bin_w / SAMPLES as f64;
                        for (idx, wgt) in bilinear_taps(y, x, h, w) {
                            taps.push((bin, idx, wgt * norm));
                        }
                    }
                }
            }
        }
        let mut row = out.row_mut(r);
        let row = row.as_slice_mut().expect("contiguous row");
        for ch in 0..c {
            let plane = &fs[ch * h * w..(ch + 1) * h * w];
            let dst = &mut row[ch * bins..(ch + 1) * bins];
            for &(bin, idx, wgt) in &taps {
                dst[bin] += wgt * plane[idx];
            }
        }
        taps_all.push(taps);
    }
    (out, RoiAlignPlan { pool, taps: taps_all })
}

/// Scatters pooled gradients back onto `grad_feat`.
pub fn roi_align_backward(plan: &RoiAlignPlan, grad_pooled: &Array2<f64>, grad_feat: &mut Array3<f64>) {
    let (c, h, w) = grad_feat.dim();
    let bins = plan.pool * plan.pool;
    let gs = grad_feat.as_slice_mut().expect("standard layout");
    for (r, taps) in plan.taps.iter().enumerate() {
        let row = grad_pooled.row(r);
        for ch in 0..c {
            let plane = &mut gs[ch * h * w..(ch + 1) * h * w];
            for &(bin, idx, wgt) in taps {
                plane[idx] += wgt * row[ch * bins + bin];
            }
        }
    }
}
