//! Scalar loss kernels with their derivatives.

use ndarray::{Array2, ArrayView1};

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Cross-entropy of softmax(`logits`) against class `target`, and d/dlogits.
pub fn softmax_cross_entropy(logits: ArrayView1<f64>, target: usize) -> (f64, Vec<f64>) {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = logits.iter().map(|&v| (v - m).exp()).sum();
    let log_z = m + sum.ln();
    let loss = log_z - logits[target];
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - log_z).exp() - if i == target { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

/// Binary cross-entropy on a logit, and d/dlogit.
pub fn bce_with_logit(z: f64, target: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
    let sigmoid = 1.0 / (1.0 + (-z).exp());
    (loss, sigmoid - target)
}

/// Smooth-L1 (Huber with transition at `beta`) and its derivative.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
