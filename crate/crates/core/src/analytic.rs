//! Closed-form gradient paths for the linear propagation model.
//!
//! The matching loss differentiates a model-weight gradient with respect to
//! synthetic features. With the linear surrogate (logits = X̃W) that inner
//! gradient has the closed form implemented here, which turns the outer
//! derivative into an ordinary first-order reverse sweep.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|z| z / sum);
    }
    out
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = 1.0;
    }
    out
}

/// ∇_W of masked mean cross-entropy for logits X̃W:
/// X̃_maskᵀ (softmax(X̃_mask W) − Y_mask) / |mask|.
pub fn sgc_weight_gradient(
    x_tilde: &Array2<f64>,
    w: &Array2<f64>,
    labels_onehot: &Array2<f64>,
    mask: &[usize],
) -> Result<Array2<f64>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (n, d) = x_tilde.dim();
    if w.nrows() != d {
        return Err(Error::ShapeError(format!(
            "sgc_weight_gradient: X̃ is [{n}×{d}] but W has {} rows",
            w.nrows()
        )));
    }
    if labels_onehot.nrows() != n || labels_onehot.ncols() != w.ncols() {
        return Err(Error::ShapeError(
            "sgc_weight_gradient: labels_onehot must be [n × C]".into(),
        ));
    }
    if let Some(&bad) = mask.iter().find(|&&i| i >= n) {
        return Err(Error::ShapeError(format!(
            "sgc_weight_gradient: mask index {bad} out of range"
        )));
    }
    let m = mask.len();
    let mut xm = Array2::<f64>::zeros((m, d));
    let mut ym = Array2::<f64>::zeros((m, w.ncols()));
    for (r, &i) in mask.iter().enumerate() {
        xm.row_mut(r).assign(&x_tilde.row(i));
        ym.row_mut(r).assign(&labels_onehot.row(i));
    }
    let residual = softmax_rows(&xm.dot(w)) - &ym;
    Ok(xm.t().dot(&residual) / m as f64)
}

/// Masked mean cross-entropy for logits X̃W (value only).
pub fn sgc_loss(
    x_tilde: &Array2<f64>,
    w: &Array2<f64>,
    labels: &[usize],
    mask: &[usize],
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let logits = x_tilde.dot(w);
    let mut total = 0.0;
    for &i in mask {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
    }
    Ok(total / mask.len() as f64)
}

/// Σ over columns of (1 − cosine similarity), zero-norm columns contributing 0.
pub fn column_cosine_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let mut total = 0.0;
    for j in 0..a.ncols() {
        let (x, y) = (a.column(j), b.column(j));
        let na = x.dot(&x).sqrt();
        let nb = y.dot(&y).sqrt();
        if na > 0.0 && nb > 0.0 {
            total += 1.0 - x.dot(&y) / (na * nb);
        }
    }
    total
}

pub fn argmax_row(row: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i; // strict: ties break toward the lowest index
        }
    }
    best
}
