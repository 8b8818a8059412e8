//! Value-level counterparts of the differentiable operations.
//!
//! Evaluation paths (accuracy, attack success, smoothness reporting) often
//! need just the numbers. These helpers call the same kernels the tape ops
//! use, so a value computed here and a value read off a tape node can never
//! disagree.

use crate::error::{Error, Result};

use super::matrix::{Matrix, Scalar};
use super::tape::{self, PROB_FLOOR};

/// Row-wise softmax.
pub fn softmax<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    tape::softmax_value(x)
}

/// Elementwise logistic function.
pub fn sigmoid<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(tape::stable_sigmoid)
}

pub fn relu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v.max(T::zero()))
}

/// Mean over rows of `KL(p_row || q_row)`. Rows are probability
/// distributions; `q` entries are floored at [`PROB_FLOOR`] inside the log
/// and `p = 0` entries contribute exactly zero.
pub fn kl_divergence<T: Scalar>(p: &Matrix<T>, q: &Matrix<T>) -> Result<T> {
    p.require_same_shape(q, "kl_divergence")?;
    if p.rows() == 0 {
        return Err(Error::Argument("kl_divergence of an empty batch".into()));
    }
    Ok(tape::kl_divergence_total(p, q) / T::from_f64(p.rows() as f64))
}

/// Mean cross-entropy of softmax outputs against integer labels, floored at
/// [`PROB_FLOOR`] inside the log.
pub fn cross_entropy<T: Scalar>(probs: &Matrix<T>, labels: &[usize]) -> Result<T> {
    if probs.rows() != labels.len() {
        return Err(Error::dimension(
            "cross_entropy",
            format!("{} rows", probs.rows()),
            format!("{} labels", labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Argument("cross_entropy of an empty batch".into()));
    }
    let floor = T::from_f64(PROB_FLOOR);
    let mut total = T::zero();
    for (row, &y) in probs.rows_iter().zip(labels) {
        if y >= probs.cols() {
            return Err(Error::Argument(format!(
                "label {} out of range for {} classes",
                y,
                probs.cols()
            )));
        }
        total = total - row[y].max(floor).ln();
    }
    Ok(total / T::from_f64(labels.len() as f64))
}

/// Index of the row maximum, first occurrence winning ties.
pub fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Normalizes each row to unit L2 norm. Rows with zero norm are left as-is
/// and reported in the second return value.
pub fn normalize_rows<T: Scalar>(x: &Matrix<T>) -> (Matrix<T>, usize) {
    let (n, m) = x.shape();
    let mut data = Vec::with_capacity(n * m);
    let mut degenerate = 0;
    for row in x.rows_iter() {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            data.extend(row.iter().map(|&v| v / norm));
        } else {
            degenerate += 1;
            data.extend_from_slice(row);
        }
    }
    (Matrix::from_vec(n, m, data), degenerate)
}
