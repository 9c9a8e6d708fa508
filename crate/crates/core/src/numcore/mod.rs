//! Dense linear algebra and randomness primitives.

mod matrix;
mod rng;

pub use matrix::{matmul, matmul_nt, matmul_tn, Matrix};
pub use rng::{stream_id, RngStream};

use crate::scalar::Scalar;

/// Default guard for [`l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn l2_normalize_rows<T: Scalar>(m: &Matrix<T>, eps: T) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row_norm(row).max(eps);
        for x in row.iter_mut() {
            *x /= norm;
        }
    }
    out
}

pub(crate) fn row_norm<T: Scalar>(row: &[T]) -> T {
    let mut acc = T::zero();
    for &x in row {
        acc += x * x;
    }
    acc.sqrt()
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `log Σ exp(row)` computed stably.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for &x in row {
        total += (x - max).exp();
    }
    max + total.ln()
}

/// Subtracts each column's mean.
pub fn center_columns<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let n = T::of_usize(m.rows().max(1));
    let means = m.column_sums().map(|s| s / n);
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (x, &mu) in out.row_mut(r).iter_mut().zip(means.as_slice()) {
            *x -= mu;
        }
    }
    out
}
