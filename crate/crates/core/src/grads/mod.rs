//! Closed-form CLIP gradients, backpropagation through the toy encoders and a
//! central-difference oracle for checking both.

mod backprop;
mod check;
pub(crate) mod embed;

pub use backprop::{backprop_model, backprop_task, backprop_with_teacher, normalize_backward, BackpropOutput, TeacherEmbeddings};
pub use check::{grad_check_report, BlockError, GradCheckGrid, GradReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;
use crate::numcore::{softmax_rows, Matrix};
use crate::scalar::Scalar;

/// Gradient of the CLIP loss with respect to each embedding row.
#[derive(Clone, Debug, PartialEq)]
pub struct GradField<T: Scalar = f64> {
    pub d_v: Matrix<T>,
    pub d_s: Matrix<T>,
    pub tau: T,
}

/// How per-anchor gradient terms are assembled into one gradient per row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GdMode {
    /// Gradient of the batch-mean loss: contributions from every anchor are
    /// summed (and scaled by `1/|B|`).
    #[default]
    TotalLoss,
    /// Only anchor `k`'s own two losses (`I→T` and `T→I` with anchor `k`)
    /// are differentiated with respect to `v_k` and `s_k`, unscaled.
    AnchorOwn,
}

/// Gradient of the batch-mean CLIP loss.
pub fn clip_grad_analytic<T: Scalar>(v: &EmbeddingBatch<T>, s: &EmbeddingBatch<T>, tau: T) -> Result<GradField<T>> {
    clip_grad_analytic_mode(v, s, tau, GdMode::TotalLoss)
}

/// Assembles the CLIP gradient from the four per-anchor terms
///
/// ```text
/// ∂L_{I→T}/∂v_k = Σ_b (p_k[b] − 1[k=b]) s_b / τ
/// ∂L_{I→T}/∂s_b =     (p_k[b] − 1[k=b]) v_k / τ
/// ∂L_{T→I}/∂s_k = Σ_b (q_k[b] − 1[k=b]) v_b / τ
/// ∂L_{T→I}/∂v_b =     (q_k[b] − 1[k=b]) s_k / τ
/// ```
///
/// combined as `½(∂L_{I→T} + ∂L_{T→I})`.
pub fn clip_grad_analytic_mode<T: Scalar>(
    v: &EmbeddingBatch<T>,
    s: &EmbeddingBatch<T>,
    tau: T,
    mode: GdMode,
) -> Result<GradField<T>> {
    if v.n() != s.n() || v.d() != s.d() || v.n() == 0 {
        return Err(Error::dim(
            "clip_grad_analytic",
            format!("{}x{} vs {}x{}", v.n(), v.d(), s.n(), s.d()),
        ));
    }
    if !(tau > T::zero()) {
        return Err(Error::dim("clip_grad_analytic", "temperature must be positive"));
    }
    let (n, d) = (v.n(), v.d());
    let (vm, sm) = (v.rows(), s.rows());
    let p = softmax_rows(&crate::losses::logits(vm, sm, tau)?);
    let q = softmax_rows(&crate::losses::logits(sm, vm, tau)?);
    let delta = |k: usize, b: usize| if k == b { T::one() } else { T::zero() };

    let mut d_v = Matrix::zeros(n, d);
    let mut d_s = Matrix::zeros(n, d);
    match mode {
        GdMode::TotalLoss => {
            for k in 0..n {
                for b in 0..n {
                    let wp = (p[(k, b)] - delta(k, b)) / tau;
                    let wq = (q[(k, b)] - delta(k, b)) / tau;
                    for j in 0..d {
                        // I→T with anchor v_k
                        d_v[(k, j)] += wp * sm[(b, j)];
                        d_s[(b, j)] += wp * vm[(k, j)];
                        // T→I with anchor s_k
                        d_s[(k, j)] += wq * vm[(b, j)];
                        d_v[(b, j)] += wq * sm[(k, j)];
                    }
                }
            }
            let scale = T::of(0.5) / T::of_usize(n);
            d_v = d_v.scale(scale);
            d_s = d_s.scale(scale);
        }
        GdMode::AnchorOwn => {
            for k in 0..n {
                for b in 0..n {
                    let wp = (p[(k, b)] - delta(k, b)) / tau;
                    let wq = (q[(k, b)] - delta(k, b)) / tau;
                    for j in 0..d {
                        d_v[(k, j)] += wp * sm[(b, j)];
                        d_s[(k, j)] += wq * vm[(b, j)];
                    }
                }
                let own_q = (q[(k, k)] - T::one()) / tau;
                let own_p = (p[(k, k)] - T::one()) / tau;
                for j in 0..d {
                    d_v[(k, j)] += own_q * sm[(k, j)];
                    d_s[(k, j)] += own_p * vm[(k, j)];
                }
            }
            let half = T::of(0.5);
            d_v = d_v.scale(half);
            d_s = d_s.scale(half);
        }
    }
    Ok(GradField { d_v, d_s, tau })
}

/// Central differences `(f(θ + h e_i) − f(θ − h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&[T]) -> T, theta: &[T], step: T) -> Vec<T> {
    let mut probe = theta.to_vec();
    let two_h = step + step;
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / two_h
        })
        .collect()
}
