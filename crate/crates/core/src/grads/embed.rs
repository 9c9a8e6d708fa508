//! Loss gradients with respect to embeddings and the inverse temperature.
//!
//! Temperatures are handled through the inverse scale `c = 1/τ`; every
//! routine returns `∂L/∂c` so callers can chain into `log c`.

use crate::error::Result;
use crate::numcore::{log_sum_exp, matmul, matmul_nt, matmul_tn, softmax_rows, Matrix};
use crate::scalar::Scalar;

use super::GdMode;

#[derive(Clone, Debug)]
pub struct PairGrad<T: Scalar> {
    pub value: T,
    pub d_a: Matrix<T>,
    pub d_b: Matrix<T>,
    pub d_scale: T,
}

fn sub_identity<T: Scalar>(m: &mut Matrix<T>) {
    for k in 0..m.rows().min(m.cols()) {
        m[(k, k)] -= T::one();
    }
}

/// One-directional InfoNCE over `X = c · A Cᵀ`.
pub fn info_nce<T: Scalar>(anchor: &Matrix<T>, contrast: &Matrix<T>, c: T) -> Result<PairGrad<T>> {
    let n = anchor.rows();
    let inv_n = T::one() / T::of_usize(n);
    let sim = matmul_nt(anchor, contrast)?;
    let x = sim.scale(c);
    let mut value = T::zero();
    for (k, row) in x.row_iter().enumerate() {
        value += log_sum_exp(row) - row[k];
    }
    let mut dx = softmax_rows(&x);
    sub_identity(&mut dx);
    let dx = dx.scale(inv_n);
    Ok(PairGrad {
        value: value * inv_n,
        d_a: matmul(&dx, contrast)?.scale(c),
        d_b: matmul_tn(&dx, anchor)?.scale(c),
        d_scale: dx.dot(&sim),
    })
}

/// Symmetric CLIP loss.
pub fn clip<T: Scalar>(v: &Matrix<T>, s: &Matrix<T>, c: T) -> Result<PairGrad<T>> {
    let half = T::of(0.5);
    let a = info_nce(v, s, c)?;
    let b = info_nce(s, v, c)?;
    let mut d_v = a.d_a.scale(half);
    d_v.axpy(half, &b.d_b);
    let mut d_s = a.d_b.scale(half);
    d_s.axpy(half, &b.d_a);
    Ok(PairGrad {
        value: half * (a.value + b.value),
        d_a: d_v,
        d_b: d_s,
        d_scale: half * (a.d_scale + b.d_scale),
    })
}

/// ICL: student anchors against teacher contrasts. `d_a`/`d_b` are the
/// student image/text gradients.
pub fn icl<T: Scalar>(sv: &Matrix<T>, ss: &Matrix<T>, tv: &Matrix<T>, ts: &Matrix<T>, c: T) -> Result<PairGrad<T>> {
    let half = T::of(0.5);
    let a = info_nce(sv, ts, c)?;
    let b = info_nce(ss, tv, c)?;
    Ok(PairGrad {
        value: half * (a.value + b.value),
        d_a: a.d_a.scale(half),
        d_b: b.d_a.scale(half),
        d_scale: half * (a.d_scale + b.d_scale),
    })
}

/// Mean over rows of `KL(teacher ‖ student)` for one direction, with the
/// gradient of the student logits.
fn kl_rows<T: Scalar>(teacher: &Matrix<T>, student_logits: &Matrix<T>) -> (T, Matrix<T>) {
    let n = T::of_usize(teacher.rows());
    let ps = softmax_rows(student_logits);
    let floor = T::of(crate::losses::KL_PROB_FLOOR);
    let mut value = T::zero();
    for (tr, sr) in teacher.row_iter().zip(ps.row_iter()) {
        for (&pt, &p) in tr.iter().zip(sr) {
            if pt > T::zero() {
                value += pt * (pt / p.max(floor)).ln();
            }
        }
    }
    let grad = ps.sub(teacher).expect("same shape").scale(T::one() / n);
    (value / n, grad)
}

/// CRD with frozen teacher distributions at scale `c_teacher`.
pub fn crd<T: Scalar>(
    tv: &Matrix<T>,
    ts: &Matrix<T>,
    sv: &Matrix<T>,
    ss: &Matrix<T>,
    c_teacher: T,
    c_student: T,
) -> Result<PairGrad<T>> {
    let pt = softmax_rows(&matmul_nt(tv, ts)?.scale(c_teacher));
    let qt = softmax_rows(&matmul_nt(ts, tv)?.scale(c_teacher));
    let sim = matmul_nt(sv, ss)?;
    let x = sim.scale(c_student);
    let (vp, dxp) = kl_rows(&pt, &x);
    let (vq, dxq) = kl_rows(&qt, &x.transpose());
    let dx = dxp.add(&dxq.transpose())?;
    Ok(PairGrad {
        value: vp + vq,
        d_a: matmul(&dx, ss)?.scale(c_student),
        d_b: matmul_tn(&dx, sv)?.scale(c_student),
        d_scale: dx.dot(&sim),
    })
}

/// `(1/|B|) Σ ‖t_k − s_k‖²` and its gradient in `s`.
pub fn mean_sq<T: Scalar>(teacher: &Matrix<T>, student: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    let n = T::of_usize(teacher.rows());
    let diff = student.sub(teacher)?;
    Ok((diff.frobenius_sq() / n, diff.scale(T::of(2.0) / n)))
}

/// Gradient field `G_v = α M_v S`, `G_s = α M_s V` in the matrix form used
/// by GD, with the softmaxes kept for the backward pass.
///
/// Total-loss mode: `M_v = P + Qᵀ − 2I`, `M_s = Q + Pᵀ − 2I`, `α = c/2|B|`.
/// Anchor-own mode: `M_v = P + diag(Q) − 2I`, `M_s = Q + diag(P) − 2I`, `α = c/2`.
pub struct FieldForward<T: Scalar> {
    pub g_v: Matrix<T>,
    pub g_s: Matrix<T>,
    p: Matrix<T>,
    q: Matrix<T>,
    m_v: Matrix<T>,
    m_s: Matrix<T>,
    sim: Matrix<T>,
    alpha: T,
    dalpha_dc: T,
}

fn couple<T: Scalar>(m: &Matrix<T>, mode: GdMode) -> Matrix<T> {
    match mode {
        GdMode::TotalLoss => m.transpose(),
        GdMode::AnchorOwn => Matrix::from_fn(m.rows(), m.cols(), |i, j| if i == j { m[(i, j)] } else { T::zero() }),
    }
}

pub fn field_forward<T: Scalar>(v: &Matrix<T>, s: &Matrix<T>, c: T, mode: GdMode) -> Result<FieldForward<T>> {
    let n = v.rows();
    let sim = matmul_nt(v, s)?;
    let x = sim.scale(c);
    let p = softmax_rows(&x);
    let q = softmax_rows(&x.transpose());
    let mut m_v = p.add(&couple(&q, mode))?;
    let mut m_s = q.add(&couple(&p, mode))?;
    for k in 0..n {
        m_v[(k, k)] -= T::of(2.0);
        m_s[(k, k)] -= T::of(2.0);
    }
    let dalpha_dc = match mode {
        GdMode::TotalLoss => T::one() / T::of_usize(2 * n),
        GdMode::AnchorOwn => T::of(0.5),
    };
    let alpha = c * dalpha_dc;
    Ok(FieldForward {
        g_v: matmul(&m_v, s)?.scale(alpha),
        g_s: matmul(&m_s, v)?.scale(alpha),
        p,
        q,
        m_v,
        m_s,
        sim,
        alpha,
        dalpha_dc,
    })
}

fn softmax_backward<T: Scalar>(p: &Matrix<T>, dp: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let (pr, gr) = (p.row(r), dp.row(r));
        let mut inner = T::zero();
        for (&a, &b) in pr.iter().zip(gr) {
            inner += a * b;
        }
        for ((o, &a), &b) in out.row_mut(r).iter_mut().zip(pr).zip(gr) {
            *o = a * (b - inner);
        }
    }
    out
}

/// Vector-Jacobian product of the gradient field with upstream `a_v`, `a_s`.
pub fn field_backward<T: Scalar>(
    f: &FieldForward<T>,
    v: &Matrix<T>,
    s: &Matrix<T>,
    c: T,
    a_v: &Matrix<T>,
    a_s: &Matrix<T>,
    mode: GdMode,
) -> Result<(Matrix<T>, Matrix<T>, T)> {
    let alpha = f.alpha;
    let mut d_s = matmul_tn(&f.m_v, a_v)?.scale(alpha);
    let mut d_v = matmul_tn(&f.m_s, a_s)?.scale(alpha);

    let r_v = matmul_nt(a_v, s)?.scale(alpha);
    let r_s = matmul_nt(a_s, v)?.scale(alpha);
    let dp = r_v.add(&couple(&r_s, mode))?;
    let dq = r_s.add(&couple(&r_v, mode))?;

    let dx = softmax_backward(&f.p, &dp).add(&softmax_backward(&f.q, &dq).transpose())?;
    d_v.axpy(c, &matmul(&dx, s)?);
    d_s.axpy(c, &matmul_tn(&dx, v)?);

    let dalpha = (a_v.dot(&f.g_v) + a_s.dot(&f.g_s)) / alpha;
    let d_scale = dx.dot(&f.sim) + dalpha * f.dalpha_dc;
    Ok((d_v, d_s, d_scale))
}

/// GD value and gradient with respect to the student embeddings and scale.
pub fn gd<T: Scalar>(
    tv: &Matrix<T>,
    ts: &Matrix<T>,
    sv: &Matrix<T>,
    ss: &Matrix<T>,
    c_teacher: T,
    c_student: T,
    mode: GdMode,
) -> Result<PairGrad<T>> {
    let teacher = field_forward(tv, ts, c_teacher, mode)?;
    let student = field_forward(sv, ss, c_student, mode)?;
    let (lv, av) = mean_sq(&teacher.g_v, &student.g_v)?;
    let (ls, as_) = mean_sq(&teacher.g_s, &student.g_s)?;
    let (d_a, d_b, d_scale) = field_backward(&student, sv, ss, c_student, &av, &as_, mode)?;
    Ok(PairGrad {
        value: lv + ls,
        d_a,
        d_b,
        d_scale,
    })
}
