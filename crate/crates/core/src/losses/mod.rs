//! CLIP task loss, the six distillation losses and their weighted sum.
//!
//! All contrastive losses average over anchors, so their magnitude does not
//! depend on batch size. Teacher embeddings are treated as constants.

mod mi;

pub use mi::{mi_bound_check, MiBound, MiToyJoint};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoders::{fuse_embeddings, project_student, ClipModel};
use crate::error::{Error, Result};
use crate::grads::{clip_grad_analytic_mode, GdMode};
use crate::numcore::{l2_normalize_rows, log_sum_exp, matmul_nt, softmax_rows, Matrix, NORM_EPS};
use crate::scalar::Scalar;

/// Tolerance on unit row norms for batches flagged as normalised.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Floor applied to student probabilities inside KL terms.
pub const KL_PROB_FLOOR: f64 = 1e-30;

/// `n x d` batch of embeddings, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch<T: Scalar = f64> {
    rows: Matrix<T>,
    normalized: bool,
}

impl<T: Scalar> EmbeddingBatch<T> {
    /// Normalises every row of `m`.
    pub fn from_raw(m: &Matrix<T>) -> Self {
        Self {
            rows: l2_normalize_rows(m, T::of(NORM_EPS)),
            normalized: true,
        }
    }

    /// Wraps rows the caller has already normalised.
    pub fn assume_normalized(m: Matrix<T>) -> Self {
        debug_assert!(unit_rows(&m, 1e-6));
        Self {
            rows: m,
            normalized: true,
        }
    }

    /// Wraps `m`, checking every row has unit norm within [`UNIT_NORM_TOL`].
    pub fn try_normalized(m: Matrix<T>) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::dim("EmbeddingBatch", "batch must have at least one row"));
        }
        if !unit_rows(&m, UNIT_NORM_TOL) {
            return Err(Error::dim("EmbeddingBatch", "rows are not unit norm"));
        }
        Ok(Self {
            rows: m,
            normalized: true,
        })
    }

    /// Unnormalised batch; contrastive losses reject these.
    pub fn unnormalized(m: Matrix<T>) -> Self {
        Self {
            rows: m,
            normalized: false,
        }
    }

    pub fn rows(&self) -> &Matrix<T> {
        &self.rows
    }

    pub fn into_rows(self) -> Matrix<T> {
        self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.rows()
    }

    pub fn d(&self) -> usize {
        self.rows.cols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Reorders rows; `perm[i]` is the source row of output row `i`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        Self {
            rows: self.rows.select_rows(perm),
            normalized: self.normalized,
        }
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingBatch<U> {
        EmbeddingBatch {
            rows: self.rows.cast(),
            normalized: self.normalized,
        }
    }
}

pub(crate) fn unit_rows<T: Scalar>(m: &Matrix<T>, tol: f64) -> bool {
    m.row_iter().all(|row| {
        let n: f64 = row.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
        (n - 1.0).abs() <= tol
    })
}

fn check_pair<T: Scalar>(op: &'static str, a: &EmbeddingBatch<T>, b: &EmbeddingBatch<T>) -> Result<()> {
    if a.n() == 0 {
        return Err(Error::dim(op, "empty batch"));
    }
    if a.n() != b.n() || a.d() != b.d() {
        return Err(Error::dim(
            op,
            format!("{}x{} vs {}x{}", a.n(), a.d(), b.n(), b.d()),
        ));
    }
    Ok(())
}

fn check_tau<T: Scalar>(op: &'static str, tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::dim(op, format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `anchor · contrastᵀ / tau`.
pub(crate) fn logits<T: Scalar>(anchor: &Matrix<T>, contrast: &Matrix<T>, tau: T) -> Result<Matrix<T>> {
    Ok(matmul_nt(anchor, contrast)?.map(|x| x / tau))
}

/// One-directional InfoNCE: mean over anchors `k` of
/// `-log softmax_k(anchor_k · contrast / tau)[k]`.
pub fn info_nce<T: Scalar>(anchor: &EmbeddingBatch<T>, contrast: &EmbeddingBatch<T>, tau: T) -> Result<T> {
    check_pair("info_nce", anchor, contrast)?;
    check_tau("info_nce", tau)?;
    let x = logits(anchor.rows(), contrast.rows(), tau)?;
    let mut total = T::zero();
    for (k, row) in x.row_iter().enumerate() {
        total += log_sum_exp(row) - row[k];
    }
    Ok(total / T::of_usize(anchor.n()))
}

/// Symmetric CLIP loss `½(L_{I→T} + L_{T→I})`, each averaged over anchors.
pub fn clip_loss<T: Scalar>(v: &EmbeddingBatch<T>, s: &EmbeddingBatch<T>, tau: T) -> Result<T> {
    if !v.is_normalized() || !s.is_normalized() {
        return Err(Error::dim("clip_loss", "embeddings must be l2-normalised"));
    }
    let half = T::of(0.5);
    Ok(half * (info_nce(v, s, tau)? + info_nce(s, v, tau)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Row `k` is the softmax of anchor `k`'s similarities to every contrast row.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveDistribution<T: Scalar = f64> {
    pub probs: Matrix<T>,
    pub direction: Direction,
    pub temperature: T,
}

pub fn contrastive_distribution<T: Scalar>(
    anchor: &EmbeddingBatch<T>,
    contrast: &EmbeddingBatch<T>,
    tau: T,
    direction: Direction,
) -> Result<ContrastiveDistribution<T>> {
    check_pair("contrastive_distribution", anchor, contrast)?;
    check_tau("contrastive_distribution", tau)?;
    Ok(ContrastiveDistribution {
        probs: softmax_rows(&logits(anchor.rows(), contrast.rows(), tau)?),
        direction,
        temperature: tau,
    })
}

/// Mean over rows of `KL(teacher_row ‖ student_row)`; also returns how many
/// student probabilities had to be floored.
fn mean_kl<T: Scalar>(teacher: &Matrix<T>, student: &Matrix<T>) -> (T, usize) {
    let floor = T::of(KL_PROB_FLOOR);
    let mut clamped = 0;
    let mut total = T::zero();
    for (tr, sr) in teacher.row_iter().zip(student.row_iter()) {
        for (&pt, &ps) in tr.iter().zip(sr) {
            if pt > T::zero() {
                let ps = if ps < floor {
                    clamped += 1;
                    floor
                } else {
                    ps
                };
                total += pt * (pt / ps).ln();
            }
        }
    }
    (total / T::of_usize(teacher.rows()), clamped)
}

/// CRD value together with the number of floored student probabilities.
pub fn crd_loss_counted<T: Scalar>(
    p_teacher: &ContrastiveDistribution<T>,
    q_teacher: &ContrastiveDistribution<T>,
    p_student: &ContrastiveDistribution<T>,
    q_student: &ContrastiveDistribution<T>,
) -> Result<(T, usize)> {
    let shape = p_teacher.probs.shape();
    if shape.0 != shape.1 || shape.0 == 0 {
        return Err(Error::dim("crd_loss", format!("distribution is {shape:?}, expected square")));
    }
    for d in [q_teacher, p_student, q_student] {
        if d.probs.shape() != shape {
            return Err(Error::dim(
                "crd_loss",
                format!("{:?} vs {:?}", d.probs.shape(), shape),
            ));
        }
    }
    let (a, ca) = mean_kl(&p_teacher.probs, &p_student.probs);
    let (b, cb) = mean_kl(&q_teacher.probs, &q_student.probs);
    Ok((a + b, ca + cb))
}

/// `L_CRD = L_{CRD,I→T} + L_{CRD,T→I}`.
pub fn crd_loss<T: Scalar>(
    p_teacher: &ContrastiveDistribution<T>,
    q_teacher: &ContrastiveDistribution<T>,
    p_student: &ContrastiveDistribution<T>,
    q_student: &ContrastiveDistribution<T>,
) -> Result<T> {
    crd_loss_counted(p_teacher, q_teacher, p_student, q_student).map(|(v, _)| v)
}

/// CRD straight from embeddings at teacher/student temperatures.
pub fn crd_from_embeddings<T: Scalar>(
    teacher_v: &EmbeddingBatch<T>,
    teacher_s: &EmbeddingBatch<T>,
    student_v: &EmbeddingBatch<T>,
    student_s: &EmbeddingBatch<T>,
    tau_teacher: T,
    tau_student: T,
) -> Result<T> {
    use Direction::*;
    crd_loss(
        &contrastive_distribution(teacher_v, teacher_s, tau_teacher, ImageToText)?,
        &contrastive_distribution(teacher_s, teacher_v, tau_teacher, TextToImage)?,
        &contrastive_distribution(student_v, student_s, tau_student, ImageToText)?,
        &contrastive_distribution(student_s, student_v, tau_student, TextToImage)?,
    )
}

fn mean_sq_dist<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> T {
    let mut total = T::zero();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        let d = *x - *y;
        total += d * d;
    }
    total / T::of_usize(a.rows())
}

/// `(1/|B|) Σ_k ‖v_kᵀ − v_kˢ‖² + ‖s_kᵀ − s_kˢ‖²`.
pub fn fd_loss<T: Scalar>(
    teacher_v: &EmbeddingBatch<T>,
    student_v: &EmbeddingBatch<T>,
    teacher_s: &EmbeddingBatch<T>,
    student_s: &EmbeddingBatch<T>,
) -> Result<T> {
    check_pair("fd_loss", teacher_v, student_v)?;
    check_pair("fd_loss", teacher_s, student_s)?;
    check_pair("fd_loss", teacher_v, teacher_s)?;
    Ok(mean_sq_dist(teacher_v.rows(), student_v.rows()) + mean_sq_dist(teacher_s.rows(), student_s.rows()))
}

/// FD with the student image embedding taken from a masked input.
pub fn mfd_loss<T: Scalar>(
    teacher_v: &EmbeddingBatch<T>,
    masked_student_v: &EmbeddingBatch<T>,
    teacher_s: &EmbeddingBatch<T>,
    student_s: &EmbeddingBatch<T>,
) -> Result<T> {
    fd_loss(teacher_v, masked_student_v, teacher_s, student_s)
}

/// MSE between each model's gradient of its own CLIP loss with respect to
/// its own embeddings.
pub fn gd_loss<T: Scalar>(
    teacher_v: &EmbeddingBatch<T>,
    teacher_s: &EmbeddingBatch<T>,
    student_v: &EmbeddingBatch<T>,
    student_s: &EmbeddingBatch<T>,
    tau_teacher: T,
    tau_student: T,
    mode: GdMode,
) -> Result<T> {
    check_pair("gd_loss", teacher_v, student_v)?;
    check_pair("gd_loss", teacher_s, student_s)?;
    let gt = clip_grad_analytic_mode(teacher_v, teacher_s, tau_teacher, mode)?;
    let gs = clip_grad_analytic_mode(student_v, student_s, tau_student, mode)?;
    Ok(mean_sq_dist(&gt.d_v, &gs.d_v) + mean_sq_dist(&gt.d_s, &gs.d_s))
}

/// Student anchors contrasted against teacher embeddings, both directions.
pub fn icl_loss<T: Scalar>(
    student_v: &EmbeddingBatch<T>,
    student_s: &EmbeddingBatch<T>,
    teacher_v: &EmbeddingBatch<T>,
    teacher_s: &EmbeddingBatch<T>,
    tau: T,
) -> Result<T> {
    check_pair("icl_loss", student_v, teacher_s)?;
    check_pair("icl_loss", student_s, teacher_v)?;
    let half = T::of(0.5);
    Ok(half * (info_nce(student_v, teacher_s, tau)? + info_nce(student_s, teacher_v, tau)?))
}

/// CLIP loss on fused student‖teacher embeddings.
pub fn afd_loss<T: Scalar>(
    model: &ClipModel<T>,
    student_v: &EmbeddingBatch<T>,
    student_s: &EmbeddingBatch<T>,
    teacher_v: &EmbeddingBatch<T>,
    teacher_s: &EmbeddingBatch<T>,
    tau: T,
) -> Result<T> {
    let (va, sa) = fuse_embeddings(model, student_v, student_s, teacher_v, teacher_s)?;
    clip_loss(&va, &sa, tau)
}

/// One distillation term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdTerm {
    Crd,
    Fd,
    Mfd,
    Gd,
    Icl,
    Afd,
}

impl KdTerm {
    pub const ALL: [KdTerm; 6] = [KdTerm::Crd, KdTerm::Fd, KdTerm::Mfd, KdTerm::Gd, KdTerm::Icl, KdTerm::Afd];

    pub fn name(self) -> &'static str {
        match self {
            KdTerm::Crd => "crd",
            KdTerm::Fd => "fd",
            KdTerm::Mfd => "mfd",
            KdTerm::Gd => "gd",
            KdTerm::Icl => "icl",
            KdTerm::Afd => "afd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for KdTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss weights and the set of enabled distillation terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdWeights {
    pub crd: f64,
    pub fd: f64,
    pub mfd: f64,
    pub gd: f64,
    pub icl: f64,
    pub afd: f64,
    pub enabled: Vec<KdTerm>,
}

impl Default for KdWeights {
    fn default() -> Self {
        Self {
            crd: 1.0,
            fd: 2000.0,
            mfd: 2000.0,
            gd: 1e8,
            icl: 1.0,
            afd: 1.0,
            enabled: Vec::new(),
        }
    }
}

impl KdWeights {
    /// Default weights with only `terms` enabled.
    pub fn with(terms: &[KdTerm]) -> Self {
        Self {
            enabled: terms.to_vec(),
            ..Self::default()
        }
    }

    /// FD + ICL + CRD at their default weights.
    pub fn unified() -> Self {
        Self::with(&[KdTerm::Fd, KdTerm::Icl, KdTerm::Crd])
    }

    pub fn weight(&self, term: KdTerm) -> f64 {
        match term {
            KdTerm::Crd => self.crd,
            KdTerm::Fd => self.fd,
            KdTerm::Mfd => self.mfd,
            KdTerm::Gd => self.gd,
            KdTerm::Icl => self.icl,
            KdTerm::Afd => self.afd,
        }
    }

    pub fn set_weight(&mut self, term: KdTerm, w: f64) {
        match term {
            KdTerm::Crd => self.crd = w,
            KdTerm::Fd => self.fd = w,
            KdTerm::Mfd => self.mfd = w,
            KdTerm::Gd => self.gd = w,
            KdTerm::Icl => self.icl = w,
            KdTerm::Afd => self.afd = w,
        }
    }

    pub fn is_enabled(&self, term: KdTerm) -> bool {
        self.enabled.contains(&term)
    }

    /// Enabled terms in canonical order, without duplicates.
    pub fn active(&self) -> Vec<KdTerm> {
        KdTerm::ALL.into_iter().filter(|t| self.is_enabled(*t)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for t in KdTerm::ALL {
            let w = self.weight(t);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("kd.{t}"), format!("weight must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Task loss, each enabled raw term, and the weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T: Scalar = f64> {
    pub task: T,
    /// Unweighted value of each enabled term, canonical order.
    pub terms: Vec<(KdTerm, T)>,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn term(&self, t: KdTerm) -> Option<T> {
        self.terms.iter().find(|(k, _)| *k == t).map(|(_, v)| *v)
    }

    /// `task + Σ λ_i term_i` recomputed from the parts.
    pub fn recompute_total(&self, weights: &KdWeights) -> T {
        let mut total = self.task;
        for &(t, v) in &self.terms {
            total += T::of(weights.weight(t)) * v;
        }
        total
    }
}

/// Every embedding a combined loss may need.
///
/// Student embeddings live in the student's own space; terms comparing them
/// directly to the teacher (FD, MFD, GD, ICL) pass them through the model's
/// projection head first.
#[derive(Clone, Copy, Debug)]
pub struct KdInputs<'a, T: Scalar = f64> {
    pub model: &'a ClipModel<T>,
    pub student_v: &'a EmbeddingBatch<T>,
    pub student_s: &'a EmbeddingBatch<T>,
    pub masked_student_v: Option<&'a EmbeddingBatch<T>>,
    pub teacher_v: &'a EmbeddingBatch<T>,
    pub teacher_s: &'a EmbeddingBatch<T>,
    pub tau_student: T,
    pub tau_teacher: T,
    pub gd_mode: GdMode,
}

/// `L_CLIP + Σ λ_i L_i` over the enabled terms.
pub fn combined_loss<T: Scalar>(weights: &KdWeights, x: &KdInputs<'_, T>) -> Result<LossBreakdown<T>> {
    weights.validate()?;
    let task = clip_loss(x.student_v, x.student_s, x.tau_student)?;
    let active = weights.active();
    let needs_aligned = active
        .iter()
        .any(|t| matches!(t, KdTerm::Fd | KdTerm::Mfd | KdTerm::Gd | KdTerm::Icl));
    let td = x.teacher_v.d();
    let aligned = if needs_aligned {
        Some((
            project_student(x.model, x.student_v, td)?,
            project_student(x.model, x.student_s, td)?,
        ))
    } else {
        None
    };

    let mut terms = Vec::with_capacity(active.len());
    for term in active {
        let value = match term {
            KdTerm::Crd => crd_from_embeddings(
                x.teacher_v,
                x.teacher_s,
                x.student_v,
                x.student_s,
                x.tau_teacher,
                x.tau_student,
            )?,
            KdTerm::Fd => {
                let (v, s) = aligned.as_ref().unwrap();
                fd_loss(x.teacher_v, v, x.teacher_s, s)?
            }
            KdTerm::Mfd => {
                let masked = x
                    .masked_student_v
                    .ok_or_else(|| Error::config("kd.mfd", "enabled without masked student embeddings"))?;
                let (_, s) = aligned.as_ref().unwrap();
                let mv = project_student(x.model, masked, td)?;
                mfd_loss(x.teacher_v, &mv, x.teacher_s, s)?
            }
            KdTerm::Gd => {
                let (v, s) = aligned.as_ref().unwrap();
                gd_loss(x.teacher_v, x.teacher_s, v, s, x.tau_teacher, x.tau_student, x.gd_mode)?
            }
            KdTerm::Icl => {
                let (v, s) = aligned.as_ref().unwrap();
                icl_loss(v, s, x.teacher_v, x.teacher_s, x.tau_student)?
            }
            KdTerm::Afd => afd_loss(x.model, x.student_v, x.student_s, x.teacher_v, x.teacher_s, x.tau_student)?,
        };
        terms.push((term, value));
    }
    let mut out = LossBreakdown { task, terms, total: T::zero() };
    out.total = out.recompute_total(weights);
    Ok(out)
}

#[cfg(test)]
mod tests;
