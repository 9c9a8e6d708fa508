//! Reverse-mode differentiation of the combined loss through the encoders.

use crate::encoders::{encode_image, encode_text, ClipModel, EncoderTrace, MaskSpec, TokenEncoder};
use crate::error::{Error, Result};
use crate::losses::{KdTerm, KdWeights, LossBreakdown};
use crate::numcore::{l2_normalize_rows, matmul, matmul_nt, matmul_tn, row_norm, Matrix, NORM_EPS};
use crate::scalar::Scalar;

use super::embed;
use super::GdMode;

/// Frozen teacher embeddings for one batch.
#[derive(Clone, Debug)]
pub struct TeacherEmbeddings<T: Scalar = f64> {
    pub v: Matrix<T>,
    pub s: Matrix<T>,
    pub tau: T,
}

impl<T: Scalar> TeacherEmbeddings<T> {
    /// Runs `teacher` on unmasked inputs.
    pub fn compute(teacher: &ClipModel<T>, images: &Matrix<T>, texts: &Matrix<T>) -> Result<Self> {
        Ok(Self {
            v: encode_image(teacher, images, None)?.into_rows(),
            s: encode_text(teacher, texts)?.into_rows(),
            tau: teacher.temperature(),
        })
    }

    /// Row subset, e.g. a minibatch out of cached training-set embeddings.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            v: self.v.select_rows(idx),
            s: self.s.select_rows(idx),
            tau: self.tau,
        }
    }
}

/// Loss values plus the gradient of the total with respect to every student
/// parameter, laid out like the student.
#[derive(Clone, Debug)]
pub struct BackpropOutput<T: Scalar = f64> {
    pub breakdown: LossBreakdown<T>,
    pub grads: ClipModel<T>,
}

/// Gradient of `y = x / max(‖x‖, eps)` per row.
pub fn normalize_backward<T: Scalar>(raw: &Matrix<T>, d_out: &Matrix<T>, eps: T) -> Matrix<T> {
    let mut d_raw = Matrix::zeros(raw.rows(), raw.cols());
    for r in 0..raw.rows() {
        let x = raw.row(r);
        let g = d_out.row(r);
        let norm = row_norm(x);
        let dst = d_raw.row_mut(r);
        if norm < eps {
            for (d, &gv) in dst.iter_mut().zip(g) {
                *d = gv / eps;
            }
            continue;
        }
        let mut inner = T::zero();
        for (&xv, &gv) in x.iter().zip(g) {
            inner += xv * gv;
        }
        inner /= norm * norm;
        for ((d, &xv), &gv) in dst.iter_mut().zip(x).zip(g) {
            *d = (gv - inner * xv) / norm;
        }
    }
    d_raw
}

fn column_sums_into<T: Scalar>(acc: &mut Matrix<T>, m: &Matrix<T>) {
    let sums = m.column_sums();
    acc.axpy(T::one(), &sums);
}

/// Accumulates the gradient of `⟨d_out, encoder(inputs)⟩` into `grad`.
fn encoder_backward<T: Scalar>(
    enc: &TokenEncoder<T>,
    inputs: &Matrix<T>,
    trace: &EncoderTrace<T>,
    d_out: &Matrix<T>,
    grad: &mut TokenEncoder<T>,
) -> Result<()> {
    let d_raw = normalize_backward(&trace.raw, d_out, T::of(NORM_EPS));
    grad.head_w.axpy(T::one(), &matmul_tn(&trace.pooled, &d_raw)?);
    column_sums_into(&mut grad.head_b, &d_raw);
    let d_pooled = matmul_nt(&d_raw, &enc.head_w)?;

    let tokens = *trace.offsets.last().unwrap();
    let mut d_h = Matrix::zeros(tokens, enc.width());
    for i in 0..trace.kept.len() {
        let (lo, hi) = (trace.offsets[i], trace.offsets[i + 1]);
        let inv = T::one() / T::of_usize(hi - lo);
        for t in lo..hi {
            for (d, &g) in d_h.row_mut(t).iter_mut().zip(d_pooled.row(i)) {
                *d = g * inv;
            }
        }
    }

    for (l, block) in enc.blocks.iter().enumerate().rev() {
        let z = &trace.activations[l];
        let d_pre = Matrix::from_fn(tokens, enc.width(), |r, c| {
            let zv = z[(r, c)];
            d_h[(r, c)] * (T::one() - zv * zv)
        });
        grad.blocks[l].w.axpy(T::one(), &matmul_tn(&trace.hidden[l], &d_pre)?);
        column_sums_into(&mut grad.blocks[l].b, &d_pre);
        d_h.axpy(T::one(), &matmul_nt(&d_pre, &block.w)?);
    }

    let in_dim = enc.shape.in_dim;
    let mut t = 0;
    for (i, positions) in trace.kept.iter().enumerate() {
        let x = inputs.row(i);
        for &p in positions {
            let g = d_h.row(t);
            for (d, &gv) in grad.embed_b.row_mut(p).iter_mut().zip(g) {
                *d += gv;
            }
            for j in 0..in_dim {
                let xj = x[p * in_dim + j];
                for (d, &gv) in grad.embed_w.row_mut(p * in_dim + j).iter_mut().zip(g) {
                    *d += xj * gv;
                }
            }
            t += 1;
        }
    }
    Ok(())
}

/// Student embeddings in the teacher's space, with what is needed to chain
/// gradients back through the projection head.
struct Aligned<T: Scalar> {
    pre: Option<Matrix<T>>,
    out: Matrix<T>,
}

fn align<T: Scalar>(model: &ClipModel<T>, e: &Matrix<T>, teacher_dim: usize) -> Result<Aligned<T>> {
    match &model.projection {
        Some(p) => {
            if p.rows() != e.cols() || p.cols() != teacher_dim {
                return Err(Error::config(
                    "projection",
                    format!("head is {}x{}, need {}x{teacher_dim}", p.rows(), p.cols(), e.cols()),
                ));
            }
            let pre = matmul(e, p)?;
            let out = l2_normalize_rows(&pre, T::of(NORM_EPS));
            Ok(Aligned { pre: Some(pre), out })
        }
        None if e.cols() == teacher_dim => Ok(Aligned {
            pre: None,
            out: e.clone(),
        }),
        None => Err(Error::config(
            "projection",
            format!(
                "student dim {} differs from teacher dim {teacher_dim} and no projection head is configured",
                e.cols()
            ),
        )),
    }
}

/// Chains `d_aligned` into the student embedding gradient `d_e` and the
/// projection gradient.
fn unalign<T: Scalar>(
    model: &ClipModel<T>,
    e: &Matrix<T>,
    a: &Aligned<T>,
    d_aligned: &Matrix<T>,
    d_e: &mut Matrix<T>,
    d_proj: Option<&mut Matrix<T>>,
) -> Result<()> {
    match (&a.pre, &model.projection, d_proj) {
        (Some(pre), Some(p), Some(dp)) => {
            let d_pre = normalize_backward(pre, d_aligned, T::of(NORM_EPS));
            dp.axpy(T::one(), &matmul_tn(e, &d_pre)?);
            d_e.axpy(T::one(), &matmul_nt(&d_pre, p)?);
        }
        _ => d_e.axpy(T::one(), d_aligned),
    }
    Ok(())
}

struct Fused<T: Scalar> {
    joined: Matrix<T>,
    pre: Matrix<T>,
    out: Matrix<T>,
}

fn fuse<T: Scalar>(head: Option<&Matrix<T>>, name: &str, student: &Matrix<T>, teacher: &Matrix<T>) -> Result<Fused<T>> {
    let head = head.ok_or_else(|| Error::config(name, "fusion head is not configured"))?;
    if head.rows() != student.cols() + teacher.cols() {
        return Err(Error::config(
            name,
            format!("head expects {} inputs, got {} + {}", head.rows(), student.cols(), teacher.cols()),
        ));
    }
    let joined = student.hcat(teacher)?;
    let pre = matmul(&joined, head)?;
    let out = l2_normalize_rows(&pre, T::of(NORM_EPS));
    Ok(Fused { joined, pre, out })
}

fn unfuse<T: Scalar>(head: &Matrix<T>, f: &Fused<T>, d_out: &Matrix<T>, d_student: &mut Matrix<T>, d_head: &mut Matrix<T>) -> Result<()> {
    let d_pre = normalize_backward(&f.pre, d_out, T::of(NORM_EPS));
    d_head.axpy(T::one(), &matmul_tn(&f.joined, &d_pre)?);
    let d_joined = matmul_nt(&d_pre, head)?;
    d_student.axpy(T::one(), &d_joined.columns(0, d_student.cols()));
    Ok(())
}

/// Loss and parameter gradient with the teacher running on the same batch.
#[allow(clippy::too_many_arguments)]
pub fn backprop_model<T: Scalar>(
    student: &ClipModel<T>,
    teacher: &ClipModel<T>,
    images: &Matrix<T>,
    texts: &Matrix<T>,
    weights: &KdWeights,
    masks: Option<&[MaskSpec]>,
    gd_mode: GdMode,
) -> Result<BackpropOutput<T>> {
    let t = TeacherEmbeddings::compute(teacher, images, texts)?;
    backprop_with_teacher(student, &t, images, texts, weights, masks, gd_mode)
}

/// Loss and parameter gradient given precomputed teacher embeddings.
///
/// `masks` feeds the masked image pass used by MFD and is required when MFD
/// is enabled.
pub fn backprop_with_teacher<T: Scalar>(
    student: &ClipModel<T>,
    teacher: &TeacherEmbeddings<T>,
    images: &Matrix<T>,
    texts: &Matrix<T>,
    weights: &KdWeights,
    masks: Option<&[MaskSpec]>,
    gd_mode: GdMode,
) -> Result<BackpropOutput<T>> {
    backprop_impl(student, Some(teacher), images, texts, weights, masks, gd_mode)
}

/// Gradient of the plain CLIP loss, as used for teacher pretraining.
pub fn backprop_task<T: Scalar>(model: &ClipModel<T>, images: &Matrix<T>, texts: &Matrix<T>) -> Result<BackpropOutput<T>> {
    backprop_impl(model, None, images, texts, &KdWeights::default(), None, GdMode::default())
}

fn backprop_impl<T: Scalar>(
    student: &ClipModel<T>,
    teacher: Option<&TeacherEmbeddings<T>>,
    images: &Matrix<T>,
    texts: &Matrix<T>,
    weights: &KdWeights,
    masks: Option<&[MaskSpec]>,
    gd_mode: GdMode,
) -> Result<BackpropOutput<T>> {
    weights.validate()?;
    let active = weights.active();
    let img = student.forward_image(images, None)?;
    let txt = student.forward_text(texts)?;
    let n = img.out.rows();
    if texts.rows() != n {
        return Err(Error::dim("backprop", format!("{n} images, {} texts", texts.rows())));
    }
    let (v, s) = (&img.out, &txt.out);
    let c = student.log_inverse_temperature().exp();

    let mut grads = student.zeros_like();
    let mut d_v = Matrix::zeros(n, v.cols());
    let mut d_s = Matrix::zeros(n, s.cols());
    let mut d_c;

    let task = embed::clip(v, s, c)?;
    d_v.axpy(T::one(), &task.d_a);
    d_s.axpy(T::one(), &task.d_b);
    d_c = task.d_scale;

    let teacher = match teacher {
        Some(t) => t,
        None if active.is_empty() => {
            return finish(student, images, texts, &img, &txt, d_v, d_s, d_c * c, grads, task.value, Vec::new(), weights, None)
        }
        None => return Err(Error::config("kd", "distillation terms enabled without a teacher")),
    };
    if teacher.v.rows() != n || teacher.s.rows() != n {
        return Err(Error::dim("backprop", format!("{n} pairs, {} teacher rows", teacher.v.rows())));
    }
    let (tv, ts) = (&teacher.v, &teacher.s);
    let c_t = T::one() / teacher.tau;
    let td = tv.cols();

    let needs_aligned = active
        .iter()
        .any(|t| matches!(t, KdTerm::Fd | KdTerm::Mfd | KdTerm::Gd | KdTerm::Icl));
    let aligned = if needs_aligned {
        Some((align(student, v, td)?, align(student, s, td)?))
    } else {
        None
    };
    let mut d_av = Matrix::zeros(n, td);
    let mut d_as = Matrix::zeros(n, td);
    let mut masked = None;

    let mut terms = Vec::with_capacity(active.len());
    for term in active {
        let w = T::of(weights.weight(term));
        let value = match term {
            KdTerm::Crd => {
                let g = embed::crd(tv, ts, v, s, c_t, c)?;
                d_v.axpy(w, &g.d_a);
                d_s.axpy(w, &g.d_b);
                d_c += w * g.d_scale;
                g.value
            }
            KdTerm::Fd => {
                let (av, as_) = aligned.as_ref().unwrap();
                let (lv, gv) = embed::mean_sq(tv, &av.out)?;
                let (ls, gs) = embed::mean_sq(ts, &as_.out)?;
                d_av.axpy(w, &gv);
                d_as.axpy(w, &gs);
                lv + ls
            }
            KdTerm::Mfd => {
                let masks = masks.ok_or_else(|| Error::config("kd.mfd", "enabled without a patch mask"))?;
                let trace = student.forward_image(images, Some(masks))?;
                let am = align(student, &trace.out, td)?;
                let (_, as_) = aligned.as_ref().unwrap();
                let (lv, gv) = embed::mean_sq(tv, &am.out)?;
                let (ls, gs) = embed::mean_sq(ts, &as_.out)?;
                d_as.axpy(w, &gs);
                let value = lv + ls;
                masked = Some((trace, am, gv.scale(w)));
                value
            }
            KdTerm::Gd => {
                let (av, as_) = aligned.as_ref().unwrap();
                let g = embed::gd(tv, ts, &av.out, &as_.out, c_t, c, gd_mode)?;
                d_av.axpy(w, &g.d_a);
                d_as.axpy(w, &g.d_b);
                d_c += w * g.d_scale;
                g.value
            }
            KdTerm::Icl => {
                let (av, as_) = aligned.as_ref().unwrap();
                let g = embed::icl(&av.out, &as_.out, tv, ts, c)?;
                d_av.axpy(w, &g.d_a);
                d_as.axpy(w, &g.d_b);
                d_c += w * g.d_scale;
                g.value
            }
            KdTerm::Afd => {
                let fv = fuse(student.fusion_image.as_ref(), "fusion_image", v, tv)?;
                let fs = fuse(student.fusion_text.as_ref(), "fusion_text", s, ts)?;
                let g = embed::clip(&fv.out, &fs.out, c)?;
                unfuse(
                    student.fusion_image.as_ref().unwrap(),
                    &fv,
                    &g.d_a.scale(w),
                    &mut d_v,
                    grads.fusion_image.as_mut().unwrap(),
                )?;
                unfuse(
                    student.fusion_text.as_ref().unwrap(),
                    &fs,
                    &g.d_b.scale(w),
                    &mut d_s,
                    grads.fusion_text.as_mut().unwrap(),
                )?;
                d_c += w * g.d_scale;
                g.value
            }
        };
        terms.push((term, value));
    }

    if let Some((av, as_)) = &aligned {
        unalign(student, v, av, &d_av, &mut d_v, grads.projection.as_mut())?;
        unalign(student, s, as_, &d_as, &mut d_s, grads.projection.as_mut())?;
    }
    let masked_grad = match masked {
        Some((trace, am, d_am)) => {
            let mut d_vm = Matrix::zeros(n, v.cols());
            unalign(student, &trace.out, &am, &d_am, &mut d_vm, grads.projection.as_mut())?;
            Some((trace, d_vm))
        }
        None => None,
    };
    finish(student, images, texts, &img, &txt, d_v, d_s, d_c * c, grads, task.value, terms, weights, masked_grad)
}

/// Pushes embedding gradients through both encoders and assembles the output.
#[allow(clippy::too_many_arguments)]
fn finish<T: Scalar>(
    student: &ClipModel<T>,
    images: &Matrix<T>,
    texts: &Matrix<T>,
    img: &EncoderTrace<T>,
    txt: &EncoderTrace<T>,
    d_v: Matrix<T>,
    d_s: Matrix<T>,
    d_log_scale: T,
    mut grads: ClipModel<T>,
    task: T,
    terms: Vec<(KdTerm, T)>,
    weights: &KdWeights,
    masked: Option<(EncoderTrace<T>, Matrix<T>)>,
) -> Result<BackpropOutput<T>> {
    if let Some((trace, d_vm)) = &masked {
        encoder_backward(&student.image, images, trace, d_vm, &mut grads.image)?;
    }
    encoder_backward(&student.image, images, img, &d_v, &mut grads.image)?;
    encoder_backward(&student.text, texts, txt, &d_s, &mut grads.text)?;
    grads.logit_scale[(0, 0)] = d_log_scale;

    let mut breakdown = LossBreakdown {
        task,
        terms,
        total: T::zero(),
    };
    breakdown.total = breakdown.recompute_total(weights);
    Ok(BackpropOutput { breakdown, grads })
}
