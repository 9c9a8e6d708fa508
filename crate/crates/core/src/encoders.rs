//! Toy dual encoders, projection and fusion heads, patch masking and the
//! learnable temperature.
//!
//! Both towers share one architecture ([`TokenEncoder`]): every input
//! position has its own linear embedder, tokens pass through residual `tanh`
//! MLP blocks, are averaged, and a linear head maps the average to the
//! embedding space. Images are patch sequences, texts are token sequences.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;
use crate::numcore::{l2_normalize_rows, matmul, Matrix, RngStream, NORM_EPS};
use crate::scalar::Scalar;

/// Upper bound on `exp(logit_scale)`, i.e. on the inverse temperature.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

const TAG_INIT: u32 = 0x1A17;

/// Architecture of one CLIP model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    /// Initial temperature (not its inverse).
    pub init_tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::student()
    }
}

impl ModelConfig {
    pub fn teacher() -> Self {
        Self {
            width: 128,
            blocks: 4,
            embed_dim: 32,
            init_tau: 0.07,
        }
    }

    pub fn student() -> Self {
        Self {
            width: 32,
            blocks: 2,
            embed_dim: 32,
            init_tau: 0.07,
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config(format!("{prefix}.width"), "must be >= 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config(format!("{prefix}.embed_dim"), "must be >= 1"));
        }
        if !(self.init_tau > 0.0 && self.init_tau.is_finite())
            || 1.0 / self.init_tau > MAX_LOGIT_SCALE
        {
            return Err(Error::config(
                format!("{prefix}.init_tau"),
                format!("must lie in [{}, inf)", 1.0 / MAX_LOGIT_SCALE),
            ));
        }
        Ok(())
    }
}

/// Input geometry of one tower: `positions` slots of `in_dim` features each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub positions: usize,
    pub in_dim: usize,
}

impl InputShape {
    pub fn flat_len(&self) -> usize {
        self.positions * self.in_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Scalar = f64> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
}

/// Position-wise embedder → residual `tanh` blocks → mean pool → linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEncoder<T: Scalar = f64> {
    pub shape: InputShape,
    /// `(positions * in_dim) x width`; rows `p*in_dim..(p+1)*in_dim` embed position `p`.
    pub embed_w: Matrix<T>,
    /// `positions x width`
    pub embed_b: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    /// `width x embed_dim`
    pub head_w: Matrix<T>,
    pub head_b: Matrix<T>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T: Scalar = f64> {
    /// Input positions used for each row, ascending.
    pub kept: Vec<Vec<usize>>,
    /// Token row range of sample `i` is `offsets[i]..offsets[i + 1]`.
    pub offsets: Vec<usize>,
    /// Block inputs `H_0 .. H_{L-1}` followed by the final token states.
    pub hidden: Vec<Matrix<T>>,
    /// `tanh` outputs of each block.
    pub activations: Vec<Matrix<T>>,
    pub pooled: Matrix<T>,
    /// Head output before normalisation.
    pub raw: Matrix<T>,
    /// Normalised embeddings.
    pub out: Matrix<T>,
}

fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.normal() * std))
}

impl<T: Scalar> TokenEncoder<T> {
    pub fn new(shape: InputShape, cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let w = cfg.width;
        let embed_std = 1.0 / (shape.in_dim as f64).sqrt();
        let block_std = 1.0 / (w as f64).sqrt();
        Self {
            shape,
            embed_w: gaussian(shape.flat_len(), w, embed_std, rng),
            embed_b: Matrix::zeros(shape.positions, w),
            blocks: (0..cfg.blocks)
                .map(|_| Block {
                    w: gaussian(w, w, block_std, rng),
                    b: Matrix::zeros(1, w),
                })
                .collect(),
            head_w: gaussian(w, cfg.embed_dim, block_std, rng),
            head_b: Matrix::zeros(1, cfg.embed_dim),
        }
    }

    pub fn width(&self) -> usize {
        self.embed_w.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.head_w.cols()
    }

    /// Forward pass over `inputs` (`n x positions*in_dim`). `kept`, when
    /// given, lists the positions each row keeps; dropped positions leave the
    /// token average entirely.
    pub fn forward(&self, inputs: &Matrix<T>, kept: Option<Vec<Vec<usize>>>) -> Result<EncoderTrace<T>> {
        let n = inputs.rows();
        if inputs.cols() != self.shape.flat_len() {
            return Err(Error::dim(
                "encoder forward",
                format!(
                    "input has {} features, encoder expects {} ({} positions x {})",
                    inputs.cols(),
                    self.shape.flat_len(),
                    self.shape.positions,
                    self.shape.in_dim
                ),
            ));
        }
        let kept = match kept {
            Some(k) => {
                if k.len() != n {
                    return Err(Error::dim("encoder forward", format!("{} masks for {n} rows", k.len())));
                }
                k
            }
            None => vec![(0..self.shape.positions).collect(); n],
        };
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for k in &kept {
            offsets.push(offsets.last().unwrap() + k.len());
        }
        let tokens = *offsets.last().unwrap();
        let width = self.width();
        let in_dim = self.shape.in_dim;

        let mut h = Matrix::zeros(tokens, width);
        let mut t = 0;
        for (i, positions) in kept.iter().enumerate() {
            let x = inputs.row(i);
            for &p in positions {
                let out = h.row_mut(t);
                out.copy_from_slice(self.embed_b.row(p));
                for j in 0..in_dim {
                    let xj = x[p * in_dim + j];
                    for (o, &wv) in out.iter_mut().zip(self.embed_w.row(p * in_dim + j)) {
                        *o += xj * wv;
                    }
                }
                t += 1;
            }
        }

        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        let mut activations = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut z = matmul(&h, &block.w)?;
            for r in 0..z.rows() {
                for (v, &b) in z.row_mut(r).iter_mut().zip(block.b.as_slice()) {
                    *v = tanh(*v + b);
                }
            }
            let next = h.add(&z)?;
            hidden.push(h);
            activations.push(z);
            h = next;
        }

        let mut pooled = Matrix::zeros(n, width);
        for i in 0..n {
            let count = T::of_usize(offsets[i + 1] - offsets[i]);
            let dst = pooled.row_mut(i);
            for t in offsets[i]..offsets[i + 1] {
                for (d, &v) in dst.iter_mut().zip(h.row(t)) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d /= count;
            }
        }
        hidden.push(h);

        let mut raw = matmul(&pooled, &self.head_w)?;
        for r in 0..n {
            for (v, &b) in raw.row_mut(r).iter_mut().zip(self.head_b.as_slice()) {
                *v += b;
            }
        }
        let out = l2_normalize_rows(&raw, T::of(NORM_EPS));
        Ok(EncoderTrace {
            kept,
            offsets,
            hidden,
            activations,
            pooled,
            raw,
            out,
        })
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            shape: self.shape,
            embed_w: z(&self.embed_w),
            embed_b: z(&self.embed_b),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block { w: z(&b.w), b: z(&b.b) })
                .collect(),
            head_w: z(&self.head_w),
            head_b: z(&self.head_b),
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix<T>)>) {
        out.push((format!("{prefix}.embed_w"), &self.embed_w));
        out.push((format!("{prefix}.embed_b"), &self.embed_b));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("{prefix}.block{i}.w"), &b.w));
            out.push((format!("{prefix}.block{i}.b"), &b.b));
        }
        out.push((format!("{prefix}.head_w"), &self.head_w));
        out.push((format!("{prefix}.head_b"), &self.head_b));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix<T>>) {
        out.push(&mut self.embed_w);
        out.push(&mut self.embed_b);
        for b in self.blocks.iter_mut() {
            out.push(&mut b.w);
            out.push(&mut b.b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
    }
}

/// Image and text encoders plus optional heads and the learnable log inverse
/// temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipModel<T: Scalar = f64> {
    pub image: TokenEncoder<T>,
    pub text: TokenEncoder<T>,
    /// Student → teacher embedding map, `d_student x d_teacher`, no bias.
    pub projection: Option<Matrix<T>>,
    /// Fusion head over `[student | teacher]` image embeddings,
    /// `(d_student + d_teacher) x d_student`, no bias.
    pub fusion_image: Option<Matrix<T>>,
    pub fusion_text: Option<Matrix<T>>,
    /// `1 x 1`, holds `log(1 / tau)`.
    pub logit_scale: Matrix<T>,
}

impl<T: Scalar> ClipModel<T> {
    pub fn new(cfg: &ModelConfig, image: InputShape, text: InputShape, seed: u64) -> Self {
        let mut rng = RngStream::keyed(seed, TAG_INIT, 0);
        let image = TokenEncoder::new(image, cfg, &mut rng);
        let text = TokenEncoder::new(text, cfg, &mut rng);
        let mut logit_scale = Matrix::zeros(1, 1);
        logit_scale[(0, 0)] = T::of((1.0 / cfg.init_tau).ln());
        Self {
            image,
            text,
            projection: None,
            fusion_image: None,
            fusion_text: None,
            logit_scale,
        }
    }

    /// Adds a random projection head to `teacher_dim`.
    pub fn with_projection(mut self, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = RngStream::keyed(seed, TAG_INIT, 1);
        let d = self.embed_dim();
        self.projection = Some(gaussian(d, teacher_dim, 1.0 / (d as f64).sqrt(), &mut rng));
        self
    }

    /// Adds random fusion heads for a teacher of width `teacher_dim`.
    pub fn with_fusion(mut self, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = RngStream::keyed(seed, TAG_INIT, 2);
        let d = self.embed_dim();
        let std = 1.0 / ((d + teacher_dim) as f64).sqrt();
        self.fusion_image = Some(gaussian(d + teacher_dim, d, std, &mut rng));
        self.fusion_text = Some(gaussian(d + teacher_dim, d, std, &mut rng));
        self
    }

    pub fn embed_dim(&self) -> usize {
        self.image.embed_dim()
    }

    pub fn log_inverse_temperature(&self) -> T {
        self.logit_scale[(0, 0)]
    }

    pub fn temperature(&self) -> T {
        (-self.log_inverse_temperature()).exp()
    }

    /// Enforces `exp(logit_scale) <= MAX_LOGIT_SCALE`.
    pub fn clamp_temperature(&mut self) {
        let max = T::of(MAX_LOGIT_SCALE.ln());
        let v = &mut self.logit_scale[(0, 0)];
        if *v > max {
            *v = max;
        }
    }

    /// All tensors with stable names, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        self.image.tensors("image", &mut out);
        self.text.tensors("text", &mut out);
        if let Some(p) = &self.projection {
            out.push(("projection".into(), p));
        }
        if let Some(f) = &self.fusion_image {
            out.push(("fusion_image".into(), f));
        }
        if let Some(f) = &self.fusion_text {
            out.push(("fusion_text".into(), f));
        }
        out.push(("logit_scale".into(), &self.logit_scale));
        out
    }

    /// Mutable tensors in the same order as [`ClipModel::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = Vec::new();
        self.image.tensors_mut(&mut out);
        self.text.tensors_mut(&mut out);
        if let Some(p) = &mut self.projection {
            out.push(p);
        }
        if let Some(f) = &mut self.fusion_image {
            out.push(f);
        }
        if let Some(f) = &mut self.fusion_text {
            out.push(f);
        }
        out.push(&mut self.logit_scale);
        out
    }

    /// A model of identical layout with every tensor zeroed; used to
    /// accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            image: self.image.zeros_like(),
            text: self.text.zeros_like(),
            projection: self.projection.as_ref().map(z),
            fusion_image: self.fusion_image.as_ref().map(z),
            fusion_text: self.fusion_text.as_ref().map(z),
            logit_scale: Matrix::zeros(1, 1),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }

    /// Flattens every tensor into one vector (checkpoint order).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (_, m) in self.tensors() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// Inverse of [`ClipModel::flatten`].
    pub fn unflatten(&mut self, values: &[T]) {
        assert_eq!(values.len(), self.parameter_count(), "parameter vector length");
        let mut at = 0;
        for m in self.tensors_mut() {
            let len = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&values[at..at + len]);
            at += len;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

/// Patch subset kept by masked feature distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub patch_count: usize,
    pub kept: Vec<usize>,
}

impl MaskSpec {
    /// Mask that keeps every patch.
    pub fn full(patch_count: usize) -> Self {
        Self {
            ratio: 0.0,
            patch_count,
            kept: (0..patch_count).collect(),
        }
    }

    pub fn kept_count(ratio: f64, patch_count: usize) -> usize {
        (((1.0 - ratio) * patch_count as f64).round() as usize).clamp(1, patch_count.max(1))
    }
}

/// Draws a uniformly random kept-patch subset.
pub fn sample_mask(rng: &mut RngStream, patch_count: usize, ratio: f64) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config("mask_ratio", format!("{ratio} is outside [0, 1)")));
    }
    if patch_count == 0 {
        return Err(Error::config("patch_count", "must be >= 1"));
    }
    let keep = MaskSpec::kept_count(ratio, patch_count);
    let kept = if keep == patch_count {
        (0..patch_count).collect()
    } else {
        rng.subset(patch_count, keep)
    };
    Ok(MaskSpec {
        ratio,
        patch_count,
        kept,
    })
}

fn mask_positions(masks: &[MaskSpec], n: usize, positions: usize) -> Result<Vec<Vec<usize>>> {
    if masks.len() != n && masks.len() != 1 {
        return Err(Error::dim("encode_image", format!("{} masks for {n} images", masks.len())));
    }
    for m in masks {
        if m.patch_count != positions {
            return Err(Error::dim(
                "encode_image",
                format!("mask over {} patches, image has {positions}", m.patch_count),
            ));
        }
        if m.kept.iter().any(|&p| p >= positions) || m.kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::dim("encode_image", "mask indices must be strictly increasing and in range"));
        }
    }
    Ok((0..n).map(|i| masks[i.min(masks.len() - 1)].kept.clone()).collect())
}

impl<T: Scalar> ClipModel<T> {
    /// Traced image forward; `masks` holds one mask per image or a single
    /// mask shared by all.
    pub fn forward_image(&self, images: &Matrix<T>, masks: Option<&[MaskSpec]>) -> Result<EncoderTrace<T>> {
        let kept = masks
            .map(|m| mask_positions(m, images.rows(), self.image.shape.positions))
            .transpose()?;
        self.image.forward(images, kept)
    }

    pub fn forward_text(&self, texts: &Matrix<T>) -> Result<EncoderTrace<T>> {
        self.text.forward(texts, None)
    }
}

/// Hyperbolic tangent through one `exp` call, odd by construction.
///
/// Accurate to a few ulps of 1 in absolute terms, which is all the residual
/// blocks need, and several times cheaper than the libm routine.
#[inline]
pub(crate) fn tanh<T: Scalar>(x: T) -> T {
    let e = (-(x.abs() + x.abs())).exp();
    let y = (T::one() - e) / (T::one() + e);
    if x < T::zero() {
        -y
    } else {
        y
    }
}

/// Rows encoded per forward pass when no gradient is needed; bounds the
/// memory held by activation traces.
const INFERENCE_CHUNK: usize = 256;

fn encode_chunked<T: Scalar>(
    n: usize,
    mut f: impl FnMut(std::ops::Range<usize>) -> Result<Matrix<T>>,
) -> Result<EmbeddingBatch<T>> {
    if n <= INFERENCE_CHUNK {
        return Ok(EmbeddingBatch::assume_normalized(f(0..n)?));
    }
    let mut out: Option<Matrix<T>> = None;
    for lo in (0..n).step_by(INFERENCE_CHUNK) {
        let part = f(lo..(lo + INFERENCE_CHUNK).min(n))?;
        out = Some(match out {
            None => part,
            Some(acc) => acc.vcat(&part)?,
        });
    }
    Ok(EmbeddingBatch::assume_normalized(out.expect("n > 0")))
}

fn row_range<T: Scalar>(m: &Matrix<T>, r: std::ops::Range<usize>) -> Cow<'_, Matrix<T>> {
    if r.start == 0 && r.end == m.rows() {
        return Cow::Borrowed(m);
    }
    let idx: Vec<usize> = r.collect();
    Cow::Owned(m.select_rows(&idx))
}

/// Image embeddings `v_k = f_i(I_k)`, optionally from masked inputs.
pub fn encode_image<T: Scalar>(
    model: &ClipModel<T>,
    images: &Matrix<T>,
    masks: Option<&[MaskSpec]>,
) -> Result<EmbeddingBatch<T>> {
    let n = images.rows();
    if let Some(m) = masks {
        if m.len() != n && m.len() != 1 {
            return Err(Error::dim("encode_image", format!("{} masks for {n} images", m.len())));
        }
    }
    encode_chunked(n, |r| {
        let part = row_range(images, r.clone());
        let mask_part = masks.map(|m| if m.len() == 1 { m } else { &m[r.clone()] });
        Ok(model.forward_image(&part, mask_part)?.out)
    })
}

/// Text embeddings `s_k = f_t(T_k)`.
pub fn encode_text<T: Scalar>(model: &ClipModel<T>, texts: &Matrix<T>) -> Result<EmbeddingBatch<T>> {
    let n = texts.rows();
    encode_chunked(n, |r| {
        let part = row_range(texts, r);
        Ok(model.forward_text(&part)?.out)
    })
}

/// Maps student embeddings into the teacher's space (`teacher_dim`).
///
/// The head has no bias, so projecting the normalised embedding and then
/// renormalising equals projecting the pre-normalisation output.
pub fn project_student<T: Scalar>(
    model: &ClipModel<T>,
    e: &EmbeddingBatch<T>,
    teacher_dim: usize,
) -> Result<EmbeddingBatch<T>> {
    match &model.projection {
        Some(p) => {
            if p.rows() != e.d() || p.cols() != teacher_dim {
                return Err(Error::config(
                    "projection",
                    format!(
                        "head is {}x{}, need {}x{teacher_dim}",
                        p.rows(),
                        p.cols(),
                        e.d()
                    ),
                ));
            }
            Ok(EmbeddingBatch::from_raw(&matmul(e.rows(), p)?))
        }
        None if e.d() == teacher_dim => Ok(e.clone()),
        None => Err(Error::config(
            "projection",
            format!("student dim {} differs from teacher dim {teacher_dim} and no projection head is configured", e.d()),
        )),
    }
}

fn fuse_one<T: Scalar>(
    head: Option<&Matrix<T>>,
    name: &str,
    student: &EmbeddingBatch<T>,
    teacher: &EmbeddingBatch<T>,
) -> Result<EmbeddingBatch<T>> {
    let head = head.ok_or_else(|| Error::config(name, "fusion head is not configured"))?;
    if student.n() != teacher.n() {
        return Err(Error::dim("fuse_embeddings", format!("{} vs {} rows", student.n(), teacher.n())));
    }
    if head.rows() != student.d() + teacher.d() {
        return Err(Error::config(
            name,
            format!(
                "head expects {} inputs, got {} + {}",
                head.rows(),
                student.d(),
                teacher.d()
            ),
        ));
    }
    let joined = student.rows().hcat(teacher.rows())?;
    Ok(EmbeddingBatch::from_raw(&matmul(&joined, head)?))
}

/// `v^A = φ_i(v^S ‖ v^T)`, `s^A = φ_t(s^S ‖ s^T)`, each renormalised.
pub fn fuse_embeddings<T: Scalar>(
    model: &ClipModel<T>,
    student_v: &EmbeddingBatch<T>,
    student_s: &EmbeddingBatch<T>,
    teacher_v: &EmbeddingBatch<T>,
    teacher_s: &EmbeddingBatch<T>,
) -> Result<(EmbeddingBatch<T>, EmbeddingBatch<T>)> {
    Ok((
        fuse_one(model.fusion_image.as_ref(), "fusion_image", student_v, teacher_v)?,
        fuse_one(model.fusion_text.as_ref(), "fusion_text", student_s, teacher_s)?,
    ))
}

/// Fusion head `[I | 0]ᵀ`, selecting the student half.
pub fn select_student_head<T: Scalar>(student_dim: usize, teacher_dim: usize) -> Matrix<T> {
    Matrix::from_fn(student_dim + teacher_dim, student_dim, |r, c| {
        if r == c {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Fusion head `[0 | I]ᵀ`, selecting the teacher half (requires equal dims).
pub fn select_teacher_head<T: Scalar>(student_dim: usize, teacher_dim: usize) -> Matrix<T> {
    Matrix::from_fn(student_dim + teacher_dim, student_dim, |r, c| {
        if r == student_dim + c {
            T::one()
        } else {
            T::zero()
        }
    })
}
