//! Retrieval, zero-shot classification and teacher/student similarity
//! statistics.
//!
//! Rankings break ties toward the lower index.

use std::fmt;

use crate::data::PairBatch;
use crate::encoders::{encode_image, encode_text, project_student, ClipModel};
use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;
use crate::numcore::{center_columns, matmul_nt, matmul_tn, Matrix};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalDirection {
    ImageToText,
    TextToImage,
}

impl fmt::Display for RetrievalDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalDirection::ImageToText => "i2t",
            RetrievalDirection::TextToImage => "t2i",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: RetrievalDirection,
    pub ks: Vec<usize>,
    /// `recall[i]` is R@`ks[i]`.
    pub recall: Vec<f64>,
    pub n: usize,
}

impl RetrievalReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Position of `target` when `row` is sorted by descending value, ties to
/// the lower index.
fn rank_of(row: &[f64], target: usize) -> usize {
    let t = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > t || (x == t && j < target))
        .count()
}

fn sims<T: Scalar>(a: &EmbeddingBatch<T>, b: &EmbeddingBatch<T>) -> Result<Matrix<f64>> {
    matmul_nt(&a.rows().cast::<f64>(), &b.rows().cast::<f64>())
}

/// Query `i` is paired with gallery row `i`; a hit at `k` means the partner
/// ranks among the top `k` gallery rows by dot product.
pub fn recall_at_k<T: Scalar>(
    query: &EmbeddingBatch<T>,
    gallery: &EmbeddingBatch<T>,
    ks: &[usize],
    direction: RetrievalDirection,
) -> Result<RetrievalReport> {
    if query.n() != gallery.n() || query.d() != gallery.d() || query.n() == 0 {
        return Err(Error::dim(
            "recall_at_k",
            format!("{}x{} queries vs {}x{} gallery", query.n(), query.d(), gallery.n(), gallery.d()),
        ));
    }
    let s = sims(query, gallery)?;
    let ranks: Vec<usize> = (0..query.n()).map(|i| rank_of(s.row(i), i)).collect();
    let n = query.n();
    let recall = ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
        .collect();
    Ok(RetrievalReport {
        direction,
        ks: ks.to_vec(),
        recall,
        n,
    })
}

/// Image→text and text→image reports at R@{1,5,10}.
pub fn retrieval<T: Scalar>(v: &EmbeddingBatch<T>, s: &EmbeddingBatch<T>) -> Result<(RetrievalReport, RetrievalReport)> {
    Ok((
        recall_at_k(v, s, &DEFAULT_KS, RetrievalDirection::ImageToText)?,
        recall_at_k(s, v, &DEFAULT_KS, RetrievalDirection::TextToImage)?,
    ))
}

/// Top-1 accuracy of nearest-prototype classification.
pub fn zero_shot_accuracy<T: Scalar>(images: &EmbeddingBatch<T>, prompts: &EmbeddingBatch<T>, labels: &[usize]) -> Result<f64> {
    if images.n() != labels.len() || images.d() != prompts.d() || images.n() == 0 {
        return Err(Error::dim(
            "zero_shot_accuracy",
            format!(
                "{} images of dim {}, {} labels, prompts of dim {}",
                images.n(),
                images.d(),
                labels.len(),
                prompts.d()
            ),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= prompts.n()) {
        return Err(Error::dim("zero_shot_accuracy", format!("label {bad} with {} classes", prompts.n())));
    }
    let s = sims(images, prompts)?;
    let correct = s
        .row_iter()
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Linear CKA of column-centred `x` and `y`; 0 when either centres to zero.
pub fn linear_cka<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::dim("linear_cka", format!("{} vs {} rows", x.rows(), y.rows())));
    }
    if x.rows() < 2 {
        return Err(Error::dim("linear_cka", "need at least two rows"));
    }
    let xc = center_columns(&x.cast::<f64>());
    let yc = center_columns(&y.cast::<f64>());
    if xc.max_abs() == 0.0 || yc.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let cross = matmul_tn(&yc, &xc)?.frobenius_sq();
    let xx = matmul_tn(&xc, &xc)?.frobenius_sq().sqrt();
    let yy = matmul_tn(&yc, &yc)?.frobenius_sq().sqrt();
    Ok(cross / (xx * yy))
}

/// Mean positive-pair similarity minus mean off-diagonal similarity.
pub fn pos_neg_gap<T: Scalar>(v: &EmbeddingBatch<T>, s: &EmbeddingBatch<T>) -> Result<f64> {
    if v.n() != s.n() || v.d() != s.d() {
        return Err(Error::dim("pos_neg_gap", format!("{}x{} vs {}x{}", v.n(), v.d(), s.n(), s.d())));
    }
    let n = v.n();
    if n < 2 {
        return Err(Error::dim("pos_neg_gap", "need at least two pairs"));
    }
    let m = sims(v, s)?;
    let mut pos = 0.0;
    let mut neg = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                pos += m[(i, j)];
            } else {
                neg += m[(i, j)];
            }
        }
    }
    Ok(pos / n as f64 - neg / (n * (n - 1)) as f64)
}

fn mean_row_cosine(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let total: f64 = a
        .row_iter()
        .zip(b.row_iter())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .sum();
    total / a.rows() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityReport {
    pub cosine_image: f64,
    pub cosine_text: f64,
    pub cka_image: f64,
    pub cka_text: f64,
    /// Of the student's own embeddings.
    pub pos_neg_gap: f64,
}

impl SimilarityReport {
    pub fn rows(&self) -> [(&'static str, f64); 5] {
        [
            ("cosine_image", self.cosine_image),
            ("cosine_text", self.cosine_text),
            ("cka_image", self.cka_image),
            ("cka_text", self.cka_text),
            ("pos_neg_gap", self.pos_neg_gap),
        ]
    }
}

/// Similarity of student to teacher embeddings on `batch`. Student
/// embeddings are mapped into the teacher's space first.
pub fn similarity_report<T: Scalar>(teacher: &ClipModel<T>, student: &ClipModel<T>, batch: &PairBatch<T>) -> Result<SimilarityReport> {
    let tv = encode_image(teacher, &batch.images, None)?;
    let ts = encode_text(teacher, &batch.texts)?;
    let sv = encode_image(student, &batch.images, None)?;
    let ss = encode_text(student, &batch.texts)?;
    let gap = pos_neg_gap(&sv, &ss)?;
    let pv = project_student(student, &sv, tv.d())?;
    let ps = project_student(student, &ss, ts.d())?;
    let (tv, ts) = (tv.rows().cast::<f64>(), ts.rows().cast::<f64>());
    let (pv, ps) = (pv.rows().cast::<f64>(), ps.rows().cast::<f64>());
    Ok(SimilarityReport {
        cosine_image: mean_row_cosine(&tv, &pv),
        cosine_text: mean_row_cosine(&ts, &ps),
        cka_image: linear_cka(&tv, &pv)?,
        cka_text: linear_cka(&ts, &ps)?,
        pos_neg_gap: gap,
    })
}

/// Retrieval both ways plus zero-shot accuracy of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelEval {
    pub i2t: RetrievalReport,
    pub t2i: RetrievalReport,
    pub zero_shot: f64,
}

impl ModelEval {
    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for r in [&self.i2t, &self.t2i] {
            for (k, v) in r.ks.iter().zip(&r.recall) {
                out.push_str(&format!("{}_r@{k},{v}\n", r.direction));
            }
        }
        out.push_str(&format!("zero_shot,{}\n", self.zero_shot));
        out
    }
}

/// Evaluates `model` on `batch`, classifying against encoded `prompts`.
pub fn evaluate_model<T: Scalar>(model: &ClipModel<T>, batch: &PairBatch<T>, prompts: &Matrix<T>) -> Result<ModelEval> {
    let v = encode_image(model, &batch.images, None)?;
    let s = encode_text(model, &batch.texts)?;
    let p = encode_text(model, prompts)?;
    let (i2t, t2i) = retrieval(&v, &s)?;
    Ok(ModelEval {
        i2t,
        t2i,
        zero_shot: zero_shot_accuracy(&v, &p, &batch.labels)?,
    })
}
