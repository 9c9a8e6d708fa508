//! Discrete toy joint for checking that `log N − E[L_ICL]` lower-bounds the
//! mutual information between the two sides.

use crate::error::{Error, Result};
use crate::numcore::{l2_normalize_rows, log_sum_exp, Matrix, RngStream, NORM_EPS};

/// Joint distribution over `K x K` symbol pairs with one embedding per
/// symbol and modality.
#[derive(Clone, Debug)]
pub struct MiToyJoint {
    k: usize,
    /// Row-major `K x K`, entry `(a, b)` is `μ(v = a, s = b)`.
    joint: Vec<f64>,
    pub image_codebook: Matrix<f64>,
    pub text_codebook: Matrix<f64>,
    pub negatives: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiBound {
    /// `log N − L̂`
    pub bound: f64,
    pub exact_mi: f64,
    /// Empirical mean InfoNCE loss `L̂`.
    pub mean_loss: f64,
}

impl MiToyJoint {
    pub fn new(k: usize, joint: Vec<f64>, image_codebook: Matrix<f64>, text_codebook: Matrix<f64>, negatives: usize) -> Result<Self> {
        if k == 0 || joint.len() != k * k {
            return Err(Error::config("joint", format!("expected {} entries for K={k}", k * k)));
        }
        if joint.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::config("joint", "entries must be >= 0"));
        }
        let total: f64 = joint.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("joint", format!("entries sum to {total}, not 1")));
        }
        if image_codebook.rows() != k || text_codebook.rows() != k || image_codebook.cols() != text_codebook.cols() {
            return Err(Error::config("codebook", "need K rows per modality with equal dimension"));
        }
        if negatives == 0 {
            return Err(Error::config("negatives", "must be >= 1"));
        }
        Ok(Self {
            k,
            joint,
            image_codebook: l2_normalize_rows(&image_codebook, NORM_EPS),
            text_codebook: l2_normalize_rows(&text_codebook, NORM_EPS),
            negatives,
        })
    }

    /// Shared identity codebook: the critic scores matching symbols highest.
    pub fn identity_codebooks(k: usize) -> (Matrix<f64>, Matrix<f64>) {
        (Matrix::identity(k), Matrix::identity(k))
    }

    /// Independent random unit-vector codebooks of dimension `dim`.
    pub fn random_codebooks(k: usize, dim: usize, rng: &mut RngStream) -> (Matrix<f64>, Matrix<f64>) {
        let a = Matrix::from_fn(k, dim, |_, _| rng.normal());
        let b = Matrix::from_fn(k, dim, |_, _| rng.normal());
        (a, b)
    }

    /// `μ = marginal ⊗ marginal`, so the sides are independent.
    pub fn independent(marginal_v: &[f64], marginal_s: &[f64], negatives: usize) -> Result<Self> {
        let k = marginal_v.len();
        if marginal_s.len() != k {
            return Err(Error::config("marginals", "length mismatch"));
        }
        let joint = (0..k * k).map(|i| marginal_v[i / k] * marginal_s[i % k]).collect();
        let (a, b) = Self::identity_codebooks(k);
        Self::new(k, joint, a, b, negatives)
    }

    /// Uniform diagonal joint: `s` always equals `v`, MI = `log K`.
    pub fn perfectly_correlated(k: usize, negatives: usize) -> Result<Self> {
        let joint = (0..k * k)
            .map(|i| if i / k == i % k { 1.0 / k as f64 } else { 0.0 })
            .collect();
        let (a, b) = Self::identity_codebooks(k);
        Self::new(k, joint, a, b, negatives)
    }

    /// Random joint: Dirichlet-like weights sharpened toward the diagonal,
    /// with random codebooks.
    pub fn random(k: usize, negatives: usize, rng: &mut RngStream) -> Result<Self> {
        let mut joint: Vec<f64> = (0..k * k)
            .map(|i| {
                let w = -rng.uniform().max(1e-300).ln();
                if i / k == i % k {
                    w * (1.0 + 4.0 * rng.uniform())
                } else {
                    w * rng.uniform()
                }
            })
            .collect();
        let total: f64 = joint.iter().sum();
        joint.iter_mut().for_each(|p| *p /= total);
        let (a, b) = Self::random_codebooks(k, k, rng);
        Self::new(k, joint, a, b, negatives)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn prob(&self, a: usize, b: usize) -> f64 {
        self.joint[a * self.k + b]
    }

    pub fn marginal_v(&self) -> Vec<f64> {
        (0..self.k).map(|a| (0..self.k).map(|b| self.prob(a, b)).sum()).collect()
    }

    pub fn marginal_s(&self) -> Vec<f64> {
        (0..self.k).map(|b| (0..self.k).map(|a| self.prob(a, b)).sum()).collect()
    }

    /// `Σ μ(a,b) log(μ(a,b) / (μ(a) μ(b)))` in nats.
    pub fn exact_mi(&self) -> f64 {
        let mv = self.marginal_v();
        let ms = self.marginal_s();
        let mut mi = 0.0;
        for a in 0..self.k {
            for b in 0..self.k {
                let p = self.prob(a, b);
                if p > 0.0 {
                    mi += p * (p / (mv[a] * ms[b])).ln();
                }
            }
        }
        mi
    }
}

/// Monte-Carlo estimate of `log N − E[L]` where each sample pairs a positive
/// drawn from the joint with `N` negatives drawn from the text marginal,
/// scored by the critic `exp(u_a · w_b / τ)`.
pub fn mi_bound_check(joint: &MiToyJoint, rng: &mut RngStream, samples: usize, tau: f64) -> Result<MiBound> {
    if samples < 10_000 {
        return Err(Error::config("samples", format!("need at least 10000, got {samples}")));
    }
    if !(tau > 0.0) {
        return Err(Error::config("tau", "must be positive"));
    }
    let k = joint.k();
    let critic = Matrix::from_fn(k, k, |a, b| {
        joint
            .image_codebook
            .row(a)
            .iter()
            .zip(joint.text_codebook.row(b))
            .map(|(x, y)| x * y)
            .sum::<f64>()
            / tau
    });
    let ms = joint.marginal_s();
    let n = joint.negatives;
    let mut scores = vec![0.0; n + 1];
    let mut total = 0.0;
    for _ in 0..samples {
        let pair = rng.categorical(&joint.joint);
        let (a, b) = (pair / k, pair % k);
        scores[0] = critic[(a, b)];
        for slot in scores.iter_mut().skip(1) {
            *slot = critic[(a, rng.categorical(&ms))];
        }
        total += log_sum_exp(&scores) - scores[0];
    }
    let mean_loss = total / samples as f64;
    Ok(MiBound {
        bound: (n as f64).ln() - mean_loss,
        exact_mi: joint.exact_mi(),
        mean_loss,
    })
}
