//! AdamW with a warmup-cosine schedule, the teacher pretraining and
//! distillation loops, and checkpoint persistence.

mod checkpoint;
mod loops;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::encoders::ClipModel;
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use loops::{
    distill, init_student, metrics_csv, resume_distill, resume_teacher, train_teacher, MetricsRow, TrainOutcome,
    TrainSettings, METRICS_HEADER,
};

/// Linear warmup from 0 to `base_lr`, then a half cosine down to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub min_lr: f64,
}

impl Schedule {
    pub fn new(warmup_steps: usize, total_steps: usize, base_lr: f64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::config(
                "optim.warmup_steps",
                format!("{warmup_steps} exceeds the {total_steps} total steps"),
            ));
        }
        Ok(Self {
            warmup_steps,
            total_steps,
            base_lr,
            min_lr: 0.0,
        })
    }
}

/// Learning rate at `step`, for `0 <= step <= total_steps`.
pub fn cosine_warmup_lr(step: usize, s: &Schedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::config(
            "schedule.step",
            format!("step {step} is past the {} total steps", s.total_steps),
        ));
    }
    if step < s.warmup_steps {
        return Ok(s.base_lr * step as f64 / s.warmup_steps as f64);
    }
    let span = s.total_steps - s.warmup_steps;
    if span == 0 {
        return Ok(if step == s.warmup_steps && s.warmup_steps > 0 { s.base_lr } else { s.min_lr });
    }
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    Ok(s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Optimizer and schedule hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            warmup_steps: 100,
            batch_size: 128,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("optim.{name}"), format!("must be finite and > 0, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("eps", self.eps)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("optim.weight_decay", "must be finite and >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("optim.{name}"), format!("{b} is outside [0, 1)")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::config("optim.batch_size", "must be >= 2"));
        }
        Ok(())
    }
}

/// True for tensors that receive weight decay: weight matrices, not biases
/// or the temperature.
pub fn decays(name: &str) -> bool {
    !(name.ends_with("_b") || name.ends_with(".b") || name == "logit_scale")
}

/// AdamW moments for every tensor of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Scalar = f64> {
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
}

impl<T: Scalar> OptimState<T> {
    /// Zero moments shaped like `model`.
    pub fn new(cfg: &OptimConfig, model: &ClipModel<T>) -> Self {
        let zeros: Vec<Matrix<T>> = model
            .tensors()
            .iter()
            .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            base_lr: cfg.lr,
        }
    }

    /// One AdamW update of the listed tensors. `decay[i]` selects weight decay
    /// for tensor `i`.
    pub fn update(&mut self, params: Vec<&mut Matrix<T>>, grads: &[&Matrix<T>], decay: &[bool], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::dim(
                "adamw_step",
                format!(
                    "{} params, {} grads, {} decay flags, {} moment slots",
                    params.len(),
                    grads.len(),
                    decay.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim(
                    "adamw_step",
                    format!("tensor {i}: param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), self.m[i].shape()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr_t = T::of(lr);
        let eps = T::of(self.eps);
        let shrink = T::of(1.0 - lr * self.weight_decay);
        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let p = p.as_mut_slice();
            for j in 0..p.len() {
                if decay[i] {
                    p[j] *= shrink;
                }
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One AdamW step over every tensor of `model`, followed by the temperature
/// clamp.
pub fn adamw_step<T: Scalar>(model: &mut ClipModel<T>, grads: &ClipModel<T>, state: &mut OptimState<T>, lr: f64) -> Result<()> {
    let decay: Vec<bool> = model.tensors().iter().map(|(name, _)| decays(name)).collect();
    let grad_tensors: Vec<&Matrix<T>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
    state.update(model.tensors_mut(), &grad_tensors, &decay, lr)?;
    model.clamp_temperature();
    Ok(())
}
