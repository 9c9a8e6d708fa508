//! Teacher pretraining and student distillation loops.

use std::fmt::Write as _;

use crate::config::{Digest, RunConfig};
use crate::data::{generate_indices, Dataset, Split, SyntheticSpec};
use crate::encoders::{encode_image, encode_text, sample_mask, ClipModel, MaskSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::pos_neg_gap;
use crate::grads::{backprop_task, backprop_with_teacher, BackpropOutput, GdMode, TeacherEmbeddings};
use crate::losses::{KdTerm, KdWeights};
use crate::numcore::RngStream;
use crate::scalar::Scalar;

use super::{adamw_step, cosine_warmup_lr, OptimConfig, OptimState, Schedule};

const TAG_SHUFFLE: u32 = 0x5B_0001;
const TAG_MASK: u32 = 0x5B_0002;

pub const METRICS_HEADER: &str =
    "step,lr,loss_task,loss_crd,loss_fd,loss_mfd,loss_gd,loss_icl,loss_afd,loss_total,tau,posneg_gap";

/// Loop parameters shared by teacher and student training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub steps: usize,
    pub optim: OptimConfig,
    pub eval_interval: usize,
    pub posneg_subset: usize,
    pub mask_ratio: f64,
    pub gd_mode: GdMode,
    /// Halts once this many steps are complete, as an interruption would;
    /// the schedule still spans `steps`.
    pub stop_after: Option<usize>,
}

impl TrainSettings {
    pub fn teacher(cfg: &RunConfig) -> Self {
        Self::with_steps(cfg, cfg.teacher_steps)
    }

    pub fn student(cfg: &RunConfig) -> Self {
        Self::with_steps(cfg, cfg.student_steps)
    }

    fn with_steps(cfg: &RunConfig, steps: usize) -> Self {
        Self {
            seed: cfg.seed,
            steps,
            optim: cfg.optim.clone(),
            eval_interval: cfg.eval_interval,
            posneg_subset: cfg.posneg_subset,
            mask_ratio: cfg.mask_ratio,
            gd_mode: cfg.gd_mode,
            stop_after: None,
        }
    }
}

/// One logged row; `terms` follows [`KdTerm::ALL`] and is `None` for
/// disabled terms.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub task: f64,
    pub terms: [Option<f64>; 6],
    pub total: f64,
    pub tau: f64,
    pub posneg_gap: f64,
}

impl MetricsRow {
    pub fn term(&self, t: KdTerm) -> Option<f64> {
        self.terms[KdTerm::ALL.iter().position(|&x| x == t).unwrap()]
    }
}

/// Renders rows under the digest/seed comment and the column header.
pub fn metrics_csv(rows: &[MetricsRow], digest: &Digest, seed: u64) -> String {
    let mut out = format!("# digest={digest} seed={seed}\n{METRICS_HEADER}\n");
    for r in rows {
        write!(out, "{},{},{}", r.step, r.lr, r.task).unwrap();
        for t in &r.terms {
            match t {
                Some(v) => write!(out, ",{v}").unwrap(),
                None => out.push(','),
            }
        }
        writeln!(out, ",{},{},{}", r.total, r.tau, r.posneg_gap).unwrap();
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar = f64> {
    pub model: ClipModel<T>,
    pub optim: OptimState<T>,
    pub metrics: Vec<MetricsRow>,
}

/// Epoch-wise shuffled minibatches; the last partial batch of each epoch is
/// dropped.
struct Batches {
    seed: u64,
    n: usize,
    size: usize,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl Batches {
    fn new(seed: u64, n: usize, size: usize) -> Self {
        Self {
            seed,
            n,
            size: size.min(n),
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn indices(&mut self, step: usize) -> &[usize] {
        let per_epoch = self.n / self.size;
        let epoch = step / per_epoch;
        if self.epoch != Some(epoch) {
            self.perm = RngStream::keyed(self.seed, TAG_SHUFFLE, epoch as u64).permutation(self.n);
            self.epoch = Some(epoch);
        }
        let at = (step % per_epoch) * self.size;
        &self.perm[at..at + self.size]
    }
}

fn posneg<T: Scalar>(model: &ClipModel<T>, data: &Dataset<T>, subset: usize) -> Result<f64> {
    let val = data.val.head(subset);
    let v = encode_image(model, &val.images, None)?;
    let s = encode_text(model, &val.texts)?;
    Ok(pos_neg_gap(&v, &s)?.f64())
}

/// Runs optimizer steps `optim.step .. settings.steps` over minibatches
/// drawn from `pool` sample indices, calling `objective` for the loss and
/// gradient of each. `data` supplies the validation split.
fn run<T, F>(
    model: &mut ClipModel<T>,
    optim: &mut OptimState<T>,
    pool: usize,
    data: &Dataset<T>,
    s: &TrainSettings,
    mut objective: F,
) -> Result<Vec<MetricsRow>>
where
    T: Scalar,
    F: FnMut(&ClipModel<T>, &[usize], usize) -> Result<BackpropOutput<T>>,
{
    s.optim.validate()?;
    if s.eval_interval == 0 {
        return Err(Error::config("eval_interval", "must be >= 1"));
    }
    if pool < 2 {
        return Err(Error::config("data.train_size", "must be >= 2"));
    }
    let schedule = Schedule::new(s.optim.warmup_steps.min(s.steps), s.steps, s.optim.lr)?;
    let mut batches = Batches::new(s.seed, pool, s.optim.batch_size);
    let start = optim.step as usize;
    if start > s.steps {
        return Err(Error::config("steps", format!("resume point {start} is past {} steps", s.steps)));
    }
    let mut last_finite = start.checked_sub(1);
    let mut rows = Vec::new();
    let end = s.stop_after.map_or(s.steps, |k| k.min(s.steps));
    for step in start..end {
        let idx = batches.indices(step).to_vec();
        let out = objective(model, &idx, step)?;
        let b = &out.breakdown;
        let finite = b.total.is_finite() && b.task.is_finite() && out.grads.is_finite();
        if !finite {
            return Err(Error::Divergence {
                step,
                last_finite_step: last_finite,
            });
        }
        let lr = cosine_warmup_lr(step + 1, &schedule)?;
        adamw_step(model, &out.grads, optim, lr)?;
        if !model.is_finite() {
            return Err(Error::Divergence {
                step,
                last_finite_step: last_finite,
            });
        }
        last_finite = Some(step);
        let done = step + 1;
        if done % s.eval_interval == 0 || done == s.steps {
            let mut terms = [None; 6];
            for (term, v) in &b.terms {
                terms[KdTerm::ALL.iter().position(|t| t == term).unwrap()] = Some(v.f64());
            }
            rows.push(MetricsRow {
                step: done,
                lr,
                task: b.task.f64(),
                terms,
                total: b.total.f64(),
                tau: model.temperature().f64(),
                posneg_gap: posneg(model, data, s.posneg_subset)?,
            });
        }
    }
    Ok(rows)
}

/// Pretrains a teacher on the plain CLIP loss from a fresh initialisation.
///
/// Batches come from the pretraining split of `spec`, generated on demand,
/// or from `data.train` when `spec.pretrain_size` is 0.
pub fn train_teacher<T: Scalar>(
    spec: &SyntheticSpec,
    data: &Dataset<T>,
    cfg: &ModelConfig,
    s: &TrainSettings,
) -> Result<TrainOutcome<T>> {
    cfg.validate("teacher")?;
    let model = ClipModel::new(cfg, data.image_shape, data.text_shape, s.seed);
    let optim = OptimState::new(&s.optim, &model);
    resume_teacher(spec, model, optim, data, s)
}

/// Continues teacher training from `optim.step`.
pub fn resume_teacher<T: Scalar>(
    spec: &SyntheticSpec,
    mut model: ClipModel<T>,
    mut optim: OptimState<T>,
    data: &Dataset<T>,
    s: &TrainSettings,
) -> Result<TrainOutcome<T>> {
    spec.validate()?;
    let train = &data.train;
    let metrics = if spec.pretrain_size == 0 {
        run(&mut model, &mut optim, train.len(), data, s, |m, idx, _| {
            let batch = train.select(idx);
            backprop_task(m, &batch.images, &batch.texts)
        })?
    } else {
        run(&mut model, &mut optim, spec.pretrain_size, data, s, |m, idx, _| {
            let batch = generate_indices::<T>(spec, Split::Pretrain, idx)?;
            backprop_task(m, &batch.images, &batch.texts)
        })?
    };
    Ok(TrainOutcome { model, optim, metrics })
}

/// Fresh student for `teacher`: a projection head when the embedding widths
/// differ and fusion heads when AFD is enabled.
pub fn init_student<T: Scalar>(
    cfg: &ModelConfig,
    teacher: &ClipModel<T>,
    weights: &KdWeights,
    seed: u64,
) -> Result<ClipModel<T>> {
    cfg.validate("student")?;
    let mut m = ClipModel::new(cfg, teacher.image.shape, teacher.text.shape, seed);
    let td = teacher.embed_dim();
    if cfg.embed_dim != td {
        m = m.with_projection(td, seed);
    }
    if weights.is_enabled(KdTerm::Afd) {
        m = m.with_fusion(td, seed);
    }
    Ok(m)
}

/// Trains a fresh student against the frozen `teacher`.
pub fn distill<T: Scalar>(
    teacher: &ClipModel<T>,
    data: &Dataset<T>,
    student_cfg: &ModelConfig,
    weights: &KdWeights,
    s: &TrainSettings,
) -> Result<TrainOutcome<T>> {
    let model = init_student(student_cfg, teacher, weights, s.seed)?;
    let optim = OptimState::new(&s.optim, &model);
    resume_distill(teacher, model, optim, data, weights, s)
}

/// Continues distillation from `optim.step`.
pub fn resume_distill<T: Scalar>(
    teacher: &ClipModel<T>,
    mut model: ClipModel<T>,
    mut optim: OptimState<T>,
    data: &Dataset<T>,
    weights: &KdWeights,
    s: &TrainSettings,
) -> Result<TrainOutcome<T>> {
    weights.validate()?;
    if teacher.image.shape != model.image.shape || teacher.text.shape != model.text.shape {
        return Err(Error::config("student", "input shapes differ from the teacher's"));
    }
    let cached = TeacherEmbeddings::compute(teacher, &data.train.images, &data.train.texts)?;
    let masked = weights.is_enabled(KdTerm::Mfd);
    let patches = model.image.shape.positions;
    let train = &data.train;
    let metrics = run(&mut model, &mut optim, train.len(), data, s, |m, idx, step| {
        let batch = train.select(idx);
        let t = cached.select(idx);
        let masks = if masked {
            let mut rng = RngStream::keyed(s.seed, TAG_MASK, step as u64);
            Some(
                (0..idx.len())
                    .map(|_| sample_mask(&mut rng, patches, s.mask_ratio))
                    .collect::<Result<Vec<MaskSpec>>>()?,
            )
        } else {
            None
        };
        backprop_with_teacher(m, &t, &batch.images, &batch.texts, weights, masks.as_deref(), s.gd_mode)
    })?;
    Ok(TrainOutcome { model, optim, metrics })
}
