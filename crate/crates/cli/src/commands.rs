//! Subcommand implementations. Each loads and validates the run config,
//! dispatches on the configured precision and writes stamped outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clipkd::config::{Precision, RunConfig, SweepParam};
use clipkd::data::{class_prompts, generate_dataset, read_dump, write_dump, Role, Split};
use clipkd::encoders::{encode_image, encode_text, ClipModel};
use clipkd::eval::{evaluate_model, retrieval, similarity_report};
use clipkd::grads::{grad_check_report, GradCheckGrid};
use clipkd::losses::KdTerm;
use clipkd::trainkit::{
    init_student, load_checkpoint, metrics_csv, resume_distill, resume_teacher, save_checkpoint, MetricsRow,
    OptimState, TrainSettings,
};
use clipkd::{Error, Scalar};
use rayon::prelude::*;

use crate::{Common, Resume};

pub const CLIP_TOLERANCE: f64 = 1e-6;
pub const BACKPROP_TOLERANCE: f64 = 1e-4;
pub const THREADS_ENV: &str = "CLIPKD_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    GradCheckFailed,
}

macro_rules! dispatch {
    ($cfg:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Validated config plus the output directory, created on demand.
struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut sets = common.set.clone();
        if let Some(seed) = common.seed {
            sets.push(format!("seed={seed}"));
        }
        let cfg = RunConfig::load(common.config.as_deref(), &sets)?;
        let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes `body` under the digest/seed comment line.
    fn write(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.path(name);
        write_file(&path, &format!("{}\n{body}", self.cfg.stamp()))?;
        Ok(path)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn teacher_template<T: Scalar>(cfg: &RunConfig) -> ClipModel<T> {
    ClipModel::new(&cfg.teacher, cfg.data.image_shape(), cfg.data.text_shape(), cfg.seed)
}

fn load_teacher<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<ClipModel<T>> {
    let mut m = teacher_template(cfg);
    load_checkpoint(path, &mut m, None).with_context(|| format!("loading teacher {}", path.display()))?;
    Ok(m)
}

fn load_student<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<ClipModel<T>> {
    let mut m = init_student(&cfg.student, &teacher_template::<T>(cfg), &cfg.kd, cfg.seed)?;
    load_checkpoint(path, &mut m, None).with_context(|| format!("loading student {}", path.display()))?;
    Ok(m)
}

fn load_either<T: Scalar>(cfg: &RunConfig, teacher: Option<&Path>, student: Option<&Path>) -> Result<ClipModel<T>> {
    match (teacher, student) {
        (Some(t), None) => load_teacher(cfg, t),
        (None, Some(s)) => load_student(cfg, s),
        _ => Err(Error::config("--teacher/--student", "give exactly one checkpoint").into()),
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
        Split::Pretrain => "pretrain",
    }
}

pub fn gen_data(common: &Common) -> Result<Status> {
    let ctx = Ctx::new(common)?;
    let spec = &ctx.cfg.data;
    let mut body = format!("# spec={}\nsplit,size\n", serde_json::to_string(spec)?);
    for split in [Split::Train, Split::Val, Split::Test, Split::Pretrain] {
        body.push_str(&format!("{},{}\n", split_name(split), spec.split_size(split)));
    }
    ctx.write("splits.csv", &body)?;
    print!("{}\n{body}", ctx.cfg.stamp());
    Ok(Status::Ok)
}

/// Starting model and optimizer: fresh, or restored from `--resume`.
fn start_state<T: Scalar>(
    ctx: &Ctx,
    resume: &Resume,
    fresh: ClipModel<T>,
) -> Result<(ClipModel<T>, OptimState<T>)> {
    let mut model = fresh;
    let mut optim = OptimState::new(&ctx.cfg.optim, &model);
    if let Some(path) = &resume.resume {
        let digest = load_checkpoint(path, &mut model, Some(&mut optim))
            .with_context(|| format!("resuming from {}", path.display()))?;
        if digest != ctx.cfg.digest() {
            return Err(Error::config(
                "--resume",
                format!("{} was written under config digest {digest}, not {}", path.display(), ctx.cfg.digest()),
            )
            .into());
        }
    }
    Ok((model, optim))
}

/// Metrics rows logged before the resume point, kept from an earlier run's
/// file in the output directory.
fn prior_rows(ctx: &Ctx, name: &str, resumed_at: u64) -> Result<Vec<String>> {
    let path = ctx.path(name);
    if resumed_at == 0 || !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(ctx.cfg.stamp().as_str()) {
        return Err(Error::config("--resume", format!("{} belongs to a different config", path.display())).into());
    }
    lines.next();
    Ok(lines
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|step| step <= resumed_at)
        })
        .map(str::to_string)
        .collect())
}

/// Saves the checkpoint and metrics CSV of a training run.
fn finish_run<T: Scalar>(
    ctx: &Ctx,
    stem: &str,
    model: &ClipModel<T>,
    optim: &OptimState<T>,
    earlier: Vec<String>,
    rows: &[MetricsRow],
) -> Result<()> {
    let ckpt = ctx.path(&format!("{stem}.ckpt"));
    save_checkpoint(&ckpt, model, Some(optim), &ctx.cfg.digest())?;
    let fresh = metrics_csv(rows, &ctx.cfg.digest(), ctx.cfg.seed);
    let mut lines: Vec<&str> = fresh.lines().collect();
    let tail = lines.split_off(2);
    let mut text = lines.join("\n") + "\n";
    for l in earlier.iter().map(String::as_str).chain(tail) {
        text.push_str(l);
        text.push('\n');
    }
    write_file(&ctx.path(&format!("{stem}_metrics.csv")), &text)?;
    match rows.last() {
        Some(r) => println!(
            "{stem}: step {} loss {:.6} tau {:.6} posneg_gap {:.6}",
            r.step, r.total, r.tau, r.posneg_gap
        ),
        None => println!("{stem}: no steps run"),
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

pub fn train_teacher(common: &Common, resume: &Resume) -> Result<Status> {
    let ctx = Ctx::new(common)?;
    dispatch!(ctx.cfg, train_teacher_t(&ctx, resume))?;
    Ok(Status::Ok)
}

fn train_teacher_t<T: Scalar>(ctx: &Ctx, resume: &Resume) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = generate_dataset::<T>(&cfg.data)?;
    let mut s = TrainSettings::teacher(cfg);
    s.stop_after = resume.stop_after;
    let (model, optim) = start_state(ctx, resume, teacher_template::<T>(cfg))?;
    let earlier = prior_rows(ctx, "teacher_metrics.csv", optim.step)?;
    let run = resume_teacher(&cfg.data, model, optim, &data, &s)?;
    finish_run(ctx, "teacher", &run.model, &run.optim, earlier, &run.metrics)
}

pub fn distill(common: &Common, teacher: &Path, resume: &Resume) -> Result<Status> {
    let ctx = Ctx::new(common)?;
    dispatch!(ctx.cfg, distill_t(&ctx, teacher, resume))?;
    Ok(Status::Ok)
}

fn distill_t<T: Scalar>(ctx: &Ctx, teacher: &Path, resume: &Resume) -> Result<()> {
    let cfg = &ctx.cfg;
    let teacher = load_teacher::<T>(cfg, teacher)?;
    let data = generate_dataset::<T>(&cfg.data)?;
    let mut s = TrainSettings::student(cfg);
    s.stop_after = resume.stop_after;
    let fresh = init_student(&cfg.student, &teacher, &cfg.kd, cfg.seed)?;
    let (model, optim) = start_state(ctx, resume, fresh)?;
    let earlier = prior_rows(ctx, "student_metrics.csv", optim.step)?;
    let run = resume_distill(&teacher, model, optim, &data, &cfg.kd, &s)?;
    finish_run(ctx, "student", &run.model, &run.optim, earlier, &run.metrics)
}

pub fn eval(common: &Common, teacher: Option<&Path>, student: Option<&Path>, split: Split) -> Result<Status> {
    let ctx = Ctx::new(common)?;
    let body = dispatch!(ctx.cfg, eval_t(&ctx.cfg, teacher, student, split))?;
    ctx.write("eval.csv", &body)?;
    print!("{body}");
    Ok(Status::Ok)
}

fn eval_t<T: Scalar>(cfg: &RunConfig, teacher: Option<&Path>, student: Option<&Path>, split: Split) -> Result<String> {
    let model = load_either::<T>(cfg, teacher, student)?;
    let data = generate_dataset::<T>(&cfg.data)?;
    let batch = data.split(split).expect("in-memory split");
    let prompts = class_prompts::<T>(&cfg.data)?;
    Ok(evaluate_model(&model, batch, &prompts)?.to_csv())
}

pub fn eval_dump(common: &Common, image: &Path, text: &Path) -> Result<Status> {
    let ctx = Ctx::new(common)?;
    let v = read_dump(image, Role::Image)?;
    let s = read_dump(text, Role::Text)?;
    let (i2t, t2i) = retrieval(&v, &s)?;
    let mut body = String::from("metric,value\n");
    for r in [&i2t, &t2i] {
        for (k, v) in r.ks.iter().zip(&r.recall) {
            body.push_str(&format!("{}_r@{k},{v}\n", r.direction));
        }
    }
    ctx.write("eval_dump.csv", &body)?;
    print!("{body}");
    Ok(Status::Ok)
}

pub fn grad_check(common: &Common, clip_tol: f64, backprop_tol: f64) -> Result<Status> {
    let ctx = Ctx::new(common)?;
    for (flag, tol) in [("--clip-tolerance", clip_tol), ("--backprop-tolerance", backprop_tol)] {
        if !(tol >= 0.0 && tol.is_finite()) {
            return Err(Error::config(flag, format!("must be finite and >= 0, got {tol}")).into());
        }
    }
    let mut clip_grid = GradCheckGrid::clip();
    let mut bp_grid = GradCheckGrid::backprop();
    clip_grid.gd_mode = ctx.cfg.gd_mode;
    bp_grid.gd_mode = ctx.cfg.gd_mode;
    let clip = grad_check_report(&clip_grid, clip_tol);
    let bp = grad_check_report(&bp_grid, backprop_tol);
    let body = format!("# section=clip_grad_analytic\n{}# section=backprop_model\n{}", clip.to_csv(), bp.to_csv());
    let path = ctx.write("grad_check.csv", &body)?;
    for (name, r) in [("clip_grad_analytic", &clip), ("backprop_model", &bp)] {
        println!(
            "{name}: max_rel {:e} tolerance {:e} {}",
            r.max_rel,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    println!("wrote {}", path.display());
    Ok(if clip.pass && bp.pass {
        Status::Ok
    } else {
        Status::GradCheckFailed
    })
}

pub fn analyze(common: &Common, teacher: &Path, student: &Path, split: Split) -> Result<Status> {
    let ctx = Ctx::new(common)?;
    let body = dispatch!(ctx.cfg, analyze_t(&ctx.cfg, teacher, student, split))?;
    ctx.write("analysis.csv", &body)?;
    print!("{body}");
    Ok(Status::Ok)
}

fn analyze_t<T: Scalar>(cfg: &RunConfig, teacher: &Path, student: &Path, split: Split) -> Result<String> {
    let t = load_teacher::<T>(cfg, teacher)?;
    let s = load_student::<T>(cfg, student)?;
    let data = generate_dataset::<T>(&cfg.data)?;
    let report = similarity_report(&t, &s, data.split(split).expect("in-memory split"))?;
    let mut body = String::from("metric,value\n");
    for (name, v) in report.rows() {
        body.push_str(&format!("{name},{v}\n"));
    }
    Ok(body)
}

/// Worker cap from the environment, if set.
fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::config(THREADS_ENV, format!("must be a positive integer, got `{v}`")).into()),
        },
    }
}

/// Config of one sweep point.
fn point_config(cfg: &RunConfig, value: f64) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match cfg.sweep.param {
        SweepParam::Weight => {
            c.kd.set_weight(cfg.sweep.term, value);
            if !c.kd.is_enabled(cfg.sweep.term) {
                c.kd.enabled.push(cfg.sweep.term);
            }
        }
        SweepParam::MaskRatio => {
            c.mask_ratio = value;
            if !c.kd.is_enabled(KdTerm::Mfd) {
                c.kd.enabled.push(KdTerm::Mfd);
            }
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn sweep(common: &Common, teacher: &Path, jobs: usize) -> Result<Status> {
    let ctx = Ctx::new(common)?;
    if jobs == 0 {
        return Err(Error::config("--jobs", "must be >= 1").into());
    }
    let workers = thread_cap()?.map_or(jobs, |cap| jobs.min(cap));
    let points = ctx
        .cfg
        .sweep
        .values
        .iter()
        .map(|&v| point_config(&ctx.cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("starting sweep workers")?;
    let rows = pool.install(|| dispatch!(ctx.cfg, sweep_t(&ctx, teacher, &points)))?;
    let param = match ctx.cfg.sweep.param {
        SweepParam::Weight => "weight",
        SweepParam::MaskRatio => "mask_ratio",
    };
    let mut body =
        String::from("point,param,term,value,i2t_r@1,t2i_r@1,zero_shot,posneg_gap,cosine_image,cka_image,digest\n");
    for (i, (c, r)) in points.iter().zip(&rows).enumerate() {
        let value = match ctx.cfg.sweep.param {
            SweepParam::Weight => c.kd.weight(ctx.cfg.sweep.term),
            SweepParam::MaskRatio => c.mask_ratio,
        };
        body.push_str(&format!(
            "{i},{param},{},{value},{},{},{},{},{},{},{}\n",
            ctx.cfg.sweep.term,
            r[0],
            r[1],
            r[2],
            r[3],
            r[4],
            r[5],
            c.digest()
        ));
    }
    ctx.write("sweep.csv", &body)?;
    print!("{body}");
    Ok(Status::Ok)
}

/// Trains every point and returns its summary statistics in
/// `i2t_r@1, t2i_r@1, zero_shot, posneg_gap, cosine_image, cka_image` order.
fn sweep_t<T: Scalar>(ctx: &Ctx, teacher: &Path, points: &[RunConfig]) -> Result<Vec<[f64; 6]>> {
    let cfg = &ctx.cfg;
    let teacher = load_teacher::<T>(cfg, teacher)?;
    let data = generate_dataset::<T>(&cfg.data)?;
    let prompts = class_prompts::<T>(&cfg.data)?;
    points
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let run = clipkd::trainkit::distill(&teacher, &data, &c.student, &c.kd, &TrainSettings::student(c))
                .with_context(|| format!("sweep point {i}"))?;
            let metrics = ctx.path(&format!("sweep_{i}_metrics.csv"));
            write_file(&metrics, &metrics_csv(&run.metrics, &c.digest(), c.seed))?;
            let e = evaluate_model(&run.model, &data.test, &prompts)?;
            let sim = similarity_report(&teacher, &run.model, &data.test)?;
            let gap = run.metrics.last().map_or(f64::NAN, |r| r.posneg_gap);
            Ok([e.i2t.recall[0], e.t2i.recall[0], e.zero_shot, gap, sim.cosine_image, sim.cka_image])
        })
        .collect()
}

pub fn dump(common: &Common, teacher: Option<&Path>, student: Option<&Path>, split: Split) -> Result<Status> {
    let ctx = Ctx::new(common)?;
    dispatch!(ctx.cfg, dump_t(&ctx, teacher, student, split))?;
    Ok(Status::Ok)
}

fn dump_t<T: Scalar>(ctx: &Ctx, teacher: Option<&Path>, student: Option<&Path>, split: Split) -> Result<()> {
    let cfg = &ctx.cfg;
    let model = load_either::<T>(cfg, teacher, student)?;
    let data = generate_dataset::<T>(&cfg.data)?;
    let batch = data.split(split).expect("in-memory split");
    let v = encode_image(&model, &batch.images, None)?;
    let s = encode_text(&model, &batch.texts)?;
    let (image, text) = (ctx.path("image.ckde"), ctx.path("text.ckde"));
    write_dump(&image, Role::Image, &v)?;
    write_dump(&text, Role::Text, &s)?;
    println!("wrote {} and {} ({} x {})", image.display(), text.display(), v.n(), v.d());
    Ok(())
}
