//! Finite-difference verification of the closed-form and backpropagated
//! gradients over a grid of sizes, temperatures and seeds.

use crate::encoders::{encode_image, encode_text, sample_mask, ClipModel, InputShape, MaskSpec, ModelConfig};
use crate::losses::{combined_loss, info_nce, EmbeddingBatch, KdInputs, KdTerm, KdWeights};
use crate::numcore::{l2_normalize_rows, Matrix, RngStream, NORM_EPS};

use super::{backprop_model, clip_grad_analytic, finite_diff_grad, GdMode};

const TAG_CHECK: u32 = 0x6C4E;

/// Grid of gradient checks. Either list may be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckGrid {
    /// Batch sizes for the closed-form CLIP gradient.
    pub sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub taus: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Loss configurations for the end-to-end model check.
    pub loss_sets: Vec<Vec<KdTerm>>,
    pub model_seeds: Vec<u64>,
    pub gd_mode: GdMode,
    pub step: f64,
}

impl Default for GradCheckGrid {
    fn default() -> Self {
        let clip = Self::clip();
        Self {
            loss_sets: Self::backprop().loss_sets,
            model_seeds: Self::backprop().model_seeds,
            ..clip
        }
    }
}

impl GradCheckGrid {
    /// Closed-form CLIP gradient over `n ∈ {2,4,8}`, `d ∈ {4,8}`,
    /// `τ ∈ {0.07, 1}`, three seeds.
    pub fn clip() -> Self {
        Self {
            sizes: vec![2, 4, 8],
            dims: vec![4, 8],
            taus: vec![0.07, 1.0],
            seeds: vec![0, 1, 2],
            loss_sets: Vec::new(),
            model_seeds: Vec::new(),
            gd_mode: GdMode::TotalLoss,
            step: 1e-5,
        }
    }

    /// Every loss alone plus FD+ICL+CRD on a width-8 student.
    pub fn backprop() -> Self {
        let mut loss_sets: Vec<Vec<KdTerm>> = KdTerm::ALL.iter().map(|&t| vec![t]).collect();
        loss_sets.push(vec![KdTerm::Fd, KdTerm::Icl, KdTerm::Crd]);
        Self {
            sizes: Vec::new(),
            dims: Vec::new(),
            taus: Vec::new(),
            seeds: Vec::new(),
            loss_sets,
            model_seeds: vec![0, 1],
            gd_mode: GdMode::TotalLoss,
            step: 1e-5,
        }
    }

    pub fn empty() -> Self {
        Self {
            sizes: Vec::new(),
            dims: Vec::new(),
            taus: Vec::new(),
            seeds: Vec::new(),
            loss_sets: Vec::new(),
            model_seeds: Vec::new(),
            gd_mode: GdMode::TotalLoss,
            step: 1e-5,
        }
    }
}

/// Error of one gradient block at one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub case: String,
    pub block: String,
    pub max_abs: f64,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`, 0 when both vanish.
    pub max_rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel: f64,
    pub max_abs: f64,
    pub blocks: Vec<BlockError>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    fn from_blocks(blocks: Vec<BlockError>, tolerance: f64) -> Self {
        let max_rel = blocks.iter().map(|b| b.max_rel).fold(0.0, f64::max);
        let max_abs = blocks.iter().map(|b| b.max_abs).fold(0.0, f64::max);
        Self {
            max_rel,
            max_abs,
            pass: max_rel <= tolerance,
            blocks,
            tolerance,
        }
    }

    /// `case,block,max_abs,max_rel` rows preceded by a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,block,max_abs,max_rel\n");
        for b in &self.blocks {
            out.push_str(&format!("{},{},{:e},{:e}\n", b.case, b.block, b.max_abs, b.max_rel));
        }
        out.push_str(&format!(
            "# max_rel={:e} max_abs={:e} tolerance={:e} pass={}\n",
            self.max_rel, self.max_abs, self.tolerance, self.pass
        ));
        out
    }
}

pub(crate) fn block_error(case: &str, block: &str, analytic: &[f64], numeric: &[f64]) -> BlockError {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    BlockError {
        case: case.to_string(),
        block: block.to_string(),
        max_abs: diff,
        max_rel: if scale == 0.0 { diff } else { diff / scale },
    }
}

fn unit_rows(n: usize, d: usize, rng: &mut RngStream) -> Matrix<f64> {
    l2_normalize_rows(&Matrix::from_fn(n, d, |_, _| rng.normal()), NORM_EPS)
}

fn clip_value(v: &Matrix<f64>, s: &Matrix<f64>, tau: f64) -> f64 {
    let v = EmbeddingBatch::unnormalized(v.clone());
    let s = EmbeddingBatch::unnormalized(s.clone());
    0.5 * (info_nce(&v, &s, tau).unwrap() + info_nce(&s, &v, tau).unwrap())
}

fn check_clip(n: usize, d: usize, tau: f64, seed: u64, step: f64) -> Vec<BlockError> {
    let mut rng = RngStream::keyed(seed, TAG_CHECK, (n * 100 + d) as u64);
    let v = unit_rows(n, d, &mut rng);
    let s = unit_rows(n, d, &mut rng);
    let g = clip_grad_analytic(
        &EmbeddingBatch::assume_normalized(v.clone()),
        &EmbeddingBatch::assume_normalized(s.clone()),
        tau,
    )
    .expect("valid grid point");
    let case = format!("clip n={n} d={d} tau={tau} seed={seed}");
    let nv = finite_diff_grad(
        |x| clip_value(&Matrix::from_vec(n, d, x.to_vec()).unwrap(), &s, tau),
        v.as_slice(),
        step,
    );
    let ns = finite_diff_grad(
        |x| clip_value(&v, &Matrix::from_vec(n, d, x.to_vec()).unwrap(), tau),
        s.as_slice(),
        step,
    );
    vec![
        block_error(&case, "d_v", g.d_v.as_slice(), &nv),
        block_error(&case, "d_s", g.d_s.as_slice(), &ns),
    ]
}

/// Small student/teacher pair used by the end-to-end check.
pub(crate) struct ModelFixture {
    pub student: ClipModel<f64>,
    pub teacher: ClipModel<f64>,
    pub images: Matrix<f64>,
    pub texts: Matrix<f64>,
    pub masks: Vec<MaskSpec>,
}

pub(crate) fn model_fixture(seed: u64) -> ModelFixture {
    let image = InputShape { positions: 4, in_dim: 3 };
    let text = InputShape { positions: 3, in_dim: 2 };
    let student_cfg = ModelConfig {
        width: 8,
        blocks: 2,
        embed_dim: 4,
        init_tau: 0.1,
    };
    let teacher_cfg = ModelConfig {
        width: 8,
        blocks: 1,
        embed_dim: 6,
        init_tau: 0.07,
    };
    let mut student = ClipModel::new(&student_cfg, image, text, seed)
        .with_projection(6, seed)
        .with_fusion(6, seed);
    let mut rng = RngStream::keyed(seed, TAG_CHECK, 1 << 20);
    // non-zero biases so every parameter block is exercised
    for enc in [&mut student.image, &mut student.text] {
        let mut biases: Vec<&mut Matrix<f64>> = vec![&mut enc.embed_b, &mut enc.head_b];
        biases.extend(enc.blocks.iter_mut().map(|b| &mut b.b));
        for m in biases {
            for x in m.as_mut_slice() {
                *x += 0.1 * rng.normal();
            }
        }
    }
    let teacher = ClipModel::new(&teacher_cfg, image, text, seed + 1000);
    let n = 6;
    let images = Matrix::from_fn(n, image.flat_len(), |_, _| rng.normal());
    let texts = Matrix::from_fn(n, text.flat_len(), |_, _| rng.normal());
    let masks = (0..n).map(|_| sample_mask(&mut rng, image.positions, 0.5).unwrap()).collect();
    ModelFixture {
        student,
        teacher,
        images,
        texts,
        masks,
    }
}

fn check_model(terms: &[KdTerm], seed: u64, mode: GdMode, step: f64) -> Vec<BlockError> {
    let fx = model_fixture(seed);
    let weights = KdWeights::with(terms);
    let names: Vec<&str> = terms.iter().map(|t| t.name()).collect();
    let case = format!("model losses={} seed={seed}", names.join("+"));
    let out = backprop_model(
        &fx.student,
        &fx.teacher,
        &fx.images,
        &fx.texts,
        &weights,
        Some(&fx.masks),
        mode,
    )
    .expect("fixture is consistent");

    let tv = encode_image(&fx.teacher, &fx.images, None).unwrap();
    let ts = encode_text(&fx.teacher, &fx.texts).unwrap();
    let tau_t = fx.teacher.temperature();
    let mut probe = fx.student.clone();
    let numeric = finite_diff_grad(
        |theta| {
            probe.unflatten(theta);
            let sv = encode_image(&probe, &fx.images, None).unwrap();
            let ss = encode_text(&probe, &fx.texts).unwrap();
            let mv = encode_image(&probe, &fx.images, Some(&fx.masks)).unwrap();
            let x = KdInputs {
                model: &probe,
                student_v: &sv,
                student_s: &ss,
                masked_student_v: Some(&mv),
                teacher_v: &tv,
                teacher_s: &ts,
                tau_student: probe.temperature(),
                tau_teacher: tau_t,
                gd_mode: mode,
            };
            combined_loss(&weights, &x).unwrap().total
        },
        &fx.student.flatten(),
        step,
    );

    let mut blocks = Vec::new();
    let mut at = 0;
    for (name, g) in out.grads.tensors() {
        let len = g.as_slice().len();
        blocks.push(block_error(&case, &name, g.as_slice(), &numeric[at..at + len]));
        at += len;
    }
    blocks
}

/// Runs every grid point in a fixed order; `pass` iff the worst relative
/// block error is within `tolerance`.
pub fn grad_check_report(grid: &GradCheckGrid, tolerance: f64) -> GradReport {
    let mut blocks = Vec::new();
    for &n in &grid.sizes {
        for &d in &grid.dims {
            for &tau in &grid.taus {
                for &seed in &grid.seeds {
                    blocks.extend(check_clip(n, d, tau, seed, grid.step));
                }
            }
        }
    }
    for terms in &grid.loss_sets {
        for &seed in &grid.model_seeds {
            blocks.extend(check_model(terms, seed, grid.gd_mode, grid.step));
        }
    }
    GradReport::from_blocks(blocks, tolerance)
}
