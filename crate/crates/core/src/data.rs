//! Synthetic paired image/text data and the binary embedding dump format.
//!
//! Every sample is a pure function of `(seed, split, index)`: a class is
//! drawn, its prototype is jittered into a latent `z`, and each image patch
//! and text token is a fixed per-position linear map of `z` plus noise.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::InputShape;
use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;
use crate::numcore::{Matrix, RngStream};
use crate::scalar::Scalar;

const TAG_PROTO: u32 = 0x00DA_7A01;
const TAG_MAPS: u32 = 0x00DA_7A02;
const TAG_SPLIT: u32 = 0x00DA_7A10;

/// Standard deviations of the three noise sources.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseStd {
    /// Added to every image patch feature.
    pub image: f64,
    /// Added to every text token feature.
    pub text: f64,
    /// Per-sample jitter of the latent around its class prototype.
    pub latent: f64,
}

impl Default for NoiseStd {
    fn default() -> Self {
        Self {
            image: 0.3,
            text: 0.3,
            latent: 0.35,
        }
    }
}

impl NoiseStd {
    pub fn zero() -> Self {
        Self {
            image: 0.0,
            text: 0.0,
            latent: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub latent_dim: usize,
    pub classes: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub noise_std: NoiseStd,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Size of the separate split the teacher pretrains on; 0 pretrains on
    /// the training split. Pretraining samples are generated on demand.
    pub pretrain_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            classes: 32,
            patches: 16,
            patch_dim: 8,
            tokens: 8,
            token_dim: 8,
            noise_std: NoiseStd::default(),
            train_size: 8192,
            val_size: 1024,
            test_size: 1024,
            pretrain_size: 262_144,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    Pretrain,
}

impl Split {
    /// The splits a [`Dataset`] holds in memory.
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn tag(self) -> u32 {
        TAG_SPLIT
            + match self {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
                Split::Pretrain => 3,
            }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("data.latent_dim", self.latent_dim),
            ("data.classes", self.classes),
            ("data.patches", self.patches),
            ("data.patch_dim", self.patch_dim),
            ("data.tokens", self.tokens),
            ("data.token_dim", self.token_dim),
            ("data.train_size", self.train_size),
            ("data.val_size", self.val_size),
            ("data.test_size", self.test_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        for (name, v) in [
            ("noise_std.image", self.noise_std.image),
            ("noise_std.text", self.noise_std.text),
            ("noise_std.latent", self.noise_std.latent),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("data.{name}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> InputShape {
        InputShape {
            positions: self.patches,
            in_dim: self.patch_dim,
        }
    }

    pub fn text_shape(&self) -> InputShape {
        InputShape {
            positions: self.tokens,
            in_dim: self.token_dim,
        }
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
            Split::Test => self.test_size,
            Split::Pretrain => self.pretrain_size,
        }
    }
}

/// Paired samples; row `i` of `images` and of `texts` share one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch<T: Scalar = f64> {
    /// `n x (patches * patch_dim)`, patch-major.
    pub images: Matrix<T>,
    /// `n x (tokens * token_dim)`, token-major.
    pub texts: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            texts: self.texts.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` pairs (or all, if fewer).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn cast<U: Scalar>(&self) -> PairBatch<U> {
        PairBatch {
            images: self.images.cast(),
            texts: self.texts.cast(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Scalar = f64> {
    pub image_shape: InputShape,
    pub text_shape: InputShape,
    pub train: PairBatch<T>,
    pub val: PairBatch<T>,
    pub test: PairBatch<T>,
}

impl<T: Scalar> Dataset<T> {
    /// The in-memory split, or `None` for the generated-on-demand
    /// pretraining split.
    pub fn split(&self, split: Split) -> Option<&PairBatch<T>> {
        match split {
            Split::Train => Some(&self.train),
            Split::Val => Some(&self.val),
            Split::Test => Some(&self.test),
            Split::Pretrain => None,
        }
    }
}

/// Class prototypes and the per-position generating maps, fixed per seed.
struct Generator {
    latent: usize,
    prototypes: Matrix<f64>,
    /// `(patches * patch_dim) x latent`
    image_map: Matrix<f64>,
    /// `(tokens * token_dim) x latent`
    text_map: Matrix<f64>,
}

impl Generator {
    fn new(spec: &SyntheticSpec) -> Self {
        let l = spec.latent_dim;
        let mut rng = RngStream::keyed(spec.seed, TAG_PROTO, 0);
        let prototypes = Matrix::from_fn(spec.classes, l, |_, _| rng.normal());
        let std = 1.0 / (l as f64).sqrt();
        let mut rng = RngStream::keyed(spec.seed, TAG_MAPS, 0);
        let image_map = Matrix::from_fn(spec.patches * spec.patch_dim, l, |_, _| rng.normal() * std);
        let mut rng = RngStream::keyed(spec.seed, TAG_MAPS, 1);
        let text_map = Matrix::from_fn(spec.tokens * spec.token_dim, l, |_, _| rng.normal() * std);
        Self {
            latent: l,
            prototypes,
            image_map,
            text_map,
        }
    }

    fn render(map: &Matrix<f64>, z: &[f64], noise: f64, rng: &mut RngStream, out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(map.row_iter()) {
            *o = row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        }
        if noise > 0.0 {
            for o in out.iter_mut() {
                *o += noise * rng.normal();
            }
        }
    }

    fn sample(&self, spec: &SyntheticSpec, split: Split, index: usize, image: &mut [f64], text: &mut [f64]) -> usize {
        let mut rng = RngStream::keyed(spec.seed, split.tag(), index as u64);
        let class = rng.below(spec.classes);
        let mut z = self.prototypes.row(class).to_vec();
        if spec.noise_std.latent > 0.0 {
            for v in z.iter_mut() {
                *v += spec.noise_std.latent * rng.normal();
            }
        }
        debug_assert_eq!(z.len(), self.latent);
        Self::render(&self.image_map, &z, spec.noise_std.image, &mut rng, image);
        Self::render(&self.text_map, &z, spec.noise_std.text, &mut rng, text);
        class
    }
}

/// Materialises `count` samples of one split starting at `start`.
pub fn generate_split<T: Scalar>(spec: &SyntheticSpec, split: Split, start: usize, count: usize) -> Result<PairBatch<T>> {
    let idx: Vec<usize> = (start..start + count).collect();
    generate_indices(spec, split, &idx)
}

/// Materialises the samples at `indices` of one split, in that order.
pub fn generate_indices<T: Scalar>(spec: &SyntheticSpec, split: Split, indices: &[usize]) -> Result<PairBatch<T>> {
    spec.validate()?;
    let gen = Generator::new(spec);
    let (iw, tw) = (spec.image_shape().flat_len(), spec.text_shape().flat_len());
    let count = indices.len();
    let mut images = Matrix::<f64>::zeros(count, iw);
    let mut texts = Matrix::<f64>::zeros(count, tw);
    let mut labels = Vec::with_capacity(count);
    for (i, &index) in indices.iter().enumerate() {
        labels.push(gen.sample(spec, split, index, images.row_mut(i), texts.row_mut(i)));
    }
    Ok(PairBatch {
        images: images.cast(),
        texts: texts.cast(),
        labels,
    })
}

/// Train, validation and test splits.
pub fn generate_dataset<T: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<T>> {
    Ok(Dataset {
        image_shape: spec.image_shape(),
        text_shape: spec.text_shape(),
        train: generate_split(spec, Split::Train, 0, spec.train_size)?,
        val: generate_split(spec, Split::Val, 0, spec.val_size)?,
        test: generate_split(spec, Split::Test, 0, spec.test_size)?,
    })
}

/// Noise-free text rendering of every class prototype, `classes` rows.
pub fn class_prompts<T: Scalar>(spec: &SyntheticSpec) -> Result<Matrix<T>> {
    spec.validate()?;
    let gen = Generator::new(spec);
    let tw = spec.text_shape().flat_len();
    let mut out = Matrix::<f64>::zeros(spec.classes, tw);
    let mut unused = RngStream::new(0, 0);
    for c in 0..spec.classes {
        Generator::render(&gen.text_map, gen.prototypes.row(c), 0.0, &mut unused, out.row_mut(c));
    }
    Ok(out.cast())
}

pub const DUMP_MAGIC: [u8; 4] = *b"CKDE";
pub const DUMP_VERSION: u8 = 1;
/// Magic, version, role, `n`, `d`.
pub const DUMP_HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4;
/// Row-norm tolerance applied when reading.
pub const DUMP_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Image = 0,
    Text = 1,
}

impl Role {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Role::Image),
            1 => Some(Role::Text),
            _ => None,
        }
    }
}

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Serialises a normalised batch as little-endian `f32`.
pub fn encode_dump<T: Scalar>(role: Role, e: &EmbeddingBatch<T>) -> Result<Vec<u8>> {
    if !e.is_normalized() {
        return Err(Error::dim("write_dump", "embeddings must be l2-normalised"));
    }
    let (n, d) = (e.n(), e.d());
    let mut out = Vec::with_capacity(DUMP_HEADER_LEN + n * d * 4);
    out.extend_from_slice(&DUMP_MAGIC);
    out.push(DUMP_VERSION);
    out.push(role as u8);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &x in e.rows().as_slice() {
        out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn write_dump<T: Scalar>(path: impl AsRef<Path>, role: Role, e: &EmbeddingBatch<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dump(role, e)?;
    fs::write(path, bytes).map_err(|err| Error::io(path, err))
}

/// Parses and validates a dump held in memory; `path` only labels errors.
pub fn decode_dump(path: &Path, bytes: &[u8], role: Role) -> Result<EmbeddingBatch<f32>> {
    if bytes.len() < DUMP_HEADER_LEN {
        return Err(format_err(
            path,
            bytes.len(),
            format!("header needs {DUMP_HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes[..4] != DUMP_MAGIC {
        return Err(format_err(path, 0, format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != DUMP_VERSION {
        return Err(format_err(path, 4, format!("unsupported version {}", bytes[4])));
    }
    match Role::from_byte(bytes[5]) {
        Some(r) if r == role => {}
        Some(r) => return Err(format_err(path, 5, format!("role is {r:?}, expected {role:?}"))),
        None => return Err(format_err(path, 5, format!("unknown role byte {}", bytes[5]))),
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = n * d * 4;
    let actual = bytes.len() - DUMP_HEADER_LEN;
    if actual != expected {
        return Err(format_err(
            path,
            DUMP_HEADER_LEN,
            format!("payload for {n}x{d} needs {expected} bytes, found {actual}"),
        ));
    }
    if n == 0 {
        return Err(format_err(path, 6, "dump holds no rows"));
    }
    let data: Vec<f32> = bytes[DUMP_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = Matrix::from_vec(n, d, data)?;
    for (r, row) in m.row_iter().enumerate() {
        let norm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= DUMP_NORM_TOL) {
            return Err(format_err(
                path,
                DUMP_HEADER_LEN + r * d * 4,
                format!("row {r} has norm {norm}, expected 1"),
            ));
        }
    }
    Ok(EmbeddingBatch::assume_normalized(m))
}

pub fn read_dump(path: impl AsRef<Path>, role: Role) -> Result<EmbeddingBatch<f32>> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
    decode_dump(&path, &bytes, role)
}
