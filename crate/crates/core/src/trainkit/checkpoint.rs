//! Binary checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CKPT" | version u8 | dtype u8 (4 = f32, 8 = f64) | config digest [32]
//! tensor count u32 | tensor records
//! optimizer flag u8 | [step u64 | first-moment records | second-moment records]
//! sha-256 of all preceding bytes [32]
//! ```
//!
//! A tensor record is `name_len u32 | name | rank u8 | dims u32 x rank |
//! payload` with the payload in the file's dtype.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Digest;
use crate::encoders::ClipModel;
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

use super::OptimState;

pub const CKPT_MAGIC: [u8; 4] = *b"CKPT";
pub const CKPT_VERSION: u8 = 1;

fn put_record<T: Scalar>(out: &mut Vec<u8>, name: &str, m: &Matrix<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(2);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &x in m.as_slice() {
        x.write_le(out);
    }
}

/// Serialises a model and optionally its optimizer state.
pub fn encode_checkpoint<T: Scalar>(model: &ClipModel<T>, optim: Option<&OptimState<T>>, digest: &Digest) -> Vec<u8> {
    let tensors = model.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.push(T::DTYPE);
    out.extend_from_slice(&digest.0);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in &tensors {
        put_record(&mut out, name, m);
    }
    match optim {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            out.extend_from_slice(&st.step.to_le_bytes());
            for ((name, _), m) in tensors.iter().zip(&st.m) {
                put_record(&mut out, &format!("m/{name}"), m);
            }
            for ((name, _), v) in tensors.iter().zip(&st.v) {
                put_record(&mut out, &format!("v/{name}"), v);
            }
        }
    }
    let sum = Digest::of_bytes(&out);
    out.extend_from_slice(&sum.0);
    out
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &ClipModel<T>,
    optim: Option<&OptimState<T>>,
    digest: &Digest,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, optim, digest)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
    /// Whether the trailing checksum matches; shape disagreements in a
    /// damaged file are reported as corruption.
    intact: bool,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.at,
                format!("truncated {what}: needs {n} bytes, {} remain", self.bytes.len() - self.at),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// Reads one record into `dst`, checking it is named `expected`.
    fn record<T: Scalar>(&mut self, expected: &str, dst: &mut Matrix<T>) -> Result<()> {
        let start = self.at;
        let len = self.u32("tensor name length")? as usize;
        let name_bytes = self.take(len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes).map_err(|_| self.fail(start + 4, "tensor name is not UTF-8"))?;
        if name != expected {
            return Err(self.fail(start, format!("expected tensor `{expected}`, found `{name}`")));
        }
        let rank_at = self.at;
        let rank = self.u8("tensor rank")?;
        if rank != 2 {
            return Err(self.fail(rank_at, format!("tensor `{name}` has rank {rank}, expected 2")));
        }
        let rows = self.u32("tensor dims")? as usize;
        let cols = self.u32("tensor dims")? as usize;
        if (rows, cols) != dst.shape() {
            if !self.intact {
                return Err(self.fail(
                    rank_at + 1,
                    format!("tensor `{name}` has dims [{rows}, {cols}] and the checksum does not match, file is corrupt"),
                ));
            }
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: vec![dst.rows(), dst.cols()],
                found: vec![rows, cols],
            });
        }
        let payload = self.take(rows * cols * T::BYTES, &format!("payload of `{name}`"))?;
        for (d, chunk) in dst.as_mut_slice().iter_mut().zip(payload.chunks_exact(T::BYTES)) {
            *d = T::read_le(chunk);
        }
        Ok(())
    }
}

/// Restores `model` (and `optim`, when given) from checkpoint bytes and
/// returns the stored config digest. The model must already have the
/// checkpoint's architecture; every tensor is checked by name and shape.
pub fn decode_checkpoint<T: Scalar>(
    path: &Path,
    bytes: &[u8],
    model: &mut ClipModel<T>,
    optim: Option<&mut OptimState<T>>,
) -> Result<Digest> {
    let intact = bytes.len() >= 32 && {
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        Digest::of_bytes(body).0 == sum
    };
    let mut r = Reader {
        path,
        bytes,
        at: 0,
        intact,
    };
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(r.fail(0, "bad magic, not a checkpoint"));
    }
    let version = r.u8("version")?;
    if version != CKPT_VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let dtype = r.u8("dtype")?;
    if dtype != T::DTYPE {
        return Err(r.fail(5, format!("stored with {}-byte floats, loading as {}-byte", dtype, T::DTYPE)));
    }
    let digest = Digest(r.take(32, "config digest")?.try_into().unwrap());

    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let count_at = r.at;
    let count = r.u32("tensor count")? as usize;
    if count != names.len() {
        return Err(r.fail(count_at, format!("{count} tensors stored, model has {}", names.len())));
    }
    let mut loaded = model.zeros_like();
    for (name, dst) in names.iter().zip(loaded.tensors_mut()) {
        r.record(name, dst)?;
    }

    let flag_at = r.at;
    let state = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let mut m = Vec::with_capacity(names.len());
            let mut v = Vec::with_capacity(names.len());
            for (prefix, out) in [("m", &mut m), ("v", &mut v)] {
                for (name, (_, t)) in names.iter().zip(model.tensors()) {
                    let mut buf = Matrix::zeros(t.rows(), t.cols());
                    r.record(&format!("{prefix}/{name}"), &mut buf)?;
                    out.push(buf);
                }
            }
            Some((step, m, v))
        }
        f => return Err(r.fail(flag_at, format!("bad optimizer flag {f}"))),
    };

    let body_end = r.at;
    let sum = r.take(32, "checksum")?;
    if r.at != bytes.len() {
        return Err(r.fail(r.at, format!("{} trailing bytes", bytes.len() - r.at)));
    }
    if sum != Digest::of_bytes(&bytes[..body_end]).0 {
        return Err(r.fail(body_end, "checksum mismatch, file is corrupt"));
    }

    if let Some(st) = optim {
        let (step, m, v) = state.ok_or_else(|| r.fail(flag_at, "checkpoint holds no optimizer state"))?;
        st.step = step;
        st.m = m;
        st.v = v;
    }
    *model = loaded;
    Ok(digest)
}

pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &mut ClipModel<T>,
    optim: Option<&mut OptimState<T>>,
) -> Result<Digest> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_checkpoint(&path, &bytes, model, optim)
}
