//! Run configuration: JSON loading, dotted overrides, validation and the
//! content digest stamped into every output file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest as _, Sha256};

use crate::data::SyntheticSpec;
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::grads::GdMode;
use crate::losses::{KdTerm, KdWeights};
use crate::trainkit::OptimConfig;

/// SHA-256 of a canonical serialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

/// Parameter varied by the `sweep` command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Weight of the enabled term named by `SweepConfig::term`.
    Weight,
    MaskRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub term: KdTerm,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            param: SweepParam::Weight,
            term: KdTerm::Fd,
            values: vec![10.0, 100.0, 1000.0, 2000.0, 3000.0],
        }
    }
}

/// Element type used for training and evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Everything one command needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub data: SyntheticSpec,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub kd: KdWeights,
    pub gd_mode: GdMode,
    pub optim: OptimConfig,
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub mask_ratio: f64,
    pub eval_interval: usize,
    /// Validation pairs used for the logged pos-minus-neg gap.
    pub posneg_subset: usize,
    pub out_dir: PathBuf,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::default(),
            data: SyntheticSpec::default(),
            teacher: ModelConfig::teacher(),
            student: ModelConfig::student(),
            kd: KdWeights::default(),
            gd_mode: GdMode::default(),
            optim: OptimConfig::default(),
            teacher_steps: 2000,
            student_steps: 2000,
            mask_ratio: 0.25,
            eval_interval: 100,
            posneg_subset: 512,
            out_dir: PathBuf::from("runs"),
            sweep: SweepConfig::default(),
        }
    }
}

fn parse_error(e: serde_json::Error) -> Error {
    let msg = e.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
        .unwrap_or("<config>")
        .to_string();
    Error::config(field, msg)
}

/// Sets `path` (dot separated) inside a JSON object tree, creating
/// intermediate objects.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(path, "empty key segment"));
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(parts[..i].join("."), "is not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one segment")
}

impl RunConfig {
    /// Parses JSON text, applies `KEY=VALUE` overrides and validates.
    ///
    /// Override values are parsed as JSON when possible and taken as strings
    /// otherwise, so `kd.fd=100`, `kd.enabled=["fd","icl"]` and
    /// `precision=f32` all work.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: Value = serde_json::from_str(text).map_err(parse_error)?;
        if !root.is_object() {
            return Err(Error::config("<config>", "top level must be a JSON object"));
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override must look like KEY=VALUE"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key.trim(), value)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(parse_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_json_with_overrides(text, &[])
    }

    /// Reads a config file; `None` starts from the defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => "{}".to_string(),
        };
        Self::from_json_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.teacher.validate("teacher")?;
        self.student.validate("student")?;
        self.kd.validate()?;
        self.optim.validate()?;
        if self.optim.batch_size > self.data.train_size {
            return Err(Error::config(
                "optim.batch_size",
                format!("{} exceeds data.train_size {}", self.optim.batch_size, self.data.train_size),
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio", format!("{} is outside [0, 1)", self.mask_ratio)));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be >= 1"));
        }
        if self.posneg_subset < 2 {
            return Err(Error::config("posneg_subset", "must be >= 2"));
        }
        if self.data.val_size < 2 {
            return Err(Error::config("data.val_size", "must be >= 2 for validation statistics"));
        }
        if self.sweep.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("sweep.values", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Digest of the canonical JSON form, ignoring `out_dir`.
    pub fn digest(&self) -> Digest {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Digest::of_bytes(&serde_json::to_vec(&c).expect("config serialises"))
    }

    /// Header comment line for output files.
    pub fn stamp(&self) -> String {
        format!("# digest={} seed={}", self.digest(), self.seed)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
