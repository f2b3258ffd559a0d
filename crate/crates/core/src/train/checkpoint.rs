//! Binary checkpoint container.
//!
//! Layout: magic `LXGC`, u32 LE version, u64 LE metadata length, UTF-8 JSON
//! metadata, then per tensor a u16 LE name length, the name, a u8 rank,
//! u32 LE extents and f32 LE data.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::OptimizerState;
use crate::nn::{Model, ModelConfig, ModelError};
use crate::tensor::Tensor;
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"LXGC";
pub const FORMAT_VERSION: u32 = 1;
const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint ends early")]
    TruncatedFile,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub fold: Option<usize>,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub tensor_count: usize,
    pub optimizer_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Parameters, running statistics and optionally optimizer moments.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Snapshot of `model` (and optimizer moments, when given).
    /// `meta.tensor_count` and `meta.optimizer_step` are filled in here.
    pub fn capture<T: Scalar>(
        model: &Model<T>,
        optimizer: Option<&OptimizerState<T>>,
        mut meta: CheckpointMeta,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            model.named_tensors().into_iter().map(|(n, t)| (n, t.cast())).collect();
        meta.optimizer_step = optimizer.map(|o| o.step);
        if let Some(opt) = optimizer {
            for (i, p) in model.params().iter().enumerate() {
                let moment =
                    |v: &[T]| Tensor::new(p.tensor.shape(), v.iter().map(|x| x.to_f32_lossy()).collect(), false);
                tensors.push((
                    format!("{OPT_M}{}", p.name),
                    moment(&opt.m[i]).expect("moment matches parameter"),
                ));
                tensors.push((
                    format!("{OPT_V}{}", p.name),
                    moment(&opt.v[i]).expect("moment matches parameter"),
                ));
            }
        }
        meta.tensor_count = tensors.len();
        Self { meta, tensors }
    }

    pub fn model_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(OPT_M) && !n.starts_with(OPT_V))
            .cloned()
            .collect()
    }

    /// Rebuilds the model described by the metadata with the stored weights.
    pub fn restore_model<T: Scalar>(&self) -> Result<Model<T>, CheckpointError> {
        let mut model = Model::build(&self.meta.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        let tensors: Vec<(String, Tensor<T>)> = self.model_tensors().into_iter().map(|(n, t)| (n, t.cast())).collect();
        model.load_named(&tensors)?;
        Ok(model)
    }

    /// Optimizer moments for `model`, if the checkpoint carries them.
    pub fn restore_optimizer<T: Scalar>(&self, model: &Model<T>) -> Result<Option<OptimizerState<T>>, CheckpointError> {
        let Some(step) = self.meta.optimizer_step else {
            return Ok(None);
        };
        let find = |name: String| {
            self.tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.data().iter().map(|&v| <T as Scalar>::from_f32(v)).collect::<Vec<T>>())
                .ok_or_else(|| CheckpointError::Malformed(format!("missing optimizer tensor `{name}`")))
        };
        let mut state = OptimizerState::new(model.params());
        for (i, p) in model.params().iter().enumerate() {
            state.m[i] = find(format!("{OPT_M}{}", p.name))?;
            state.v[i] = find(format!("{OPT_V}{}", p.name))?;
        }
        state.step = step;
        Ok(Some(state))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata is plain data");
        let mut out =
            Vec::with_capacity(16 + meta.len() + self.tensors.iter().map(|(_, t)| 4 * t.numel() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                CheckpointError::TruncatedFile
            } else {
                CheckpointError::BadMagic
            });
        }
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(r.array()?);
        let meta_len = usize::try_from(meta_len).map_err(|_| CheckpointError::TruncatedFile)?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
        let mut tensors = Vec::with_capacity(meta.tensor_count);
        for _ in 0..meta.tensor_count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array()?) as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or(CheckpointError::TruncatedFile)?;
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::TruncatedFile)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(&shape, data, false)
                .map_err(|e| CheckpointError::Malformed(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        fs::write(path, self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::TruncatedFile)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}
