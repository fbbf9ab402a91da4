//! Versioned model checkpoints with a SHA-256 content digest.
//!
//! ```text
//! "NVCK" | version u16
//! latent u32 | hidden u32 | input u32 | downsample u32 | head u8
//! lambda f64 | steps u64 | seed u64 | loss_mode u8 | learning_rate f64
//! batch_size u32 | patch_size u32
//! tensor count u32, then per tensor:
//!   name_len u16 | name (UTF-8) | rank u8 | dims u32 x rank | f32 values
//! SHA-256 of every preceding byte (32 bytes)
//! ```
//! All integers and floats little-endian. The digest doubles as the model id
//! written into coded images.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ArchitectureSpec, ModelError, PosteriorHead, VaeModel};
use crate::tensor::Tensor;
use crate::training::LossMode;

pub const MAGIC: [u8; 4] = *b"NVCK";
pub const VERSION: u16 = 1;
pub const DIGEST_BYTES: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot read checkpoint {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write checkpoint {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (this build reads version {supported})")]
    Version { found: u16, supported: u16 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint digest mismatch: stored {stored}, computed {computed}")]
    Digest { stored: String, computed: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingMetadata {
    pub lambda: f64,
    pub steps: u64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub patch_size: u32,
}

impl Default for TrainingMetadata {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            steps: 0,
            seed: 0,
            loss_mode: LossMode::RateDistortion,
            learning_rate: 0.0,
            batch_size: 0,
            patch_size: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub model: VaeModel<f32>,
    pub metadata: TrainingMetadata,
}

/// Lowercase hex of a digest.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

fn head_code(head: PosteriorHead) -> u8 {
    match head {
        PosteriorHead::Uniform => 0,
        PosteriorHead::Gaussian => 1,
    }
}

fn mode_code(mode: LossMode) -> u8 {
    match mode {
        LossMode::RateDistortion => 0,
        LossMode::BetaVae => 1,
    }
}

impl ModelCheckpoint {
    pub fn new(model: VaeModel<f32>, metadata: TrainingMetadata) -> Self {
        Self { model, metadata }
    }

    /// Canonical serialization without the digest trailer.
    fn body(&self) -> Vec<u8> {
        let spec = self.model.spec();
        let m = &self.metadata;
        let mut out = Vec::with_capacity(64 + self.model.params().element_count() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            spec.latent_channels,
            spec.hidden_channels,
            spec.input_channels,
            spec.downsample_factor,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(head_code(self.model.head()));
        out.extend_from_slice(&m.lambda.to_le_bytes());
        out.extend_from_slice(&m.steps.to_le_bytes());
        out.extend_from_slice(&m.seed.to_le_bytes());
        out.push(mode_code(m.loss_mode));
        out.extend_from_slice(&m.learning_rate.to_le_bytes());
        out.extend_from_slice(&m.batch_size.to_le_bytes());
        out.extend_from_slice(&m.patch_size.to_le_bytes());
        let params = self.model.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.tensor.shape().len() as u8);
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body();
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// SHA-256 of the canonical serialization; identifies the model.
    pub fn model_id(&self) -> [u8; DIGEST_BYTES] {
        Sha256::digest(self.body()).into()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 6 {
            return Err(CheckpointError::Truncated);
        }
        if bytes[0..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: VERSION,
            });
        }
        if bytes.len() < 6 + DIGEST_BYTES {
            return Err(CheckpointError::Truncated);
        }
        let (body, stored) = bytes.split_at(bytes.len() - DIGEST_BYTES);
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(CheckpointError::Digest {
                stored: hex(stored),
                computed: hex(&computed),
            });
        }

        let mut r = Reader { bytes: body, pos: 6 };
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let spec = ArchitectureSpec {
            latent_channels: dims[0],
            hidden_channels: dims[1],
            input_channels: dims[2],
            downsample_factor: dims[3],
        };
        let head = match r.u8()? {
            0 => PosteriorHead::Uniform,
            1 => PosteriorHead::Gaussian,
            other => return Err(CheckpointError::Malformed(format!("unknown head code {other}"))),
        };
        let lambda = r.f64()?;
        let steps = r.u64()?;
        let seed = r.u64()?;
        let loss_mode = match r.u8()? {
            0 => LossMode::RateDistortion,
            1 => LossMode::BetaVae,
            other => return Err(CheckpointError::Malformed(format!("unknown loss mode code {other}"))),
        };
        let metadata = TrainingMetadata {
            lambda,
            steps,
            seed,
            loss_mode,
            learning_rate: r.f64()?,
            batch_size: r.u32()?,
            patch_size: r.u32()?,
        };

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` is too large")))?;
            let raw = r.take(len)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(ModelError::from)?;
            tensors.push((name, tensor));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} unexpected bytes before the digest",
                body.len() - r.pos
            )));
        }
        let model = VaeModel::from_tensors(spec, head, tensors)?;
        Ok(Self { model, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
