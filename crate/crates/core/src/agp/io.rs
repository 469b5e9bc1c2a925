use std::path::Path;

use thiserror::Error;

use super::mlp::{standard_sizes, InputNorm, MlpModel, OutputNorm};
use crate::params::N_PARAMS;

const MAGIC: &[u8; 8] = b"IVIMAGP\0";
const VERSION: u32 = 1;
const ACTIVATION_TANH: u8 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("model file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("model file version {found}, this build reads version {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
}

impl ModelFileError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            Self::Io(_) => 1,
            Self::BadMagic => 2,
            Self::Corrupt(_) => 3,
            Self::VersionMismatch { .. } => 4,
            Self::ArchitectureMismatch(_) => 5,
        }
    }
}

pub fn model_to_bytes(model: &MlpModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.weights().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.sizes().len() as u32).to_le_bytes());
    for &s in model.sizes() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out.push(ACTIVATION_TANH);
    let inorm = model.input_norm();
    for v in inorm.scale.iter().chain(&inorm.offset) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let onorm = model.output_norm();
    for v in onorm.lo.iter().chain(&onorm.hi) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(model.weights().len() as u64).to_le_bytes());
    for w in model.weights() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelFileError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelFileError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| ModelFileError::Corrupt("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<MlpModel, ModelFileError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(ModelFileError::Corrupt("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(ModelFileError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(ModelFileError::Corrupt("checksum mismatch".into()));
    }

    let mut r = Reader { buf: body, pos: 12 };
    let n_sizes = r.u32()? as usize;
    if n_sizes > 64 {
        return Err(ModelFileError::Corrupt(format!("implausible layer count {n_sizes}")));
    }
    let sizes: Vec<usize> = (0..n_sizes).map(|_| r.u32().map(|s| s as usize)).collect::<Result<_, _>>()?;
    let activation = r.take(1)?[0];
    if sizes.len() < 2 {
        return Err(ModelFileError::ArchitectureMismatch(format!("{} layer sizes", sizes.len())));
    }
    let expected = standard_sizes(sizes[0]);
    if sizes != expected {
        return Err(ModelFileError::ArchitectureMismatch(format!(
            "layer sizes {sizes:?}, expected {expected:?}"
        )));
    }
    if activation != ACTIVATION_TANH {
        return Err(ModelFileError::ArchitectureMismatch(format!("activation id {activation}")));
    }
    let n_in = sizes[0];
    let scale = r.f64s(n_in)?;
    let offset = r.f64s(n_in)?;
    let lo = r.f64s(N_PARAMS)?;
    let hi = r.f64s(N_PARAMS)?;
    let n_w = r.u64()? as usize;
    let expected_w: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if n_w != expected_w {
        return Err(ModelFileError::ArchitectureMismatch(format!(
            "{n_w} weights, architecture needs {expected_w}"
        )));
    }
    let weights = r.f64s(n_w)?;
    if r.pos != body.len() {
        return Err(ModelFileError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    if weights.iter().chain(&scale).chain(&offset).chain(&lo).chain(&hi).any(|v| !v.is_finite()) {
        return Err(ModelFileError::Corrupt("non-finite value".into()));
    }
    Ok(MlpModel::from_parts(
        sizes,
        weights,
        InputNorm { scale, offset },
        OutputNorm {
            lo: lo.try_into().unwrap(),
            hi: hi.try_into().unwrap(),
        },
    ))
}

pub fn save_model(model: &MlpModel, path: &Path) -> Result<(), ModelFileError> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel, ModelFileError> {
    model_from_bytes(&std::fs::read(path)?)
}
