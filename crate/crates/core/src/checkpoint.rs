//! Versioned binary container for score-model parameters.
//!
//! Layout (little-endian): magic `ITLTCKPT`, `u32` format version, metadata block
//! (schedule code `u8`, four `u32` architecture sizes, `f64` Fourier scale, `u64` seed,
//! `u64` parameter count), the Fourier frequencies and parameters as `f64`, then a SHA-256
//! digest of everything before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelConfig, ScoreModel};
use crate::schedules::{NoiseSchedule, ScheduleKind};

const MAGIC: &[u8; 8] = b"ITLTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn encode(model: &ScoreModel) -> Vec<u8> {
    let config = model.config();
    let mut buf = Vec::with_capacity(64 + 8 * (model.frequencies().len() + model.num_params()) + DIGEST_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(model.schedule().kind().code());
    for size in [
        config.data_dim,
        config.hidden_width,
        config.hidden_layers,
        config.fourier_features,
    ] {
        buf.extend_from_slice(&(size as u32).to_le_bytes());
    }
    buf.extend_from_slice(&config.fourier_scale.to_le_bytes());
    buf.extend_from_slice(&model.seed().to_le_bytes());
    buf.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for v in model.frequencies().iter().chain(model.params()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<ScoreModel> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut cur = Cursor {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let code = cur.array::<1>()?[0];
    let kind =
        ScheduleKind::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown schedule code {code}")))?;
    let config = ModelConfig {
        data_dim: cur.u32()? as usize,
        hidden_width: cur.u32()? as usize,
        hidden_layers: cur.u32()? as usize,
        fourier_features: cur.u32()? as usize,
        fourier_scale: cur.f64()?,
    };
    let seed = cur.u64()?;
    let n_params = cur.u64()? as usize;
    if n_params != config.num_params() {
        return Err(Error::Checkpoint(format!(
            "{n_params} parameters for an architecture of {}",
            config.num_params()
        )));
    }
    let frequencies = cur.f64s(config.fourier_features)?;
    let params = cur.f64s(n_params)?;
    if cur.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    ScoreModel::from_parts(config, NoiseSchedule::new(kind), seed, frequencies, params)
        .map_err(|e| Error::Checkpoint(format!("invalid model: {e}")))
}

/// Writes through a temporary sibling file so a crash never leaves a half-written checkpoint.
pub fn save_checkpoint(model: &ScoreModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, encode(model))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ScoreModel> {
    decode(&fs::read(path)?)
}
