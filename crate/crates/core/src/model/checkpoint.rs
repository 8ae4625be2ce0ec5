//! Binary checkpoint: `b"SDOCKPT1"`, a little-endian `u64` byte length,
//! that many bytes of UTF-8 JSON metadata, then the parameters as
//! little-endian `f64` in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::denoiser::TIME_FEATURES;
use super::{Denoiser, Mlp, Parameterization, Schedule, VelocityField};

pub const MAGIC: &[u8; 8] = b"SDOCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated at byte {offset}: need {needed} more bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("metadata at byte {offset}: {message}")]
    Metadata { offset: usize, message: String },
    #[error("unsupported format version {found} (this build reads {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("non-finite parameter {value} at byte {offset}")]
    NonFinite { offset: usize, value: f64 },
    #[error("{extra} trailing bytes after the parameter block at byte {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// JSON header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub data_dim: usize,
    /// Widths from the network input (`data_dim + 3`) to the output.
    pub layer_sizes: Vec<usize>,
    pub activation: String,
    pub time_features: Vec<String>,
    pub parameterization: Parameterization,
    pub schedule: Schedule,
    pub param_count: usize,
}

impl CheckpointMeta {
    pub fn describe(denoiser: &Denoiser, schedule: &Schedule) -> Self {
        let d = denoiser.data_dim();
        let mut layer_sizes = vec![d + TIME_FEATURES];
        layer_sizes.extend_from_slice(denoiser.mlp.hidden());
        layer_sizes.push(d);
        Self {
            format_version: FORMAT_VERSION,
            data_dim: d,
            layer_sizes,
            activation: "tanh".into(),
            time_features: vec!["t".into(), "sin(2*pi*t)".into(), "cos(2*pi*t)".into()],
            parameterization: denoiser.parameterization,
            schedule: *schedule,
            param_count: denoiser.param_count(),
        }
    }

    fn hidden(&self) -> Result<Vec<usize>, String> {
        let n = self.layer_sizes.len();
        if n < 2
            || self.layer_sizes[0] != self.data_dim + TIME_FEATURES
            || self.layer_sizes[n - 1] != self.data_dim
        {
            return Err(format!(
                "layer_sizes {:?} inconsistent with data_dim {}",
                self.layer_sizes, self.data_dim
            ));
        }
        if self.activation != "tanh" {
            return Err(format!("unsupported activation {:?}", self.activation));
        }
        Ok(self.layer_sizes[1..n - 1].to_vec())
    }
}

pub fn to_bytes(denoiser: &Denoiser, schedule: &Schedule) -> Vec<u8> {
    let meta = serde_json::to_vec(&CheckpointMeta::describe(denoiser, schedule))
        .expect("metadata serializes");
    let params = denoiser.flat_params();
    let mut out = Vec::with_capacity(16 + meta.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], offset: usize, len: usize) -> Result<&'a [u8], CheckpointError> {
    let available = bytes.len().saturating_sub(offset);
    if available < len {
        return Err(CheckpointError::Truncated {
            offset,
            needed: len,
            available,
        });
    }
    Ok(&bytes[offset..offset + len])
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Denoiser, Schedule, CheckpointMeta), CheckpointError> {
    let magic = take(bytes, 0, 8).map_err(|_| CheckpointError::BadMagic {
        expected: String::from_utf8_lossy(MAGIC).into(),
        found: String::from_utf8_lossy(bytes).into(),
    })?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into(),
            found: String::from_utf8_lossy(magic).into(),
        });
    }
    let len_bytes: [u8; 8] = take(bytes, 8, 8)?.try_into().expect("eight bytes");
    let meta_len = u64::from_le_bytes(len_bytes);
    let meta_len = usize::try_from(meta_len).map_err(|_| CheckpointError::Metadata {
        offset: 8,
        message: format!("metadata length {meta_len} does not fit in memory"),
    })?;
    let meta_bytes = take(bytes, 16, meta_len)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| CheckpointError::Metadata {
            offset: 16,
            message: e.to_string(),
        })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: meta.format_version,
        });
    }
    let bad_meta = |message: String| CheckpointError::Metadata {
        offset: 16,
        message,
    };
    let hidden = meta.hidden().map_err(bad_meta)?;
    let schedule = Schedule::new(meta.schedule.kind, meta.schedule.steps)
        .map_err(|e| bad_meta(e.to_string()))?;
    let offset = 16 + meta_len;
    let param_bytes = take(bytes, offset, 8 * meta.param_count)?;
    let flat: Vec<f64> = param_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    if let Some(k) = flat.iter().position(|v| !v.is_finite()) {
        return Err(CheckpointError::NonFinite {
            offset: offset + 8 * k,
            value: flat[k],
        });
    }
    let end = offset + param_bytes.len();
    if end != bytes.len() {
        return Err(CheckpointError::Trailing {
            offset: end,
            extra: bytes.len() - end,
        });
    }
    let mlp = Mlp::from_params(meta.data_dim, &hidden, &flat).map_err(|e| bad_meta(e.to_string()))?;
    Ok((Denoiser::new(mlp, meta.parameterization), schedule, meta))
}

pub fn save_checkpoint(
    path: &Path,
    denoiser: &Denoiser,
    schedule: &Schedule,
) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(denoiser, schedule)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(Denoiser, Schedule), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (d, s, _) = from_bytes(&bytes)?;
    Ok((d, s))
}
