//! Binary checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `SGHC` |
//! | 2 | format version (`u16`) |
//! | 8 | model config hash (`u64`) |
//! | 8 | epoch (`u64`) |
//! | 8 | cycle (`u64`) |
//! | 8 | learning rate (`f64`) |
//! | 8 | temperature (`f64`) |
//! | 8 | prior precision (`f64`) |
//! | 8 | chain seed (`u64`) |
//! | 8 | weight count `n` (`u64`) |
//! | 4n | weights (`f32`) |
//! | 4 | CRC32 of the weight bytes |

use std::path::Path;
use std::sync::Arc;

use hmcseg::model::{Layout, WeightVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SGHC";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8 * 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: u64,
    pub epoch: u64,
    pub cycle: u64,
    pub eta: f64,
    pub temperature: f64,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("truncated checkpoint: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after checkpoint")]
    Trailing(usize),
    #[error("payload CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint belongs to model config {found:016x}, expected {expected:016x}")]
    HashMismatch { expected: u64, found: u64 },
    #[error("checkpoint holds {found} weights, layout needs {expected}")]
    Length { expected: usize, found: usize },
}

pub fn encode(weights: &[f32], header: &CheckpointHeader) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * weights.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header.config_hash.to_le_bytes());
    out.extend_from_slice(&header.epoch.to_le_bytes());
    out.extend_from_slice(&header.cycle.to_le_bytes());
    out.extend_from_slice(&header.eta.to_le_bytes());
    out.extend_from_slice(&header.temperature.to_le_bytes());
    out.extend_from_slice(&header.lambda.to_le_bytes());
    out.extend_from_slice(&header.seed.to_le_bytes());
    out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    let start = out.len();
    for w in weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let end = self.pos + N;
        let chunk = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated {
            needed: end,
            have: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(chunk.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        self.take().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        self.take().map(f64::from_le_bytes)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<f32>), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take::<4>()? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(r.take()?);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let header = CheckpointHeader {
        config_hash: r.u64()?,
        epoch: r.u64()?,
        cycle: r.u64()?,
        eta: r.f64()?,
        temperature: r.f64()?,
        lambda: r.f64()?,
        seed: r.u64()?,
    };
    let n = r.u64()?;
    let needed = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(4))
        .and_then(|b| b.checked_add(HEADER_LEN + 4))
        .ok_or(CheckpointError::Truncated {
            needed: usize::MAX,
            have: bytes.len(),
        })?;
    if bytes.len() < needed {
        return Err(CheckpointError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(CheckpointError::Trailing(bytes.len() - needed));
    }
    let payload = &bytes[HEADER_LEN..needed - 4];
    let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let weights = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, weights))
}

pub fn save_checkpoint(path: &Path, weights: &WeightVector, header: &CheckpointHeader) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(weights.values(), header))?;
    Ok(())
}

/// Reads a checkpoint; with `expected_hash` set, a file written for another
/// model config is rejected.
pub fn load_checkpoint(
    path: &Path,
    expected_hash: Option<u64>,
) -> Result<(CheckpointHeader, Vec<f32>), CheckpointError> {
    let (header, weights) = decode(&std::fs::read(path)?)?;
    if let Some(expected) = expected_hash {
        if header.config_hash != expected {
            return Err(CheckpointError::HashMismatch {
                expected,
                found: header.config_hash,
            });
        }
    }
    Ok((header, weights))
}

pub fn load_weights(
    path: &Path,
    layout: &Arc<Layout>,
    expected_hash: u64,
) -> Result<(CheckpointHeader, WeightVector), CheckpointError> {
    let (header, values) = load_checkpoint(path, Some(expected_hash))?;
    if values.len() != layout.total() {
        return Err(CheckpointError::Length {
            expected: layout.total(),
            found: values.len(),
        });
    }
    let w = WeightVector::unflatten(values, Arc::clone(layout)).expect("length checked");
    Ok((header, w))
}
