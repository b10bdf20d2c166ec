//! Checkpoint format: `CRV3`, u32 version, five u32 architecture fields
//! (d, hidden, emb_dim, freqs, num_prompts), then every parameter as a
//! little-endian f64 in layout order.

use std::fs;
use std::path::Path;

use super::{Arch, DenoiserParams};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CRV3";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &DenoiserParams) -> Vec<u8> {
    let a = params.arch();
    let mut out = Vec::with_capacity(28 + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [a.d, a.hidden, a.emb_dim, a.freqs, a.num_prompts] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<DenoiserParams> {
    if bytes.len() < 28 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a CRV3 checkpoint".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", word(0))));
    }
    let arch = Arch::new(
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
        word(5) as usize,
    )?;
    let body = &bytes[28..];
    if body.len() != 8 * arch.num_params() {
        return Err(Error::Format(format!(
            "checkpoint body has {} bytes, expected {}",
            body.len(),
            8 * arch.num_params()
        )));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    DenoiserParams::from_vec(arch, data)
}

pub fn write_checkpoint(path: &Path, params: &DenoiserParams) -> Result<()> {
    Ok(fs::write(path, save_checkpoint(params))?)
}

pub fn read_checkpoint(path: &Path) -> Result<DenoiserParams> {
    load_checkpoint(&fs::read(path)?)
}
