//! SVOL: a minimal binary volume container.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "SVOL"
//! 4       4           u32 LE version (= 1)
//! 8       4           u32 LE rank
//! 12      4 * rank    u32 LE dims, outermost first
//! ...     4 * prod    f32 LE payload, row-major
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on load.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SVOL";
pub const VERSION: u32 = 1;

pub fn encode_volume(volume: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * volume.rank() + 4 * volume.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(volume.rank() as u32).to_le_bytes());
    for &d in volume.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in volume.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |msg: String| Err(Error::format(path, msg));
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return fail(format!("bad magic {found:?}, expected \"SVOL\""));
    }
    let read_u32 = |at: usize| -> Option<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4-byte slice")))
    };
    let Some(version) = read_u32(4) else {
        return fail("truncated header: missing version".into());
    };
    if version != VERSION {
        return fail(format!("unsupported SVOL version {version}, expected {VERSION}"));
    }
    let Some(rank) = read_u32(8) else {
        return fail("truncated header: missing rank".into());
    };
    let rank = rank as usize;
    let header_len = 12 + 4 * rank;
    if bytes.len() < header_len {
        return fail(format!(
            "truncated header: rank {rank} needs {header_len} bytes, file has {}",
            bytes.len()
        ));
    }
    let dims: Vec<usize> = (0..rank).map(|i| read_u32(12 + 4 * i).unwrap() as usize).collect();
    if rank == 0 || dims.contains(&0) {
        return fail(format!("invalid shape {dims:?}"));
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|_| n));
    let Some(numel) = numel else {
        return fail(format!("shape overflow: {dims:?} does not fit in memory"));
    };
    let payload = &bytes[header_len..];
    if payload.len() < numel * 4 {
        return fail(format!(
            "truncated payload: shape {dims:?} needs {} bytes, found {}",
            numel * 4,
            payload.len()
        ));
    }
    if payload.len() > numel * 4 {
        return fail(format!("{} trailing bytes after payload", payload.len() - numel * 4));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Tensor::new(dims, data)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

pub fn save_volume(path: impl AsRef<Path>, volume: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_volume(volume)).map_err(|e| Error::io(path, e))
}
