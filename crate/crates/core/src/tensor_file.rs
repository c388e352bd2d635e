//! Binary grid files: `DSI1`, five little-endian u32 (F, h, w, d, role code),
//! then F*h*w*d little-endian f32 in (f, y, x, c) order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::{GridDims, LatentGrid, Role};

pub const MAGIC: &[u8; 4] = b"DSI1";
const HEADER_LEN: usize = 4 + 5 * 4;

pub fn encode(grid: &LatentGrid) -> Vec<u8> {
    let dims = grid.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [
        dims.frames as u32,
        dims.height as u32,
        dims.width as u32,
        grid.channels() as u32,
        grid.role().code(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode a grid; the error message is returned without path context.
pub fn decode(bytes: &[u8]) -> std::result::Result<LatentGrid, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("file is {} bytes, shorter than the header", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let word = |i: usize| {
        let at = 4 + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
    };
    let (f, h, w, d, code) = (word(0), word(1), word(2), word(3), word(4));
    let role = Role::from_code(code).ok_or_else(|| format!("unknown role code {code}"))?;
    let count = (f as usize)
        .checked_mul(h as usize)
        .and_then(|n| n.checked_mul(w as usize))
        .and_then(|n| n.checked_mul(d as usize))
        .ok_or("dimensions overflow")?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(format!("payload is {} bytes, expected {}", payload.len(), count * 4));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LatentGrid::new(
        GridDims::new(f as usize, h as usize, w as usize),
        d as usize,
        role,
        data,
    )
    .map_err(|e| e.to_string())
}

pub fn write_grid(path: impl AsRef<Path>, grid: &LatentGrid) -> Result<()> {
    fs::write(path, encode(grid))?;
    Ok(())
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<LatentGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::TensorFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode(&bytes).map_err(|message| Error::TensorFile {
        path: path.to_path_buf(),
        message,
    })
}
