//! Binary framing shared by checkpoints and vector sidecars:
//! magic bytes, a little-endian u64 header length, a JSON header, then a
//! little-endian f32 payload.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn encode<H: Serialize>(magic: &[u8], header: &H, payload: &[f32]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(magic.len() + 8 + header.len() + 4 * payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn decode<H: DeserializeOwned>(magic: &[u8], bytes: &[u8]) -> Result<(H, Vec<f32>)> {
    let rest = bytes
        .strip_prefix(magic)
        .ok_or_else(|| Error::Format(format!("missing magic {:?}", String::from_utf8_lossy(magic))))?;
    if rest.len() < 8 {
        return Err(Error::Format("truncated header length".into()));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(Error::Format("truncated header".into()));
    }
    let (header, payload) = rest.split_at(len);
    let header = serde_json::from_slice(header)?;
    if payload.len() % 4 != 0 {
        return Err(Error::Format("payload is not a whole number of f32 values".into()));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, values))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
