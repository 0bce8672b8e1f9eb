//! On-disk formats. Every binary field is little-endian; headers are ASCII
//! `key = value` lines ended by a blank line.

mod checkpoint;
mod cube;
mod export;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use cube::{
    decode_cube_file, encode_cube_file, read_cube, read_mask, read_measurement, write_cube, write_cube_as, write_mask, write_measurement,
    CubeHeader, Dtype, FileKind, CUBE_MAGIC,
};
pub use export::{
    dequantize_u16, export_band_images, quantize_u16, read_pgm16, spectrum_csv, write_pgm16, write_region_weights, Pgm16,
};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Longest accepted text header, magic line included.
const MAX_HEADER: usize = 1 << 16;

/// Splits `bytes` into the header pairs and the payload after the blank line.
pub(crate) fn split_header<'a>(bytes: &'a [u8], magic: &'static str) -> Result<(Vec<(String, String)>, &'a [u8])> {
    let magic_line = format!("{magic}\n");
    if !bytes.starts_with(magic_line.as_bytes()) {
        return Err(FormatError::BadMagic { expected: magic }.into());
    }
    let body = &bytes[magic_line.len()..];
    let window = &body[..body.len().min(MAX_HEADER)];
    let end = window
        .windows(2)
        .position(|w| w == b"\n\n")
        .map(|p| p + 1)
        .or_else(|| window.starts_with(b"\n").then_some(0))
        .ok_or_else(|| FormatError::BadHeader("header not terminated by a blank line".into()))?;
    let text = std::str::from_utf8(&body[..end]).map_err(|_| FormatError::BadHeader("header is not ASCII".into()))?;
    if !text.is_ascii() {
        return Err(FormatError::BadHeader("header is not ASCII".into()).into());
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| FormatError::BadHeader(format!("expected key = value, got {line:?}")))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if pairs.iter().any(|(seen, _)| *seen == k) {
            return Err(FormatError::BadHeader(format!("duplicate key {k}")).into());
        }
        pairs.push((k, v));
    }
    Ok((pairs, &body[end + 1..]))
}

pub(crate) fn header_text(magic: &str, pairs: &[(&str, String)]) -> Vec<u8> {
    let mut s = format!("{magic}\n");
    for (k, v) in pairs {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s.push('\n');
    s.into_bytes()
}

pub(crate) fn take_f64s(payload: &[u8], count: usize) -> Vec<f64> {
    payload[..count * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}
