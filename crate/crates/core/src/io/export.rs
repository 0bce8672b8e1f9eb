use std::path::{Path, PathBuf};

use super::{read_bytes, write_atomic};
use crate::error::{Error, FormatError, Result};
use crate::model::PhaseMaps;
use crate::optics::SpectralCube;

/// Clips to `[0, 1]` and maps linearly onto `0..=65535`, rounding half up.
pub fn quantize_u16(v: f64) -> u16 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (c * 65535.0 + 0.5).floor() as u16
}

pub fn dequantize_u16(q: u16) -> f64 {
    q as f64 / 65535.0
}

/// A 16-bit binary greymap (`P5`, maxval 65535, big-endian samples).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm16 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
}

/// `plane` is row-major with `rows` rows of `cols` values.
pub fn write_pgm16(path: &Path, plane: &[f64], rows: usize, cols: usize) -> Result<()> {
    if plane.len() != rows * cols {
        return Err(Error::dim(format!("plane has {} values, expected {rows}x{cols}", plane.len())));
    }
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    for &v in plane {
        out.extend_from_slice(&quantize_u16(v).to_be_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_pgm16(path: &Path) -> Result<Pgm16> {
    let bytes = read_bytes(path)?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::BadHeader("PGM header cut short".into()).into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(FormatError::BadMagic { expected: "P5" }.into());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| FormatError::BadHeader(format!("bad PGM field {s:?}")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 65535 {
        return Err(FormatError::BadHeader(format!("expected maxval 65535, got {maxval}")).into());
    }
    let payload = &bytes[pos + 1..];
    let expected = width.checked_mul(height).and_then(|n| n.checked_mul(2)).ok_or_else(|| FormatError::ExtentOverflow(format!("{width}x{height}")))?;
    if payload.len() < expected {
        return Err(FormatError::TruncatedPayload { expected, found: payload.len() }.into());
    }
    if payload.len() > expected {
        return Err(FormatError::TrailingBytes(payload.len() - expected).into());
    }
    let pixels = payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok(Pgm16 { width, height, pixels })
}

/// `band_index,wavelength_nm_or_blank,value` rows for pixel `(x, y)`.
pub fn spectrum_csv(cube: &SpectralCube, x: usize, y: usize) -> Result<String> {
    if x >= cube.nx() || y >= cube.ny() {
        return Err(Error::dim(format!("pixel ({x}, {y}) outside {}x{}", cube.nx(), cube.ny())));
    }
    let mut s = String::from("band_index,wavelength_nm_or_blank,value\n");
    for b in 0..cube.n_lambda() {
        let wl = cube.wavelengths().map(|w| format!("{:?}", w[b])).unwrap_or_default();
        s.push_str(&format!("{b},{wl},{:?}\n", cube.get(x, y, b)));
    }
    Ok(s)
}

/// One PGM per band (`band_000.pgm`, ...) plus `spectrum.csv` for pixel `(x, y)`.
pub fn export_band_images(cube: &SpectralCube, dir: &Path, pixel: (usize, usize)) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(cube.n_lambda() + 1);
    for b in 0..cube.n_lambda() {
        let path = dir.join(format!("band_{b:03}.pgm"));
        write_pgm16(&path, cube.band(b), cube.nx(), cube.ny())?;
        written.push(path);
    }
    let csv = dir.join("spectrum.csv");
    write_atomic(&csv, spectrum_csv(cube, pixel.0, pixel.1)?.as_bytes())?;
    written.push(csv);
    Ok(written)
}

/// Region weight and threshold maps: a PGM per map plus `maps.csv` holding
/// every value at full precision (`phase,block,map,x,y,value`).
pub fn write_region_weights(dir: &Path, maps: &[PhaseMaps]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut csv = String::from("phase,block,map,x,y,value\n");
    for m in maps {
        for (kind, planes) in [("weight", &m.weights), ("tau", &m.taus)] {
            for (i, plane) in planes.iter().enumerate() {
                let path = dir.join(format!("phase{}_block{i}_{kind}.pgm", m.phase));
                write_pgm16(&path, plane, m.height, m.width)?;
                written.push(path);
                for x in 0..m.height {
                    for y in 0..m.width {
                        csv.push_str(&format!("{},{i},{kind},{x},{y},{:?}\n", m.phase, plane[x * m.width + y]));
                    }
                }
            }
        }
    }
    let path = dir.join("maps.csv");
    write_atomic(&path, csv.as_bytes())?;
    written.push(path);
    Ok(written)
}
