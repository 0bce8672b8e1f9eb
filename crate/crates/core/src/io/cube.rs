use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::{header_text, read_bytes, split_header, write_atomic};
use crate::error::{Error, FormatError, Result};
use crate::optics::{Mask, Measurement, SpectralCube};

pub const CUBE_MAGIC: &str = "SCUBE1";

/// Hard cap on a payload, in elements.
const MAX_ELEMENTS: usize = 1 << 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl FromStr for Dtype {
    type Err = FormatError;

    fn from_str(s: &str) -> Result<Self, FormatError> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(FormatError::BadHeader(format!("unknown dtype {s:?}"))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

/// What a SCUBE1 file holds. Masks and measurements are single-plane files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FileKind {
    #[default]
    Cube,
    Mask,
    Measurement,
}

impl FromStr for FileKind {
    type Err = FormatError;

    fn from_str(s: &str) -> Result<Self, FormatError> {
        match s {
            "cube" => Ok(FileKind::Cube),
            "mask" => Ok(FileKind::Mask),
            "measurement" => Ok(FileKind::Measurement),
            _ => Err(FormatError::BadHeader(format!("unknown kind {s:?}"))),
        }
    }
}

impl fmt::Display for FileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FileKind::Cube => "cube",
            FileKind::Mask => "mask",
            FileKind::Measurement => "measurement",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CubeHeader {
    pub kind: FileKind,
    pub nx: usize,
    pub ny: usize,
    pub n_lambda: usize,
    pub dtype: Dtype,
    pub wavelengths: Option<Vec<f64>>,
    pub noise_sigma: Option<f64>,
}

fn parse_usize(key: &'static str, v: &str) -> Result<usize, FormatError> {
    let n: usize = v.parse().map_err(|_| {
        if !v.is_empty() && v.bytes().all(|b| b.is_ascii_digit()) {
            FormatError::ExtentOverflow(format!("{key} = {v}"))
        } else {
            FormatError::BadHeader(format!("{key} must be an unsigned integer, got {v:?}"))
        }
    })?;
    if n == 0 {
        return Err(FormatError::ZeroExtent(key));
    }
    Ok(n)
}

fn parse_f64(key: &str, v: &str) -> Result<f64, FormatError> {
    let x: f64 = v.parse().map_err(|_| FormatError::BadHeader(format!("{key} must be a number, got {v:?}")))?;
    if !x.is_finite() {
        return Err(FormatError::NonFinite(key.to_string()));
    }
    Ok(x)
}

impl CubeHeader {
    fn parse(pairs: &[(String, String)]) -> Result<Self, FormatError> {
        let mut h = CubeHeader::default();
        let (mut nx, mut ny, mut nl, mut endian) = (None, None, None, None);
        for (k, v) in pairs {
            match k.as_str() {
                "kind" => h.kind = v.parse()?,
                "nx" => nx = Some(parse_usize("nx", v)?),
                "ny" => ny = Some(parse_usize("ny", v)?),
                "n_lambda" => nl = Some(parse_usize("n_lambda", v)?),
                "dtype" => h.dtype = v.parse()?,
                "endian" => endian = Some(v.clone()),
                "wavelengths" => {
                    h.wavelengths = Some(v.split(',').map(|s| parse_f64("wavelengths", s.trim())).collect::<Result<_, _>>()?);
                }
                "noise_sigma" => h.noise_sigma = Some(parse_f64("noise_sigma", v)?),
                _ => return Err(FormatError::BadHeader(format!("unknown key {k:?}"))),
            }
        }
        match endian.as_deref() {
            Some("little") => {}
            Some(other) => return Err(FormatError::BadHeader(format!("unsupported endian {other:?}"))),
            None => return Err(FormatError::BadHeader("missing key endian".into())),
        }
        let need = |v: Option<usize>, key: &str| v.ok_or_else(|| FormatError::BadHeader(format!("missing key {key}")));
        h.nx = need(nx, "nx")?;
        h.ny = need(ny, "ny")?;
        h.n_lambda = need(nl, "n_lambda")?;
        if let Some(w) = &h.wavelengths {
            if w.len() != h.n_lambda {
                return Err(FormatError::BadHeader(format!("{} wavelengths for {} bands", w.len(), h.n_lambda)));
            }
        }
        if h.kind != FileKind::Cube && h.n_lambda != 1 {
            return Err(FormatError::BadHeader(format!("{} files hold one plane, n_lambda = {}", h.kind, h.n_lambda)));
        }
        Ok(h)
    }

    /// Payload element count, or an overflow error.
    pub fn elements(&self) -> Result<usize, FormatError> {
        self.nx
            .checked_mul(self.ny)
            .and_then(|v| v.checked_mul(self.n_lambda))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| FormatError::ExtentOverflow(format!("{} x {} x {}", self.nx, self.ny, self.n_lambda)))
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut p = vec![
            ("kind", self.kind.to_string()),
            ("nx", self.nx.to_string()),
            ("ny", self.ny.to_string()),
            ("n_lambda", self.n_lambda.to_string()),
            ("dtype", self.dtype.to_string()),
            ("endian", "little".to_string()),
        ];
        if let Some(w) = &self.wavelengths {
            p.push(("wavelengths", w.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")));
        }
        if let Some(s) = self.noise_sigma {
            p.push(("noise_sigma", format!("{s:?}")));
        }
        p
    }
}

pub fn encode_cube_file(header: &CubeHeader, data: &[f64]) -> Result<Vec<u8>> {
    let n = header.elements()?;
    if data.len() != n {
        return Err(Error::dim(format!("header declares {n} values, got {}", data.len())));
    }
    let mut out = header_text(CUBE_MAGIC, &header.pairs());
    out.reserve(n * header.dtype.size());
    for &v in data {
        match header.dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn decode_cube_file(bytes: &[u8]) -> Result<(CubeHeader, Vec<f64>)> {
    let (pairs, payload) = split_header(bytes, CUBE_MAGIC)?;
    let header = CubeHeader::parse(&pairs)?;
    let n = header.elements()?;
    let expected = n.checked_mul(header.dtype.size()).ok_or_else(|| FormatError::ExtentOverflow(format!("{n} elements")))?;
    if payload.len() < expected {
        return Err(FormatError::TruncatedPayload { expected, found: payload.len() }.into());
    }
    if payload.len() > expected {
        return Err(FormatError::TrailingBytes(payload.len() - expected).into());
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => super::take_f64s(payload, n),
        Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite("payload".into()).into());
    }
    Ok((header, data))
}

fn read_kind(path: &Path, kind: FileKind) -> Result<(CubeHeader, Vec<f64>)> {
    let (header, data) = decode_cube_file(&read_bytes(path)?)?;
    if header.kind != kind {
        return Err(FormatError::BadHeader(format!("{} holds a {}, expected a {kind}", path.display(), header.kind)).into());
    }
    Ok((header, data))
}

pub fn write_cube(path: &Path, cube: &SpectralCube) -> Result<()> {
    write_cube_as(path, cube, Dtype::F64)
}

pub fn write_cube_as(path: &Path, cube: &SpectralCube, dtype: Dtype) -> Result<()> {
    let header = CubeHeader {
        kind: FileKind::Cube,
        nx: cube.nx(),
        ny: cube.ny(),
        n_lambda: cube.n_lambda(),
        dtype,
        wavelengths: cube.wavelengths().map(<[f64]>::to_vec),
        noise_sigma: None,
    };
    write_atomic(path, &encode_cube_file(&header, cube.data())?)
}

pub fn read_cube(path: &Path) -> Result<SpectralCube> {
    let (h, data) = read_kind(path, FileKind::Cube)?;
    let cube = SpectralCube::new(h.nx, h.ny, h.n_lambda, data)?;
    match h.wavelengths {
        Some(w) => cube.with_wavelengths(w),
        None => Ok(cube),
    }
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let header = CubeHeader { kind: FileKind::Mask, nx: mask.nx(), ny: mask.ny(), n_lambda: 1, ..CubeHeader::default() };
    write_atomic(path, &encode_cube_file(&header, mask.data())?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let (h, data) = read_kind(path, FileKind::Mask)?;
    Mask::new(h.nx, h.ny, data)
}

pub fn write_measurement(path: &Path, meas: &Measurement) -> Result<()> {
    let header = CubeHeader {
        kind: FileKind::Measurement,
        nx: meas.nx(),
        ny: meas.ny_ext(),
        n_lambda: 1,
        noise_sigma: Some(meas.noise_sigma()),
        ..CubeHeader::default()
    };
    write_atomic(path, &encode_cube_file(&header, meas.data())?)
}

pub fn read_measurement(path: &Path) -> Result<Measurement> {
    let (h, data) = read_kind(path, FileKind::Measurement)?;
    Ok(Measurement::new(h.nx, h.ny, data)?.with_noise_sigma(h.noise_sigma.unwrap_or(0.0)))
}
