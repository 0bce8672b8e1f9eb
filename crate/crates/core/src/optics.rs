//! CASSI encoder geometry: coded-aperture modulation, dispersion shear,
//! detector integration, and the adjoint used by every reconstruction.
//!
//! Cubes are stored band-major: value `(x, y, band)` lives at
//! `(band * nx + x) * ny + y`. Detector frames are row-major `nx x ny_ext`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{LinearOperator, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCube {
    nx: usize,
    ny: usize,
    n_lambda: usize,
    data: Vec<f64>,
    wavelengths: Option<Vec<f64>>,
}

impl SpectralCube {
    pub fn new(nx: usize, ny: usize, n_lambda: usize, data: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || n_lambda == 0 {
            return Err(Error::dim(format!("cube extents must be positive, got {nx}x{ny}x{n_lambda}")));
        }
        let n = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(n_lambda))
            .ok_or_else(|| Error::dim("cube extent overflow"))?;
        if data.len() != n {
            return Err(Error::dim(format!("cube {nx}x{ny}x{n_lambda} needs {n} values, got {}", data.len())));
        }
        Ok(SpectralCube { nx, ny, n_lambda, data, wavelengths: None })
    }

    pub fn zeros(nx: usize, ny: usize, n_lambda: usize) -> Result<Self> {
        Self::new(nx, ny, n_lambda, vec![0.0; nx * ny * n_lambda])
    }

    pub fn with_wavelengths(mut self, nm: Vec<f64>) -> Result<Self> {
        if nm.len() != self.n_lambda {
            return Err(Error::dim(format!("{} wavelengths for {} bands", nm.len(), self.n_lambda)));
        }
        self.wavelengths = Some(nm);
        Ok(self)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn n_lambda(&self) -> usize {
        self.n_lambda
    }

    pub fn wavelengths(&self) -> Option<&[f64]> {
        self.wavelengths.as_deref()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn idx(&self, x: usize, y: usize, band: usize) -> usize {
        (band * self.nx + x) * self.ny + y
    }

    pub fn get(&self, x: usize, y: usize, band: usize) -> f64 {
        self.data[self.idx(x, y, band)]
    }

    pub fn band(&self, band: usize) -> &[f64] {
        let plane = self.nx * self.ny;
        &self.data[band * plane..(band + 1) * plane]
    }

    pub fn same_extents(&self, other: &SpectralCube) -> bool {
        (self.nx, self.ny, self.n_lambda) == (other.nx, other.ny, other.n_lambda)
    }

    fn check_same(&self, other: &SpectralCube, what: &str) -> Result<()> {
        if !self.same_extents(other) {
            return Err(Error::dim(format!(
                "{what}: cube {}x{}x{} vs {}x{}x{}",
                self.nx, self.ny, self.n_lambda, other.nx, other.ny, other.n_lambda
            )));
        }
        Ok(())
    }

    /// Elementwise `self + c * other`.
    pub fn axpy(&self, c: f64, other: &SpectralCube) -> Result<SpectralCube> {
        self.check_same(other, "axpy")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + c * b).collect();
        Ok(SpectralCube { data, ..self.clone() })
    }

    pub fn scaled(&self, c: f64) -> SpectralCube {
        SpectralCube { data: self.data.iter().map(|v| c * v).collect(), ..self.clone() }
    }

    pub fn dot(&self, other: &SpectralCube) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// The cube as a `[1, n_lambda, nx, ny]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.n_lambda, self.nx, self.ny], self.data.clone())
    }

    /// Stacks cubes of equal extents into a `[B, n_lambda, nx, ny]` tensor.
    pub fn stack(cubes: &[&SpectralCube]) -> Result<Tensor> {
        let first = cubes.first().ok_or_else(|| Error::dim("cannot stack zero cubes"))?;
        let mut data = Vec::with_capacity(cubes.len() * first.data.len());
        for c in cubes {
            first.check_same(c, "stack")?;
            data.extend_from_slice(&c.data);
        }
        Ok(Tensor::from_parts(vec![cubes.len(), first.n_lambda, first.nx, first.ny], data))
    }

    /// Batch element `index` of a `[B, L, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<SpectralCube> {
        let (b, l, h, w) = t.dims4()?;
        if index >= b {
            return Err(Error::dim(format!("batch index {index} out of range for {b}")));
        }
        let n = l * h * w;
        SpectralCube::new(h, w, l, t.data()[index * n..(index + 1) * n].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    nx: usize,
    ny: usize,
    data: Vec<f64>,
    binary: bool,
}

impl Mask {
    /// A mask with arbitrary real transmittances; `binary` is set when every
    /// entry happens to be 0 or 1.
    pub fn new(nx: usize, ny: usize, data: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::dim("mask extents must be positive"));
        }
        if data.len() != nx * ny {
            return Err(Error::dim(format!("mask {nx}x{ny} needs {} values, got {}", nx * ny, data.len())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain(format!("mask value {v} is not finite")));
        }
        let binary = data.iter().all(|v| *v == 0.0 || *v == 1.0);
        Ok(Mask { nx, ny, data, binary })
    }

    /// Like [`Mask::new`] but rejects any entry outside {0, 1}.
    pub fn new_binary(nx: usize, ny: usize, data: Vec<f64>) -> Result<Self> {
        let m = Self::new(nx, ny, data)?;
        if !m.binary {
            return Err(Error::domain("binary mask holds values other than 0 and 1"));
        }
        Ok(m)
    }

    /// I.i.d. Bernoulli(`p_open`) open/blocked pattern.
    pub fn random_binary<R: Rng + ?Sized>(nx: usize, ny: usize, p_open: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_open) {
            return Err(Error::domain(format!("open probability {p_open} outside [0, 1]")));
        }
        let data = (0..nx * ny).map(|_| if rng.random_bool(p_open) { 1.0 } else { 0.0 }).collect();
        Self::new_binary(nx, ny, data)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }
}

/// Per-band lateral shift introduced by the disperser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DispersionSpec {
    pub step_px: usize,
    pub ref_band: usize,
}

impl Default for DispersionSpec {
    fn default() -> Self {
        DispersionSpec { step_px: 1, ref_band: 0 }
    }
}

impl DispersionSpec {
    pub fn validate(&self, n_lambda: usize) -> Result<()> {
        if self.step_px == 0 {
            return Err(Error::domain("dispersion step must be at least one pixel"));
        }
        if self.ref_band >= n_lambda {
            return Err(Error::domain(format!("reference band {} outside {n_lambda} bands", self.ref_band)));
        }
        Ok(())
    }

    /// Column offset of `band` on the detector. Shifts are
    /// `step * (band - ref_band)`, re-origined so the smallest one is zero.
    pub fn offset(&self, band: usize) -> usize {
        let shift = self.step_px as isize * (band as isize - self.ref_band as isize);
        let min_shift = -(self.step_px as isize) * self.ref_band as isize;
        (shift - min_shift) as usize
    }

    pub fn extended_width(&self, ny: usize, n_lambda: usize) -> usize {
        ny + self.step_px * (n_lambda - 1)
    }
}

/// Base mask plus its per-band shifted copies on the detector grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStack {
    base: Mask,
    dispersion: DispersionSpec,
    n_lambda: usize,
    ny_ext: usize,
    shifted: Vec<f64>,
}

impl MaskStack {
    pub fn new(base: Mask, dispersion: DispersionSpec, n_lambda: usize) -> Result<Self> {
        if n_lambda == 0 {
            return Err(Error::dim("mask stack needs at least one band"));
        }
        dispersion.validate(n_lambda)?;
        let (nx, ny) = (base.nx, base.ny);
        let ny_ext = dispersion.extended_width(ny, n_lambda);
        let mut shifted = vec![0.0; n_lambda * nx * ny_ext];
        for b in 0..n_lambda {
            let off = dispersion.offset(b);
            for x in 0..nx {
                let row = &mut shifted[(b * nx + x) * ny_ext..(b * nx + x + 1) * ny_ext];
                row[off..off + ny].copy_from_slice(&base.data[x * ny..(x + 1) * ny]);
            }
        }
        Ok(MaskStack { base, dispersion, n_lambda, ny_ext, shifted })
    }

    pub fn base(&self) -> &Mask {
        &self.base
    }

    pub fn dispersion(&self) -> DispersionSpec {
        self.dispersion
    }

    pub fn n_lambda(&self) -> usize {
        self.n_lambda
    }

    pub fn nx(&self) -> usize {
        self.base.nx
    }

    pub fn ny(&self) -> usize {
        self.base.ny
    }

    pub fn ny_ext(&self) -> usize {
        self.ny_ext
    }

    /// Shifted mask of `band`, row-major `nx x ny_ext`.
    pub fn shifted_band(&self, band: usize) -> &[f64] {
        let plane = self.base.nx * self.ny_ext;
        &self.shifted[band * plane..(band + 1) * plane]
    }

    fn check_cube(&self, cube: &SpectralCube) -> Result<()> {
        if (cube.nx, cube.ny, cube.n_lambda) != (self.base.nx, self.base.ny, self.n_lambda) {
            return Err(Error::dim(format!(
                "cube {}x{}x{} does not match mask stack {}x{}x{}",
                cube.nx, cube.ny, cube.n_lambda, self.base.nx, self.base.ny, self.n_lambda
            )));
        }
        Ok(())
    }

    pub fn check_measurement(&self, meas: &Measurement) -> Result<()> {
        if (meas.nx, meas.ny_ext) != (self.base.nx, self.ny_ext) {
            return Err(Error::dim(format!(
                "measurement {}x{} does not match mask stack detector {}x{}",
                meas.nx, meas.ny_ext, self.base.nx, self.ny_ext
            )));
        }
        Ok(())
    }

    /// The sensing operator over batched tensors, for use on a tape.
    pub fn operator(&self) -> Arc<CassiOperator> {
        Arc::new(CassiOperator { masks: self.clone() })
    }

    /// Diagonal of `Phi Phi^T`: per detector pixel, the sum of squared mask
    /// values of the bands landing there.
    pub fn detector_gain(&self) -> Vec<f64> {
        let plane = self.base.nx * self.ny_ext;
        let mut gain = vec![0.0; plane];
        for b in 0..self.n_lambda {
            for (g, m) in gain.iter_mut().zip(self.shifted_band(b)) {
                *g += m * m;
            }
        }
        gain
    }
}

/// A detector frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    nx: usize,
    ny_ext: usize,
    data: Vec<f64>,
    noise_sigma: f64,
}

impl Measurement {
    pub fn new(nx: usize, ny_ext: usize, data: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny_ext == 0 {
            return Err(Error::dim("measurement extents must be positive"));
        }
        if data.len() != nx * ny_ext {
            return Err(Error::dim(format!("measurement {nx}x{ny_ext} needs {} values, got {}", nx * ny_ext, data.len())));
        }
        Ok(Measurement { nx, ny_ext, data, noise_sigma: 0.0 })
    }

    pub fn with_noise_sigma(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny_ext(&self) -> usize {
        self.ny_ext
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn dot(&self, other: &Measurement) -> Result<f64> {
        if (self.nx, self.ny_ext) != (other.nx, other.ny_ext) {
            return Err(Error::dim("measurement extents differ"));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sub(&self, other: &Measurement) -> Result<Measurement> {
        if (self.nx, self.ny_ext) != (other.nx, other.ny_ext) {
            return Err(Error::dim("measurement extents differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Measurement { data, ..self.clone() })
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `[1, 1, nx, ny_ext]` view used by the tensor pipeline.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, 1, self.nx, self.ny_ext], self.data.clone())
    }

    pub fn stack(frames: &[&Measurement]) -> Result<Tensor> {
        let first = frames.first().ok_or_else(|| Error::dim("cannot stack zero measurements"))?;
        let mut data = Vec::with_capacity(frames.len() * first.data.len());
        for f in frames {
            if (f.nx, f.ny_ext) != (first.nx, first.ny_ext) {
                return Err(Error::dim("measurement extents differ within batch"));
            }
            data.extend_from_slice(&f.data);
        }
        Ok(Tensor::from_parts(vec![frames.len(), 1, first.nx, first.ny_ext], data))
    }
}

/// Each band multiplied elementwise by the same coded aperture.
pub fn modulate(cube: &SpectralCube, mask: &Mask) -> Result<SpectralCube> {
    if (cube.nx, cube.ny) != (mask.nx, mask.ny) {
        return Err(Error::dim(format!(
            "mask {}x{} does not match cube {}x{}",
            mask.nx, mask.ny, cube.nx, cube.ny
        )));
    }
    let plane = cube.nx * cube.ny;
    let data = cube.data.iter().enumerate().map(|(i, v)| v * mask.data[i % plane]).collect();
    Ok(SpectralCube { data, ..cube.clone() })
}

/// Places band `b` at its dispersion offset inside the extended width, zeros elsewhere.
pub fn shear(cube: &SpectralCube, disp: &DispersionSpec) -> Result<SpectralCube> {
    disp.validate(cube.n_lambda)?;
    let ny_ext = disp.extended_width(cube.ny, cube.n_lambda);
    let mut out = vec![0.0; cube.nx * ny_ext * cube.n_lambda];
    for b in 0..cube.n_lambda {
        let off = disp.offset(b);
        for x in 0..cube.nx {
            let dst = (b * cube.nx + x) * ny_ext + off;
            out[dst..dst + cube.ny].copy_from_slice(&cube.data[cube.idx(x, 0, b)..cube.idx(x, 0, b) + cube.ny]);
        }
    }
    SpectralCube::new(cube.nx, ny_ext, cube.n_lambda, out)
}

/// Left inverse of [`shear`]: reads each band back from its offset window.
pub fn unshear(cube_ext: &SpectralCube, disp: &DispersionSpec) -> Result<SpectralCube> {
    disp.validate(cube_ext.n_lambda)?;
    let spread = disp.step_px * (cube_ext.n_lambda - 1);
    if cube_ext.ny <= spread {
        return Err(Error::dim(format!(
            "width {} cannot hold {} bands at step {}",
            cube_ext.ny, cube_ext.n_lambda, disp.step_px
        )));
    }
    let ny = cube_ext.ny - spread;
    let mut out = vec![0.0; cube_ext.nx * ny * cube_ext.n_lambda];
    for b in 0..cube_ext.n_lambda {
        let off = disp.offset(b);
        for x in 0..cube_ext.nx {
            let src = cube_ext.idx(x, off, b);
            out[(b * cube_ext.nx + x) * ny..(b * cube_ext.nx + x + 1) * ny].copy_from_slice(&cube_ext.data[src..src + ny]);
        }
    }
    SpectralCube::new(cube_ext.nx, ny, cube_ext.n_lambda, out)
}

/// Sums the bands of a (sheared) cube onto the detector.
pub fn integrate(cube_ext: &SpectralCube) -> Measurement {
    let plane = cube_ext.nx * cube_ext.ny;
    let mut out = vec![0.0; plane];
    for band in cube_ext.data.chunks_exact(plane) {
        for (o, v) in out.iter_mut().zip(band) {
            *o += v;
        }
    }
    Measurement { nx: cube_ext.nx, ny_ext: cube_ext.ny, data: out, noise_sigma: 0.0 }
}

/// Noiseless forward model in shifted-mask form: `Y = sum_b shear(X)_b * M_b`.
pub fn forward(cube: &SpectralCube, masks: &MaskStack) -> Result<Measurement> {
    masks.check_cube(cube)?;
    let sheared = shear(cube, &masks.dispersion)?;
    let plane = masks.nx() * masks.ny_ext;
    let mut out = vec![0.0; plane];
    for b in 0..masks.n_lambda {
        let band = &sheared.data[b * plane..(b + 1) * plane];
        for ((o, v), m) in out.iter_mut().zip(band).zip(masks.shifted_band(b)) {
            *o += v * m;
        }
    }
    Measurement::new(masks.nx(), masks.ny_ext, out)
}

/// Noiseless forward model as modulate, then shear, then integrate.
pub fn forward_factored(cube: &SpectralCube, masks: &MaskStack) -> Result<Measurement> {
    masks.check_cube(cube)?;
    Ok(integrate(&shear(&modulate(cube, &masks.base)?, &masks.dispersion)?))
}

/// Forward model plus i.i.d. zero-mean Gaussian detector noise.
pub fn simulate<R: Rng + ?Sized>(
    cube: &SpectralCube,
    masks: &MaskStack,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Measurement> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::domain(format!("noise sigma {noise_sigma} must be finite and nonnegative")));
    }
    let mut meas = forward(cube, masks)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::domain(e.to_string()))?;
        for v in &mut meas.data {
            *v += normal.sample(rng);
        }
    }
    meas.noise_sigma = noise_sigma;
    Ok(meas)
}

/// Transpose of the noiseless forward model: each band reads its offset
/// window of the frame and multiplies by the base mask.
pub fn adjoint(meas: &Measurement, masks: &MaskStack) -> Result<SpectralCube> {
    masks.check_measurement(meas)?;
    let (nx, ny) = (masks.nx(), masks.ny());
    let mut out = vec![0.0; nx * ny * masks.n_lambda];
    for b in 0..masks.n_lambda {
        let off = masks.dispersion.offset(b);
        for x in 0..nx {
            let row = &meas.data[x * meas.ny_ext + off..x * meas.ny_ext + off + ny];
            let m = &masks.base.data[x * ny..(x + 1) * ny];
            let dst = &mut out[(b * nx + x) * ny..(b * nx + x + 1) * ny];
            for ((d, r), mv) in dst.iter_mut().zip(row).zip(m) {
                *d = r * mv;
            }
        }
    }
    SpectralCube::new(nx, ny, masks.n_lambda, out)
}

/// Slides an `nx x ny` window along the frame, one band per dispersion offset.
pub fn split_measurement(meas: &Measurement, n_lambda: usize, disp: &DispersionSpec) -> Result<SpectralCube> {
    if n_lambda == 0 {
        return Err(Error::dim("split into zero bands"));
    }
    disp.validate(n_lambda)?;
    let spread = disp.step_px * (n_lambda - 1);
    if meas.ny_ext <= spread {
        return Err(Error::dim(format!("frame width {} too narrow for {n_lambda} bands", meas.ny_ext)));
    }
    let ny = meas.ny_ext - spread;
    let mut out = vec![0.0; meas.nx * ny * n_lambda];
    for b in 0..n_lambda {
        let off = disp.offset(b);
        for x in 0..meas.nx {
            out[(b * meas.nx + x) * ny..(b * meas.nx + x + 1) * ny]
                .copy_from_slice(&meas.data[x * meas.ny_ext + off..x * meas.ny_ext + off + ny]);
        }
    }
    SpectralCube::new(meas.nx, ny, n_lambda, out)
}

/// How a frame becomes the starting cube of an iterative reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitMode {
    /// The raw frame window for each band.
    #[default]
    Split,
    /// The split cube multiplied by the base mask.
    MaskWeighted,
    /// The split of the frame divided by the detector gain (zero where no band lands).
    Normalized,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(InitMode::Split),
            "mask_weighted" => Ok(InitMode::MaskWeighted),
            "normalized" => Ok(InitMode::Normalized),
            _ => Err(Error::Config(format!("unknown init mode {s:?} (split|mask_weighted|normalized)"))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::Split => "split",
            InitMode::MaskWeighted => "mask_weighted",
            InitMode::Normalized => "normalized",
        })
    }
}

fn inverse_gain(masks: &MaskStack) -> Vec<f64> {
    masks.detector_gain().into_iter().map(|g| if g > 0.0 { 1.0 / g } else { 0.0 }).collect()
}

/// Starting cube for `meas` under `mode`.
pub fn initial_cube(meas: &Measurement, masks: &MaskStack, mode: InitMode) -> Result<SpectralCube> {
    masks.check_measurement(meas)?;
    match mode {
        InitMode::Split => split_for(meas, masks),
        InitMode::MaskWeighted => modulate(&split_for(meas, masks)?, masks.base()),
        InitMode::Normalized => {
            let data = meas.data.iter().zip(inverse_gain(masks)).map(|(v, g)| v * g).collect();
            split_for(&Measurement::new(meas.nx, meas.ny_ext, data)?, masks)
        }
    }
}

/// Splitting that also checks the frame against the expected cube width.
pub fn split_for(meas: &Measurement, masks: &MaskStack) -> Result<SpectralCube> {
    masks.check_measurement(meas)?;
    split_measurement(meas, masks.n_lambda, &masks.dispersion)
}

/// Sensing operator on batched tensors: `[B, L, nx, ny] <-> [B, 1, nx, ny_ext]`.
#[derive(Clone, Debug)]
pub struct CassiOperator {
    masks: MaskStack,
}

impl CassiOperator {
    pub fn masks(&self) -> &MaskStack {
        &self.masks
    }

    pub fn cube_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.masks.n_lambda, self.masks.nx(), self.masks.ny()]
    }

    pub fn frame_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 1, self.masks.nx(), self.masks.ny_ext]
    }

    /// Splits a batch of frames into initial cubes.
    pub fn split_batch(&self, frames: &Tensor, mode: InitMode) -> Result<Tensor> {
        let (b, c, h, w) = frames.dims4()?;
        if [b, c, h, w] != self.frame_shape(b) {
            return Err(Error::dim(format!("frames {:?} do not match detector {:?}", frames.shape(), self.frame_shape(b))));
        }
        let (nx, ny, l) = (self.masks.nx(), self.masks.ny(), self.masks.n_lambda);
        let mut out = vec![0.0; b * l * nx * ny];
        let inv_gain = (mode == InitMode::Normalized).then(|| inverse_gain(&self.masks));
        for bi in 0..b {
            let raw = &frames.data()[bi * h * w..(bi + 1) * h * w];
            let scaled: Vec<f64>;
            let frame = match &inv_gain {
                Some(ig) => {
                    scaled = raw.iter().zip(ig).map(|(v, g)| v * g).collect();
                    &scaled[..]
                }
                None => raw,
            };
            for band in 0..l {
                let off = self.masks.dispersion.offset(band);
                for x in 0..nx {
                    for y in 0..ny {
                        let m = if mode == InitMode::MaskWeighted { self.masks.base.data[x * ny + y] } else { 1.0 };
                        out[((bi * l + band) * nx + x) * ny + y] = frame[x * w + off + y] * m;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(self.cube_shape(b).to_vec(), out))
    }
}

impl LinearOperator for CassiOperator {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (b, ..) = x.dims4()?;
        if x.shape() != self.cube_shape(b) {
            return Err(Error::dim(format!("cube batch {:?} does not match operator {:?}", x.shape(), self.cube_shape(b))));
        }
        let (nx, ny, l, w) = (self.masks.nx(), self.masks.ny(), self.masks.n_lambda, self.masks.ny_ext);
        let m = &self.masks.base.data;
        let mut out = vec![0.0; b * nx * w];
        for bi in 0..b {
            for band in 0..l {
                let off = self.masks.dispersion.offset(band);
                for xr in 0..nx {
                    let src = &x.data()[((bi * l + band) * nx + xr) * ny..((bi * l + band) * nx + xr + 1) * ny];
                    let dst = &mut out[(bi * nx + xr) * w + off..(bi * nx + xr) * w + off + ny];
                    for ((d, s), mv) in dst.iter_mut().zip(src).zip(&m[xr * ny..(xr + 1) * ny]) {
                        *d += s * mv;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(self.frame_shape(b).to_vec(), out))
    }

    fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let (b, ..) = y.dims4()?;
        if y.shape() != self.frame_shape(b) {
            return Err(Error::dim(format!("frame batch {:?} does not match operator {:?}", y.shape(), self.frame_shape(b))));
        }
        let (nx, ny, l, w) = (self.masks.nx(), self.masks.ny(), self.masks.n_lambda, self.masks.ny_ext);
        let m = &self.masks.base.data;
        let mut out = vec![0.0; b * l * nx * ny];
        for bi in 0..b {
            for band in 0..l {
                let off = self.masks.dispersion.offset(band);
                for xr in 0..nx {
                    let src = &y.data()[(bi * nx + xr) * w + off..(bi * nx + xr) * w + off + ny];
                    let dst = &mut out[((bi * l + band) * nx + xr) * ny..((bi * l + band) * nx + xr + 1) * ny];
                    for ((d, s), mv) in dst.iter_mut().zip(src).zip(&m[xr * ny..(xr + 1) * ny]) {
                        *d = s * mv;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(self.cube_shape(b).to_vec(), out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube(nx: usize, ny: usize, nl: usize, f: impl Fn(usize) -> f64) -> SpectralCube {
        SpectralCube::new(nx, ny, nl, (0..nx * ny * nl).map(f).collect()).unwrap()
    }

    #[test]
    fn modulate_identity_and_zero() {
        let c = cube(3, 4, 2, |i| i as f64 * 0.1);
        let ones = Mask::new(3, 4, vec![1.0; 12]).unwrap();
        assert_eq!(modulate(&c, &ones).unwrap(), c);
        let zeros = Mask::new(3, 4, vec![0.0; 12]).unwrap();
        assert!(modulate(&c, &zeros).unwrap().data().iter().all(|v| *v == 0.0));
        let wrong = Mask::new(4, 3, vec![1.0; 12]).unwrap();
        assert!(matches!(modulate(&c, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn shear_geometry_2x2x2() {
        let c = cube(2, 2, 2, |i| i as f64 + 1.0);
        let s = shear(&c, &DispersionSpec::default()).unwrap();
        assert_eq!((s.nx(), s.ny(), s.n_lambda()), (2, 3, 2));
        // band 0 in columns {0, 1}, band 1 in columns {1, 2}
        assert_eq!(s.band(0), &[1.0, 2.0, 0.0, 3.0, 4.0, 0.0]);
        assert_eq!(s.band(1), &[0.0, 5.0, 6.0, 0.0, 7.0, 8.0]);
        let single = cube(2, 3, 1, |i| i as f64);
        assert_eq!(shear(&single, &DispersionSpec::default()).unwrap(), single);
    }

    #[test]
    fn reference_band_reorigins_offsets() {
        let d = DispersionSpec { step_px: 2, ref_band: 1 };
        assert_eq!((d.offset(0), d.offset(1), d.offset(2)), (0, 2, 4));
        assert!(DispersionSpec { step_px: 0, ref_band: 0 }.validate(3).is_err());
        assert!(DispersionSpec { step_px: 1, ref_band: 3 }.validate(3).is_err());
    }

    #[test]
    fn integrate_overlap_counts() {
        let c = cube(2, 2, 2, |_| 1.0);
        let masks = MaskStack::new(Mask::new(2, 2, vec![1.0; 4]).unwrap(), DispersionSpec::default(), 2).unwrap();
        let y = forward_factored(&c, &masks).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 1.0, 2.0, 1.0]);
        let single = cube(2, 3, 1, |i| i as f64);
        assert_eq!(integrate(&single).data(), single.data());
    }

    #[test]
    fn zero_cube_and_zero_measurement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let masks = MaskStack::new(Mask::random_binary(4, 4, 0.5, &mut rng).unwrap(), DispersionSpec::default(), 3).unwrap();
        let z = SpectralCube::zeros(4, 4, 3).unwrap();
        assert!(forward(&z, &masks).unwrap().data().iter().all(|v| *v == 0.0));
        let y0 = Measurement::new(4, 6, vec![0.0; 24]).unwrap();
        assert!(adjoint(&y0, &masks).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(unshear(&SpectralCube::zeros(4, 6, 3).unwrap(), &DispersionSpec::default())
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn adjoint_identity_for_open_single_band() {
        let masks = MaskStack::new(Mask::new(2, 3, vec![1.0; 6]).unwrap(), DispersionSpec::default(), 1).unwrap();
        let y = Measurement::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(adjoint(&y, &masks).unwrap().data(), y.data());
    }

    #[test]
    fn split_windows() {
        let y = Measurement::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = split_measurement(&y, 2, &DispersionSpec::default()).unwrap();
        assert_eq!(c.band(0), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(c.band(1), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(split_measurement(&y, 1, &DispersionSpec::default()).unwrap().data(), y.data());
        // frame too narrow for the band count
        assert!(split_measurement(&y, 4, &DispersionSpec::default()).is_err());
        let masks = MaskStack::new(Mask::new(2, 3, vec![1.0; 6]).unwrap(), DispersionSpec::default(), 2).unwrap();
        assert!(matches!(split_for(&y, &masks), Err(Error::Dimension(_))));
    }

    #[test]
    fn binary_flag() {
        assert!(Mask::new(1, 2, vec![0.0, 1.0]).unwrap().is_binary());
        assert!(!Mask::new(1, 2, vec![0.0, 0.5]).unwrap().is_binary());
        assert!(Mask::new_binary(1, 2, vec![0.0, 0.5]).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let masks = MaskStack::new(Mask::random_binary(4, 4, 0.5, &mut rng).unwrap(), DispersionSpec::default(), 2).unwrap();
        let c = cube(4, 4, 2, |i| (i % 5) as f64 * 0.2);
        let a = simulate(&c, &masks, 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = simulate(&c, &masks, 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data(), forward(&c, &masks).unwrap().data());
        assert!(simulate(&c, &masks, -1.0, &mut rng).is_err());
    }
}
