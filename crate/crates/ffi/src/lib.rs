//! C ABI over `rdfnet-core`.
//!
//! Objects cross the boundary as opaque handles created by `rdf_*_new` /
//! `rdf_*_read` functions and released with the matching `rdf_*_free`.
//! Every fallible call returns an [`RdfStatus`]; on failure a message is
//! available from [`rdf_last_error_message`] on the same thread. Results are
//! written through out-pointers only on success. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rdfnet_core::fista::{self, SolverConfig};
use rdfnet_core::model::RdfNetParams;
use rdfnet_core::optics::{self, DispersionSpec, InitMode, Mask, MaskStack, Measurement, SpectralCube};
use rdfnet_core::{io, metrics, train, Error};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RdfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Domain = 4,
    Format = 5,
    Io = 6,
    NonFinite = 7,
    Internal = 8,
    Panic = 9,
    BufferTooSmall = 10,
}

/// A spectral cube, `n_lambda` bands of `nx x ny`, band-major.
pub struct RdfCube(SpectralCube);

/// A coded aperture with its dispersion and band count.
pub struct RdfMaskStack(MaskStack);

/// A detector frame, `nx x ny_ext`.
pub struct RdfMeasurement(Measurement);

/// Trained network parameters.
pub struct RdfModel(RdfNetParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RdfStatus {
    match e {
        Error::Config(_) => RdfStatus::InvalidArgument,
        Error::Dimension(_) => RdfStatus::Dimension,
        Error::Domain(_) => RdfStatus::Domain,
        Error::Format(_) => RdfStatus::Format,
        Error::Io { .. } => RdfStatus::Io,
        Error::NonFinite(_) => RdfStatus::NonFinite,
        Error::Graph(_) | Error::MissingIntermediates(_) => RdfStatus::Internal,
    }
}

struct Fail(RdfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RdfStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RdfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RdfStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned()).unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            RdfStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn finite(v: &[f64], what: &str) -> Result<(), Fail> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Fail(RdfStatus::NonFinite, format!("{what}[{i}] is not finite"))),
        None => Ok(()),
    }
}

unsafe fn to_path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(RdfStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, cap: usize) -> Result<(), Fail> {
    if cap < src.len() {
        return Err(Fail(RdfStatus::BufferTooSmall, format!("buffer holds {cap} values, need {}", src.len())));
    }
    if src.is_empty() {
        return Ok(());
    }
    if dst.is_null() {
        return Err(null("output buffer"));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(p))));
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next `rdf_*` call on this thread.
#[no_mangle]
pub extern "C" fn rdf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rdf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `nx * ny * n_lambda` band-major values into a new cube. Non-finite
/// values are rejected.
///
/// # Safety
/// `data` must point to that many readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_cube_new(nx: usize, ny: usize, n_lambda: usize, data: *const f64, out: *mut *mut RdfCube) -> RdfStatus {
    guard(|| {
        let n = nx.checked_mul(ny).and_then(|v| v.checked_mul(n_lambda)).ok_or_else(|| Fail(RdfStatus::Dimension, "extent overflows".into()))?;
        let data = slice(data, n, "data")?;
        finite(data, "data")?;
        let cube = SpectralCube::new(nx, ny, n_lambda, data.to_vec())?;
        put(out, RdfCube(cube))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_cube_read(path: *const c_char, out: *mut *mut RdfCube) -> RdfStatus {
    guard(|| put(out, RdfCube(io::read_cube(&to_path(path)?)?)))
}

/// # Safety
/// `cube` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rdf_cube_write(cube: *const RdfCube, path: *const c_char) -> RdfStatus {
    guard(|| Ok(io::write_cube(&to_path(path)?, &borrow(cube, "cube")?.0)?))
}

/// # Safety
/// `cube` must be a live handle; the out-pointers must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn rdf_cube_dims(cube: *const RdfCube, nx: *mut usize, ny: *mut usize, n_lambda: *mut usize) -> RdfStatus {
    guard(|| {
        let c = &borrow(cube, "cube")?.0;
        for (p, v) in [(nx, c.nx()), (ny, c.ny()), (n_lambda, c.n_lambda())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the cube values into `buffer`, which must hold at least `capacity` doubles.
///
/// # Safety
/// `cube` must be a live handle; `buffer` must be writable for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn rdf_cube_copy_data(cube: *const RdfCube, buffer: *mut f64, capacity: usize) -> RdfStatus {
    guard(|| copy_out(borrow(cube, "cube")?.0.data(), buffer, capacity))
}

/// # Safety
/// `cube` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rdf_cube_free(cube: *mut RdfCube) {
    free(cube)
}

/// Builds a mask stack from an `nx x ny` transmission pattern in `[0, 1]`.
///
/// # Safety
/// `mask` must point to `nx * ny` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_mask_stack_new(
    nx: usize,
    ny: usize,
    mask: *const f64,
    n_lambda: usize,
    step_px: usize,
    out: *mut *mut RdfMaskStack,
) -> RdfStatus {
    guard(|| {
        let n = nx.checked_mul(ny).ok_or_else(|| Fail(RdfStatus::Dimension, "extent overflows".into()))?;
        let mask = slice(mask, n, "mask")?;
        finite(mask, "mask")?;
        let m = Mask::new(nx, ny, mask.to_vec())?;
        put(out, RdfMaskStack(MaskStack::new(m, DispersionSpec { step_px, ref_band: 0 }, n_lambda)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_mask_stack_read(path: *const c_char, n_lambda: usize, step_px: usize, out: *mut *mut RdfMaskStack) -> RdfStatus {
    guard(|| {
        let m = io::read_mask(&to_path(path)?)?;
        put(out, RdfMaskStack(MaskStack::new(m, DispersionSpec { step_px, ref_band: 0 }, n_lambda)?))
    })
}

/// # Safety
/// `masks` must be a live handle; the out-pointers must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn rdf_mask_stack_dims(masks: *const RdfMaskStack, nx: *mut usize, ny: *mut usize, n_lambda: *mut usize, ny_ext: *mut usize) -> RdfStatus {
    guard(|| {
        let m = &borrow(masks, "mask stack")?.0;
        for (p, v) in [(nx, m.nx()), (ny, m.ny()), (n_lambda, m.n_lambda()), (ny_ext, m.ny_ext())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `masks` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rdf_mask_stack_free(masks: *mut RdfMaskStack) {
    free(masks)
}

/// # Safety
/// `data` must point to `nx * ny_ext` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_measurement_new(nx: usize, ny_ext: usize, data: *const f64, out: *mut *mut RdfMeasurement) -> RdfStatus {
    guard(|| {
        let n = nx.checked_mul(ny_ext).ok_or_else(|| Fail(RdfStatus::Dimension, "extent overflows".into()))?;
        let data = slice(data, n, "data")?;
        finite(data, "data")?;
        put(out, RdfMeasurement(Measurement::new(nx, ny_ext, data.to_vec())?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_measurement_read(path: *const c_char, out: *mut *mut RdfMeasurement) -> RdfStatus {
    guard(|| put(out, RdfMeasurement(io::read_measurement(&to_path(path)?)?)))
}

/// # Safety
/// `meas` must be a live handle; the out-pointers must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn rdf_measurement_dims(meas: *const RdfMeasurement, nx: *mut usize, ny_ext: *mut usize) -> RdfStatus {
    guard(|| {
        let m = &borrow(meas, "measurement")?.0;
        for (p, v) in [(nx, m.nx()), (ny_ext, m.ny_ext())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `meas` must be a live handle; `buffer` must be writable for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn rdf_measurement_copy_data(meas: *const RdfMeasurement, buffer: *mut f64, capacity: usize) -> RdfStatus {
    guard(|| copy_out(borrow(meas, "measurement")?.0.data(), buffer, capacity))
}

/// # Safety
/// `meas` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rdf_measurement_free(meas: *mut RdfMeasurement) {
    free(meas)
}

/// Noiseless snapshot of `cube` through `masks`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_forward(masks: *const RdfMaskStack, cube: *const RdfCube, out: *mut *mut RdfMeasurement) -> RdfStatus {
    guard(|| put(out, RdfMeasurement(optics::forward(&borrow(cube, "cube")?.0, &borrow(masks, "mask stack")?.0)?)))
}

/// Transpose of [`rdf_forward`].
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_adjoint(masks: *const RdfMaskStack, meas: *const RdfMeasurement, out: *mut *mut RdfCube) -> RdfStatus {
    guard(|| put(out, RdfCube(optics::adjoint(&borrow(meas, "measurement")?.0, &borrow(masks, "mask stack")?.0)?)))
}

/// DCT-sparse FISTA reconstruction. A non-positive `rho` selects the safe
/// step `1 / lambda_max`; `accelerated = 0` runs plain ISTA.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_fista(
    masks: *const RdfMaskStack,
    meas: *const RdfMeasurement,
    lambda: f64,
    rho: f64,
    iterations: usize,
    accelerated: i32,
    out: *mut *mut RdfCube,
) -> RdfStatus {
    guard(|| {
        let masks = &borrow(masks, "mask stack")?.0;
        let y = &borrow(meas, "measurement")?.0;
        let rho = if rho > 0.0 { rho } else { fista::safe_step_size(masks)? };
        let cfg = SolverConfig { rho, lambda, max_iters: iterations, accelerated: accelerated != 0, init: InitMode::Normalized, ..SolverConfig::default() };
        put(out, RdfCube(fista::solve(y, masks, &cfg)?.cube))
    })
}

/// Loads an `RDFCK1` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_model_load(path: *const c_char, out: *mut *mut RdfModel) -> RdfStatus {
    guard(|| put(out, RdfModel(io::read_checkpoint(&to_path(path)?)?)))
}

/// Band count the model reconstructs.
///
/// # Safety
/// `model` must be a live handle; `n_lambda` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_model_bands(model: *const RdfModel, n_lambda: *mut usize) -> RdfStatus {
    guard(|| {
        let m = &borrow(model, "model")?.0;
        if n_lambda.is_null() {
            return Err(null("n_lambda"));
        }
        *n_lambda = m.config().in_bands;
        Ok(())
    })
}

/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_model_reconstruct(model: *const RdfModel, masks: *const RdfMaskStack, meas: *const RdfMeasurement, out: *mut *mut RdfCube) -> RdfStatus {
    guard(|| {
        let params = &borrow(model, "model")?.0;
        let masks = &borrow(masks, "mask stack")?.0;
        let y = &borrow(meas, "measurement")?.0;
        let mut cubes = train::reconstruct(params, masks, &[y], 1)?;
        put(out, RdfCube(cubes.remove(0)))
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rdf_model_free(model: *mut RdfModel) {
    free(model)
}

/// Whole-cube PSNR in dB; identical inputs give `+inf`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_psnr(x: *const RdfCube, reference: *const RdfCube, data_range: f64, out: *mut f64) -> RdfStatus {
    guard(|| {
        let v = metrics::psnr(&borrow(x, "cube")?.0, &borrow(reference, "reference")?.0, data_range)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = v;
        Ok(())
    })
}

/// Band-averaged SSIM (11x11 Gaussian window, data range 1).
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rdf_ssim(x: *const RdfCube, reference: *const RdfCube, out: *mut f64) -> RdfStatus {
    guard(|| {
        let v = metrics::ssim(&borrow(x, "cube")?.0, &borrow(reference, "reference")?.0)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = v;
        Ok(())
    })
}
