//! C interface to the `glskf` library.
//!
//! Objects are opaque heap handles released with the matching `*_free`.
//! Every fallible call returns a [`GlskfStatus`]; on failure the message is
//! available from [`glskf_last_error`] on the same thread until the next call.
//! Output handles are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use glskf::{io, DenseTensor, Error, FitReport, Glskf, GlskfConfig, KernelSpec, Mode, ObservationMask};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlskfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Config = 4,
    Format = 5,
    Io = 6,
    Numerical = 7,
    Panic = 8,
}

pub struct GlskfTensor(DenseTensor);
pub struct GlskfMask(ObservationMask);
pub struct GlskfConfigHandle(GlskfConfig);
pub struct GlskfResult {
    completed: GlskfTensor,
    global: GlskfTensor,
    local: GlskfTensor,
    report: FitReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> GlskfStatus {
    match err {
        Error::DimensionMismatch(_) | Error::ModeOutOfRange { .. } => GlskfStatus::DimensionMismatch,
        Error::InvalidArgument(_) => GlskfStatus::InvalidArgument,
        Error::KernelSpec { .. } | Error::Config(_) => GlskfStatus::Config,
        Error::Format { .. } | Error::Image(_) => GlskfStatus::Format,
        Error::Io { .. } => GlskfStatus::Io,
        Error::Singular(_) | Error::Numerical(_) => GlskfStatus::Numerical,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GlskfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GlskfStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            GlskfStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            GlskfStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn c_path(p: *const c_char) -> Result<PathBuf, Fail> {
    c_str(p, "path").map(PathBuf::from)
}

unsafe fn c_shape(shape: *const usize, ndim: usize) -> Result<Vec<usize>, Fail> {
    if ndim == 0 {
        return Ok(Vec::new());
    }
    if shape.is_null() {
        return Err(Fail::Null("shape"));
    }
    Ok(std::slice::from_raw_parts(shape, ndim).to_vec())
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message for the last failed call on this thread, or NULL. Owned by the library.
#[no_mangle]
pub extern "C" fn glskf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn glskf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn glskf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- tensors ----

/// Creates a column-major tensor; `data` may be NULL for zeros.
///
/// # Safety
/// `shape` must hold `ndim` values and `data`, if non-NULL, their product.
#[no_mangle]
pub unsafe extern "C" fn glskf_tensor_new(
    shape: *const usize,
    ndim: usize,
    data: *const f64,
    out: *mut *mut GlskfTensor,
) -> GlskfStatus {
    guard(|| {
        let shape = c_shape(shape, ndim)?;
        let t = if data.is_null() {
            DenseTensor::zeros(&shape)?
        } else {
            let len = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
            let len = len.ok_or_else(|| Error::InvalidArgument("shape overflows".into()))?;
            DenseTensor::new(shape, std::slice::from_raw_parts(data, len).to_vec())?
        };
        put(out, GlskfTensor(t))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glskf_tensor_read(path: *const c_char, out: *mut *mut GlskfTensor) -> GlskfStatus {
    guard(|| put(out, GlskfTensor(io::read_tensor(c_path(path)?)?)))
}

/// Reads an 8-bit grayscale or RGB image as a `width × height × channels` tensor in [0, 1].
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glskf_tensor_read_image(path: *const c_char, out: *mut *mut GlskfTensor) -> GlskfStatus {
    guard(|| put(out, GlskfTensor(io::image_to_tensor(c_path(path)?)?)))
}

/// # Safety
/// `t` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glskf_tensor_write(t: *const GlskfTensor, path: *const c_char) -> GlskfStatus {
    guard(|| Ok(io::write_tensor(c_path(path)?, &deref(t, "tensor")?.0)?))
}

/// # Safety
/// `t` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn glskf_tensor_ndim(t: *const GlskfTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.ndim())
}

/// # Safety
/// `t` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn glskf_tensor_len(t: *const GlskfTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Copies the extents into `out`, which must have room for `cap` values.
///
/// # Safety
/// `t` must be a live handle; `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn glskf_tensor_shape(t: *const GlskfTensor, out: *mut usize, cap: usize) -> GlskfStatus {
    guard(|| {
        let shape = deref(t, "tensor")?.0.shape();
        if cap < shape.len() {
            return Err(Error::InvalidArgument(format!("shape needs {} slots, got {cap}", shape.len())).into());
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        ptr::copy_nonoverlapping(shape.as_ptr(), out, shape.len());
        Ok(())
    })
}

/// Borrowed column-major data, valid while the handle lives.
///
/// # Safety
/// `t` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn glskf_tensor_data(t: *const GlskfTensor) -> *const f64 {
    t.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// # Safety
/// `t` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn glskf_tensor_free(t: *mut GlskfTensor) {
    release(t)
}

// ---- masks ----

/// Mask from one byte per entry (non-zero = observed), column-major.
///
/// # Safety
/// `shape` must hold `ndim` values and `observed` their product.
#[no_mangle]
pub unsafe extern "C" fn glskf_mask_new(
    shape: *const usize,
    ndim: usize,
    observed: *const u8,
    out: *mut *mut GlskfMask,
) -> GlskfStatus {
    guard(|| {
        let shape = c_shape(shape, ndim)?;
        if observed.is_null() {
            return Err(Fail::Null("observed"));
        }
        let len = shape.iter().product();
        let bits = std::slice::from_raw_parts(observed, len)
            .iter()
            .map(|&b| b != 0)
            .collect();
        put(out, GlskfMask(ObservationMask::from_bools(&shape, bits)?))
    })
}

/// Uniformly random mask observing `round(sr · N)` entries.
///
/// # Safety
/// `shape` must hold `ndim` values.
#[no_mangle]
pub unsafe extern "C" fn glskf_mask_random(
    shape: *const usize,
    ndim: usize,
    sr: f64,
    seed: u64,
    out: *mut *mut GlskfMask,
) -> GlskfStatus {
    guard(|| put(out, GlskfMask(io::make_random_mask(&c_shape(shape, ndim)?, sr, seed)?)))
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glskf_mask_read(path: *const c_char, out: *mut *mut GlskfMask) -> GlskfStatus {
    guard(|| put(out, GlskfMask(io::read_mask(c_path(path)?)?)))
}

/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glskf_mask_write(m: *const GlskfMask, path: *const c_char) -> GlskfStatus {
    guard(|| Ok(io::write_mask(c_path(path)?, &deref(m, "mask")?.0)?))
}

/// # Safety
/// `m` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn glskf_mask_observed_count(m: *const GlskfMask) -> usize {
    m.as_ref().map_or(0, |m| m.0.observed_count())
}

/// # Safety
/// `m` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn glskf_mask_free(m: *mut GlskfMask) {
    release(m)
}

// ---- configuration ----

/// Default configuration.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_new(out: *mut *mut GlskfConfigHandle) -> GlskfStatus {
    guard(|| put(out, GlskfConfigHandle(GlskfConfig::default())))
}

/// Configuration from a JSON object; absent fields keep their defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_from_json(json: *const c_char, out: *mut *mut GlskfConfigHandle) -> GlskfStatus {
    guard(|| {
        let cfg = serde_json::from_str(c_str(json, "json")?).map_err(|e| Error::Config(e.to_string()))?;
        put(out, GlskfConfigHandle(cfg))
    })
}

/// JSON text of the configuration; release with [`glskf_string_free`].
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_to_json(cfg: *const GlskfConfigHandle, out: *mut *mut c_char) -> GlskfStatus {
    guard(|| {
        let text = serde_json::to_string(&deref(cfg, "config")?.0).map_err(|e| Error::Config(e.to_string()))?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = CString::new(text).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

unsafe fn with_config(cfg: *mut GlskfConfigHandle, f: impl FnOnce(&mut GlskfConfig)) -> GlskfStatus {
    guard(|| {
        f(&mut deref_mut(cfg, "config")?.0);
        Ok(())
    })
}

/// CP rank.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_set_rank(cfg: *mut GlskfConfigHandle, value: usize) -> GlskfStatus {
    with_config(cfg, |c| c.rank = value)
}

/// Weight of the factor prior.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_set_rho(cfg: *mut GlskfConfigHandle, value: f64) -> GlskfStatus {
    with_config(cfg, |c| c.rho = value)
}

/// Weight of the local component.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_set_gamma(cfg: *mut GlskfConfigHandle, value: f64) -> GlskfStatus {
    with_config(cfg, |c| c.gamma = value)
}

/// Outer iterations that update only the factors.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_set_warmup(cfg: *mut GlskfConfigHandle, value: usize) -> GlskfStatus {
    with_config(cfg, |c| c.warmup = value)
}

/// Outer-iteration cap.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_set_max_outer(cfg: *mut GlskfConfigHandle, value: usize) -> GlskfStatus {
    with_config(cfg, |c| c.max_outer = value)
}

/// Relative change threshold for stopping.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_set_stop_eps(cfg: *mut GlskfConfigHandle, value: f64) -> GlskfStatus {
    with_config(cfg, |c| c.stop_eps = value)
}

/// Conjugate-gradient tolerance.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_set_cg_tol(cfg: *mut GlskfConfigHandle, value: f64) -> GlskfStatus {
    with_config(cfg, |c| c.cg_tol = value)
}

/// Conjugate-gradient iteration cap.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_set_cg_max_iter(cfg: *mut GlskfConfigHandle, value: usize) -> GlskfStatus {
    with_config(cfg, |c| c.cg_max_iter = value)
}

/// Seed for the factor initialization.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_set_seed(cfg: *mut GlskfConfigHandle, value: u64) -> GlskfStatus {
    with_config(cfg, |c| c.seed = value)
}

/// One of `glskf`, `lskf`, `lstf`, `glslocal`.
///
/// # Safety
/// `cfg` must be a live handle and `mode` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_set_mode(cfg: *mut GlskfConfigHandle, mode: *const c_char) -> GlskfStatus {
    guard(|| {
        let m: Mode = c_str(mode, "mode")?.parse()?;
        deref_mut(cfg, "config")?.0.mode = m;
        Ok(())
    })
}

unsafe fn kernel_list(specs: *const *const c_char, n: usize) -> Result<Vec<KernelSpec>, Fail> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if specs.is_null() {
        return Err(Fail::Null("specs"));
    }
    std::slice::from_raw_parts(specs, n)
        .iter()
        .map(|&s| Ok(c_str(s, "kernel spec")?.parse::<KernelSpec>()?))
        .collect()
}

/// Factor kernels, one spec string per mode (e.g. `"matern32(l=30)"`).
///
/// # Safety
/// `cfg` must be a live handle; `specs` must hold `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_set_factor_kernels(
    cfg: *mut GlskfConfigHandle,
    specs: *const *const c_char,
    n: usize,
) -> GlskfStatus {
    guard(|| {
        let k = kernel_list(specs, n)?;
        deref_mut(cfg, "config")?.0.factor_kernels = k;
        Ok(())
    })
}

/// Local kernels, one spec string per mode (e.g. `"matern32(l=5)*bohman(30)"`).
///
/// # Safety
/// `cfg` must be a live handle; `specs` must hold `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_set_local_kernels(
    cfg: *mut GlskfConfigHandle,
    specs: *const *const c_char,
    n: usize,
) -> GlskfStatus {
    guard(|| {
        let k = kernel_list(specs, n)?;
        deref_mut(cfg, "config")?.0.local_kernels = k;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn glskf_config_free(cfg: *mut GlskfConfigHandle) {
    release(cfg)
}

// ---- fitting ----

/// Completes `y` from the entries marked in `mask`.
///
/// # Safety
/// All handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn glskf_fit(
    cfg: *const GlskfConfigHandle,
    y: *const GlskfTensor,
    mask: *const GlskfMask,
    out: *mut *mut GlskfResult,
) -> GlskfStatus {
    guard(|| {
        let y = &deref(y, "tensor")?.0;
        let est = Glskf::new(deref(cfg, "config")?.0.clone(), y.shape())?;
        let fit = est.fit(y, &deref(mask, "mask")?.0)?;
        put(
            out,
            GlskfResult {
                completed: GlskfTensor(fit.completed),
                global: GlskfTensor(fit.global),
                local: GlskfTensor(fit.local),
                report: fit.report,
            },
        )
    })
}

/// Completed tensor, borrowed from the result.
///
/// # Safety
/// `r` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn glskf_result_completed(r: *const GlskfResult) -> *const GlskfTensor {
    r.as_ref().map_or(ptr::null(), |r| &r.completed)
}

/// Global (low-rank) component, borrowed from the result.
///
/// # Safety
/// `r` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn glskf_result_global(r: *const GlskfResult) -> *const GlskfTensor {
    r.as_ref().map_or(ptr::null(), |r| &r.global)
}

/// Local component, borrowed from the result.
///
/// # Safety
/// `r` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn glskf_result_local(r: *const GlskfResult) -> *const GlskfTensor {
    r.as_ref().map_or(ptr::null(), |r| &r.local)
}

/// # Safety
/// `r` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn glskf_result_iterations(r: *const GlskfResult) -> usize {
    r.as_ref().map_or(0, |r| r.report.iterations)
}

/// # Safety
/// `r` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn glskf_result_converged(r: *const GlskfResult) -> bool {
    r.as_ref().is_some_and(|r| r.report.converged)
}

/// Objective after the last update, or NaN.
///
/// # Safety
/// `r` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn glskf_result_objective(r: *const GlskfResult) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.report.final_objective())
}

/// # Safety
/// `r` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn glskf_result_free(r: *mut GlskfResult) {
    release(r)
}
