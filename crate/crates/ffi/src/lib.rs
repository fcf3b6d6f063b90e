//! C ABI over `mrflow-core`.
//!
//! Models are opaque handles created by [`mrflow_model_load`] and released
//! with [`mrflow_model_free`]. Every fallible call returns an [`MrflowStatus`];
//! on failure [`mrflow_last_error`] describes what went wrong on the calling
//! thread. Images cross the boundary as 8-bit `C×H×W` buffers, channel-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mrflow::mrcnf::checkpoint::load_model;
use mrflow::mrcnf::{MrcnfModel, SampleSpec};
use mrflow::multires::{decompose, TransformKind};
use mrflow::tensor::ByteTensor;
use mrflow::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrflowStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Contract = 4,
    Divergence = 5,
    Format = 6,
    Config = 7,
    Io = 8,
    Panic = 9,
}

/// Patch transform used by [`mrflow_decompose`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrflowTransform {
    Unimodular = 0,
    Haar = 1,
}

/// A trained multi-resolution model.
pub struct MrflowModel {
    inner: MrcnfModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MrflowStatus {
    match e {
        Error::Dimension(_) => MrflowStatus::Dimension,
        Error::Contract(_) => MrflowStatus::Contract,
        Error::Divergence { .. } => MrflowStatus::Divergence,
        Error::Format { .. } => MrflowStatus::Format,
        Error::Config(_) => MrflowStatus::Config,
        Error::Io(_) => MrflowStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Engine(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

/// Runs `f`, turning errors and panics into a status plus a last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MrflowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MrflowStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("{what} is null"));
            MrflowStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(&msg);
            MrflowStatus::InvalidArgument
        }
        Ok(Err(Failure::Engine(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            MrflowStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a valid pointer per the C contract.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

fn model_ref<'a>(m: *const MrflowModel) -> Result<&'a MrcnfModel, Failure> {
    non_null(m, "model").map(|m| &m.inner)
}

/// Message for the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mrflow_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mrflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads every level checkpoint in directory `dir` (UTF-8 path).
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mrflow_model_load(dir: *const c_char, out: *mut *mut MrflowModel) -> MrflowStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        if dir.is_null() {
            return Err(Failure::Null("dir"));
        }
        let dir = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| Failure::Invalid("dir is not valid UTF-8".into()))?;
        let (inner, _) = load_model(Path::new(dir))?;
        *out = Box::into_raw(Box::new(MrflowModel { inner }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`mrflow_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mrflow_model_free(model: *mut MrflowModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of resolution levels.
///
/// # Safety
/// `model` must be a live handle and `levels` writable.
#[no_mangle]
pub unsafe extern "C" fn mrflow_model_levels(model: *const MrflowModel, levels: *mut usize) -> MrflowStatus {
    guard(|| {
        let m = model_ref(model)?;
        if levels.is_null() {
            return Err(Failure::Null("levels"));
        }
        *levels = m.levels();
        Ok(())
    })
}

/// Writes the finest image shape `[C, H, W]` to `shape`.
///
/// # Safety
/// `model` must be a live handle and `shape` point to three writable values.
#[no_mangle]
pub unsafe extern "C" fn mrflow_model_image_shape(model: *const MrflowModel, shape: *mut usize) -> MrflowStatus {
    guard(|| {
        let m = model_ref(model)?;
        if shape.is_null() {
            return Err(Failure::Null("shape"));
        }
        let s = m.layout.image_shape;
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&s);
        Ok(())
    })
}

/// Bits per dimension of one 8-bit image of the model's shape.
///
/// # Safety
/// `pixels` must hold `len` bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn mrflow_bpd(
    model: *const MrflowModel,
    pixels: *const u8,
    len: usize,
    seed: u64,
    out: *mut f64,
) -> MrflowStatus {
    guard(|| {
        let m = model_ref(model)?;
        if pixels.is_null() {
            return Err(Failure::Null("pixels"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let shape = m.layout.image_shape;
        let want: usize = shape.iter().product();
        if len != want {
            return Err(Failure::Invalid(format!("expected {want} pixels for shape {shape:?}, got {len}")));
        }
        let x = ByteTensor::new(&shape, std::slice::from_raw_parts(pixels, len).to_vec())?;
        *out = m.bpd(&x, seed)?;
        Ok(())
    })
}

/// Generates `count` 8-bit samples back to back into `out`, which must hold
/// `count·C·H·W` bytes (`out_len`).
///
/// # Safety
/// `out` must hold `out_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mrflow_generate(
    model: *const MrflowModel,
    count: usize,
    temperature: f64,
    seed: u64,
    out: *mut u8,
    out_len: usize,
) -> MrflowStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let dims = m.layout.image_dims();
        if out_len != count * dims {
            return Err(Failure::Invalid(format!("output needs {} bytes, got {out_len}", count * dims)));
        }
        let samples = m.generate(&SampleSpec {
            count,
            temperature,
            seed,
        })?;
        let dst = std::slice::from_raw_parts_mut(out, out_len);
        for (chunk, x) in dst.chunks_mut(dims).zip(&samples) {
            chunk.copy_from_slice(mrflow::dataio::quantize(x).data());
        }
        Ok(())
    })
}

/// Decomposes an 8-bit `C×H×W` image (pixels at bin centres) into `levels`
/// resolutions. `coeffs` receives `y_1, …, y_{S−1}, x_S` concatenated, which
/// is exactly `C·H·W` values; `logdet` receives the transform log-determinant.
///
/// # Safety
/// `pixels` must hold `C·H·W` bytes, `coeffs` as many writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mrflow_decompose(
    pixels: *const u8,
    channels: usize,
    height: usize,
    width: usize,
    levels: usize,
    transform: MrflowTransform,
    coeffs: *mut f64,
    logdet: *mut f64,
) -> MrflowStatus {
    guard(|| {
        if pixels.is_null() {
            return Err(Failure::Null("pixels"));
        }
        if coeffs.is_null() {
            return Err(Failure::Null("coeffs"));
        }
        if logdet.is_null() {
            return Err(Failure::Null("logdet"));
        }
        let n = channels * height * width;
        let img = ByteTensor::new(&[channels, height, width], std::slice::from_raw_parts(pixels, n).to_vec())?;
        let kind = match transform {
            MrflowTransform::Unimodular => TransformKind::Unimodular,
            MrflowTransform::Haar => TransformKind::Haar,
        };
        let stack = decompose(&mrflow::dataio::bin_centres(&img), levels, kind)?;
        let dst = std::slice::from_raw_parts_mut(coeffs, n);
        let mut at = 0;
        for t in stack.details.iter().chain(std::iter::once(&stack.base)) {
            dst[at..at + t.len()].copy_from_slice(t.data());
            at += t.len();
        }
        *logdet = stack.logdet_total;
        Ok(())
    })
}
