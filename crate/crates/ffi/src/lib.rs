//! C ABI over `turbstoch`.
//!
//! Every function returns a [`TsStatus`]; on failure a message is kept per
//! thread and can be copied out with [`ts_last_error`]. Models and field
//! ensembles are opaque handles released with their `_free` function.
//! Output buffers are caller-allocated with the documented length.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use turbstoch::fieldgen::{generate_ensemble, generate_field, read_fields, FieldEnsemble};
use turbstoch::mstats::{self, ScaleSet};
use turbstoch::refcurves::{synth_reference, ReferenceModelParams};
use turbstoch::unet::{load_checkpoint, UNetModel};
use turbstoch::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// An argument is out of range or malformed (including non-UTF-8 paths).
    InvalidArgument = 2,
    /// Array lengths or field lengths are incompatible.
    Shape = 3,
    /// The file could not be read.
    Io = 4,
    /// The file is not a valid checkpoint or field file.
    Format = 5,
    /// The model is not usable for the request (e.g. untrained statistics).
    State = 6,
    /// A statistic is undefined for the given data.
    Numeric = 7,
    /// An internal error; the call was aborted.
    Internal = 8,
}

/// A loaded model.
pub struct TsModel(UNetModel);

/// A loaded or generated field ensemble.
pub struct TsEnsemble(FieldEnsemble);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> TsStatus {
    match e {
        Error::Shape(_) | Error::Scale { .. } => TsStatus::Shape,
        Error::Io(_) => TsStatus::Io,
        Error::BadMagic { .. }
        | Error::Version { .. }
        | Error::Truncated(_)
        | Error::SpecHash
        | Error::UnsupportedFormat(_)
        | Error::Json(_)
        | Error::Parse { .. } => TsStatus::Format,
        Error::UninitializedStats(_) | Error::State(_) => TsStatus::State,
        Error::DegenerateStatistics(_) | Error::Domain(_) | Error::Fit(_) => TsStatus::Numeric,
        Error::Parameter(_) | Error::Range(_) | Error::Contract(_) | Error::Usage(_) => TsStatus::InvalidArgument,
        _ => TsStatus::Internal,
    }
}

/// Failure raised inside a call body.
struct Fail(TsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TsStatus::NullPointer, format!("`{what}` is null"))
}

/// Run `body`, recording any failure or panic as the thread's last error.
fn guarded(body: impl FnOnce() -> Result<(), Fail>) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(String::new());
            TsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TsStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, Fail> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(ptr).to_str().map_err(|_| Fail(TsStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the buffer size needed for the full message.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ts_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Load a checkpoint into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_model_load(path: *const c_char, model: *mut *mut TsModel) -> TsStatus {
    guarded(|| {
        let slot = out(model, "model")?;
        let ckpt = load_checkpoint(&path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(TsModel(ckpt.model)));
        Ok(())
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`ts_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ts_model_free(model: *mut TsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters of the model.
///
/// # Safety
/// `model` must be a live handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_model_param_count(model: *const TsModel, count: *mut usize) -> TsStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out(count, "count")? = m.0.param_count();
        Ok(())
    })
}

/// Generate one field of length `n` from `seed` into `field` (`n` doubles).
///
/// # Safety
/// `model` must be a live handle; `field` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_generate_field(model: *const TsModel, seed: u64, n: usize, field: *mut f64) -> TsStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let dst = slice_mut(field, n, "field")?;
        if !m.0.stats_initialized() {
            return Err(Fail(TsStatus::State, "model has no trained normalisation statistics".into()));
        }
        dst.copy_from_slice(&generate_field(&m.0, seed, n)?);
        Ok(())
    })
}

/// Generate `count` realizations of length `n` into a new ensemble handle.
/// Realization `i` is seeded from `(base_seed, i)`.
///
/// # Safety
/// `model` must be a live handle; `ensemble` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_generate_ensemble(
    model: *const TsModel,
    base_seed: u64,
    count: usize,
    n: usize,
    ensemble: *mut *mut TsEnsemble,
) -> TsStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let slot = out(ensemble, "ensemble")?;
        let e = generate_ensemble(&m.0, base_seed, count, n)?;
        *slot = Box::into_raw(Box::new(TsEnsemble(e)));
        Ok(())
    })
}

/// Read a field file into a new ensemble handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `ensemble` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_fields_read(path: *const c_char, ensemble: *mut *mut TsEnsemble) -> TsStatus {
    guarded(|| {
        let slot = out(ensemble, "ensemble")?;
        let e = read_fields(&path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(TsEnsemble(e)));
        Ok(())
    })
}

/// Number of realizations and their common length.
///
/// # Safety
/// `ensemble` must be a live handle; `count` and `n` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_fields_shape(ensemble: *const TsEnsemble, count: *mut usize, n: *mut usize) -> TsStatus {
    guarded(|| {
        let e = ensemble.as_ref().ok_or_else(|| null("ensemble"))?;
        *out(count, "count")? = e.0.realizations();
        *out(n, "n")? = e.0.n;
        Ok(())
    })
}

/// Copy realization `index` into `field` (`n` doubles).
///
/// # Safety
/// `ensemble` must be a live handle; `field` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_fields_copy(ensemble: *const TsEnsemble, index: usize, field: *mut f64) -> TsStatus {
    guarded(|| {
        let e = ensemble.as_ref().ok_or_else(|| null("ensemble"))?;
        let src =
            e.0.data
                .get(index)
                .ok_or_else(|| Fail(TsStatus::InvalidArgument, format!("index {index} of {}", e.0.realizations())))?;
        slice_mut(field, e.0.n, "field")?.copy_from_slice(src);
        Ok(())
    })
}

/// Release an ensemble handle. Null is ignored.
///
/// # Safety
/// `ensemble` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ts_fields_free(ensemble: *mut TsEnsemble) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// `S_order(lag)` of one field of length `len`.
///
/// # Safety
/// `field` must hold `len` doubles; `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_structure_function(
    field: *const f64,
    len: usize,
    lag: usize,
    order: i32,
    value: *mut f64,
) -> TsStatus {
    guarded(|| {
        let f = slice(field, len, "field")?;
        *out(value, "value")? = mstats::structure_function(&[f], lag, order)?;
        Ok(())
    })
}

/// ln S₂, skewness and flatness of one field at `nlags` integer lags.
/// Each output array holds `nlags` doubles.
///
/// # Safety
/// `field` must hold `len` doubles, `lags` `nlags` values, and each output `nlags` doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_field_statistics(
    field: *const f64,
    len: usize,
    lags: *const usize,
    nlags: usize,
    log_s2: *mut f64,
    skewness: *mut f64,
    flatness: *mut f64,
) -> TsStatus {
    guarded(|| {
        let f = [slice(field, len, "field")?];
        let lags = slice(lags, nlags, "lags")?;
        let scales = ScaleSet::from_lags(lags)?;
        slice_mut(log_s2, nlags, "log_s2")?.copy_from_slice(&mstats::log_s2_curve(&f, &scales)?.values);
        slice_mut(skewness, nlags, "skewness")?.copy_from_slice(&mstats::skewness_curve(&f, &scales)?.values);
        slice_mut(flatness, nlags, "flatness")?.copy_from_slice(&mstats::flatness_curve(&f, &scales)?.values);
        Ok(())
    })
}

/// Default reference curves (ln S₂, skewness, ln(ℱ/3)) at `count` positive,
/// strictly increasing scales. Each output array holds `count` doubles.
///
/// # Safety
/// `scales` must hold `count` doubles and each output `count` doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_reference_curves(
    scales: *const f64,
    count: usize,
    log_s2: *mut f64,
    skewness: *mut f64,
    log_f3: *mut f64,
) -> TsStatus {
    guarded(|| {
        let s = ScaleSet::new(slice(scales, count, "scales")?.to_vec())?;
        let r = synth_reference(&ReferenceModelParams::default(), &s)?;
        slice_mut(log_s2, count, "log_s2")?.copy_from_slice(&r.log_s2);
        slice_mut(skewness, count, "skewness")?.copy_from_slice(&r.skew);
        slice_mut(log_f3, count, "log_f3")?.copy_from_slice(&r.log_f3);
        Ok(())
    })
}
