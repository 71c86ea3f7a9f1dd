//! C interface to the finemorphs regression library.
//!
//! Models are opaque `FmModel` handles owned by the caller and released with
//! [`fm_model_free`]. Every fallible call returns an [`FmStatus`]; on failure
//! [`fm_last_error`] describes the most recent error on the calling thread.
//! Matrices are dense, row-major `double` buffers. Panics never cross the
//! boundary: they are reported as [`FmStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use finemorphs::cli::model_file::{load_model, save_model};
use finemorphs::predictor::predict;
use finemorphs::sequence::{parse_sequence, SequenceOverrides};
use finemorphs::trainer::{train, SubsetSize, TrainConfig};
use finemorphs::{Error, Points, TrainedModel};

/// Result codes shared by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    UnsupportedVersion = 5,
    CorruptModel = 6,
    Panic = 7,
}

/// A trained model. Only ever handled through pointers.
pub struct FmModel {
    inner: TrainedModel,
}

/// Training options. Zero fields select the library defaults, except `seed`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FmTrainOptions {
    pub seed: u64,
    /// Anchor count; 0 uses every training point.
    pub n_subset: usize,
    pub max_sigma_loops: usize,
    /// L-BFGS iteration cap per optimization.
    pub max_iters: usize,
    /// Euler steps per flow module.
    pub steps: usize,
    /// Kernel width of every flow module.
    pub width: f64,
    /// Dummy dimensions; negative selects the default.
    pub pad: i64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> FmStatus {
    match err {
        e if e.is_numerical() => FmStatus::Numerical,
        Error::Io { .. } => FmStatus::Io,
        Error::UnsupportedVersion { .. } => FmStatus::UnsupportedVersion,
        Error::CorruptCache(_) | Error::Parse { .. } => FmStatus::CorruptModel,
        _ => FmStatus::InvalidArgument,
    }
}

fn guard<F: FnOnce() -> Result<(), (FmStatus, String)>>(f: F) -> FmStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            FmStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (FmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FmStatus, String) {
    (FmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (FmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (FmStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn matrix_arg(data: *const f64, rows: usize, cols: usize, what: &str) -> Result<Points, (FmStatus, String)> {
    if data.is_null() {
        return Err(null(what));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| (FmStatus::InvalidArgument, format!("{what}: {rows} x {cols} overflows")))?;
    let values = std::slice::from_raw_parts(data, len).to_vec();
    Points::from_vec(rows, cols, values).map_err(lib_err)
}

/// Library defaults for [`fm_train`].
#[no_mangle]
pub extern "C" fn fm_train_options_default() -> FmTrainOptions {
    let d = TrainConfig::default();
    FmTrainOptions {
        seed: d.seed,
        n_subset: 0,
        max_sigma_loops: d.max_sigma_loops,
        max_iters: d.optimizer.max_iters,
        steps: 0,
        width: 0.0,
        pad: -1,
    }
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn fm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Trains `sequence` (for example `"ADA"`) on `n` rows of `x` (`n × x_dim`)
/// and `y` (`n × y_dim`). `options` may be null for defaults. On success
/// `*out` receives a new handle.
///
/// # Safety
/// `sequence` must be a NUL-terminated string, `x` and `y` must point to
/// `n * x_dim` and `n * y_dim` readable doubles, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fm_train(
    sequence: *const c_char,
    x: *const f64,
    y: *const f64,
    n: usize,
    x_dim: usize,
    y_dim: usize,
    options: *const FmTrainOptions,
    out: *mut *mut FmModel,
) -> FmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if sequence.is_null() {
            return Err(null("sequence"));
        }
        let name = CStr::from_ptr(sequence)
            .to_str()
            .map_err(|_| (FmStatus::InvalidArgument, "sequence is not valid UTF-8".to_string()))?;
        let xs = matrix_arg(x, n, x_dim, "x")?;
        let ys = matrix_arg(y, n, y_dim, "y")?;
        let opts = if options.is_null() {
            fm_train_options_default()
        } else {
            *options
        };
        let overrides = SequenceOverrides {
            pad: usize::try_from(opts.pad).ok(),
            steps: (opts.steps > 0).then_some(opts.steps),
            width: (opts.width > 0.0).then_some(opts.width),
            ..Default::default()
        };
        let spec = parse_sequence(name, x_dim, y_dim, &overrides).map_err(lib_err)?;
        let mut cfg = TrainConfig {
            seed: opts.seed,
            n_subset: if opts.n_subset == 0 {
                SubsetSize::All
            } else {
                SubsetSize::Count(opts.n_subset)
            },
            ..Default::default()
        };
        if opts.max_sigma_loops > 0 {
            cfg.max_sigma_loops = opts.max_sigma_loops;
        }
        if opts.max_iters > 0 {
            cfg.optimizer.max_iters = opts.max_iters;
        }
        let model = train(&spec, &xs, &ys, &cfg).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FmModel { inner: model }));
        Ok(())
    })
}

/// Predicts `n` rows of `x` (`n × x_dim`) into `out` (`n × output_dim`,
/// `out_len` doubles available).
///
/// # Safety
/// `model` must be a live handle, `x` must point to `n * x_dim` readable
/// doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fm_predict(
    model: *const FmModel,
    x: *const f64,
    n: usize,
    x_dim: usize,
    out: *mut f64,
    out_len: usize,
) -> FmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let need = n * m.inner.spec.y_dim;
        if out_len < need {
            return Err((
                FmStatus::InvalidArgument,
                format!("output buffer holds {out_len} doubles, {need} needed"),
            ));
        }
        let xs = matrix_arg(x, n, x_dim, "x")?;
        let res = predict(&m.inner, &xs).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(res.predictions.as_slice());
        Ok(())
    })
}

/// Loads a model file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fm_model_load(path: *const c_char, out: *mut *mut FmModel) -> FmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = path_arg(path, "path")?;
        let model = load_model(&p).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(FmModel { inner: model }));
        Ok(())
    })
}

/// Writes a model file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fm_model_save(model: *const FmModel, path: *const c_char) -> FmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let p = path_arg(path, "path")?;
        save_model(&m.inner, &p).map_err(lib_err)
    })
}

/// Number of predictor columns the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fm_model_input_dim(model: *const FmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec.x_dim)
}

/// Number of response columns the model produces, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fm_model_output_dim(model: *const FmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec.y_dim)
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fm_model_free(model: *mut FmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
