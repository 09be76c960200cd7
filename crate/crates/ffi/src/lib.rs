//! C ABI over `musedec`.
//!
//! Every fallible function returns a `MusedecStatus`. On failure the message
//! is available from `musedec_last_error` on the same thread. Handles are
//! opaque and owned by the caller until passed to the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use musedec::io::{read_msed, write_msed, Dtype};
use musedec::metrics::{evaluate, holm_bonferroni};
use musedec::model::Model;
use musedec::objectives::rsa_loss;
use musedec::stimfeat::compute_stimulus_rsm;
use musedec::trainer::load_model;
use musedec::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MusedecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Io = 5,
    BadFormat = 6,
    Validation = 7,
    MissingCheckpoint = 8,
    VariantLacksTokens = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Dense row-major `f64` tensor.
pub struct MusedecTensor {
    inner: Tensor,
}

/// Trained model loaded from a checkpoint directory.
pub struct MusedecModel {
    inner: Model,
}

/// Scalar multi-label metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MusedecMetrics {
    pub map: f64,
    pub auc: f64,
    pub hamming: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MusedecStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::DimMismatch { .. } => MusedecStatus::ShapeMismatch,
        Error::NonFinite { .. } | Error::Diverged { .. } => MusedecStatus::NonFinite,
        Error::Io { .. } => MusedecStatus::Io,
        Error::BadMagic { .. } | Error::Json(_) | Error::Csv(_) => MusedecStatus::BadFormat,
        Error::MissingCheckpoint(_) => MusedecStatus::MissingCheckpoint,
        Error::VariantLacksTokens(_) => MusedecStatus::VariantLacksTokens,
        Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownMethod(..) | Error::UnknownSubject(_) => {
            MusedecStatus::InvalidArgument
        }
        _ => MusedecStatus::Validation,
    }
}

fn fail(status: MusedecStatus, msg: &str) -> MusedecStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), MusedecStatus>) -> MusedecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MusedecStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(MusedecStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: musedec::Result<T>) -> Result<T, MusedecStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, MusedecStatus> {
    p.as_ref().ok_or_else(|| fail(MusedecStatus::NullPointer, &format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, MusedecStatus> {
    if p.is_null() {
        return Err(fail(MusedecStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MusedecStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(Path::new(s).to_path_buf())
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), MusedecStatus> {
    if out.is_null() {
        return Err(fail(MusedecStatus::NullPointer, "output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn musedec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn musedec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a tensor by copying `product(shape)` values from `data`.
///
/// # Safety
/// `shape` must point to `ndim` values and `data` to `product(shape)` values.
#[no_mangle]
pub unsafe extern "C" fn musedec_tensor_new(
    shape: *const usize,
    ndim: usize,
    data: *const f64,
    out: *mut *mut MusedecTensor,
) -> MusedecStatus {
    guard(|| {
        if shape.is_null() || data.is_null() {
            return Err(fail(MusedecStatus::NullPointer, "shape or data is null"));
        }
        if ndim == 0 {
            return Err(fail(MusedecStatus::InvalidArgument, "ndim must be ≥ 1"));
        }
        let dims = std::slice::from_raw_parts(shape, ndim).to_vec();
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| fail(MusedecStatus::InvalidArgument, "element count overflows"))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let t = lift(Tensor::new(dims, values))?;
        put(out, MusedecTensor { inner: t })
    })
}

/// Reads an MSED file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn musedec_tensor_read(path: *const c_char, out: *mut *mut MusedecTensor) -> MusedecStatus {
    guard(|| {
        let p = path_arg(path)?;
        let t = lift(read_msed(&p))?;
        put(out, MusedecTensor { inner: t })
    })
}

/// Writes an MSED file; `dtype` is 1 for float32 and 2 for float64.
///
/// # Safety
/// `tensor` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn musedec_tensor_write(tensor: *const MusedecTensor, path: *const c_char, dtype: u8) -> MusedecStatus {
    guard(|| {
        let t = as_ref(tensor, "tensor")?;
        let p = path_arg(path)?;
        let dt = match dtype {
            1 => Dtype::F32,
            2 => Dtype::F64,
            d => return Err(fail(MusedecStatus::InvalidArgument, &format!("unknown dtype {d}"))),
        };
        lift(write_msed(&p, &t.inner, dt))
    })
}

/// Rank of the tensor, 0 for a null handle.
///
/// # Safety
/// `tensor` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn musedec_tensor_ndim(tensor: *const MusedecTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.inner.ndim())
}

/// Number of elements, 0 for a null handle.
///
/// # Safety
/// `tensor` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn musedec_tensor_len(tensor: *const MusedecTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.inner.len())
}

/// Copies the dimensions into `dims`, which holds `capacity` entries.
///
/// # Safety
/// `dims` must be writable for `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn musedec_tensor_shape(tensor: *const MusedecTensor, dims: *mut usize, capacity: usize) -> MusedecStatus {
    guard(|| {
        let t = as_ref(tensor, "tensor")?;
        copy_out(t.inner.shape(), dims, capacity)
    })
}

/// Copies the row-major values into `data`, which holds `capacity` entries.
///
/// # Safety
/// `data` must be writable for `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn musedec_tensor_data(tensor: *const MusedecTensor, data: *mut f64, capacity: usize) -> MusedecStatus {
    guard(|| {
        let t = as_ref(tensor, "tensor")?;
        copy_out(t.inner.data(), data, capacity)
    })
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, capacity: usize) -> Result<(), MusedecStatus> {
    if dst.is_null() {
        return Err(fail(MusedecStatus::NullPointer, "output buffer is null"));
    }
    if capacity < src.len() {
        return Err(fail(
            MusedecStatus::BufferTooSmall,
            &format!("buffer holds {capacity}, need {}", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Releases a tensor; null is ignored.
///
/// # Safety
/// `tensor` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn musedec_tensor_free(tensor: *mut MusedecTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// Cosine similarity matrix of the rows of a 2-D tensor.
///
/// # Safety
/// `features` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn musedec_cosine_rsm(features: *const MusedecTensor, out: *mut *mut MusedecTensor) -> MusedecStatus {
    guard(|| {
        let f = as_ref(features, "features")?;
        let m = lift(compute_stimulus_rsm(&f.inner))?;
        put(out, MusedecTensor { inner: m })
    })
}

/// Squared Frobenius distance between `target` and the cosine RSM of the
/// rows of `z`, divided by `B²`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn musedec_rsa_loss(target: *const MusedecTensor, z: *const MusedecTensor, out: *mut f64) -> MusedecStatus {
    guard(|| {
        let (t, z) = (as_ref(target, "target")?, as_ref(z, "z")?);
        if out.is_null() {
            return Err(fail(MusedecStatus::NullPointer, "output pointer is null"));
        }
        *out = lift(rsa_loss(&t.inner, &z.inner))?;
        Ok(())
    })
}

/// mAP, macro AUC and Hamming distance of `n × C` scores against binary labels.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn musedec_evaluate(
    scores: *const MusedecTensor,
    labels: *const MusedecTensor,
    threshold: f64,
    out: *mut MusedecMetrics,
) -> MusedecStatus {
    guard(|| {
        let (s, l) = (as_ref(scores, "scores")?, as_ref(labels, "labels")?);
        if out.is_null() {
            return Err(fail(MusedecStatus::NullPointer, "output pointer is null"));
        }
        let r = lift(evaluate(&s.inner, &l.inner, threshold))?;
        *out = MusedecMetrics {
            map: r.map,
            auc: r.auc,
            hamming: r.hamming,
        };
        Ok(())
    })
}

/// Holm step-down adjustment of `n` p-values. `adjusted` receives the
/// adjusted values and `rejected` 1 or 0 per hypothesis, in input order.
///
/// # Safety
/// `p_values`, `adjusted` and `rejected` must each hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn musedec_holm(
    p_values: *const f64,
    n: usize,
    alpha: f64,
    adjusted: *mut f64,
    rejected: *mut u8,
) -> MusedecStatus {
    guard(|| {
        if p_values.is_null() || adjusted.is_null() || rejected.is_null() {
            return Err(fail(MusedecStatus::NullPointer, "null buffer"));
        }
        let p = std::slice::from_raw_parts(p_values, n);
        let h = lift(holm_bonferroni(p, alpha))?;
        copy_out(&h.adjusted, adjusted, n)?;
        let flags: Vec<u8> = h.rejected.iter().map(|&r| u8::from(r)).collect();
        copy_out(&flags, rejected, n)
    })
}

/// Loads the best-validation parameters from a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn musedec_model_load(dir: *const c_char, out: *mut *mut MusedecModel) -> MusedecStatus {
    guard(|| {
        let p = path_arg(dir)?;
        let m = lift(load_model(&p))?;
        put(out, MusedecModel { inner: m })
    })
}

/// Number of subjects with token rows, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn musedec_model_subject_count(model: *const MusedecModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.subjects.len())
}

/// Number of output classes, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn musedec_model_class_count(model: *const MusedecModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.class_count)
}

/// Class probabilities for `B × M × d` patches; `subjects` holds the
/// subject row of each of the `B` samples.
///
/// # Safety
/// Handles must be live, `subjects` must hold `batch` entries and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn musedec_model_predict(
    model: *const MusedecModel,
    patches: *const MusedecTensor,
    subjects: *const usize,
    batch: usize,
    out: *mut *mut MusedecTensor,
) -> MusedecStatus {
    guard(|| {
        let (m, x) = (as_ref(model, "model")?, as_ref(patches, "patches")?);
        if subjects.is_null() {
            return Err(fail(MusedecStatus::NullPointer, "subjects is null"));
        }
        let rows = std::slice::from_raw_parts(subjects, batch);
        let p = lift(m.inner.predict(&x.inner, rows, 64))?;
        put(out, MusedecTensor { inner: p })
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn musedec_model_free(model: *mut MusedecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
