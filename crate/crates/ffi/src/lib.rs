//! C interface to the softdrop library.
//!
//! Every fallible function returns an [`SdStatus`]; on failure a description is
//! available from [`sd_last_error`] on the same thread. Models are opaque handles
//! created by `sd_model_*` constructors and released with [`sd_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use softdrop::checkpoint;
use softdrop::experiment;
use softdrop::model::{Architecture, Method, Model};
use softdrop::uncertainty;
use softdrop::{Error, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numerical = 5,
    Dimension = 6,
    Domain = 7,
    Io = 8,
    Panic = 9,
}

/// A model owned by the library.
pub struct SdModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SdStatus {
    match e {
        Error::Config(_) | Error::DegenerateMask(_) => SdStatus::Config,
        Error::Format { .. } | Error::Length { .. } | Error::Consistency(_) | Error::Checkpoint(_) => SdStatus::Data,
        Error::Numerical(_) => SdStatus::Numerical,
        Error::Dimension { .. } => SdStatus::Dimension,
        Error::Domain(_) => SdStatus::Domain,
        Error::Io { .. } => SdStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SdStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SdStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            SdStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SdStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn slice_out<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn str_in<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

/// Message describing the last failure on this thread. The pointer stays valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Entropy in bits of the probability vector `p[0..k]`.
///
/// # Safety
/// `p` must point to `k` readable doubles and `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn sd_entropy(p: *const f64, k: usize, out: *mut f64) -> SdStatus {
    guard(|| {
        let p = slice_in(p, k, "p")?;
        *out_ref(out, "out")? = uncertainty::entropy(p)?;
        Ok(())
    })
}

/// Mutual information in bits of `t` passes over `k` classes, stored row-major.
///
/// # Safety
/// `passes` must point to `t * k` readable doubles and `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn sd_mutual_information(passes: *const f64, t: usize, k: usize, out: *mut f64) -> SdStatus {
    guard(|| {
        if k == 0 {
            return Err(Fail::Arg("k must be positive".into()));
        }
        let n = t.checked_mul(k).ok_or_else(|| Fail::Arg("t * k overflows".into()))?;
        let rows: Vec<Vec<f64>> = slice_in(passes, n, "passes")?.chunks(k).map(<[f64]>::to_vec).collect();
        *out_ref(out, "out")? = uncertainty::mutual_information(&rows)?;
        Ok(())
    })
}

/// Dice score of two binary masks of length `n`; nonzero bytes count as set.
///
/// # Safety
/// `pred` and `truth` must each point to `n` readable bytes; `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn sd_dice_score(pred: *const u8, truth: *const u8, n: usize, out: *mut f64) -> SdStatus {
    guard(|| {
        let a: Vec<bool> = slice_in(pred, n, "pred")?.iter().map(|&b| b != 0).collect();
        let b: Vec<bool> = slice_in(truth, n, "truth")?.iter().map(|&b| b != 0).collect();
        *out_ref(out, "out")? = uncertainty::dice_score(&a, &b)?;
        Ok(())
    })
}

/// Parses an unsigned-byte IDX buffer, writing its rank and up to `max_rank` extents.
///
/// # Safety
/// `bytes` must point to `len` readable bytes, `dims` to `max_rank` writable values
/// and `rank` to one writable value.
#[no_mangle]
pub unsafe extern "C" fn sd_idx_dims(
    bytes: *const u8,
    len: usize,
    dims: *mut usize,
    max_rank: usize,
    rank: *mut usize,
) -> SdStatus {
    guard(|| {
        let arr = softdrop::data::parse_idx(slice_in(bytes, len, "bytes")?)?;
        *out_ref(rank, "rank")? = arr.dims.len();
        if arr.dims.len() > max_rank {
            return Err(Fail::Arg(format!(
                "rank {} exceeds max_rank {max_rank}",
                arr.dims.len()
            )));
        }
        slice_out(dims, arr.dims.len(), "dims")?.copy_from_slice(&arr.dims);
        Ok(())
    })
}

fn new_handle(model: Model, out: *mut *mut SdModel) -> Result<(), Fail> {
    let slot = unsafe { out_ref(out, "out")? };
    *slot = Box::into_raw(Box::new(SdModel { model }));
    Ok(())
}

/// Creates an untrained MNIST network. `method` is one of `deterministic`, `dropout`,
/// `dropconnect`, `sdc`, `sdc_strong`, `sdc_weak` or `bbb`; `p` is ignored for
/// `deterministic` and `bbb`.
///
/// # Safety
/// `method` must be a NUL-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn sd_model_new_mnist(
    method: *const c_char,
    p: f64,
    seed: u64,
    out: *mut *mut SdModel,
) -> SdStatus {
    guard(|| {
        let method: Method = str_in(method, "method")?.parse()?;
        let p = if method.mask_method().is_some() { p } else { 0.0 };
        new_handle(softdrop::model::build_mnist_model(method, p, seed)?, out)
    })
}

/// Loads a model from a checkpoint written by `softdrop train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn sd_model_load(path: *const c_char, out: *mut *mut SdModel) -> SdStatus {
    guard(|| {
        let path = Path::new(str_in(path, "path")?);
        let (cfg, params) = checkpoint::load(path)?;
        let (shape, classes) = match cfg.architecture {
            Architecture::MnistCnn => (vec![1, 28, 28], 10),
            Architecture::Mlp => {
                let w1 = params.get("fc1.weight").or_else(|_| params.get("fc1.weight_mu"))?;
                let w2 = params.get("fc2.weight").or_else(|_| params.get("fc2.weight_mu"))?;
                (vec![w1.shape()[1]], w2.shape()[0])
            }
        };
        let mut model = experiment::build_model(&cfg, &shape, classes)?;
        checkpoint::restore_into(&mut model.params, params)?;
        new_handle(model, out)
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn sd_model_free(model: *mut SdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalars in one input sample.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sd_model_input_len(model: *const SdModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.input_shape.iter().product())
}

/// Number of output classes.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sd_model_num_classes(model: *const SdModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.n_classes)
}

/// Monte-Carlo prediction for `n` samples of `sd_model_input_len` values each, using
/// `passes` stochastic forward passes seeded by `seed`. Writes the mean softmax
/// (`n * classes`), per-sample mutual information in bits (`n`) and the popular-vote
/// class (`n`). Any output pointer may be null to skip it.
///
/// # Safety
/// `inputs` must hold `n * sd_model_input_len(model)` doubles; non-null outputs must
/// have the sizes listed above.
#[no_mangle]
pub unsafe extern "C" fn sd_mc_predict(
    model: *const SdModel,
    inputs: *const f64,
    n: usize,
    passes: usize,
    seed: u64,
    mean_softmax: *mut f64,
    mutual_information: *mut f64,
    popular_class: *mut usize,
) -> SdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Fail::Null("model"))?.model;
        if n == 0 || passes == 0 {
            return Err(Fail::Arg("n and passes must be positive".into()));
        }
        let per: usize = m.input_shape.iter().product();
        let total = n
            .checked_mul(per)
            .ok_or_else(|| Fail::Arg("input size overflows".into()))?;
        let x = Tensor::new(&m.batch_shape(n), slice_in(inputs, total, "inputs")?.to_vec())?;
        let summaries = uncertainty::mc_predict_batch(m, &x, passes, seed)?;
        let k = m.n_classes;
        if !mean_softmax.is_null() {
            let out = slice_out(mean_softmax, n * k, "mean_softmax")?;
            for (dst, s) in out.chunks_mut(k).zip(&summaries) {
                dst.copy_from_slice(&s.mean_softmax);
            }
        }
        if !mutual_information.is_null() {
            let out = slice_out(mutual_information, n, "mutual_information")?;
            for (dst, s) in out.iter_mut().zip(&summaries) {
                *dst = s.mutual_information;
            }
        }
        if !popular_class.is_null() {
            let out = slice_out(popular_class, n, "popular_class")?;
            for (dst, s) in out.iter_mut().zip(&summaries) {
                *dst = s.popular_class;
            }
        }
        Ok(())
    })
}
