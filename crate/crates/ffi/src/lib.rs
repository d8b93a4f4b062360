//! C ABI over `diffcap`.
//!
//! Conventions: every fallible function returns a [`DcStatus`] and writes its
//! result through an out-pointer. On failure a message is available from
//! [`dc_last_error_message`] on the same thread. Handles are opaque and must be
//! released with their `_free` function; strings returned by the library are
//! released with [`dc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use diffcap::checkpoint::Checkpoint;
use diffcap::decoding::{caption_shape, DecodeSettings, Pooling};
use diffcap::embedding::ViewPatchGrid;
use diffcap::schedule::{NoiseSchedule, ScheduleKind};
use diffcap::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    InvalidArgument = 1,
    OutOfRange = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Io = 5,
    Format = 6,
    NullPointer = 7,
    Panic = 8,
}

impl From<&Error> for DcStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => DcStatus::InvalidArgument,
            Error::OutOfRange(_) => DcStatus::OutOfRange,
            Error::Shape(_) => DcStatus::ShapeMismatch,
            Error::NonFinite { .. } => DcStatus::NonFinite,
            Error::Io(_) => DcStatus::Io,
            Error::Format(_) | Error::Json(_) => DcStatus::Format,
        }
    }
}

/// A noise schedule, possibly respaced.
pub struct DcSchedule {
    inner: NoiseSchedule,
}

/// A loaded checkpoint.
pub struct DcModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(DcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(DcStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DcStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(DcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next library call on this thread; do not free.
#[no_mangle]
pub extern "C" fn dc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a schedule. `kind` is "sqrt", "linear" or "cosine".
///
/// # Safety
/// `kind` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_schedule_new(kind: *const c_char, steps: usize, out: *mut *mut DcSchedule) -> DcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let kind: ScheduleKind = str_arg(kind, "kind")?.parse()?;
        let inner = NoiseSchedule::build(kind, steps)?;
        *out = Box::into_raw(Box::new(DcSchedule { inner }));
        Ok(())
    })
}

/// Respaces `schedule` to `k` steps into a new handle.
///
/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_schedule_respace(schedule: *const DcSchedule, k: usize, out: *mut *mut DcSchedule) -> DcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = handle(schedule, "schedule")?.inner.respace(k)?;
        *out = Box::into_raw(Box::new(DcSchedule { inner }));
        Ok(())
    })
}

/// Number of steps, or 0 for a null handle.
///
/// # Safety
/// `schedule` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_schedule_steps(schedule: *const DcSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.inner.steps())
}

/// Cumulative signal level at step `t` (0..=steps).
///
/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_schedule_alpha_bar(schedule: *const DcSchedule, t: usize, out: *mut f64) -> DcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let s = &handle(schedule, "schedule")?.inner;
        if t > s.steps() {
            return Err(Failure(DcStatus::OutOfRange, format!("t = {t} exceeds {} steps", s.steps())));
        }
        *out = s.alpha_bar(t);
        Ok(())
    })
}

/// Posterior coefficients at step `t`: mean = c_xt * x_t + c_x0 * x_0.
///
/// # Safety
/// `schedule` must be a live handle; the three out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_schedule_posterior(
    schedule: *const DcSchedule,
    t: usize,
    c_xt: *mut f64,
    c_x0: *mut f64,
    var: *mut f64,
) -> DcStatus {
    guard(|| {
        let (c_xt, c_x0, var) = (out_arg(c_xt, "c_xt")?, out_arg(c_x0, "c_x0")?, out_arg(var, "var")?);
        let p = handle(schedule, "schedule")?.inner.posterior_coeffs(t)?;
        (*c_xt, *c_x0, *var) = (p.c_xt, p.c_x0, p.var);
        Ok(())
    })
}

/// # Safety
/// `schedule` must be null or a live handle, and is dangling afterwards.
#[no_mangle]
pub unsafe extern "C" fn dc_schedule_free(schedule: *mut DcSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_load(dir: *const c_char, out: *mut *mut DcModel) -> DcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = Checkpoint::load(Path::new(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(DcModel { inner }));
        Ok(())
    })
}

/// Captions one shape. `views_json` is a JSON array of views, each an array of
/// `{"part","color","material","texture"}` cells forming a square grid.
/// `pooling` is "max", "mean" or "stochastic"; `inference_steps` 0 means the
/// full training schedule. The caption is written to `out` and must be
/// released with [`dc_string_free`].
///
/// # Safety
/// `model` must be a live handle; the strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_caption(
    model: *const DcModel,
    views_json: *const c_char,
    samples: usize,
    pooling: *const c_char,
    inference_steps: usize,
    seed: u64,
    out: *mut *mut c_char,
) -> DcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ck = &handle(model, "model")?.inner;
        let views: Vec<ViewPatchGrid> = serde_json::from_str(str_arg(views_json, "views_json")?).map_err(Error::from)?;
        let pooling: Pooling = str_arg(pooling, "pooling")?.parse()?;
        let full = NoiseSchedule::build(ck.train.schedule, ck.train.diffusion_steps)?;
        let schedule = if inference_steps == 0 || inference_steps == full.steps() { full } else { full.respace(inference_steps)? };
        let settings = DecodeSettings { samples, pooling, clamp_enabled: true, seed };
        let caption = caption_shape(&ck.params, &views, &schedule, &settings)?;
        let text = ck.vocab.decode(&caption.tokens).join(" ");
        *out = CString::new(text).map_err(|e| Failure(DcStatus::Format, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle, and is dangling afterwards.
#[no_mangle]
pub unsafe extern "C" fn dc_model_free(model: *mut DcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Smoothed sentence BLEU-`max_n` of whitespace-tokenized strings.
///
/// # Safety
/// `candidate` and the `n_refs` entries of `references` must be
/// NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_bleu(
    candidate: *const c_char,
    references: *const *const c_char,
    n_refs: usize,
    max_n: usize,
    out: *mut f64,
) -> DcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cand: Vec<&str> = str_arg(candidate, "candidate")?.split_whitespace().collect();
        if references.is_null() && n_refs > 0 {
            return Err(null("references"));
        }
        let mut refs = Vec::with_capacity(n_refs);
        for i in 0..n_refs {
            refs.push(str_arg(*references.add(i), "reference")?.split_whitespace().collect::<Vec<_>>());
        }
        let refs: Vec<&[&str]> = refs.iter().map(Vec::as_slice).collect();
        *out = diffcap::metrics::bleu(&cand, &refs, max_n, true)?;
        Ok(())
    })
}
