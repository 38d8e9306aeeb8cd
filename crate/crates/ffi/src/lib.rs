//! C ABI over the cqnp models.
//!
//! Checkpoints trained with the `cqnp` CLI load into an opaque
//! [`CqnpModel`] handle; every call returns a [`CqnpStatus`] and writes
//! results through caller-provided buffers. The most recent failure
//! message per thread is available from [`cqnp_last_error_message`].
//!
//! The header `include/cqnp.h` is regenerated by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cqnp::model::{Model, ModelKind};
use cqnp::rng::{substream, Stream};
use cqnp::task::FunctionSample;

/// Opaque handle to a loaded model.
pub struct CqnpModel {
    inner: Model,
}

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CqnpStatus {
    CqnpOk = 0,
    CqnpNullArgument = 1,
    CqnpIoError = 2,
    CqnpFormatError = 3,
    CqnpKindMismatch = 4,
    CqnpNumericalError = 5,
    CqnpInvalidArgument = 6,
    CqnpPanic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(cleaned).unwrap());
}

fn status_of(err: &cqnp::CqnpError) -> CqnpStatus {
    use cqnp::CqnpError as E;
    match err {
        E::Io(_) => CqnpStatus::CqnpIoError,
        E::Format(_) | E::Ingest(_) => CqnpStatus::CqnpFormatError,
        E::Numerical(_) => CqnpStatus::CqnpNumericalError,
        _ => CqnpStatus::CqnpInvalidArgument,
    }
}

fn guarded(f: impl FnOnce() -> CqnpStatus) -> CqnpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            CqnpStatus::CqnpPanic
        }
    }
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cqnp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cqnp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a checkpoint. On success writes a handle to `out`; the caller owns
/// it and must release it with `cqnp_model_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cqnp_model_load(
    path: *const c_char,
    out: *mut *mut CqnpModel,
) -> CqnpStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            set_error("null argument");
            return CqnpStatus::CqnpNullArgument;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("path is not valid UTF-8");
                return CqnpStatus::CqnpInvalidArgument;
            }
        };
        match cqnp::checkpoint::load(Path::new(path)) {
            Ok(model) => {
                unsafe { *out = Box::into_raw(Box::new(CqnpModel { inner: model })) };
                CqnpStatus::CqnpOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a handle returned by `cqnp_model_load`. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer previously returned by `cqnp_model_load`
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn cqnp_model_free(model: *mut CqnpModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Model kind: 0 = cnp, 1 = cqnp, 2 = acqnp; -1 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cqnp_model_kind(model: *const CqnpModel) -> c_int {
    if model.is_null() {
        return -1;
    }
    match unsafe { &*model }.inner.kind() {
        ModelKind::Cnp => 0,
        ModelKind::Cqnp => 1,
        ModelKind::Acqnp => 2,
    }
}

/// Number of trainable parameters; 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cqnp_model_param_count(model: *const CqnpModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.inner.param_count() as u64
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() && len > 0 {
        None
    } else if len == 0 {
        Some(&[])
    } else {
        Some(unsafe { std::slice::from_raw_parts(ptr, len) })
    }
}

/// Per-point predictive log-likelihood of `n_points` (x, y) pairs given a
/// context set. Quantile models draw `n_tau` fresh levels per point from
/// `seed`; the CNP ignores both. `out_ll` must hold `n_points` doubles.
///
/// # Safety
/// All pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cqnp_log_lik(
    model: *const CqnpModel,
    ctx_x: *const f64,
    ctx_y: *const f64,
    n_ctx: usize,
    xs: *const f64,
    ys: *const f64,
    n_points: usize,
    n_tau: usize,
    seed: u64,
    out_ll: *mut f64,
) -> CqnpStatus {
    guarded(|| {
        if model.is_null() || out_ll.is_null() {
            set_error("null argument");
            return CqnpStatus::CqnpNullArgument;
        }
        let (Some(cx), Some(cy), Some(px), Some(py)) = (unsafe { slice_arg(ctx_x, n_ctx) },
            unsafe { slice_arg(ctx_y, n_ctx) },
            unsafe { slice_arg(xs, n_points) },
            unsafe { slice_arg(ys, n_points) })
        else {
            set_error("null data pointer with nonzero length");
            return CqnpStatus::CqnpNullArgument;
        };
        if n_ctx == 0 || n_points == 0 {
            set_error("need at least one context and one query point");
            return CqnpStatus::CqnpInvalidArgument;
        }
        let model = &unsafe { &*model }.inner;
        let task = FunctionSample {
            x: cx.iter().chain(px).cloned().collect(),
            y: cy.iter().chain(py).cloned().collect(),
            n_context: n_ctx,
        };
        let mut rng = substream(seed, Stream::Eval, &[]);
        let mut levels = cqnp::model::LevelSource::Draws {
            rng: &mut rng,
            n_tau: n_tau.max(1),
        };
        match model.predictive_log_lik(&task, cqnp::model::Which::Target, &mut levels, None) {
            Ok(lls) => {
                unsafe { std::slice::from_raw_parts_mut(out_ll, n_points) }
                    .copy_from_slice(&lls);
                CqnpStatus::CqnpOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Predictive mean at each x: the softmax-weighted mixture mean over
/// `n_tau` drawn levels (quantile kinds) or the Gaussian mean (CNP).
/// `out_mean` must hold `n_xs` doubles.
///
/// # Safety
/// All pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cqnp_predict_mean(
    model: *const CqnpModel,
    ctx_x: *const f64,
    ctx_y: *const f64,
    n_ctx: usize,
    xs: *const f64,
    n_xs: usize,
    n_tau: usize,
    seed: u64,
    out_mean: *mut f64,
) -> CqnpStatus {
    guarded(|| {
        if model.is_null() || out_mean.is_null() {
            set_error("null argument");
            return CqnpStatus::CqnpNullArgument;
        }
        let (Some(cx), Some(cy), Some(px)) = (unsafe { slice_arg(ctx_x, n_ctx) },
            unsafe { slice_arg(ctx_y, n_ctx) },
            unsafe { slice_arg(xs, n_xs) })
        else {
            set_error("null data pointer with nonzero length");
            return CqnpStatus::CqnpNullArgument;
        };
        let model = &unsafe { &*model }.inner;
        let mut rng = substream(seed, Stream::Eval, &[]);
        match model.predict_mean(px, cx, cy, n_tau.max(1), &mut rng) {
            Ok(means) => {
                unsafe { std::slice::from_raw_parts_mut(out_mean, n_xs) }.copy_from_slice(&means);
                CqnpStatus::CqnpOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Decode quantile curves: for each of `n_xs` inputs and `n_levels`
/// requested levels, the level actually used, the location, and the
/// softmax mixing weight. Each output buffer must hold `n_xs * n_levels`
/// doubles, laid out x-major. Fails with a kind mismatch on a CNP handle.
///
/// # Safety
/// All pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cqnp_predict_quantiles(
    model: *const CqnpModel,
    ctx_x: *const f64,
    ctx_y: *const f64,
    n_ctx: usize,
    xs: *const f64,
    n_xs: usize,
    levels: *const f64,
    n_levels: usize,
    out_tau: *mut f64,
    out_mu: *mut f64,
    out_weight: *mut f64,
) -> CqnpStatus {
    guarded(|| {
        if model.is_null() || out_tau.is_null() || out_mu.is_null() || out_weight.is_null() {
            set_error("null argument");
            return CqnpStatus::CqnpNullArgument;
        }
        let (Some(cx), Some(cy), Some(px), Some(lv)) = (unsafe { slice_arg(ctx_x, n_ctx) },
            unsafe { slice_arg(ctx_y, n_ctx) },
            unsafe { slice_arg(xs, n_xs) },
            unsafe { slice_arg(levels, n_levels) })
        else {
            set_error("null data pointer with nonzero length");
            return CqnpStatus::CqnpNullArgument;
        };
        let model = &unsafe { &*model }.inner;
        if model.kind() == ModelKind::Cnp {
            set_error("quantile curves need a cqnp or acqnp checkpoint");
            return CqnpStatus::CqnpKindMismatch;
        }
        match model.predict_quantiles(px, cx, cy, lv) {
            Ok(curves) => {
                let n = n_xs * n_levels;
                let taus = unsafe { std::slice::from_raw_parts_mut(out_tau, n) };
                let mus = unsafe { std::slice::from_raw_parts_mut(out_mu, n) };
                let weights = unsafe { std::slice::from_raw_parts_mut(out_weight, n) };
                for (i, per_x) in curves.iter().enumerate() {
                    for (j, p) in per_x.iter().enumerate() {
                        taus[i * n_levels + j] = p.tau;
                        mus[i * n_levels + j] = p.mu;
                        weights[i * n_levels + j] = p.weight;
                    }
                }
                CqnpStatus::CqnpOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

