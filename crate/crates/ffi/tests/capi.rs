//! Exercise the C ABI end to end: checkpoint round trip through the
//! opaque handle, value parity with the Rust API, and the error paths.

use std::ffi::{CStr, CString};
use std::ptr;

use cqnp::checkpoint;
use cqnp::model::{Model, ModelConfig, ModelKind};
use cqnp::rng::{substream, Stream};
use cqnp_ffi::*;

fn tmp(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("cqnp-ffi-test");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn saved_model(kind: ModelKind, name: &str) -> (Model, CString) {
    let model = Model::init(ModelConfig::uniform(kind, 8, 8, 2, 2).unwrap(), 42);
    let path = tmp(name);
    checkpoint::save(&model, &path).unwrap();
    (model, CString::new(path.to_str().unwrap()).unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cqnp_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn load_query_and_free() {
    let (model, path) = saved_model(ModelKind::Cqnp, "roundtrip.ckpt");
    let mut handle: *mut CqnpModel = ptr::null_mut();
    let status = unsafe { cqnp_model_load(path.as_ptr(), &mut handle) };
    assert_eq!(status, CqnpStatus::CqnpOk);
    assert!(!handle.is_null());
    assert_eq!(unsafe { cqnp_model_kind(handle) }, 1);
    assert_eq!(
        unsafe { cqnp_model_param_count(handle) },
        model.param_count() as u64
    );
    unsafe { cqnp_model_free(handle) };
    unsafe { cqnp_model_free(ptr::null_mut()) };
}

#[test]
fn missing_file_reports_io_error() {
    let path = CString::new("/nonexistent/nope.ckpt").unwrap();
    let mut handle: *mut CqnpModel = ptr::null_mut();
    let status = unsafe { cqnp_model_load(path.as_ptr(), &mut handle) };
    assert_eq!(status, CqnpStatus::CqnpIoError);
    assert!(handle.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn corrupt_file_reports_format_error() {
    let path = tmp("garbage.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut CqnpModel = ptr::null_mut();
    let status = unsafe { cqnp_model_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, CqnpStatus::CqnpFormatError);
    assert!(last_error().contains("magic"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut handle: *mut CqnpModel = ptr::null_mut();
    assert_eq!(
        unsafe { cqnp_model_load(ptr::null(), &mut handle) },
        CqnpStatus::CqnpNullArgument
    );
    assert_eq!(unsafe { cqnp_model_kind(ptr::null()) }, -1);
    let mut out = [0.0f64; 1];
    assert_eq!(
        unsafe {
            cqnp_predict_mean(
                ptr::null(),
                ptr::null(),
                ptr::null(),
                0,
                ptr::null(),
                0,
                4,
                1,
                out.as_mut_ptr(),
            )
        },
        CqnpStatus::CqnpNullArgument
    );
}

#[test]
fn predict_mean_matches_the_rust_api() {
    let (model, path) = saved_model(ModelKind::Cqnp, "mean.ckpt");
    let mut handle: *mut CqnpModel = ptr::null_mut();
    assert_eq!(
        unsafe { cqnp_model_load(path.as_ptr(), &mut handle) },
        CqnpStatus::CqnpOk
    );
    let cx = [0.0, 0.5, -0.5];
    let cy = [0.2, -0.1, 0.4];
    let xs = [0.1, 0.9];
    let mut got = [0.0f64; 2];
    let status = unsafe {
        cqnp_predict_mean(
            handle,
            cx.as_ptr(),
            cy.as_ptr(),
            3,
            xs.as_ptr(),
            2,
            16,
            7,
            got.as_mut_ptr(),
        )
    };
    assert_eq!(status, CqnpStatus::CqnpOk);

    let mut rng = substream(7, Stream::Eval, &[]);
    let want = model.predict_mean(&xs, &cx, &cy, 16, &mut rng).unwrap();
    assert_eq!(got.to_vec(), want);
    unsafe { cqnp_model_free(handle) };
}

#[test]
fn log_lik_matches_the_rust_api() {
    let (model, path) = saved_model(ModelKind::Acqnp, "ll.ckpt");
    let mut handle: *mut CqnpModel = ptr::null_mut();
    assert_eq!(
        unsafe { cqnp_model_load(path.as_ptr(), &mut handle) },
        CqnpStatus::CqnpOk
    );
    let cx = [0.0, 0.5, -0.5, 1.0];
    let cy = [0.2, -0.1, 0.4, 0.0];
    let xs = [0.1, 0.9, -0.2];
    let ys = [0.3, -0.4, 0.1];
    let mut got = [0.0f64; 3];
    let status = unsafe {
        cqnp_log_lik(
            handle,
            cx.as_ptr(),
            cy.as_ptr(),
            4,
            xs.as_ptr(),
            ys.as_ptr(),
            3,
            8,
            11,
            got.as_mut_ptr(),
        )
    };
    assert_eq!(status, CqnpStatus::CqnpOk);

    let task = cqnp::task::FunctionSample {
        x: cx.iter().chain(&xs).cloned().collect(),
        y: cy.iter().chain(&ys).cloned().collect(),
        n_context: 4,
    };
    let mut rng = substream(11, Stream::Eval, &[]);
    let mut levels = cqnp::model::LevelSource::Draws {
        rng: &mut rng,
        n_tau: 8,
    };
    let want = model
        .predictive_log_lik(&task, cqnp::model::Which::Target, &mut levels, None)
        .unwrap();
    assert_eq!(got.to_vec(), want);
    unsafe { cqnp_model_free(handle) };
}

#[test]
fn quantile_curves_respect_kind_and_layout() {
    let (_, cnp_path) = saved_model(ModelKind::Cnp, "q-cnp.ckpt");
    let mut cnp: *mut CqnpModel = ptr::null_mut();
    assert_eq!(
        unsafe { cqnp_model_load(cnp_path.as_ptr(), &mut cnp) },
        CqnpStatus::CqnpOk
    );
    let cx = [0.0];
    let cy = [0.0];
    let xs = [0.5];
    let levels = [0.25, 0.75];
    let mut tau = [0.0f64; 2];
    let mut mu = [0.0f64; 2];
    let mut w = [0.0f64; 2];
    let status = unsafe {
        cqnp_predict_quantiles(
            cnp,
            cx.as_ptr(),
            cy.as_ptr(),
            1,
            xs.as_ptr(),
            1,
            levels.as_ptr(),
            2,
            tau.as_mut_ptr(),
            mu.as_mut_ptr(),
            w.as_mut_ptr(),
        )
    };
    assert_eq!(status, CqnpStatus::CqnpKindMismatch);
    unsafe { cqnp_model_free(cnp) };

    let (model, path) = saved_model(ModelKind::Cqnp, "q-cqnp.ckpt");
    let mut handle: *mut CqnpModel = ptr::null_mut();
    assert_eq!(
        unsafe { cqnp_model_load(path.as_ptr(), &mut handle) },
        CqnpStatus::CqnpOk
    );
    let status = unsafe {
        cqnp_predict_quantiles(
            handle,
            cx.as_ptr(),
            cy.as_ptr(),
            1,
            xs.as_ptr(),
            1,
            levels.as_ptr(),
            2,
            tau.as_mut_ptr(),
            mu.as_mut_ptr(),
            w.as_mut_ptr(),
        )
    };
    assert_eq!(status, CqnpStatus::CqnpOk);
    let want = model.predict_quantiles(&xs, &cx, &cy, &levels).unwrap();
    for j in 0..2 {
        assert_eq!(tau[j], want[0][j].tau);
        assert_eq!(mu[j], want[0][j].mu);
        assert_eq!(w[j], want[0][j].weight);
    }
    // CQNP passes levels straight through.
    assert_eq!(tau, levels);
    assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
    unsafe { cqnp_model_free(handle) };
}

#[test]
fn version_and_header_exist() {
    let v = unsafe { CStr::from_ptr(cqnp_version()) }.to_str().unwrap();
    assert!(!v.is_empty());
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("cqnp.h");
    let text = std::fs::read_to_string(header).unwrap();
    for symbol in [
        "cqnp_model_load",
        "cqnp_model_free",
        "cqnp_model_kind",
        "cqnp_log_lik",
        "cqnp_predict_mean",
        "cqnp_predict_quantiles",
        "cqnp_last_error_message",
        "CQNP_KIND_MISMATCH",
    ] {
        assert!(text.contains(symbol), "header is missing {symbol}");
    }
}
