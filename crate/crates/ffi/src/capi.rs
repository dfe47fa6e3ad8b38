//! Opaque-handle C API over the pipeline.
//!
//! Callers create a `PsmConfig`, set options with the same `key`/`value`
//! grammar the CLI accepts, then launch a full run on a data directory.
//! Every fallible call returns a [`PsmStatus`]; anything but `Ok` leaves a
//! message readable through [`psm_last_error`]. Strings cross the boundary
//! as NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use psm_core::pipeline::{run_pipeline, PipelineConfig, RunContext};
use psm_core::synth::{generate_dataset, SynthConfig};
use psm_core::Error;

/// ABI revision reported by [`psm_version`]; bumped on breaking changes.
pub const PSM_API_VERSION: u32 = 1;

/// Outcome of a C API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsmStatus {
    /// Call succeeded.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An option name or value was rejected.
    InvalidArgument = 3,
    /// File or directory access failed.
    Io = 4,
    /// An input file exists but could not be decoded.
    BadData = 5,
    /// A numeric contract was violated while running.
    Numeric = 6,
    /// The library caught an internal panic; state may be inconsistent.
    Panic = 7,
}

/// Opaque pipeline configuration handle. Create with [`psm_config_new`],
/// release with [`psm_config_free`].
pub struct PsmConfig {
    inner: PipelineConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: PsmStatus, msg: impl Into<String>) -> PsmStatus {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|&b| b != 0);
    let msg = CString::new(bytes).expect("NUL bytes stripped above");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
    status
}

fn status_of(err: &Error) -> PsmStatus {
    match err {
        Error::InvalidArgument(_) | Error::EmptyInput(_) => PsmStatus::InvalidArgument,
        Error::Io(_) => PsmStatus::Io,
        Error::Format { .. } | Error::Image(_) | Error::Csv(_) => PsmStatus::BadData,
        Error::ShapeMismatch { .. }
        | Error::NonScalarBackward { .. }
        | Error::NoSupervision(_)
        | Error::UndefinedMetric(_) => PsmStatus::Numeric,
        Error::Stage { source, .. } => status_of(source),
    }
}

fn fail_with(err: &Error) -> PsmStatus {
    fail(status_of(err), err.to_string())
}

/// Borrows a C string argument, recording an error on NULL or bad UTF-8.
///
/// # Safety
/// `p`, when non-NULL, must point to a NUL-terminated string.
unsafe fn arg_str<'a>(name: &str, p: *const c_char) -> Result<&'a str, PsmStatus> {
    if p.is_null() {
        return Err(fail(PsmStatus::NullArgument, format!("{name} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PsmStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

/// Runs `f`, converting a panic into `PsmStatus::Panic` instead of
/// unwinding across the ABI boundary.
fn guarded(f: impl FnOnce() -> PsmStatus) -> PsmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(PsmStatus::Panic, "internal panic"),
    }
}

/// Returns the ABI revision of this library.
#[no_mangle]
pub extern "C" fn psm_version() -> u32 {
    PSM_API_VERSION
}

/// Message from the most recent failing call on this thread, or NULL if
/// that call succeeded. The pointer stays valid until the next psm call
/// on the same thread.
#[no_mangle]
pub extern "C" fn psm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Allocates a configuration with default options (segmentation task).
/// Never fails; free with [`psm_config_free`].
#[no_mangle]
pub extern "C" fn psm_config_new() -> *mut PsmConfig {
    clear_error();
    Box::into_raw(Box::new(PsmConfig {
        inner: PipelineConfig::default(),
    }))
}

/// Releases a configuration. NULL is a no-op.
///
/// # Safety
/// `cfg` must come from [`psm_config_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn psm_config_free(cfg: *mut PsmConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Sets one option, e.g. `psm_config_set(cfg, "task", "det")`. Keys and
/// values follow the CLI `--set key=value` grammar.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn psm_config_set(
    cfg: *mut PsmConfig,
    key: *const c_char,
    value: *const c_char,
) -> PsmStatus {
    clear_error();
    if cfg.is_null() {
        return fail(PsmStatus::NullArgument, "cfg is NULL");
    }
    let key = match arg_str("key", key) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let value = match arg_str("value", value) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let cfg = &mut (*cfg).inner;
    guarded(|| match cfg.apply_kv(key, value) {
        Ok(()) => PsmStatus::Ok,
        Err(e) => fail_with(&e),
    })
}

/// Applies a flat `key = value` config file on top of the current options
/// (`#` starts a comment).
///
/// # Safety
/// `cfg` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn psm_config_load(cfg: *mut PsmConfig, path: *const c_char) -> PsmStatus {
    clear_error();
    if cfg.is_null() {
        return fail(PsmStatus::NullArgument, "cfg is NULL");
    }
    let path = match arg_str("path", path) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let cfg = &mut (*cfg).inner;
    guarded(|| match cfg.apply_file(path) {
        Ok(()) => PsmStatus::Ok,
        Err(e) => fail_with(&e),
    })
}

/// Renders the configuration as `key = value` lines. Returns NULL only on
/// a NULL handle. Free the string with [`psm_string_free`].
///
/// # Safety
/// `cfg` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn psm_config_to_string(cfg: *const PsmConfig) -> *mut c_char {
    clear_error();
    if cfg.is_null() {
        fail(PsmStatus::NullArgument, "cfg is NULL");
        return ptr::null_mut();
    }
    let mut text = (*cfg).inner.to_kv_lines();
    text.retain(|c| c != '\0');
    CString::new(text).expect("NUL bytes stripped above").into_raw()
}

/// Frees a string returned by this library. NULL is a no-op.
///
/// # Safety
/// `s` must come from a psm call and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn psm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs the full pipeline on `data_dir`, writing checkpoints, pseudo
/// labels, predictions, and reports under `out_dir`. Blocks until done.
///
/// # Safety
/// `cfg` must be a live handle; both paths must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn psm_run(
    cfg: *const PsmConfig,
    data_dir: *const c_char,
    out_dir: *const c_char,
) -> PsmStatus {
    clear_error();
    if cfg.is_null() {
        return fail(PsmStatus::NullArgument, "cfg is NULL");
    }
    let cfg = &(*cfg).inner;
    let data_dir = match arg_str("data_dir", data_dir) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let out_dir = match arg_str("out_dir", out_dir) {
        Ok(s) => s,
        Err(st) => return st,
    };
    guarded(|| {
        match run_pipeline(
            &RunContext::new(),
            cfg,
            Path::new(data_dir),
            Path::new(out_dir),
        ) {
            Ok(_) => PsmStatus::Ok,
            Err(e) => fail_with(&e),
        }
    })
}

/// Generates a synthetic dataset of `n_images` stained-tissue images
/// (side `size`, two cell classes mixed by `class_mix`) under `out_dir`.
/// Byte-identical across runs for one seed.
///
/// # Safety
/// `out_dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn psm_synth(
    out_dir: *const c_char,
    n_images: u32,
    size: u32,
    seed: u64,
    class_mix: f64,
) -> PsmStatus {
    clear_error();
    let out_dir = match arg_str("out_dir", out_dir) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let cfg = SynthConfig {
        size: size as usize,
        seed,
        class_mix,
        ..SynthConfig::default()
    };
    guarded(|| match generate_dataset(&cfg, n_images as usize, out_dir) {
        Ok(_) => PsmStatus::Ok,
        Err(e) => fail_with(&e),
    })
}
