//! C ABI over the temporal graph recommender pipeline.
//!
//! Callers own two resource kinds: `TgrecConfig` handles (release with
//! `tgrec_config_free`) and strings returned by `tgrec_config_to_text`
//! (release with `tgrec_string_free`). Every fallible call reports through
//! `TgrecStatus`; `tgrec_last_error` returns the matching message, valid on
//! the calling thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use tgrec::cli::{run_evaluate, run_synthetic, run_train, EvalRequest, Split};
use tgrec::config::RunConfig;
use tgrec::Error;

/// Opaque run configuration handle.
pub struct TgrecConfig {
    inner: RunConfig,
}

/// Result of every fallible call. Mirrors the CLI exit codes for the
/// first four values.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TgrecStatus {
    Ok = 0,
    /// Bad usage or invalid configuration.
    ConfigError = 1,
    /// Unreadable, malformed, or insufficient data.
    DataError = 2,
    /// A non-finite value surfaced during training or scoring.
    NumericError = 3,
    /// A required pointer argument was null or not valid UTF-8.
    NullPointer = 4,
    /// The implementation panicked; state may be inconsistent.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    let c = CString::new(sanitized).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn fail(e: &Error) -> TgrecStatus {
    set_error(&e.to_string());
    match e.exit_code() {
        1 => TgrecStatus::ConfigError,
        2 => TgrecStatus::DataError,
        3 => TgrecStatus::NumericError,
        _ => TgrecStatus::ConfigError,
    }
}

fn panic_status() -> TgrecStatus {
    set_error("panic inside tgrec");
    TgrecStatus::Panic
}

/// Runs `body` with panics converted to a status code so unwinding never
/// crosses the C boundary.
fn guarded(body: impl FnOnce() -> TgrecStatus) -> TgrecStatus {
    catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|_| panic_status())
}

unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, TgrecStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(TgrecStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        TgrecStatus::NullPointer
    })
}

unsafe fn opt_utf8_arg<'a>(
    ptr: *const c_char,
    what: &str,
) -> Result<Option<&'a str>, TgrecStatus> {
    if ptr.is_null() {
        return Ok(None);
    }
    utf8_arg(ptr, what).map(Some)
}

/// Returns the message for the most recent failure on this thread, or an
/// empty string. The pointer stays valid until the next failing call on
/// the same thread; do not free it.
#[no_mangle]
pub extern "C" fn tgrec_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Creates a config populated with the documented defaults. Returns null
/// only if allocation fails catastrophically.
#[no_mangle]
pub extern "C" fn tgrec_config_new() -> *mut TgrecConfig {
    catch_unwind(|| Box::into_raw(Box::new(TgrecConfig { inner: RunConfig::default() })))
        .unwrap_or(std::ptr::null_mut())
}

/// Loads a config file (flat `key = value` lines). Returns null on
/// failure; consult `tgrec_last_error`.
///
/// # Safety
/// `path` must be a valid nul-terminated string or null.
#[no_mangle]
pub unsafe extern "C" fn tgrec_config_load(path: *const c_char) -> *mut TgrecConfig {
    catch_unwind(AssertUnwindSafe(|| {
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(_) => return std::ptr::null_mut(),
        };
        match RunConfig::from_file(Path::new(path)) {
            Ok(inner) => Box::into_raw(Box::new(TgrecConfig { inner })),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    }))
    .unwrap_or(std::ptr::null_mut())
}

/// Assigns one config key, e.g. `tgrec_config_set(cfg, "epochs", "3")`.
///
/// # Safety
/// `cfg` must come from `tgrec_config_new`/`tgrec_config_load` and not yet
/// be freed; `key` and `value` must be valid nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn tgrec_config_set(
    cfg: *mut TgrecConfig,
    key: *const c_char,
    value: *const c_char,
) -> TgrecStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_mut() else {
            set_error("cfg is null");
            return TgrecStatus::NullPointer;
        };
        let (key, value) = match (utf8_arg(key, "key"), utf8_arg(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match cfg.inner.set(key, value) {
            Ok(()) => TgrecStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Renders the canonical text form of the config. Free the result with
/// `tgrec_string_free`. Returns null if `cfg` is null.
///
/// # Safety
/// `cfg` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tgrec_config_to_text(cfg: *const TgrecConfig) -> *mut c_char {
    catch_unwind(AssertUnwindSafe(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("cfg is null");
            return std::ptr::null_mut();
        };
        CString::new(cfg.inner.to_text()).expect("config text has no nul bytes").into_raw()
    }))
    .unwrap_or(std::ptr::null_mut())
}

/// Releases a config handle. Null is ignored.
///
/// # Safety
/// `cfg` must be a handle returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn tgrec_config_free(cfg: *mut TgrecConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Releases a string returned by `tgrec_config_to_text`. Null is ignored.
///
/// # Safety
/// `s` must be a string returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn tgrec_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Trains per the config and writes `checkpoint.bin` and `stats.jsonl`
/// under the configured output directory.
///
/// # Safety
/// `cfg` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tgrec_train(cfg: *const TgrecConfig) -> TgrecStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("cfg is null");
            return TgrecStatus::NullPointer;
        };
        let checked = cfg.inner.validate().and_then(|()| run_train(&cfg.inner));
        match checked {
            Ok(_) => TgrecStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Scores a checkpoint and writes `report.json`. `split` is `"val"`,
/// `"test"`, or null for test; `report_path` overrides the destination
/// when non-null.
///
/// # Safety
/// All pointer arguments must be valid nul-terminated strings or null;
/// `checkpoint` must be non-null.
#[no_mangle]
pub unsafe extern "C" fn tgrec_evaluate(
    checkpoint: *const c_char,
    split: *const c_char,
    report_path: *const c_char,
) -> TgrecStatus {
    guarded(|| {
        let checkpoint = match utf8_arg(checkpoint, "checkpoint") {
            Ok(p) => PathBuf::from(p),
            Err(s) => return s,
        };
        let split = match opt_utf8_arg(split, "split") {
            Ok(None) | Ok(Some("test")) => Split::Test,
            Ok(Some("val")) => Split::Val,
            Ok(Some(other)) => {
                set_error(&format!("split must be `val` or `test`, got `{other}`"));
                return TgrecStatus::ConfigError;
            }
            Err(s) => return s,
        };
        let report = match opt_utf8_arg(report_path, "report_path") {
            Ok(p) => p.map(PathBuf::from),
            Err(s) => return s,
        };
        let request = EvalRequest {
            checkpoint,
            split,
            config_path: None,
            overrides: Vec::new(),
            report,
        };
        match run_evaluate(&request) {
            Ok(_) => TgrecStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Generates the synthetic dataset as CSV. `out_path` overrides the
/// destination when non-null; the default is `<output_dir>/synthetic.csv`.
///
/// # Safety
/// `cfg` must be a live handle or null; `out_path` must be a valid
/// nul-terminated string or null.
#[no_mangle]
pub unsafe extern "C" fn tgrec_synthetic(
    cfg: *const TgrecConfig,
    out_path: *const c_char,
) -> TgrecStatus {
    guarded(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("cfg is null");
            return TgrecStatus::NullPointer;
        };
        let out = match opt_utf8_arg(out_path, "out_path") {
            Ok(p) => p.map(PathBuf::from),
            Err(s) => return s,
        };
        match run_synthetic(&cfg.inner, out.as_deref()) {
            Ok(_) => TgrecStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}
