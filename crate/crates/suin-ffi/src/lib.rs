//! C ABI over the suin pipeline: opaque configuration and scoring-session
//! handles, integer status codes, and a per-thread error message.
//!
//! Conventions, mirrored in the generated `include/suin.h`:
//! - Every fallible call returns `SuinStatus`; `SUIN_STATUS_OK` is zero.
//! - On failure the message is readable via `suin_last_error` from the
//!   same thread until the next failure on that thread.
//! - Handles are created and destroyed only by this library; passing a
//!   foreign or freed pointer is undefined behavior. Null is rejected with
//!   `SUIN_STATUS_NULL_ARGUMENT` everywhere except the `*_free` functions,
//!   which accept it as a no-op.
//! - Panics never unwind across the boundary; they surface as
//!   `SUIN_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use libc::c_char;

use suin_core::config::{resolve_out_dir, RunConfig};
use suin_core::data::Split;
use suin_core::model::Grouping;
use suin_core::pipeline::{
    cmd_build_pool, cmd_evaluate, cmd_generate, cmd_pretrain, cmd_retrieve, cmd_split, cmd_train,
    RunDir, ScoringSession,
};
use suin_core::Error;

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SuinStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration or a request parameter is invalid.
    InvalidConfig = 3,
    /// Input data violated a structural rule (format, leakage, empty history).
    InvalidData = 4,
    /// A numeric computation failed (shape mismatch, divergence, undefined
    /// metric).
    Numeric = 5,
    /// A required artifact is missing; run the earlier pipeline stages first.
    MissingArtifact = 6,
    /// An operating-system I/O error.
    Io = 7,
    /// An internal invariant was violated.
    Internal = 8,
}

/// Opaque run configuration. Create with `suin_config_new` or
/// `suin_config_load`, destroy with `suin_config_free`.
pub struct SuinConfig {
    inner: RunConfig,
}

/// Opaque handle to a trained model loaded for scoring. Read-only after
/// opening, so a single session may be shared across threads. Destroy with
/// `suin_session_free`.
pub struct SuinSession {
    inner: ScoringSession,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|slot| {
        let mut bytes = slot.borrow_mut();
        bytes.clear();
        // Interior NULs would truncate the C string.
        bytes.extend(msg.bytes().filter(|&b| b != 0));
    });
}

fn status_of(err: &Error) -> SuinStatus {
    match err {
        Error::Config(_) => SuinStatus::InvalidConfig,
        Error::Format(_) | Error::Leakage(_) | Error::EmptyHistory(_) => SuinStatus::InvalidData,
        Error::Dimension { .. }
        | Error::NumericDomain(_)
        | Error::EmptyAttention
        | Error::IndexOutOfRange { .. }
        | Error::BackwardAlreadyRan
        | Error::Divergence { .. }
        | Error::UndefinedSimilarity(_)
        | Error::AucUndefined(_) => SuinStatus::Numeric,
        Error::MissingArtifact { .. } => SuinStatus::MissingArtifact,
        Error::Io(_) => SuinStatus::Io,
        Error::Internal(_) => SuinStatus::Internal,
    }
}

fn fail(err: &Error) -> SuinStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn fail_with(status: SuinStatus, msg: &str) -> SuinStatus {
    set_error(msg);
    status
}

/// Run `f` without letting a panic unwind into the caller.
fn guarded(f: impl FnOnce() -> SuinStatus) -> SuinStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail_with(SuinStatus::Internal, "internal panic"),
    }
}

/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn required_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, SuinStatus> {
    if ptr.is_null() {
        return Err(fail_with(
            SuinStatus::NullArgument,
            &format!("{what} must not be null"),
        ));
    }
    std::ffi::CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail_with(SuinStatus::InvalidUtf8, &format!("{what} is not valid UTF-8")))
}

unsafe fn config_ref<'a>(cfg: *const SuinConfig) -> Result<&'a SuinConfig, SuinStatus> {
    cfg.as_ref().ok_or_else(|| {
        fail_with(SuinStatus::NullArgument, "config handle must not be null")
    })
}

/// Resolve the run directory: an explicit path wins, otherwise the
/// configuration's own output-directory rules apply.
unsafe fn run_dir(cfg: &RunConfig, out_dir: *const c_char) -> Result<RunDir, SuinStatus> {
    let root = if out_dir.is_null() {
        resolve_out_dir(None, cfg)
    } else {
        PathBuf::from(required_str(out_dir, "out_dir")?)
    };
    Ok(RunDir::new(root))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn suin_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating if `cap` is too small. Returns the
/// byte length the full message needs including the terminator, or 0 if no
/// error has been recorded on this thread. `buf` may be null to query the
/// required capacity.
#[no_mangle]
pub unsafe extern "C" fn suin_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let bytes = slot.borrow();
        if bytes.is_empty() {
            return 0;
        }
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// New configuration with default settings. Never returns null.
#[no_mangle]
pub extern "C" fn suin_config_new() -> *mut SuinConfig {
    Box::into_raw(Box::new(SuinConfig { inner: RunConfig::default() }))
}

/// Load and validate a TOML configuration file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid location
/// to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn suin_config_load(
    path: *const c_char,
    out: *mut *mut SuinConfig,
) -> SuinStatus {
    guarded(|| {
        if out.is_null() {
            return fail_with(SuinStatus::NullArgument, "out must not be null");
        }
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match RunConfig::load(std::path::Path::new(path)) {
            Ok(config) => {
                *out = Box::into_raw(Box::new(SuinConfig { inner: config }));
                SuinStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Set the master seed every pipeline stage derives from.
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn suin_config_set_seed(cfg: *mut SuinConfig, seed: u64) -> SuinStatus {
    guarded(|| match cfg.as_mut() {
        Some(c) => {
            c.inner.seed = seed;
            SuinStatus::Ok
        }
        None => fail_with(SuinStatus::NullArgument, "config handle must not be null"),
    })
}

/// Set the worker-thread count (at least 1). Thread count never changes
/// computed results, only wall time.
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn suin_config_set_threads(
    cfg: *mut SuinConfig,
    threads: usize,
) -> SuinStatus {
    guarded(|| match cfg.as_mut() {
        Some(c) if threads >= 1 => {
            c.inner.threads = threads;
            SuinStatus::Ok
        }
        Some(_) => fail_with(SuinStatus::InvalidConfig, "threads must be at least 1"),
        None => fail_with(SuinStatus::NullArgument, "config handle must not be null"),
    })
}

/// Check the configuration for internal consistency.
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn suin_config_validate(cfg: *const SuinConfig) -> SuinStatus {
    guarded(|| {
        let cfg = match config_ref(cfg) {
            Ok(c) => c,
            Err(status) => return status,
        };
        match cfg.inner.validate() {
            Ok(()) => SuinStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Destroy a configuration handle. Null is a no-op.
///
/// # Safety
/// `cfg` must be null or a live handle from this library; it must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn suin_config_free(cfg: *mut SuinConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

fn run_stage_by_name(config: &RunConfig, run: &RunDir, stage: &str) -> suin_core::Result<()> {
    match stage {
        "generate" => cmd_generate(config, run).map(drop),
        "split" => cmd_split(config, run).map(drop),
        "pretrain" => cmd_pretrain(config, run).map(drop),
        "build-pool" => cmd_build_pool(config, run).map(drop),
        "retrieve" => cmd_retrieve(config, run).map(drop),
        "train" => cmd_train(config, run).map(drop),
        other => Err(Error::Config(format!(
            "unknown stage `{other}` (expected generate, split, pretrain, build-pool, retrieve, or train)"
        ))),
    }
}

/// Run one pipeline stage into the run directory. Stage names match the
/// CLI subcommands: "generate", "split", "pretrain", "build-pool",
/// "retrieve", "train". Pass a null `out_dir` to use the configuration's
/// own output-directory rules.
///
/// # Safety
/// `cfg` must be a live handle; `stage` a NUL-terminated string; `out_dir`
/// null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn suin_run_stage(
    cfg: *const SuinConfig,
    out_dir: *const c_char,
    stage: *const c_char,
) -> SuinStatus {
    guarded(|| {
        let cfg = match config_ref(cfg) {
            Ok(c) => c,
            Err(status) => return status,
        };
        let stage = match required_str(stage, "stage") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let run = match run_dir(&cfg.inner, out_dir) {
            Ok(r) => r,
            Err(status) => return status,
        };
        match run_stage_by_name(&cfg.inner, &run, stage) {
            Ok(()) => SuinStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Run every stage in order: generate, split, pretrain, build-pool,
/// retrieve, train. Pass a null `out_dir` to use the configuration's own
/// output-directory rules.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn suin_run_all(
    cfg: *const SuinConfig,
    out_dir: *const c_char,
) -> SuinStatus {
    guarded(|| {
        let cfg = match config_ref(cfg) {
            Ok(c) => c,
            Err(status) => return status,
        };
        let run = match run_dir(&cfg.inner, out_dir) {
            Ok(r) => r,
            Err(status) => return status,
        };
        for stage in ["generate", "split", "pretrain", "build-pool", "retrieve", "train"] {
            if let Err(e) = run_stage_by_name(&cfg.inner, &run, stage) {
                return fail(&e);
            }
        }
        SuinStatus::Ok
    })
}

/// Evaluate the trained model on one split ("train", "val", or "test"),
/// writing the report under the run directory and returning the overall
/// ranking quality (AUC) and log loss through the out-pointers, either of
/// which may be null.
///
/// # Safety
/// `cfg` must be a live handle; `split` a NUL-terminated string; `out_dir`
/// null or a NUL-terminated string; `out_auc`/`out_logloss` null or valid
/// locations for a double.
#[no_mangle]
pub unsafe extern "C" fn suin_evaluate(
    cfg: *const SuinConfig,
    out_dir: *const c_char,
    split: *const c_char,
    out_auc: *mut f64,
    out_logloss: *mut f64,
) -> SuinStatus {
    guarded(|| {
        let cfg = match config_ref(cfg) {
            Ok(c) => c,
            Err(status) => return status,
        };
        let split = match required_str(split, "split") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let split: Split = match split.parse() {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        let run = match run_dir(&cfg.inner, out_dir) {
            Ok(r) => r,
            Err(status) => return status,
        };
        match cmd_evaluate(&cfg.inner, &run, split, Grouping::None) {
            Ok(report) => {
                if !out_auc.is_null() {
                    *out_auc = report.auc;
                }
                if !out_logloss.is_null() {
                    *out_logloss = report.logloss;
                }
                SuinStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Open a scoring session over a run directory whose train stage has
/// completed, storing the handle in `*out`.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` null or a NUL-terminated string;
/// `out` a valid location to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn suin_session_open(
    cfg: *const SuinConfig,
    out_dir: *const c_char,
    out: *mut *mut SuinSession,
) -> SuinStatus {
    guarded(|| {
        if out.is_null() {
            return fail_with(SuinStatus::NullArgument, "out must not be null");
        }
        let cfg = match config_ref(cfg) {
            Ok(c) => c,
            Err(status) => return status,
        };
        let run = match run_dir(&cfg.inner, out_dir) {
            Ok(r) => r,
            Err(status) => return status,
        };
        match ScoringSession::open(&cfg.inner, &run) {
            Ok(session) => {
                *out = Box::into_raw(Box::new(SuinSession { inner: session }));
                SuinStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Predicted click probability for a (user, candidate item) pair, written
/// to `*out_prob`. The user must exist in the run's dataset; the item must
/// be a valid non-pad item ID.
///
/// # Safety
/// `session` must be a live handle; `out_prob` a valid location for a
/// double.
#[no_mangle]
pub unsafe extern "C" fn suin_session_score(
    session: *const SuinSession,
    user_id: u64,
    item_id: u64,
    out_prob: *mut f64,
) -> SuinStatus {
    guarded(|| {
        let session = match session.as_ref() {
            Some(s) => s,
            None => {
                return fail_with(SuinStatus::NullArgument, "session handle must not be null")
            }
        };
        if out_prob.is_null() {
            return fail_with(SuinStatus::NullArgument, "out_prob must not be null");
        }
        match session.inner.score(user_id, item_id) {
            Ok(p) => {
                *out_prob = p;
                SuinStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Destroy a scoring session. Null is a no-op.
///
/// # Safety
/// `session` must be null or a live handle from this library; it must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn suin_session_free(session: *mut SuinSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

#[cfg(test)]
mod tests;
