//! C ABI for the ccpo library.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns a
//! [`CcpoStatus`]; on failure the message is available from
//! [`ccpo_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ccpo::config::RunConfig;
use ccpo::env::Observation;
use ccpo::numerics::Categorical;
use ccpo::policy::{conformal_set, score};
use ccpo::trace::{generate_synthetic, load_traces, save_traces, SyntheticConfig, TraceSet};
use ccpo::trainer::{evaluate, load_splits, run, Checkpoint, Decider, MetricsRecord};
use ccpo::Error;

/// Length of an observation feature vector.
pub const CCPO_OBS_DIM: usize = 6;
/// Number of actions: guide answer, base answer, next round.
pub const CCPO_NUM_ACTIONS: usize = 3;

/// Outcome of an FFI call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CcpoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Numeric = 6,
    Usage = 7,
    Config = 8,
    Http = 9,
    Panic = 10,
}

impl From<&Error> for CcpoStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => CcpoStatus::Io,
            Error::Parse { .. } => CcpoStatus::Parse,
            Error::Validation { .. } => CcpoStatus::Validation,
            Error::Usage(_) => CcpoStatus::Usage,
            Error::Numeric { .. } => CcpoStatus::Numeric,
            Error::Config(_) => CcpoStatus::Config,
            Error::Http(_) => CcpoStatus::Http,
        }
    }
}

/// Evaluation summary over a trace set.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CcpoMetrics {
    /// Total cost over the evaluated traces, in cents.
    pub cost_cents: f64,
    pub coverage: f64,
    pub avg_len: f64,
    pub set_size: f64,
    pub n_episodes: usize,
}

impl From<&MetricsRecord> for CcpoMetrics {
    fn from(m: &MetricsRecord) -> Self {
        Self {
            cost_cents: m.cost_cents,
            coverage: m.coverage,
            avg_len: m.avg_len,
            set_size: m.set_size,
            n_episodes: m.n_episodes,
        }
    }
}

/// A loaded or generated trace corpus.
pub struct CcpoTraces {
    set: TraceSet,
}

/// A trained policy or fitted rule.
pub struct CcpoCheckpoint {
    ck: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(CcpoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CcpoStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CcpoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            CcpoStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CcpoStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(CcpoStatus::InvalidUtf8, format!("`{what}`: {e}")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread, or null after a success.
///
/// The pointer stays valid until the next ccpo call on the same thread.
#[no_mangle]
pub extern "C" fn ccpo_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads a trace file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccpo_traces_load(path: *const c_char, out: *mut *mut CcpoTraces) -> CcpoStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let set = load_traces(path)?;
        *out = Box::into_raw(Box::new(CcpoTraces { set }));
        Ok(())
    })
}

/// Generates a synthetic corpus from generator settings in TOML.
///
/// `config_toml` may be null or empty for the defaults.
///
/// # Safety
/// `config_toml` must be null or a valid NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccpo_traces_generate(config_toml: *const c_char, out: *mut *mut CcpoTraces) -> CcpoStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let text = if config_toml.is_null() { "" } else { str_arg(config_toml, "config_toml")? };
        let cfg: SyntheticConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let set = generate_synthetic(&cfg)?;
        *out = Box::into_raw(Box::new(CcpoTraces { set }));
        Ok(())
    })
}

/// Writes a corpus in the trace file format.
///
/// # Safety
/// `traces` must come from this library; `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ccpo_traces_save(traces: *const CcpoTraces, path: *const c_char) -> CcpoStatus {
    guard(|| {
        let t = ref_arg(traces, "traces")?;
        save_traces(str_arg(path, "path")?, &t.set)?;
        Ok(())
    })
}

/// Number of traces, or 0 for a null handle.
///
/// # Safety
/// `traces` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ccpo_traces_len(traces: *const CcpoTraces) -> usize {
    traces.as_ref().map_or(0, |t| t.set.len())
}

/// Horizon declared by the corpus, or 0 for a null handle.
///
/// # Safety
/// `traces` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ccpo_traces_horizon(traces: *const CcpoTraces) -> usize {
    traces.as_ref().map_or(0, |t| t.set.horizon())
}

/// # Safety
/// `traces` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ccpo_traces_free(traces: *mut CcpoTraces) {
    if !traces.is_null() {
        drop(Box::from_raw(traces));
    }
}

/// Reads a checkpoint written by `ccpo train` or [`ccpo_checkpoint_save`].
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccpo_checkpoint_load(path: *const c_char, out: *mut *mut CcpoCheckpoint) -> CcpoStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ck = Checkpoint::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(CcpoCheckpoint { ck }));
        Ok(())
    })
}

/// # Safety
/// `checkpoint` must come from this library; `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ccpo_checkpoint_save(checkpoint: *const CcpoCheckpoint, path: *const c_char) -> CcpoStatus {
    guard(|| {
        let c = ref_arg(checkpoint, "checkpoint")?;
        c.ck.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `checkpoint` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ccpo_checkpoint_free(checkpoint: *mut CcpoCheckpoint) {
    if !checkpoint.is_null() {
        drop(Box::from_raw(checkpoint));
    }
}

/// Deployment threshold of the checkpoint.
///
/// # Safety
/// `checkpoint` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccpo_checkpoint_kappa(checkpoint: *const CcpoCheckpoint, out: *mut f64) -> CcpoStatus {
    guard(|| {
        let c = ref_arg(checkpoint, "checkpoint")?;
        *out_arg(out, "out")? = c.ck.kappa;
        Ok(())
    })
}

unsafe fn policy_dist(
    checkpoint: *const CcpoCheckpoint,
    features: *const f64,
    round: usize,
) -> Result<(Categorical, f64), Failure> {
    let c = ref_arg(checkpoint, "checkpoint")?;
    if features.is_null() {
        return Err(null("features"));
    }
    let horizon = c.ck.horizon;
    if round == 0 || round > horizon {
        return Err(Error::Usage(format!("round {round} outside 1..={horizon}")).into());
    }
    let mut f = [0.0; CCPO_OBS_DIM];
    f.copy_from_slice(std::slice::from_raw_parts(features, CCPO_OBS_DIM));
    let obs = Observation {
        features: f,
        round,
        horizon,
    };
    match c.ck.decider()? {
        Decider::Conformal { params, kappa } => Ok((score(&params, &obs)?, kappa)),
        _ => Err(Error::Usage(format!("`{}` checkpoints have no score network", c.ck.method)).into()),
    }
}

/// Score-network probabilities for one observation.
///
/// `features` points to `CCPO_OBS_DIM` values; `round` is 1-based;
/// `out_probs` receives `CCPO_NUM_ACTIONS` values ordered guide answer,
/// base answer, next round.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ccpo_checkpoint_score(
    checkpoint: *const CcpoCheckpoint,
    features: *const f64,
    round: usize,
    out_probs: *mut f64,
) -> CcpoStatus {
    guard(|| {
        if out_probs.is_null() {
            return Err(null("out_probs"));
        }
        let (dist, _) = policy_dist(checkpoint, features, round)?;
        std::slice::from_raw_parts_mut(out_probs, CCPO_NUM_ACTIONS).copy_from_slice(dist.probs());
        Ok(())
    })
}

/// Conformal action set at the checkpoint threshold, as a bit mask
/// (bit 0 guide answer, bit 1 base answer, bit 2 next round).
///
/// # Safety
/// `features` must point to `CCPO_OBS_DIM` values; the other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccpo_checkpoint_conformal_set(
    checkpoint: *const CcpoCheckpoint,
    features: *const f64,
    round: usize,
    out_mask: *mut u8,
) -> CcpoStatus {
    guard(|| {
        let out = out_arg(out_mask, "out_mask")?;
        let (dist, kappa) = policy_dist(checkpoint, features, round)?;
        *out = conformal_set(&dist, kappa).bits();
        Ok(())
    })
}

/// Evaluates a checkpoint on a corpus with the checkpoint's prices and accounting.
///
/// # Safety
/// Handles must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccpo_evaluate(
    checkpoint: *const CcpoCheckpoint,
    traces: *const CcpoTraces,
    out: *mut CcpoMetrics,
) -> CcpoStatus {
    guard(|| {
        let c = ref_arg(checkpoint, "checkpoint")?;
        let t = ref_arg(traces, "traces")?;
        let out = out_arg(out, "out")?;
        if t.set.is_empty() {
            return Err(Error::Usage("trace set is empty".into()).into());
        }
        c.ck.check_traces(&t.set.traces)?;
        let cfg = &c.ck.config;
        let m = evaluate(&c.ck.decider()?, &t.set.traces, &cfg.env(), &cfg.prices(), cfg.cost_accounting, cfg.seed)?;
        *out = (&m).into();
        Ok(())
    })
}

/// Trains (or fits) the method named in a run config given as TOML.
///
/// On success `*out` holds the final checkpoint. When `out_metrics` is not
/// null it receives the test-split metrics, or all zeros when the config has
/// no test split.
///
/// # Safety
/// `config_toml` must be a valid NUL-terminated string; `out` must be valid;
/// `out_metrics` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ccpo_train(
    config_toml: *const c_char,
    out: *mut *mut CcpoCheckpoint,
    out_metrics: *mut CcpoMetrics,
) -> CcpoStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = RunConfig::from_toml_str(str_arg(config_toml, "config_toml")?, &[])?;
        let outcome = run(&cfg, &load_splits(&cfg)?)?;
        if let Some(m) = out_metrics.as_mut() {
            *m = outcome.metrics.as_ref().map(Into::into).unwrap_or_default();
        }
        *out = Box::into_raw(Box::new(CcpoCheckpoint { ck: outcome.checkpoint }));
        Ok(())
    })
}
