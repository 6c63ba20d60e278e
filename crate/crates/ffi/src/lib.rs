//! C interface to `lpt-seqopt`.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns an
//! [`LptStatus`]; on failure [`lpt_last_error`] describes what went wrong
//! on the calling thread. Strings handed out by the library must be
//! released with [`lpt_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lpt_seqopt::dso::{Dso, StopReason};
use lpt_seqopt::harness::config::RunConfig;
use lpt_seqopt::harness::experiment;
use lpt_seqopt::model::checkpoint::{Checkpoint, Dtype};
use lpt_seqopt::model::Lpt;
use lpt_seqopt::oracles::{Oracle, OracleDef};
use lpt_seqopt::sampler::chain_rng;
use lpt_seqopt::seqcore::{decode, encode, TokenSeq};
use lpt_seqopt::tensor::Mat;
use lpt_seqopt::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// A buffer argument is too small; the required length was written.
    BufferTooSmall = 3,
    InvalidSequence = 4,
    DimensionMismatch = 5,
    Config = 6,
    Io = 7,
    Parse = 8,
    BudgetExhausted = 9,
    Numerical = 10,
    Other = 11,
    /// A panic was caught at the boundary.
    Panic = 12,
}

pub struct LptOracle {
    inner: Oracle,
}

pub struct LptModel {
    inner: Lpt,
}

pub struct LptRun {
    // Declared first so it drops before the oracle it borrows.
    dso: Option<Dso<'static>>,
    oracle: *mut Oracle,
}

impl Drop for LptRun {
    fn drop(&mut self) {
        self.dso = None;
        if !self.oracle.is_null() {
            // SAFETY: created by Box::into_raw in lpt_run_new, freed once here
            // after the only borrower is gone.
            unsafe { drop(Box::from_raw(self.oracle)) };
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> LptStatus {
    match e {
        Error::UnknownSymbol { .. }
        | Error::SequenceTooLong { .. }
        | Error::SequenceTooShort
        | Error::WrongLength { .. }
        | Error::PrefixTooLong { .. } => LptStatus::InvalidSequence,
        Error::DimensionMismatch { .. } | Error::VocabMismatch => LptStatus::DimensionMismatch,
        Error::Config(_) | Error::NTooLarge { .. } | Error::UnknownRange | Error::SpaceTooLarge { .. } => LptStatus::Config,
        Error::Io { .. } => LptStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Checkpoint(_) => LptStatus::Parse,
        Error::BudgetExhausted { .. } => LptStatus::BudgetExhausted,
        Error::NonFiniteGradient { .. } => LptStatus::Numerical,
        _ => LptStatus::Other,
    }
}

struct Fail(LptStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), format!("{}: {e}", e.kind()))
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> LptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LptStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            LptStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(LptStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LptStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` must be null or point to a live handle of type `T`.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `p` must be null or point to a live handle of type `T`, not aliased.
unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|_| Fail(LptStatus::Other, "string contains NUL".into()))?;
    // SAFETY: checked non-null above.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Copies `vals` into a caller buffer of `cap` doubles and stores the
/// count in `len`. Reports `BufferTooSmall` (with `len` set) when it does
/// not fit.
///
/// # Safety
/// `out` must be valid for `cap` writes; `len` must be valid.
unsafe fn out_doubles(vals: &[f64], out: *mut f64, cap: usize, len: *mut usize) -> Result<(), Fail> {
    if len.is_null() {
        return Err(null("len"));
    }
    *len = vals.len();
    if vals.len() > cap {
        return Err(Fail(
            LptStatus::BufferTooSmall,
            format!("need room for {} values, got {cap}", vals.len()),
        ));
    }
    if out.is_null() && !vals.is_empty() {
        return Err(null("out"));
    }
    ptr::copy_nonoverlapping(vals.as_ptr(), out, vals.len());
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn lpt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn lpt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn lpt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds an oracle from its JSON definition.
///
/// # Safety
/// `def_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_oracle_new(def_json: *const c_char, out: *mut *mut LptOracle) -> LptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let def: OracleDef = serde_json::from_str(str_arg(def_json, "def_json")?).map_err(Error::from)?;
        let o = Oracle::from_def(&def)?;
        *out = Box::into_raw(Box::new(LptOracle { inner: o }));
        Ok(())
    })
}

/// Releases an oracle. Null is ignored.
///
/// # Safety
/// `o` must come from `lpt_oracle_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lpt_oracle_free(o: *mut LptOracle) {
    if !o.is_null() {
        drop(Box::from_raw(o));
    }
}

/// Scores one sequence (glyph string). Repeated sequences are served from
/// the memo and not counted again.
///
/// # Safety
/// `out` must hold `cap` doubles; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_oracle_query(
    o: *const LptOracle,
    sequence: *const c_char,
    out: *mut f64,
    cap: usize,
    len: *mut usize,
) -> LptStatus {
    guard(|| {
        let o = handle(o, "oracle")?;
        let x = encode(str_arg(sequence, "sequence")?, o.inner.vocab())?;
        let y = o.inner.query(&x)?;
        out_doubles(&y, out, cap, len)
    })
}

/// Number of metered (non-memoized) queries so far.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_oracle_queries(o: *const LptOracle, out: *mut u64) -> LptStatus {
    guard(|| {
        let o = handle(o, "oracle")?;
        *handle_mut(out, "out")? = o.inner.queries();
        Ok(())
    })
}

/// Number of objectives each query returns.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_oracle_n_objectives(o: *const LptOracle, out: *mut usize) -> LptStatus {
    guard(|| {
        let o = handle(o, "oracle")?;
        *handle_mut(out, "out")? = o.inner.n_objectives();
        Ok(())
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_model_load(path: *const c_char, out: *mut *mut LptModel) -> LptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = Checkpoint::load(Path::new(str_arg(path, "path")?))?.to_model()?;
        *out = Box::into_raw(Box::new(LptModel { inner: model }));
        Ok(())
    })
}

/// Writes the model to `path` in single precision.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lpt_model_save(m: *const LptModel, path: *const c_char) -> LptStatus {
    guard(|| {
        let m = handle(m, "model")?;
        Checkpoint::from_model(&m.inner, 0).save(Path::new(str_arg(path, "path")?), Dtype::F32)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lpt_model_free(m: *mut LptModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Dimension of the latent `z0`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_model_latent_dim(m: *const LptModel, out: *mut usize) -> LptStatus {
    guard(|| {
        let m = handle(m, "model")?;
        *handle_mut(out, "out")? = m.inner.latent_dim();
        Ok(())
    })
}

unsafe fn prompt(m: &Lpt, z0: *const f64, d: usize) -> Result<Mat, Fail> {
    if d != m.latent_dim() {
        return Err(Error::dims(m.latent_dim(), d).into());
    }
    if z0.is_null() {
        return Err(null("z0"));
    }
    let z0 = std::slice::from_raw_parts(z0, d);
    Ok(m.prior_forward(z0)?)
}

/// Samples a sequence from `z0` (length `d`) at the given temperature.
/// The result is a glyph string to release with `lpt_string_free`.
///
/// # Safety
/// `z0` must hold `d` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_model_generate(
    m: *const LptModel,
    z0: *const f64,
    d: usize,
    seed: u64,
    temperature: f64,
    out: *mut *mut c_char,
) -> LptStatus {
    guard(|| {
        let m = &handle(m, "model")?.inner;
        let z = prompt(m, z0, d)?;
        let mut rng = chain_rng(seed, 0, 0);
        let x = m.generate(&z, &TokenSeq::new(Vec::new()), &mut rng, temperature)?;
        out_string(decode(&x, m.vocab()), out)
    })
}

/// Predictor outputs at `z0`: means for regression heads, probabilities
/// for binary heads.
///
/// # Safety
/// `z0` must hold `d` doubles; `out` must hold `cap` doubles; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_model_predict(
    m: *const LptModel,
    z0: *const f64,
    d: usize,
    out: *mut f64,
    cap: usize,
    len: *mut usize,
) -> LptStatus {
    guard(|| {
        let m = &handle(m, "model")?.inner;
        let z = prompt(m, z0, d)?;
        out_doubles(&m.predict(&z)?, out, cap, len)
    })
}

/// Prepares an optimization run from a run-configuration JSON string:
/// builds the oracle and offline data, pretrains and finetunes, and fits
/// the initial buffer. Nothing is queried until the first step.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_run_new(config_json: *const c_char, seed: u64, out: *mut *mut LptRun) -> LptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::parse(str_arg(config_json, "config_json")?)?;
        let prepared = experiment::prepare(&cfg, seed, None)?;
        let oracle = Box::into_raw(Box::new(Oracle::from_def(&cfg.oracle)?));
        let mut run = LptRun { dso: None, oracle };
        // SAFETY: the oracle lives until `run` drops, after the Dso.
        let oracle_ref: &'static Oracle = &*oracle;
        run.dso = Some(Dso::new(prepared.model, &prepared.offline, oracle_ref, cfg.dso, seed)?);
        *out = Box::into_raw(Box::new(run));
        Ok(())
    })
}

/// Runs one propose/relabel/select/improve round. `finished` becomes 1
/// when a stop condition was reached.
///
/// # Safety
/// `finished` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_run_step(r: *mut LptRun, finished: *mut i32) -> LptStatus {
    guard(|| {
        let dso = dso_mut(r)?;
        let done = dso.state().stop.is_some() || dso.step()?.is_some();
        *handle_mut(finished, "finished")? = i32::from(done);
        Ok(())
    })
}

/// Runs until a stop condition.
///
/// # Safety
/// `r` must be a live run handle.
#[no_mangle]
pub unsafe extern "C" fn lpt_run_to_end(r: *mut LptRun) -> LptStatus {
    guard(|| Ok(dso_mut(r)?.run_to_end()?))
}

/// Oracle queries charged so far.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_run_queries_used(r: *mut LptRun, out: *mut u64) -> LptStatus {
    guard(|| {
        let q = dso_mut(r)?.state().queries_used;
        *handle_mut(out, "out")? = q;
        Ok(())
    })
}

/// Best ranking score seen so far (NaN before any labeled data).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_run_best(r: *mut LptRun, out: *mut f64) -> LptStatus {
    guard(|| {
        let best = dso_mut(r)?.state().best_ever.as_ref().map_or(f64::NAN, |b| b.score);
        *handle_mut(out, "out")? = best;
        Ok(())
    })
}

/// The run report as JSON; release with `lpt_string_free`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_run_report_json(r: *mut LptRun, out: *mut *mut c_char) -> LptStatus {
    guard(|| {
        let report = dso_mut(r)?.report();
        out_string(serde_json::to_string(&report).map_err(Error::from)?, out)
    })
}

/// Copies the current model into a new handle.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_run_model(r: *mut LptRun, out: *mut *mut LptModel) -> LptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = dso_mut(r)?.model().clone();
        *out = Box::into_raw(Box::new(LptModel { inner: model }));
        Ok(())
    })
}

/// Releases a run and its oracle. Null is ignored.
///
/// # Safety
/// `r` must come from `lpt_run_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lpt_run_free(r: *mut LptRun) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

unsafe fn dso_mut<'a>(r: *mut LptRun) -> Result<&'a mut Dso<'static>, Fail> {
    handle_mut(r, "run")?
        .dso
        .as_mut()
        .ok_or_else(|| Fail(LptStatus::Other, "run is not initialized".into()))
}

/// Whether the run stopped because the budget ran out.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lpt_run_budget_exhausted(r: *mut LptRun, out: *mut i32) -> LptStatus {
    guard(|| {
        let stop = dso_mut(r)?.state().stop;
        *handle_mut(out, "out")? = i32::from(stop == Some(StopReason::BudgetExhausted));
        Ok(())
    })
}
