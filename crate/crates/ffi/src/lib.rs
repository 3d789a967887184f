//! C ABI over the core crate.
//!
//! Every entry point returns an [`EveStatus`]. On failure the message is
//! kept per thread and read back with [`eve_last_error_message`]. Handles
//! are opaque; free them with the matching `*_free` function.
//!
//! Panics are caught at the boundary and reported as `EVE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use eve_core::backbone::{Model, Noise};
use eve_core::controller::{calibrate_basic, route, uncertainty_score, Action, ControllerSidecar, ScoreConfig, Thresholds};
use eve_core::data::EmbeddingTable;
use eve_core::metrics::{argmax, predictive_readout};
use eve_core::retention::load_checkpoint;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EveStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Model = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EveAction {
    Answer = 0,
    DeliberateMore = 1,
    RetrieveOrResample = 2,
    AbstainOrEscalate = 3,
}

impl From<Action> for EveAction {
    fn from(a: Action) -> Self {
        match a {
            Action::Answer => EveAction::Answer,
            Action::DeliberateMore => EveAction::DeliberateMore,
            Action::RetrieveOrResample => EveAction::RetrieveOrResample,
            Action::AbstainOrEscalate => EveAction::AbstainOrEscalate,
        }
    }
}

/// Per-example uncertainty readout of a Monte Carlo prediction.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EveReadout {
    pub predictive_entropy: f64,
    pub conditional_entropy: f64,
    pub mutual_information: f64,
    pub epi: f64,
    pub flip_rate: f64,
    pub confidence: f64,
    /// Top-1 token of the predictive mean.
    pub predicted: u32,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EveThresholds {
    pub uq_green: f64,
    pub uq_orange: f64,
    pub uq_red: f64,
}

/// Opaque handle: a checkpointed backbone with its embedding table.
pub struct EveModel {
    model: Model,
}

/// Opaque handle: score settings plus routing thresholds.
pub struct EveController {
    sidecar: ControllerSidecar,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(EveStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(EveStatus::NullPointer, format!("{what} is null"))
    }

    fn invalid(msg: impl ToString) -> Self {
        Failure(EveStatus::InvalidArgument, msg.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EveStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EveStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside eve".into());
            EveStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn thresholds_of(t: &Thresholds) -> EveThresholds {
    EveThresholds {
        uq_green: t.uq_green,
        uq_orange: t.uq_orange,
        uq_red: t.uq_red,
    }
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next eve call on the same thread.
#[no_mangle]
pub extern "C" fn eve_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint and the embedding table it was trained with.
///
/// # Safety
/// Paths must be nul-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eve_model_load(
    checkpoint_path: *const c_char,
    embedding_path: *const c_char,
    out: *mut *mut EveModel,
) -> EveStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ckpt = path_arg(checkpoint_path, "checkpoint_path")?;
        let emb = path_arg(embedding_path, "embedding_path")?;
        let ck = load_checkpoint(&ckpt).map_err(|e| Failure(EveStatus::Format, e.to_string()))?;
        let dims = Some((ck.config.vocab_size, ck.config.embed_dim));
        let table = EmbeddingTable::load(&emb, dims).map_err(|e| Failure(EveStatus::Io, e.to_string()))?;
        let model = Model::from_params(ck.config, Arc::new(table), ck.params)
            .map_err(|e| Failure(EveStatus::Model, e.to_string()))?;
        *out = Box::into_raw(Box::new(EveModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `eve_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn eve_model_free(model: *mut EveModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the vocabulary size and required context length.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn eve_model_shape(
    model: *const EveModel,
    vocab_size: *mut usize,
    context_len: *mut usize,
) -> EveStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| Failure::null("model"))?.model;
        *out_arg(vocab_size, "vocab_size")? = m.config.vocab_size;
        *out_arg(context_len, "context_len")? = m.config.context_len;
        Ok(())
    })
}

/// Runs `mc_samples` passes on one context and writes the readout and,
/// when `probs` is non-null, the predictive mean (`probs_len` must equal
/// the vocabulary size).
///
/// # Safety
/// `tokens` must point to `n_tokens` values; `probs` to `probs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eve_model_predict(
    model: *const EveModel,
    tokens: *const u32,
    n_tokens: usize,
    key: u64,
    mc_samples: u32,
    seed: u64,
    readout: *mut EveReadout,
    probs: *mut f64,
    probs_len: usize,
) -> EveStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| Failure::null("model"))?.model;
        let ctx = slice_arg(tokens, n_tokens, "tokens")?;
        let readout = out_arg(readout, "readout")?;
        if mc_samples == 0 {
            return Err(Failure::invalid("mc_samples must be >= 1"));
        }
        if !probs.is_null() && probs_len != m.config.vocab_size {
            return Err(Failure::invalid(format!("probs_len {probs_len} != vocab size {}", m.config.vocab_size)));
        }
        let noise = Noise::Seeded {
            seed,
            passes: mc_samples as usize,
        };
        let pred = m
            .predict_batch(&[ctx], &[key], &noise)
            .map_err(|e| Failure::invalid(e.to_string()))?
            .remove(0);
        let passes: Vec<&[f64]> = pred.passes.iter().map(|p| p.probabilities.as_slice()).collect();
        let r = predictive_readout(&passes).map_err(|e| Failure(EveStatus::Model, e.to_string()))?;
        *readout = EveReadout {
            predictive_entropy: r.predictive_entropy,
            conditional_entropy: r.conditional_entropy,
            mutual_information: r.mutual_information,
            epi: r.epi,
            flip_rate: r.top1_flip_rate_mc,
            confidence: r.confidence,
            predicted: argmax(&pred.mean) as u32,
        };
        if !probs.is_null() {
            std::slice::from_raw_parts_mut(probs, probs_len).copy_from_slice(&pred.mean);
        }
        Ok(())
    })
}

/// Controller with the default score settings.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eve_controller_new(thresholds: EveThresholds, out: *mut *mut EveController) -> EveStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let t = Thresholds::new(thresholds.uq_green, thresholds.uq_orange, thresholds.uq_red)
            .map_err(Failure::invalid)?;
        *out = Box::into_raw(Box::new(EveController {
            sidecar: ControllerSidecar {
                thresholds: t,
                score: ScoreConfig::default(),
            },
        }));
        Ok(())
    })
}

/// Loads a controller sidecar written by the calibrate stage.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eve_controller_load(path: *const c_char, out: *mut *mut EveController) -> EveStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let sidecar = ControllerSidecar::load(&path).map_err(|e| Failure(EveStatus::Format, e.to_string()))?;
        *out = Box::into_raw(Box::new(EveController { sidecar }));
        Ok(())
    })
}

/// # Safety
/// `ctl` must come from `eve_controller_new`/`_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn eve_controller_free(ctl: *mut EveController) {
    if !ctl.is_null() {
        drop(Box::from_raw(ctl));
    }
}

/// # Safety
/// `ctl` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eve_controller_thresholds(ctl: *const EveController, out: *mut EveThresholds) -> EveStatus {
    guard(|| {
        let c = ctl.as_ref().ok_or_else(|| Failure::null("controller"))?;
        *out_arg(out, "out")? = thresholds_of(&c.sidecar.thresholds);
        Ok(())
    })
}

/// Unified uncertainty score in `[0, 1]`.
///
/// # Safety
/// `ctl` must be a live handle; `readout` readable, `score` writable.
#[no_mangle]
pub unsafe extern "C" fn eve_controller_score(
    ctl: *const EveController,
    readout: *const EveReadout,
    score: *mut f64,
) -> EveStatus {
    guard(|| {
        let c = ctl.as_ref().ok_or_else(|| Failure::null("controller"))?;
        let r = readout.as_ref().ok_or_else(|| Failure::null("readout"))?;
        let core = eve_core::metrics::UncertaintyReadout {
            predictive_entropy: r.predictive_entropy,
            conditional_entropy: r.conditional_entropy,
            mutual_information: r.mutual_information,
            epi: r.epi,
            top1_flip_rate_mc: r.flip_rate,
            confidence: r.confidence,
        };
        *out_arg(score, "score")? = uncertainty_score(&core, &c.sidecar.score).map_err(Failure::invalid)?;
        Ok(())
    })
}

/// Maps a score to an action.
///
/// # Safety
/// `ctl` must be a live handle; `action` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eve_controller_route(ctl: *const EveController, score: f64, action: *mut EveAction) -> EveStatus {
    guard(|| {
        let c = ctl.as_ref().ok_or_else(|| Failure::null("controller"))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Failure::invalid(format!("score {score} outside [0, 1]")));
        }
        *out_arg(action, "action")? = route(score, &c.sidecar.thresholds).into();
        Ok(())
    })
}

/// Quantile thresholds over calibration scores.
///
/// # Safety
/// `scores` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eve_calibrate_basic(
    scores: *const f64,
    n: usize,
    q_green: f64,
    q_orange: f64,
    q_red: f64,
    out: *mut EveThresholds,
) -> EveStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let t = calibrate_basic(s, (q_green, q_orange, q_red)).map_err(Failure::invalid)?;
        *out_arg(out, "out")? = thresholds_of(&t);
        Ok(())
    })
}
