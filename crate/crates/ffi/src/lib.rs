//! C interface to bidlab.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`BidlabStatus`]; the message of the last failure on the calling
//! thread is available from [`bidlab_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use bidlab::controllers::{AnyController, AnyState, Controller, Observation};
use bidlab::landscape::{BidLandscape, BidNoise, GaussianResponse, PriceGrid, Response, SmoothedLandscape};
use bidlab::market::{run_on_path, EpisodeTrace, FeedbackMode, LandscapeProcess};
use bidlab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BidlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    MissingFile = 4,
    Io = 5,
    Runtime = 6,
    Panic = 7,
    Utf8 = 8,
    OutOfRange = 9,
}

/// Feedback available to a controller at the start of a period.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BidlabObservation {
    pub period: usize,
    pub horizon: usize,
    pub remaining_goal: f64,
    pub last_volume: f64,
    pub last_spend: f64,
}

pub struct BidlabController(AnyController);
pub struct BidlabState(AnyState);
pub struct BidlabResponse(Arc<dyn Response>);
pub struct BidlabTrace(EpisodeTrace);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> BidlabStatus {
    match e {
        Error::Parse { .. } => BidlabStatus::Parse,
        Error::Missing(_) => BidlabStatus::MissingFile,
        Error::Io(_) => BidlabStatus::Io,
        Error::InvalidArgument(_) | Error::ShapeMismatch(_) | Error::Config(_) | Error::Cfl { .. } => {
            BidlabStatus::InvalidArgument
        }
        _ => BidlabStatus::Runtime,
    }
}

fn guard<F: FnOnce() -> Result<(), (BidlabStatus, String)>>(f: F) -> BidlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BidlabStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BidlabStatus::Panic
        }
    }
}

fn lib(e: Error) -> (BidlabStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (BidlabStatus, String) {
    (BidlabStatus::NullPointer, format!("{name} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, (BidlabStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (BidlabStatus::Utf8, format!("{name}: {e}")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (BidlabStatus, String)> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn in_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, (BidlabStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bidlab_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bidlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a PI or GRU model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bidlab_controller_load(path: *const c_char, out: *mut *mut BidlabController) -> BidlabStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = read_str(path, "path")?;
        let c = AnyController::load(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(BidlabController(c)));
        Ok(())
    })
}

/// Parses a model from the text of a model file.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bidlab_controller_from_text(
    text: *const c_char,
    out: *mut *mut BidlabController,
) -> BidlabStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let text = read_str(text, "text")?;
        let c = AnyController::from_model_text(text).map_err(lib)?;
        *out = Box::into_raw(Box::new(BidlabController(c)));
        Ok(())
    })
}

/// # Safety
/// `c` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn bidlab_controller_free(c: *mut BidlabController) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Highest bid the controller can emit (the penalty level).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bidlab_controller_max_bid(c: *const BidlabController, out: *mut f64) -> BidlabStatus {
    guard(|| {
        let c = in_ref(c, "controller")?;
        *out_ptr(out, "out")? = c.0.max_bid();
        Ok(())
    })
}

/// Fresh per-episode state for `c`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bidlab_state_new(c: *const BidlabController, out: *mut *mut BidlabState) -> BidlabStatus {
    guard(|| {
        let c = in_ref(c, "controller")?;
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(BidlabState(c.0.init_state())));
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn bidlab_state_free(s: *mut BidlabState) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Bid for the observed period; advances `state`.
///
/// # Safety
/// Pointers must be valid and `state` must come from the same controller.
#[no_mangle]
pub unsafe extern "C" fn bidlab_controller_act(
    c: *const BidlabController,
    state: *mut BidlabState,
    obs: *const BidlabObservation,
    bid: *mut f64,
) -> BidlabStatus {
    guard(|| {
        let c = in_ref(c, "controller")?;
        let state = out_ptr(state, "state")?;
        let o = in_ref(obs, "observation")?;
        let bid = out_ptr(bid, "bid")?;
        let matches = matches!(
            (&c.0, &state.0),
            (AnyController::Pi(_), AnyState::Pi(_)) | (AnyController::Gru(_), AnyState::Gru(_))
        );
        if !matches {
            return Err((BidlabStatus::InvalidArgument, "state belongs to another controller kind".into()));
        }
        if o.horizon == 0 || o.period >= o.horizon {
            return Err((
                BidlabStatus::OutOfRange,
                format!("period {} outside horizon {}", o.period, o.horizon),
            ));
        }
        *bid = c.0.act(
            &mut state.0,
            &Observation {
                period: o.period,
                horizon: o.horizon,
                remaining_goal: o.remaining_goal,
                last_volume: o.last_volume,
                last_spend: o.last_spend,
            },
        );
        Ok(())
    })
}

fn put_response(out: *mut *mut BidlabResponse, r: Arc<dyn Response>) -> Result<(), (BidlabStatus, String)> {
    let out = unsafe { out_ptr(out, "out")? };
    *out = Box::into_raw(Box::new(BidlabResponse(r)));
    Ok(())
}

/// Log-normal landscape on the standard price grid, smoothed by Gamma bid
/// noise of the given shape. `gamma_shape <= 0` keeps exact (Dirac) bids.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bidlab_response_lognormal(
    median: f64,
    log_sd: f64,
    gamma_shape: f64,
    out: *mut *mut BidlabResponse,
) -> BidlabStatus {
    guard(|| {
        let l = BidLandscape::lognormal(Arc::new(PriceGrid::standard()), median, log_sd).map_err(lib)?;
        let noise = if gamma_shape > 0.0 {
            BidNoise::Gamma { shape: gamma_shape }
        } else {
            BidNoise::Dirac
        };
        let r = SmoothedLandscape::new(Arc::new(l), noise).map_err(lib)?;
        put_response(out, Arc::new(r))
    })
}

/// Normal winning-price response with the given mean and standard deviation.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bidlab_response_gaussian(mean: f64, sd: f64, out: *mut *mut BidlabResponse) -> BidlabStatus {
    guard(|| {
        let r = GaussianResponse::new(mean, sd).map_err(lib)?;
        put_response(out, Arc::new(r))
    })
}

/// # Safety
/// `r` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn bidlab_response_free(r: *mut BidlabResponse) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Win probability and expected spend per available impression at `bid`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bidlab_response_eval(
    r: *const BidlabResponse,
    bid: f64,
    win: *mut f64,
    spend: *mut f64,
) -> BidlabStatus {
    guard(|| {
        let r = in_ref(r, "response")?;
        if !(bid >= 0.0) {
            return Err((BidlabStatus::InvalidArgument, format!("bid must be >= 0, got {bid}")));
        }
        let p = r.0.eval(bid);
        *out_ptr(win, "win")? = p.win;
        *out_ptr(spend, "spend")? = p.spend;
        Ok(())
    })
}

/// Plays `c` over `n` periods of the given intensities with expected feedback.
///
/// # Safety
/// `intensities` must point to `n` readable values; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bidlab_run_episode(
    c: *const BidlabController,
    r: *const BidlabResponse,
    intensities: *const f64,
    n: usize,
    goal: f64,
    penalty: f64,
    out: *mut *mut BidlabTrace,
) -> BidlabStatus {
    guard(|| {
        let c = in_ref(c, "controller")?;
        let r = in_ref(r, "response")?;
        let out = out_ptr(out, "out")?;
        if intensities.is_null() {
            return Err(null("intensities"));
        }
        if n == 0 {
            return Err((BidlabStatus::InvalidArgument, "episode needs at least one period".into()));
        }
        let path = std::slice::from_raw_parts(intensities, n);
        let trace = run_on_path(
            &c.0,
            path,
            &LandscapeProcess::Constant(r.0.clone()),
            goal,
            penalty,
            FeedbackMode::Expected,
            0,
        )
        .map_err(lib)?;
        *out = Box::into_raw(Box::new(BidlabTrace(trace)));
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn bidlab_trace_free(t: *mut BidlabTrace) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of periods in the trace; 0 for a null handle.
///
/// # Safety
/// `t` must be null or a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bidlab_trace_len(t: *const BidlabTrace) -> usize {
    t.as_ref().map_or(0, |t| t.0.bids.len())
}

/// Bid, won volume and spend of period `period`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bidlab_trace_period(
    t: *const BidlabTrace,
    period: usize,
    bid: *mut f64,
    volume: *mut f64,
    spend: *mut f64,
) -> BidlabStatus {
    guard(|| {
        let t = &in_ref(t, "trace")?.0;
        if period >= t.bids.len() {
            return Err((
                BidlabStatus::OutOfRange,
                format!("period {period} outside trace of {}", t.bids.len()),
            ));
        }
        *out_ptr(bid, "bid")? = t.bids[period];
        *out_ptr(volume, "volume")? = t.volumes[period];
        *out_ptr(spend, "spend")? = t.spends[period];
        Ok(())
    })
}

/// Final cost and the penalty part of it.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bidlab_trace_cost(t: *const BidlabTrace, cost: *mut f64, penalty_paid: *mut f64) -> BidlabStatus {
    guard(|| {
        let t = &in_ref(t, "trace")?.0;
        *out_ptr(cost, "cost")? = t.final_cost;
        *out_ptr(penalty_paid, "penalty_paid")? = t.penalty_paid();
        Ok(())
    })
}
