//! C ABI over `bvsmooth`.
//!
//! Objects are opaque handles created by `bv_*_new`/`bv_*_from_json` and
//! released by the matching `bv_*_free`. Every fallible call returns a
//! [`BvStatus`]; on failure the message is kept per thread and can be read
//! with [`bv_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bvsmooth::experiments::{
    run_bound_verify, run_linear_experiment, run_nonlinear_experiment, ExperimentConfig,
    ExperimentKind,
};
use bvsmooth::kalman::{kalman_smoother, smoothed_additive};
use bvsmooth::ssm::{simulate_lg, AdditiveFunctional, LGParams};
use bvsmooth::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    DimMismatch = 4,
    NotPositiveDefinite = 5,
    NonFinite = 6,
    WeightCollapse = 7,
    BoundViolation = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
    Other = 12,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> BvStatus {
    match err {
        Error::InvalidArgument(_) | Error::LengthMismatch(_) => BvStatus::InvalidArgument,
        Error::InvalidConfig(_) | Error::Json(_) => BvStatus::InvalidConfig,
        Error::DimMismatch(_) => BvStatus::DimMismatch,
        Error::NotPositiveDefinite { .. } => BvStatus::NotPositiveDefinite,
        Error::NonFiniteValue(_) => BvStatus::NonFinite,
        Error::WeightCollapse { .. } => BvStatus::WeightCollapse,
        Error::BoundViolation { .. } => BvStatus::BoundViolation,
        Error::Io(_) | Error::Csv(_) => BvStatus::Io,
        _ => BvStatus::Other,
    }
}

fn fail(status: BvStatus, msg: impl Into<String>) -> BvStatus {
    set_error(msg);
    status
}

/// Runs `f`, mapping errors and panics to a status.
fn guard(f: impl FnOnce() -> Result<(), BvStatus>) -> BvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BvStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(BvStatus::Panic, "panic inside bvsmooth"),
    }
}

fn lift(err: Error) -> BvStatus {
    fail(status_of(&err), err.to_string())
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, BvStatus> {
    if s.is_null() {
        return Err(fail(BvStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(BvStatus::InvalidArgument, "string is not UTF-8"))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize) -> Result<&'a mut [f64], BvStatus> {
    if p.is_null() {
        return Err(fail(BvStatus::NullPointer, "null output buffer"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Copies the last error message (NUL-terminated, truncated to fit) into
/// `buf` and returns the full message length in bytes, excluding the NUL.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn bv_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Linear-Gaussian state-space model.
pub struct BvModel {
    params: LGParams,
}

/// Kalman smoothing result for one observation sequence.
pub struct BvSmoothed {
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<f64>>,
    state_sum: Vec<f64>,
    loglik: f64,
}

/// Scalar model `x0 ~ N(a0, q0)`, `x' = a x + N(0, q)`, `y = b x + N(0, r)`.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn bv_model_new_scalar(
    a0: f64,
    q0: f64,
    a: f64,
    q: f64,
    b: f64,
    r: f64,
    out: *mut *mut BvModel,
) -> BvStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(BvStatus::NullPointer, "null output handle"));
        }
        let params = LGParams::scalar(a0, q0, a, q, b, r);
        params.validate().map_err(lift)?;
        *out = Box::into_raw(Box::new(BvModel { params }));
        Ok(())
    })
}

/// Model from JSON with fields `a0, q0, a, q, b, r` (matrices as row lists).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` valid for one pointer.
#[no_mangle]
pub unsafe extern "C" fn bv_model_from_json(
    json: *const c_char,
    out: *mut *mut BvModel,
) -> BvStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(BvStatus::NullPointer, "null output handle"));
        }
        let text = read_str(json)?;
        let params: LGParams = serde_json::from_str(text).map_err(|e| lift(e.into()))?;
        params.validate().map_err(lift)?;
        *out = Box::into_raw(Box::new(BvModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from a `bv_model_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn bv_model_free(model: *mut BvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bv_model_state_dim(model: *const BvModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.state_dim())
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bv_model_obs_dim(model: *const BvModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.obs_dim())
}

/// Simulates `x_{0:n}`, `y_{0:n}` into row-major buffers of
/// `(n+1)·state_dim` and `(n+1)·obs_dim` doubles.
///
/// # Safety
/// `model` must be a live handle; buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn bv_simulate(
    model: *const BvModel,
    n: usize,
    seed: u64,
    states: *mut f64,
    observations: *mut f64,
) -> BvStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(BvStatus::NullPointer, "null model"))?;
        let (dx, dy) = (m.params.state_dim(), m.params.obs_dim());
        let xs = out_slice(states, (n + 1) * dx)?;
        let ys = out_slice(observations, (n + 1) * dy)?;
        let traj = simulate_lg(&m.params, n, seed).map_err(lift)?;
        for (k, (x, y)) in traj.states.iter().zip(&traj.observations).enumerate() {
            xs[k * dx..(k + 1) * dx].copy_from_slice(x);
            ys[k * dy..(k + 1) * dy].copy_from_slice(y);
        }
        Ok(())
    })
}

/// Exact smoothing of `n_obs` observations stored row-major in `ys`.
///
/// # Safety
/// `ys` must hold `n_obs·obs_dim` doubles; `out` valid for one pointer.
#[no_mangle]
pub unsafe extern "C" fn bv_kalman_smooth(
    model: *const BvModel,
    ys: *const f64,
    n_obs: usize,
    out: *mut *mut BvSmoothed,
) -> BvStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(BvStatus::NullPointer, "null model"))?;
        if ys.is_null() || out.is_null() {
            return Err(fail(
                BvStatus::NullPointer,
                "null observations or output handle",
            ));
        }
        if n_obs == 0 {
            return Err(fail(
                BvStatus::InvalidArgument,
                "need at least one observation",
            ));
        }
        let dy = m.params.obs_dim();
        let flat = std::slice::from_raw_parts(ys, n_obs * dy);
        let obs: Vec<Vec<f64>> = flat.chunks(dy).map(<[f64]>::to_vec).collect();
        let (fs, sm) = kalman_smoother(&m.params, &obs).map_err(lift)?;
        let state_sum =
            smoothed_additive(&sm, &AdditiveFunctional::state_sum(m.params.state_dim()))
                .map_err(lift)?;
        let result = BvSmoothed {
            means: sm.marginals.iter().map(|g| g.mean.clone()).collect(),
            covs: sm
                .marginals
                .iter()
                .map(|g| g.cov.as_slice().to_vec())
                .collect(),
            state_sum,
            loglik: fs.loglik,
        };
        *out = Box::into_raw(Box::new(result));
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle from [`bv_kalman_smooth`].
#[no_mangle]
pub unsafe extern "C" fn bv_smoothed_free(s: *mut BvSmoothed) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of smoothing marginals (`n + 1`).
///
/// # Safety
/// `s` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bv_smoothed_len(s: *const BvSmoothed) -> usize {
    s.as_ref().map_or(0, |s| s.means.len())
}

/// # Safety
/// `s` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bv_smoothed_loglik(s: *const BvSmoothed) -> f64 {
    s.as_ref().map_or(f64::NAN, |s| s.loglik)
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, cap: usize) -> Result<(), BvStatus> {
    if cap < src.len() {
        return Err(fail(
            BvStatus::BufferTooSmall,
            format!("buffer holds {cap} values, need {}", src.len()),
        ));
    }
    out_slice(dst, src.len())?.copy_from_slice(src);
    Ok(())
}

/// Smoothed mean of `x_k` (`state_dim` values).
///
/// # Safety
/// `s` must be a live handle and `out` valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn bv_smoothed_mean(
    s: *const BvSmoothed,
    k: usize,
    out: *mut f64,
    cap: usize,
) -> BvStatus {
    guard(|| {
        let s = s
            .as_ref()
            .ok_or_else(|| fail(BvStatus::NullPointer, "null handle"))?;
        let m = s
            .means
            .get(k)
            .ok_or_else(|| fail(BvStatus::InvalidArgument, format!("index {k} out of range")))?;
        copy_out(m, out, cap)
    })
}

/// Smoothed covariance of `x_k`, row-major (`state_dim²` values).
///
/// # Safety
/// `s` must be a live handle and `out` valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn bv_smoothed_cov(
    s: *const BvSmoothed,
    k: usize,
    out: *mut f64,
    cap: usize,
) -> BvStatus {
    guard(|| {
        let s = s
            .as_ref()
            .ok_or_else(|| fail(BvStatus::NullPointer, "null handle"))?;
        let c = s
            .covs
            .get(k)
            .ok_or_else(|| fail(BvStatus::InvalidArgument, format!("index {k} out of range")))?;
        copy_out(c, out, cap)
    })
}

/// `E[Σ_{k<n} x_k | y_{0:n}]` (`state_dim` values).
///
/// # Safety
/// `s` must be a live handle and `out` valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn bv_smoothed_state_sum(
    s: *const BvSmoothed,
    out: *mut f64,
    cap: usize,
) -> BvStatus {
    guard(|| {
        let s = s
            .as_ref()
            .ok_or_else(|| fail(BvStatus::NullPointer, "null handle"))?;
        copy_out(&s.state_sum, out, cap)
    })
}

/// Runs the experiment described by a JSON config (same schema as the CLI),
/// writing into `out_dir`. The config must set `kind`.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn bv_run_experiment(
    config_json: *const c_char,
    out_dir: *const c_char,
) -> BvStatus {
    guard(|| {
        let text = read_str(config_json)?;
        let dir = read_str(out_dir)?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| fail(BvStatus::InvalidConfig, e.to_string()))?;
        cfg.output_dir = Some(PathBuf::from(dir));
        let result = match cfg.kind {
            Some(ExperimentKind::Linear) => run_linear_experiment(&cfg),
            Some(ExperimentKind::Nonlinear) => run_nonlinear_experiment(&cfg),
            Some(ExperimentKind::BoundVerify) => run_bound_verify(&cfg),
            None => return Err(fail(BvStatus::InvalidConfig, "config has no kind")),
        };
        result.map(|_| ()).map_err(lift)
    })
}
