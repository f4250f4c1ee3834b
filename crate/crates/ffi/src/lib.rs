//! C ABI for the relocation solver and the evaluation metrics.
//!
//! Every fallible function returns an `SpoStatus` code and writes results
//! through out-pointers. On failure, `spo_last_error_message` returns the
//! reason for the calling thread. Handles are opaque and owned by the caller
//! until passed to the matching `*_free`.
//!
//! Flow arrays are origin-major: `flows[i * n + j]` moves vehicles from grid
//! `i` to grid `j`. Square matrices passed in use the same layout.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use spo_core::commands::{cmd_solve_once, SolveInput, SolveReport};
use spo_core::config::RunConfig;
use spo_core::{AdmmConfig, RelocationInstance, SpoError};

/// Status codes. The numbering of 2..4 matches the `spo` exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpoStatus {
    Ok = 0,
    NullPointer = 1,
    Invalid = 2,
    NotConverged = 3,
    Io = 4,
    Panic = 5,
}

/// Solver settings. Obtain defaults from `spo_admm_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpoAdmmOptions {
    pub rho: f64,
    pub xi: f64,
    pub k_max: usize,
    /// KKT residuals must also fall below `kkt_factor * xi`; 0 disables.
    pub kkt_factor: f64,
}

impl From<AdmmConfig> for SpoAdmmOptions {
    fn from(c: AdmmConfig) -> Self {
        SpoAdmmOptions {
            rho: c.rho,
            xi: c.xi,
            k_max: c.k_max,
            kkt_factor: c.kkt_factor,
        }
    }
}

impl From<SpoAdmmOptions> for AdmmConfig {
    fn from(o: SpoAdmmOptions) -> Self {
        AdmmConfig {
            rho: o.rho,
            xi: o.xi,
            k_max: o.k_max,
            kkt_factor: o.kkt_factor,
        }
    }
}

/// A relocation instance with an optional free-vehicle forecast.
pub struct SpoInstance {
    input: SolveInput,
}

/// Result of one solve.
pub struct SpoSolution {
    report: SolveReport,
    flat: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &SpoError) -> SpoStatus {
    match err.exit_code() {
        4 => SpoStatus::Io,
        _ => SpoStatus::Invalid,
    }
}

fn fail(err: SpoError) -> SpoStatus {
    let s = status_of(&err);
    set_error(err.to_string());
    s
}

/// Runs `f`, turning a panic into `SpoStatus::Panic`.
fn guard(f: impl FnOnce() -> SpoStatus) -> SpoStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SpoStatus::Panic
        }
    }
}

macro_rules! nonnull {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            set_error(concat!("null pointer: ", stringify!($p)));
            return SpoStatus::NullPointer;
        })+
    };
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> &'a [f64] {
    if len == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(p, len)
    }
}

fn square(flat: &[f64], n: usize) -> Vec<Vec<f64>> {
    flat.chunks(n.max(1)).map(<[f64]>::to_vec).collect()
}

fn boxed_instance(input: SolveInput, out: *mut *mut SpoInstance) -> SpoStatus {
    if let Err(e) = input.instance.validate() {
        return fail(e);
    }
    if let Some(f) = &input.predicted_free {
        if f.len() != input.instance.n_grids {
            set_error(format!(
                "dimension mismatch in predicted_free: expected {}, got {}",
                input.instance.n_grids,
                f.len()
            ));
            return SpoStatus::Invalid;
        }
    }
    unsafe { *out = Box::into_raw(Box::new(SpoInstance { input })) };
    SpoStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn spo_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn spo_admm_options_default() -> SpoAdmmOptions {
    AdmmConfig::default().into()
}

/// Builds an instance from raw arrays. `supply` and `target` hold `n`
/// values, `travel_time` and `cost` hold `n * n`. `predicted_free` may be
/// NULL (treated as zero).
///
/// # Safety
/// Non-null pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn spo_instance_new(
    n: usize,
    supply: *const f64,
    target: *const f64,
    travel_time: *const f64,
    cost: *const f64,
    budget: f64,
    interval: f64,
    predicted_free: *const f64,
    out: *mut *mut SpoInstance,
) -> SpoStatus {
    guard(|| {
        nonnull!(supply, target, travel_time, cost, out);
        let Some(nn) = n.checked_mul(n) else {
            set_error("n is too large");
            return SpoStatus::Invalid;
        };
        let instance = RelocationInstance {
            n_grids: n,
            supply: slice(supply, n).to_vec(),
            target: slice(target, n).to_vec(),
            travel_time: square(slice(travel_time, nn), n),
            cost: square(slice(cost, nn), n),
            budget,
            interval,
        };
        let predicted_free = (!predicted_free.is_null()).then(|| slice(predicted_free, n).to_vec());
        boxed_instance(SolveInput { instance, predicted_free }, out)
    })
}

/// Parses an instance from the JSON document accepted by `spo solve-once`.
///
/// # Safety
/// `json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spo_instance_from_json(json: *const c_char, out: *mut *mut SpoInstance) -> SpoStatus {
    guard(|| {
        nonnull!(json, out);
        let text = match CStr::from_ptr(json).to_str() {
            Ok(t) => t,
            Err(e) => {
                set_error(format!("instance json is not UTF-8: {e}"));
                return SpoStatus::Invalid;
            }
        };
        match serde_json::from_str::<SolveInput>(text) {
            Ok(input) => boxed_instance(input, out),
            Err(e) => {
                set_error(format!("malformed instance json: {e}"));
                SpoStatus::Invalid
            }
        }
    })
}

/// # Safety
/// `inst` must come from `spo_instance_new` or `spo_instance_from_json` and
/// not have been freed. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn spo_instance_free(inst: *mut SpoInstance) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

/// # Safety
/// `inst` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spo_instance_n_grids(inst: *const SpoInstance) -> usize {
    inst.as_ref().map_or(0, |i| i.input.instance.n_grids)
}

/// Solves the relocation program. `options` may be NULL for defaults.
/// Returns `NotConverged` when the iteration cap is hit; the last iterate is
/// still written to `out` and must be freed.
///
/// # Safety
/// `inst` must be a live handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spo_solve(
    inst: *const SpoInstance,
    options: *const SpoAdmmOptions,
    out: *mut *mut SpoSolution,
) -> SpoStatus {
    guard(|| {
        nonnull!(inst, out);
        let mut cfg = RunConfig::default();
        if let Some(o) = options.as_ref() {
            cfg.admm = (*o).into();
        }
        let report = match cmd_solve_once(&cfg, &(*inst).input) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        let converged = report.converged();
        let flat = report.flows.concat();
        *out = Box::into_raw(Box::new(SpoSolution { report, flat }));
        if converged {
            SpoStatus::Ok
        } else {
            set_error(format!("no convergence within {} iterations", cfg.admm.k_max));
            SpoStatus::NotConverged
        }
    })
}

/// # Safety
/// `sol` must come from `spo_solve` and not have been freed. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn spo_solution_free(sol: *mut SpoSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// Number of flow entries, `n * n`.
///
/// # Safety
/// `sol` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spo_solution_len(sol: *const SpoSolution) -> usize {
    sol.as_ref().map_or(0, |s| s.flat.len())
}

/// Copies the flows into `buf`, which must hold `spo_solution_len` values.
///
/// # Safety
/// `buf` must be writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn spo_solution_flows(sol: *const SpoSolution, buf: *mut f64, len: usize) -> SpoStatus {
    guard(|| {
        nonnull!(sol, buf);
        let flat = &(*sol).flat;
        if len != flat.len() {
            set_error(format!("dimension mismatch in flows: expected {}, got {len}", flat.len()));
            return SpoStatus::Invalid;
        }
        std::ptr::copy_nonoverlapping(flat.as_ptr(), buf, len);
        SpoStatus::Ok
    })
}

/// # Safety
/// `sol` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spo_solution_converged(sol: *const SpoSolution) -> bool {
    sol.as_ref().is_some_and(|s| s.report.converged())
}

/// # Safety
/// `sol` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spo_solution_iterations(sol: *const SpoSolution) -> usize {
    sol.as_ref().map_or(0, |s| s.report.iterations)
}

/// Matching objective `½‖arrivals − required‖²`. NaN for NULL.
///
/// # Safety
/// `sol` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spo_solution_objective(sol: *const SpoSolution) -> f64 {
    sol.as_ref().map_or(f64::NAN, |s| s.report.objective)
}

/// Total incentive spent by the plan. NaN for NULL.
///
/// # Safety
/// `sol` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spo_solution_spend(sol: *const SpoSolution) -> f64 {
    sol.as_ref().map_or(f64::NAN, |s| s.report.spend)
}

/// Largest constraint violation of the plan. NaN for NULL.
///
/// # Safety
/// `sol` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spo_solution_max_violation(sol: *const SpoSolution) -> f64 {
    sol.as_ref().map_or(f64::NAN, |s| s.report.feasibility.max())
}

unsafe fn metric(
    f: fn(&[f64], &[f64]) -> spo_core::Result<f64>,
    matched: *const f64,
    target: *const f64,
    len: usize,
    out: *mut f64,
) -> SpoStatus {
    guard(|| {
        nonnull!(matched, target, out);
        match f(slice(matched, len), slice(target, len)) {
            Ok(v) => {
                *out = v;
                SpoStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Root mean squared error between matched and target distributions.
///
/// # Safety
/// Both arrays must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spo_rmse(matched: *const f64, target: *const f64, len: usize, out: *mut f64) -> SpoStatus {
    metric(spo_core::metrics::rmse, matched, target, len, out)
}

/// Symmetric mean absolute percentage error, in percent.
///
/// # Safety
/// Both arrays must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spo_smape(matched: *const f64, target: *const f64, len: usize, out: *mut f64) -> SpoStatus {
    metric(spo_core::metrics::smape, matched, target, len, out)
}
