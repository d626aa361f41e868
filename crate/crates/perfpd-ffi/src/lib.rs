//! C ABI over the perfpd experiment runner.
//!
//! Conventions: every constructor has a matching `_free`, handles are
//! opaque, fallible calls return [`PerfpdStatus`] and write results through
//! out-pointers only on `Ok`. [`perfpd_last_error`] carries the detail
//! message of the most recent failure on the calling thread. The header in
//! `include/perfpd.h` is regenerated by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use perfpd::experiments::{build_linreg, build_portfolio, BuiltExperiment};
use perfpd::solver::{run, RunSummary, SolverConfig, Strategy, TrajectoryRecord};
use perfpd::Error;

/// Result code of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerfpdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer,
    InvalidArgument,
    DimensionMismatch,
    NotStronglyConvex,
    HorizonTooShort,
    OutOfRange,
    Io,
    /// A library invariant failed; the process state is still sound but the
    /// call produced nothing.
    Panic,
}

/// Gradient strategy selector for [`PerfpdRunConfig`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerfpdStrategy {
    /// Estimates the shift matrix online from perturbed query pairs.
    Adaptive = 0,
    /// Ignores the decision dependence (converges to a stable point).
    StablePoint = 1,
    /// Uses the true shift matrix (oracle baseline).
    KnownA = 2,
}

/// Settings of one solver run.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PerfpdRunConfig {
    /// Number of deployment steps `T`.
    pub t_horizon: u64,
    /// Primal/dual step size.
    pub eta: f64,
    /// Dual regularization control.
    pub delta: f64,
    /// Base-pool size drawn up front (ignored when `exact_expectation`).
    pub n_pool: usize,
    pub strategy: PerfpdStrategy,
    pub seed: u64,
    /// RNG stream, set per replica for common-seed comparisons.
    pub stream: u64,
    /// Record every `stride`-th step; 0 selects the default rule.
    pub stride: u64,
    /// Nonzero replaces the drawn pool with deterministic sigma points.
    pub exact_expectation: u8,
}

/// One recorded trajectory row (constraint values are fetched separately
/// with `perfpd_run_record_g`).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PerfpdRecord {
    pub t: u64,
    /// Performative risk of the deployed decision (NaN without an oracle).
    pub pr: f64,
    /// `Reg(t) / (t * Reg(1))`.
    pub regret_rel: f64,
    /// Relative cumulative violation of the last constraint.
    pub vio_rel: f64,
    /// Squared distance to the performative optimum.
    pub dec_dev: f64,
    /// Squared Frobenius error of the shift-matrix estimate.
    pub param_err: f64,
}

/// Opaque experiment handle (simulator, problem, evaluation oracle).
pub struct PerfpdExperiment {
    inner: BuiltExperiment,
}

/// Opaque result of one run: recorded rows plus the final summary.
pub struct PerfpdRun {
    rows: Vec<TrajectoryRecord>,
    summary: RunSummary,
    m: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|c| {
        *c.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> PerfpdStatus {
    match err {
        Error::DimensionMismatch { .. } => PerfpdStatus::DimensionMismatch,
        Error::NotStronglyConvex(_) | Error::NotPsd(_) => PerfpdStatus::NotStronglyConvex,
        Error::HorizonTooShort { .. } => PerfpdStatus::HorizonTooShort,
        Error::Io { .. } => PerfpdStatus::Io,
        Error::InvalidArgument(_)
        | Error::NoConvergence(_)
        | Error::Usage(_)
        | Error::Config(_) => PerfpdStatus::InvalidArgument,
    }
}

fn fail(err: &Error) -> PerfpdStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Runs `f` with panics converted to [`PerfpdStatus::Panic`].
fn guarded<F: FnOnce() -> PerfpdStatus>(f: F) -> PerfpdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&msg);
            PerfpdStatus::Panic
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn perfpd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Detail message of the most recent failure on this thread.
///
/// The pointer stays valid until the next failing call on the same thread.
/// Never null; empty before the first failure.
#[no_mangle]
pub extern "C" fn perfpd_last_error() -> *const c_char {
    LAST_ERROR.with(|c| c.borrow().as_ptr())
}

fn emit_experiment(
    built: perfpd::Result<BuiltExperiment>,
    out: *mut *mut PerfpdExperiment,
) -> PerfpdStatus {
    match built {
        Ok(inner) => {
            unsafe { *out = Box::into_raw(Box::new(PerfpdExperiment { inner })) };
            PerfpdStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Builds the networked linear-regression experiment.
///
/// On success writes an owned handle to `*out`; release it with
/// `perfpd_experiment_free`.
///
/// # Safety
/// `out` must be a valid pointer to writable memory.
#[no_mangle]
pub unsafe extern "C" fn perfpd_experiment_linreg(
    seed: u64,
    n_nodes: usize,
    edge_prob: f64,
    d_node: usize,
    epsilon: f64,
    out: *mut *mut PerfpdExperiment,
) -> PerfpdStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return PerfpdStatus::NullPointer;
    }
    guarded(|| emit_experiment(build_linreg(seed, n_nodes, edge_prob, d_node, epsilon), out))
}

/// Builds the portfolio experiment with `l` assets.
///
/// # Safety
/// `out` must be a valid pointer to writable memory.
#[no_mangle]
pub unsafe extern "C" fn perfpd_experiment_portfolio(
    seed: u64,
    l: usize,
    epsilon: f64,
    out: *mut *mut PerfpdExperiment,
) -> PerfpdStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return PerfpdStatus::NullPointer;
    }
    guarded(|| emit_experiment(build_portfolio(seed, l, epsilon), out))
}

/// Releases an experiment handle. `NULL` is a no-op.
///
/// # Safety
/// `exp` must be a pointer returned by one of the experiment constructors
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn perfpd_experiment_free(exp: *mut PerfpdExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Decision dimension of the experiment; 0 when `exp` is `NULL`.
///
/// # Safety
/// `exp` must be `NULL` or a live experiment handle.
#[no_mangle]
pub unsafe extern "C" fn perfpd_experiment_decision_dim(exp: *const PerfpdExperiment) -> usize {
    exp.as_ref().map_or(0, |e| e.inner.map.decision_dim())
}

/// Data dimension of the experiment; 0 when `exp` is `NULL`.
///
/// # Safety
/// `exp` must be `NULL` or a live experiment handle.
#[no_mangle]
pub unsafe extern "C" fn perfpd_experiment_sample_dim(exp: *const PerfpdExperiment) -> usize {
    exp.as_ref().map_or(0, |e| e.inner.map.sample_dim())
}

/// Number of inequality constraints; 0 when `exp` is `NULL`.
///
/// # Safety
/// `exp` must be `NULL` or a live experiment handle.
#[no_mangle]
pub unsafe extern "C" fn perfpd_experiment_num_constraints(
    exp: *const PerfpdExperiment,
) -> usize {
    exp.as_ref().map_or(0, |e| e.inner.problem.constraints.m())
}

/// Executes one solver run and returns an owned result handle through `out`;
/// release it with `perfpd_run_free`.
///
/// # Safety
/// `exp` must be a live experiment handle, `config` and `out` valid
/// pointers.
#[no_mangle]
pub unsafe extern "C" fn perfpd_run(
    exp: *const PerfpdExperiment,
    config: *const PerfpdRunConfig,
    out: *mut *mut PerfpdRun,
) -> PerfpdStatus {
    if exp.is_null() || config.is_null() || out.is_null() {
        set_error("experiment, config, and out must be non-null");
        return PerfpdStatus::NullPointer;
    }
    let exp = &*exp;
    let c = *config;
    guarded(|| {
        let mut cfg = SolverConfig::new(c.t_horizon, c.eta, c.delta, c.n_pool, exp.inner.noise);
        cfg.strategy = match c.strategy {
            PerfpdStrategy::Adaptive => Strategy::Adaptive,
            PerfpdStrategy::StablePoint => Strategy::StablePoint,
            PerfpdStrategy::KnownA => Strategy::KnownA,
        };
        cfg.seed = c.seed;
        cfg.stream = c.stream;
        cfg.stride = c.stride;
        cfg.exact_expectation = c.exact_expectation != 0;
        cfg.theta_init = exp.inner.theta_init.clone();
        let mut rows = Vec::new();
        match run(&cfg, &exp.inner.problem, &exp.inner.map, |r| {
            rows.push(r.clone())
        }) {
            Ok(summary) => {
                let handle = PerfpdRun {
                    rows,
                    summary,
                    m: exp.inner.problem.constraints.m(),
                };
                *out = Box::into_raw(Box::new(handle));
                PerfpdStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a run handle. `NULL` is a no-op.
///
/// # Safety
/// `r` must be a pointer returned by `perfpd_run` that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn perfpd_run_free(r: *mut PerfpdRun) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Total simulator queries of the run; 0 when `r` is `NULL`.
///
/// # Safety
/// `r` must be `NULL` or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn perfpd_run_queries(r: *const PerfpdRun) -> u64 {
    r.as_ref().map_or(0, |x| x.summary.queries)
}

/// Number of recorded trajectory rows; 0 when `r` is `NULL`.
///
/// # Safety
/// `r` must be `NULL` or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn perfpd_run_num_records(r: *const PerfpdRun) -> usize {
    r.as_ref().map_or(0, |x| x.rows.len())
}

/// Number of constraint values per record; 0 when `r` is `NULL`.
///
/// # Safety
/// `r` must be `NULL` or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn perfpd_run_num_constraints(r: *const PerfpdRun) -> usize {
    r.as_ref().map_or(0, |x| x.m)
}

/// Length of the final decision vector; 0 when `r` is `NULL`.
///
/// # Safety
/// `r` must be `NULL` or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn perfpd_run_theta_len(r: *const PerfpdRun) -> usize {
    r.as_ref().map_or(0, |x| x.summary.theta.len())
}

/// Copies record `idx` into `*out`.
///
/// # Safety
/// `r` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn perfpd_run_record(
    r: *const PerfpdRun,
    idx: usize,
    out: *mut PerfpdRecord,
) -> PerfpdStatus {
    if r.is_null() || out.is_null() {
        set_error("run and out must be non-null");
        return PerfpdStatus::NullPointer;
    }
    let run = &*r;
    let Some(row) = run.rows.get(idx) else {
        set_error(&format!(
            "record index {idx} out of range ({} records)",
            run.rows.len()
        ));
        return PerfpdStatus::OutOfRange;
    };
    *out = PerfpdRecord {
        t: row.t,
        pr: row.pr,
        regret_rel: row.regret_rel,
        vio_rel: row.vio_rel,
        dec_dev: row.dec_dev,
        param_err: row.param_err,
    };
    PerfpdStatus::Ok
}

/// Copies the constraint values of record `idx` into `buf`; `len` must
/// equal `perfpd_run_num_constraints`.
///
/// # Safety
/// `r` must be a live run handle and `buf` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn perfpd_run_record_g(
    r: *const PerfpdRun,
    idx: usize,
    buf: *mut f64,
    len: usize,
) -> PerfpdStatus {
    if r.is_null() || (buf.is_null() && len > 0) {
        set_error("run and buf must be non-null");
        return PerfpdStatus::NullPointer;
    }
    let run = &*r;
    let Some(row) = run.rows.get(idx) else {
        set_error(&format!(
            "record index {idx} out of range ({} records)",
            run.rows.len()
        ));
        return PerfpdStatus::OutOfRange;
    };
    if len != row.g.len() {
        set_error("buffer length does not match the constraint count");
        return PerfpdStatus::DimensionMismatch;
    }
    ptr::copy_nonoverlapping(row.g.as_ptr(), buf, len);
    PerfpdStatus::Ok
}

/// Copies the final decision vector into `buf`; `len` must equal
/// `perfpd_run_theta_len`.
///
/// # Safety
/// `r` must be a live run handle and `buf` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn perfpd_run_theta(
    r: *const PerfpdRun,
    buf: *mut f64,
    len: usize,
) -> PerfpdStatus {
    if r.is_null() || (buf.is_null() && len > 0) {
        set_error("run and buf must be non-null");
        return PerfpdStatus::NullPointer;
    }
    let run = &*r;
    if len != run.summary.theta.len() {
        set_error("buffer length does not match the decision dimension");
        return PerfpdStatus::DimensionMismatch;
    }
    ptr::copy_nonoverlapping(run.summary.theta.as_slice().as_ptr(), buf, len);
    PerfpdStatus::Ok
}
