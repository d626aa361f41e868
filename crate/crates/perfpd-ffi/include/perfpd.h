#ifndef PERFPD_H
#define PERFPD_H

/* Generated by cbindgen from the perfpd-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of a fallible call.
typedef enum {
  PerfpdStatus_Ok = 0,
  // A required pointer argument was null.
  PerfpdStatus_NullPointer,
  PerfpdStatus_InvalidArgument,
  PerfpdStatus_DimensionMismatch,
  PerfpdStatus_NotStronglyConvex,
  PerfpdStatus_HorizonTooShort,
  PerfpdStatus_OutOfRange,
  PerfpdStatus_Io,
  // A library invariant failed; the process state is still sound but the
  // call produced nothing.
  PerfpdStatus_Panic,
} PerfpdStatus;

// Gradient strategy selector for [`PerfpdRunConfig`].
typedef enum {
  // Estimates the shift matrix online from perturbed query pairs.
  PerfpdStrategy_Adaptive = 0,
  // Ignores the decision dependence (converges to a stable point).
  PerfpdStrategy_StablePoint = 1,
  // Uses the true shift matrix (oracle baseline).
  PerfpdStrategy_KnownA = 2,
} PerfpdStrategy;

// Opaque experiment handle (simulator, problem, evaluation oracle).
typedef struct PerfpdExperiment PerfpdExperiment;

// Opaque result of one run: recorded rows plus the final summary.
typedef struct PerfpdRun PerfpdRun;

// Settings of one solver run.
typedef struct {
  // Number of deployment steps `T`.
  uint64_t t_horizon;
  // Primal/dual step size.
  double eta;
  // Dual regularization control.
  double delta;
  // Base-pool size drawn up front (ignored when `exact_expectation`).
  uintptr_t n_pool;
  PerfpdStrategy strategy;
  uint64_t seed;
  // RNG stream, set per replica for common-seed comparisons.
  uint64_t stream;
  // Record every `stride`-th step; 0 selects the default rule.
  uint64_t stride;
  // Nonzero replaces the drawn pool with deterministic sigma points.
  uint8_t exact_expectation;
} PerfpdRunConfig;

// One recorded trajectory row (constraint values are fetched separately
// with `perfpd_run_record_g`).
typedef struct {
  uint64_t t;
  // Performative risk of the deployed decision (NaN without an oracle).
  double pr;
  // `Reg(t) / (t * Reg(1))`.
  double regret_rel;
  // Relative cumulative violation of the last constraint.
  double vio_rel;
  // Squared distance to the performative optimum.
  double dec_dev;
  // Squared Frobenius error of the shift-matrix estimate.
  double param_err;
} PerfpdRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *perfpd_version(void);

// Detail message of the most recent failure on this thread.
//
// The pointer stays valid until the next failing call on the same thread.
// Never null; empty before the first failure.
const char *perfpd_last_error(void);

// Builds the networked linear-regression experiment.
//
// On success writes an owned handle to `*out`; release it with
// `perfpd_experiment_free`.
//
// # Safety
// `out` must be a valid pointer to writable memory.
PerfpdStatus perfpd_experiment_linreg(uint64_t seed,
                                      uintptr_t n_nodes,
                                      double edge_prob,
                                      uintptr_t d_node,
                                      double epsilon,
                                      PerfpdExperiment **out);

// Builds the portfolio experiment with `l` assets.
//
// # Safety
// `out` must be a valid pointer to writable memory.
PerfpdStatus perfpd_experiment_portfolio(uint64_t seed,
                                         uintptr_t l,
                                         double epsilon,
                                         PerfpdExperiment **out);

// Releases an experiment handle. `NULL` is a no-op.
//
// # Safety
// `exp` must be a pointer returned by one of the experiment constructors
// that has not been freed yet.
void perfpd_experiment_free(PerfpdExperiment *exp);

// Decision dimension of the experiment; 0 when `exp` is `NULL`.
//
// # Safety
// `exp` must be `NULL` or a live experiment handle.
uintptr_t perfpd_experiment_decision_dim(const PerfpdExperiment *exp);

// Data dimension of the experiment; 0 when `exp` is `NULL`.
//
// # Safety
// `exp` must be `NULL` or a live experiment handle.
uintptr_t perfpd_experiment_sample_dim(const PerfpdExperiment *exp);

// Number of inequality constraints; 0 when `exp` is `NULL`.
//
// # Safety
// `exp` must be `NULL` or a live experiment handle.
uintptr_t perfpd_experiment_num_constraints(const PerfpdExperiment *exp);

// Executes one solver run and returns an owned result handle through `out`;
// release it with `perfpd_run_free`.
//
// # Safety
// `exp` must be a live experiment handle, `config` and `out` valid
// pointers.
PerfpdStatus perfpd_run(const PerfpdExperiment *exp,
                        const PerfpdRunConfig *config,
                        PerfpdRun **out);

// Releases a run handle. `NULL` is a no-op.
//
// # Safety
// `r` must be a pointer returned by `perfpd_run` that has not been freed.
void perfpd_run_free(PerfpdRun *r);

// Total simulator queries of the run; 0 when `r` is `NULL`.
//
// # Safety
// `r` must be `NULL` or a live run handle.
uint64_t perfpd_run_queries(const PerfpdRun *r);

// Number of recorded trajectory rows; 0 when `r` is `NULL`.
//
// # Safety
// `r` must be `NULL` or a live run handle.
uintptr_t perfpd_run_num_records(const PerfpdRun *r);

// Number of constraint values per record; 0 when `r` is `NULL`.
//
// # Safety
// `r` must be `NULL` or a live run handle.
uintptr_t perfpd_run_num_constraints(const PerfpdRun *r);

// Length of the final decision vector; 0 when `r` is `NULL`.
//
// # Safety
// `r` must be `NULL` or a live run handle.
uintptr_t perfpd_run_theta_len(const PerfpdRun *r);

// Copies record `idx` into `*out`.
//
// # Safety
// `r` must be a live run handle and `out` a valid pointer.
PerfpdStatus perfpd_run_record(const PerfpdRun *r, uintptr_t idx, PerfpdRecord *out);

// Copies the constraint values of record `idx` into `buf`; `len` must
// equal `perfpd_run_num_constraints`.
//
// # Safety
// `r` must be a live run handle and `buf` valid for `len` doubles.
PerfpdStatus perfpd_run_record_g(const PerfpdRun *r, uintptr_t idx, double *buf, uintptr_t len);

// Copies the final decision vector into `buf`; `len` must equal
// `perfpd_run_theta_len`.
//
// # Safety
// `r` must be a live run handle and `buf` valid for `len` doubles.
PerfpdStatus perfpd_run_theta(const PerfpdRun *r, double *buf, uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PERFPD_H */
