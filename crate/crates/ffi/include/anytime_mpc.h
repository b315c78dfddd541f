#ifndef ANYTIME_MPC_H
#define ANYTIME_MPC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every entry point.
typedef enum AmpcStatus {
  AMPC_STATUS_OK = 0,
  // A required pointer argument was null.
  AMPC_STATUS_NULL_POINTER = 1,
  AMPC_STATUS_INVALID_ARGUMENT = 2,
  // A buffer length does not match the problem dimension.
  AMPC_STATUS_DIMENSION_MISMATCH = 3,
  // The JSON document or string encoding is malformed.
  AMPC_STATUS_PARSE = 4,
  // The constraint set is empty.
  AMPC_STATUS_INFEASIBLE = 5,
  // The budget ran out before any usable point was found.
  AMPC_STATUS_BUDGET_EXHAUSTED = 6,
  // The controller found no feasible plan from the first state.
  AMPC_STATUS_INITIALIZATION = 7,
  // Any other solver failure.
  AMPC_STATUS_SOLVER = 8,
  AMPC_STATUS_PANIC = 9,
} AmpcStatus;

// Outcome of a feasibility solve.
typedef enum AmpcFeasStatus {
  AMPC_FEAS_STATUS_FEASIBLE = 0,
  AMPC_FEAS_STATUS_EMPTY = 1,
  AMPC_FEAS_STATUS_BUDGET_EXHAUSTED = 2,
} AmpcFeasStatus;

// What the optimizer did during one controller step.
typedef enum AmpcStepStatus {
  AMPC_STEP_STATUS_SKIPPED = 0,
  AMPC_STEP_STATUS_CONVERGED = 1,
  AMPC_STEP_STATUS_BUDGET_EXHAUSTED = 2,
  AMPC_STEP_STATUS_FAILED = 3,
} AmpcStepStatus;

// Opaque anytime MPC controller.
typedef struct AmpcController AmpcController;

// Opaque convex optimization problem.
typedef struct AmpcProblem AmpcProblem;

typedef struct AmpcSolveInfo {
  // Objective value at the returned point.
  double objective;
  // Certified lower bound on the optimal value.
  double lower_bound;
  // Upper bound on the optimal value.
  double upper_bound;
  size_t bisections;
  size_t inner_iterations;
  // `false` when the budget ran out; the point is still feasible.
  bool converged;
} AmpcSolveInfo;

typedef struct AmpcFeasInfo {
  enum AmpcFeasStatus status;
  double merit;
  double max_violation;
  size_t iterations;
} AmpcFeasInfo;

typedef struct AmpcStepInfo {
  size_t t;
  // Slack budget `φ(t)` of the chosen plan.
  double phi;
  // Terminal-set excess `f(x(t))₊` of the current state.
  double f_plus;
  // Objective value of the chosen plan.
  double cost;
  size_t inner_iterations;
  bool fallback_used;
  enum AmpcStepStatus solver_status;
} AmpcStepInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *ampc_last_error(void);

// Static name of a status code, e.g. `"infeasible"`; `"unknown"` for codes
// outside [`AmpcStatus`].
const char *ampc_status_name(int32_t status);

// Library version as a static string.
const char *ampc_version(void);

// Parses a problem document (`{"n", "objective", "inequalities", "equalities"}`).
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum AmpcStatus ampc_problem_from_json(const char *json, struct AmpcProblem **out);

// Number of variables, or 0 for a null handle.
//
// # Safety
// `problem` must be null or a handle from [`ampc_problem_from_json`].
size_t ampc_problem_dim(const struct AmpcProblem *problem);

// # Safety
// `problem` must be null or a handle not freed before.
void ampc_problem_free(struct AmpcProblem *problem);

// Minimizes the objective to an absolute gap `eps`, writing the point to
// `x_out` (length `x_len` = dimension). A budget that runs out after a
// feasible point was found still returns `AMPC_STATUS_OK` with
// `info->converged == false`.
//
// # Safety
// `problem` must be a live handle, `x_out` must hold `x_len` doubles and
// `info` must be null or valid.
enum AmpcStatus ampc_solve(const struct AmpcProblem *problem,
                           double eps,
                           int64_t max_iterations,
                           double deadline_ms,
                           double *x_out,
                           size_t x_len,
                           struct AmpcSolveInfo *info);

// Searches a point of the constraint set from `x0`, ignoring the objective.
// The outcome (feasible, empty or out of budget) is reported in `info`;
// the return value only signals errors. A negative `max_iterations` keeps
// the default cap.
//
// # Safety
// `problem` must be a live handle, `x0` and `x_out` must hold `len` doubles
// and `info` must be valid.
enum AmpcStatus ampc_feasible(const struct AmpcProblem *problem,
                              const double *x0,
                              int64_t max_iterations,
                              double deadline_ms,
                              double *x_out,
                              size_t len,
                              struct AmpcFeasInfo *info);

// Creates a controller from a scenario document and a terminal-set document,
// tracking the scenario's reference.
//
// # Safety
// Both strings must be NUL-terminated and `out` a valid pointer.
enum AmpcStatus ampc_controller_new(const char *scenario_json,
                                    const char *terminal_set_json,
                                    struct AmpcController **out);

// State dimension, or 0 for a null handle.
//
// # Safety
// `controller` must be null or a live handle.
size_t ampc_controller_state_dim(const struct AmpcController *controller);

// Input dimension, or 0 for a null handle.
//
// # Safety
// `controller` must be null or a live handle.
size_t ampc_controller_input_dim(const struct AmpcController *controller);

// Computes the input for the measured state `x` within the budget and
// advances the controller. A zero budget applies the shifted plan of the
// previous step.
//
// # Safety
// `controller` must be a live handle, `x` must hold `n` doubles, `u_out`
// must hold `m` doubles and `info` must be null or valid.
enum AmpcStatus ampc_controller_step(struct AmpcController *controller,
                                     const double *x,
                                     size_t n,
                                     int64_t max_iterations,
                                     double deadline_ms,
                                     double *u_out,
                                     size_t m,
                                     struct AmpcStepInfo *info);

// # Safety
// `controller` must be null or a handle not freed before.
void ampc_controller_free(struct AmpcController *controller);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANYTIME_MPC_H */
