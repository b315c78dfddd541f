//! C interface to the convex solvers and the anytime MPC controller.
//!
//! Problems and controllers live behind opaque handles created from the same
//! JSON documents the command-line tools read, and released with the matching
//! `*_free` function. Every entry point returns an [`AmpcStatus`]; on failure
//! a message is available from [`ampc_last_error`] on the calling thread.
//! Panics never cross the boundary: they are reported as
//! `AMPC_STATUS_PANIC`.
//!
//! Budgets are given as `max_iterations` (inner Newton iterations, negative for
//! no cap) and `deadline_ms` (wall-clock milliseconds, negative for none).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use anytime_mpc::feas::{solve_feasibility, FeasOptions, FeasStatus};
use anytime_mpc::formats::{ProblemFile, ScenarioFile, TerminalSetFile};
use anytime_mpc::mpc::{AnytimeController, ControllerOptions, StepSolverStatus};
use anytime_mpc::opt::{minimize, OptOptions, OptStatus};
use anytime_mpc::problem::OptimizationProblem;
use anytime_mpc::{Budget, Error};
use nalgebra::DVector;

/// Result code of every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmpcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    InvalidArgument = 2,
    /// A buffer length does not match the problem dimension.
    DimensionMismatch = 3,
    /// The JSON document or string encoding is malformed.
    Parse = 4,
    /// The constraint set is empty.
    Infeasible = 5,
    /// The budget ran out before any usable point was found.
    BudgetExhausted = 6,
    /// The controller found no feasible plan from the first state.
    Initialization = 7,
    /// Any other solver failure.
    Solver = 8,
    Panic = 9,
}

/// Outcome of a feasibility solve.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmpcFeasStatus {
    Feasible = 0,
    Empty = 1,
    BudgetExhausted = 2,
}

/// What the optimizer did during one controller step.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmpcStepStatus {
    Skipped = 0,
    Converged = 1,
    BudgetExhausted = 2,
    Failed = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AmpcSolveInfo {
    /// Objective value at the returned point.
    pub objective: f64,
    /// Certified lower bound on the optimal value.
    pub lower_bound: f64,
    /// Upper bound on the optimal value.
    pub upper_bound: f64,
    pub bisections: usize,
    pub inner_iterations: usize,
    /// `false` when the budget ran out; the point is still feasible.
    pub converged: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmpcFeasInfo {
    pub status: AmpcFeasStatus,
    pub merit: f64,
    pub max_violation: f64,
    pub iterations: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmpcStepInfo {
    pub t: usize,
    /// Slack budget `φ(t)` of the chosen plan.
    pub phi: f64,
    /// Terminal-set excess `f(x(t))₊` of the current state.
    pub f_plus: f64,
    /// Objective value of the chosen plan.
    pub cost: f64,
    pub inner_iterations: usize,
    pub fallback_used: bool,
    pub solver_status: AmpcStepStatus,
}

/// Opaque convex optimization problem.
pub struct AmpcProblem {
    inner: OptimizationProblem,
}

/// Opaque anytime MPC controller.
pub struct AmpcController {
    inner: AnytimeController,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure {
    status: AmpcStatus,
    message: String,
}

impl Failure {
    fn new(status: AmpcStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DimensionMismatch { .. } => AmpcStatus::DimensionMismatch,
            Error::InvalidArgument(_) | Error::NotConvex(_) | Error::NotPositiveDefinite | Error::NegativeSlackBudget(_) => {
                AmpcStatus::InvalidArgument
            }
            Error::Infeasible => AmpcStatus::Infeasible,
            Error::BudgetExhausted(_) => AmpcStatus::BudgetExhausted,
            Error::Initialization(_) => AmpcStatus::Initialization,
            Error::Json(_) => AmpcStatus::Parse,
            _ => AmpcStatus::Solver,
        };
        Self::new(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

/// Runs `f`, recording the failure message and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AmpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            AmpcStatus::Ok
        }
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(_) => {
            set_last_error("internal panic");
            AmpcStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::new(AmpcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|e| Failure::new(AmpcStatus::Parse, format!("{what} is not UTF-8: {e}")))
}

unsafe fn read_vector(ptr: *const f64, len: usize, expected: usize, what: &str) -> Result<DVector<f64>, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    check_len(len, expected, what)?;
    Ok(DVector::from_column_slice(std::slice::from_raw_parts(ptr, len)))
}

unsafe fn write_vector(ptr: *mut f64, len: usize, value: &DVector<f64>, what: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    check_len(len, value.len(), what)?;
    std::slice::from_raw_parts_mut(ptr, len).copy_from_slice(value.as_slice());
    Ok(())
}

fn check_len(len: usize, expected: usize, what: &str) -> Result<(), Failure> {
    if len == expected {
        Ok(())
    } else {
        Err(Failure::new(
            AmpcStatus::DimensionMismatch,
            format!("{what} has length {len}, expected {expected}"),
        ))
    }
}

fn budget(max_iterations: i64, deadline_ms: f64) -> Budget {
    Budget {
        max_iterations: usize::try_from(max_iterations).ok(),
        deadline: Duration::try_from_secs_f64(deadline_ms / 1e3)
            .ok()
            .map(|d| Instant::now() + d),
    }
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ampc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code, e.g. `"infeasible"`; `"unknown"` for codes
/// outside [`AmpcStatus`].
#[no_mangle]
pub extern "C" fn ampc_status_name(status: i32) -> *const c_char {
    const NAMES: [&CStr; 10] = [
        c"ok",
        c"null_pointer",
        c"invalid_argument",
        c"dimension_mismatch",
        c"parse",
        c"infeasible",
        c"budget_exhausted",
        c"initialization",
        c"solver",
        c"panic",
    ];
    usize::try_from(status)
        .ok()
        .and_then(|i| NAMES.get(i))
        .map_or(c"unknown".as_ptr(), |name| name.as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ampc_version() -> *const c_char {
    const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Parses a problem document (`{"n", "objective", "inequalities", "equalities"}`).
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ampc_problem_from_json(json: *const c_char, out: *mut *mut AmpcProblem) -> AmpcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = read_str(json, "json")?;
        let file: ProblemFile = serde_json::from_str(text).map_err(Error::from)?;
        store(out, AmpcProblem { inner: file.to_problem()? });
        Ok(())
    })
}

/// Number of variables, or 0 for a null handle.
///
/// # Safety
/// `problem` must be null or a handle from [`ampc_problem_from_json`].
#[no_mangle]
pub unsafe extern "C" fn ampc_problem_dim(problem: *const AmpcProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.inner.dim())
}

/// # Safety
/// `problem` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn ampc_problem_free(problem: *mut AmpcProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Minimizes the objective to an absolute gap `eps`, writing the point to
/// `x_out` (length `x_len` = dimension). A budget that runs out after a
/// feasible point was found still returns `AMPC_STATUS_OK` with
/// `info->converged == false`.
///
/// # Safety
/// `problem` must be a live handle, `x_out` must hold `x_len` doubles and
/// `info` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ampc_solve(
    problem: *const AmpcProblem,
    eps: f64,
    max_iterations: i64,
    deadline_ms: f64,
    x_out: *mut f64,
    x_len: usize,
    info: *mut AmpcSolveInfo,
) -> AmpcStatus {
    guard(|| {
        let problem = problem.as_ref().ok_or_else(|| null("problem"))?;
        if eps.is_nan() || eps <= 0.0 {
            return Err(Failure::new(AmpcStatus::InvalidArgument, format!("eps must be positive, got {eps}")));
        }
        check_len(x_len, problem.inner.dim(), "x_out")?;
        let options = OptOptions {
            eps,
            budget: budget(max_iterations, deadline_ms),
            ..OptOptions::default()
        };
        let result = minimize(&problem.inner, &options)?;
        write_vector(x_out, x_len, &result.x, "x_out")?;
        if let Some(info) = info.as_mut() {
            *info = AmpcSolveInfo {
                objective: result.objective,
                lower_bound: result.bracket.t_minus,
                upper_bound: result.bracket.t_plus,
                bisections: result.bisections,
                inner_iterations: result.inner_iterations,
                converged: result.status == OptStatus::Converged,
            };
        }
        Ok(())
    })
}

/// Searches a point of the constraint set from `x0`, ignoring the objective.
/// The outcome (feasible, empty or out of budget) is reported in `info`;
/// the return value only signals errors. A negative `max_iterations` keeps
/// the default cap.
///
/// # Safety
/// `problem` must be a live handle, `x0` and `x_out` must hold `len` doubles
/// and `info` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ampc_feasible(
    problem: *const AmpcProblem,
    x0: *const f64,
    max_iterations: i64,
    deadline_ms: f64,
    x_out: *mut f64,
    len: usize,
    info: *mut AmpcFeasInfo,
) -> AmpcStatus {
    guard(|| {
        let problem = problem.as_ref().ok_or_else(|| null("problem"))?;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        let c = problem.inner.constraints();
        let start = read_vector(x0, len, c.dim(), "x0")?;
        let defaults = FeasOptions::default();
        let options = FeasOptions {
            max_iterations: usize::try_from(max_iterations).unwrap_or(defaults.max_iterations),
            deadline: budget(-1, deadline_ms).deadline,
            ..defaults
        };
        let out = solve_feasibility(c, &start, &options)?;
        write_vector(x_out, len, &out.x, "x_out")?;
        *info = AmpcFeasInfo {
            status: match out.status {
                FeasStatus::Feasible => AmpcFeasStatus::Feasible,
                FeasStatus::Empty => AmpcFeasStatus::Empty,
                FeasStatus::BudgetExhausted => AmpcFeasStatus::BudgetExhausted,
            },
            merit: out.merit,
            max_violation: out.max_violation,
            iterations: out.iterations,
        };
        Ok(())
    })
}

/// Creates a controller from a scenario document and a terminal-set document,
/// tracking the scenario's reference.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ampc_controller_new(
    scenario_json: *const c_char,
    terminal_set_json: *const c_char,
    out: *mut *mut AmpcController,
) -> AmpcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let scenario: ScenarioFile = serde_json::from_str(read_str(scenario_json, "scenario_json")?).map_err(Error::from)?;
        let set: TerminalSetFile =
            serde_json::from_str(read_str(terminal_set_json, "terminal_set_json")?).map_err(Error::from)?;
        let (scenario, target) = scenario.model()?.scenario(&set)?;
        let inner = AnytimeController::new(scenario, target, ControllerOptions::default())?;
        store(out, AmpcController { inner });
        Ok(())
    })
}

/// State dimension, or 0 for a null handle.
///
/// # Safety
/// `controller` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ampc_controller_state_dim(controller: *const AmpcController) -> usize {
    controller.as_ref().map_or(0, |c| c.inner.scenario().n())
}

/// Input dimension, or 0 for a null handle.
///
/// # Safety
/// `controller` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ampc_controller_input_dim(controller: *const AmpcController) -> usize {
    controller.as_ref().map_or(0, |c| c.inner.scenario().m())
}

/// Computes the input for the measured state `x` within the budget and
/// advances the controller. A zero budget applies the shifted plan of the
/// previous step.
///
/// # Safety
/// `controller` must be a live handle, `x` must hold `n` doubles, `u_out`
/// must hold `m` doubles and `info` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ampc_controller_step(
    controller: *mut AmpcController,
    x: *const f64,
    n: usize,
    max_iterations: i64,
    deadline_ms: f64,
    u_out: *mut f64,
    m: usize,
    info: *mut AmpcStepInfo,
) -> AmpcStatus {
    guard(|| {
        let controller = controller.as_mut().ok_or_else(|| null("controller"))?;
        let x = read_vector(x, n, controller.inner.scenario().n(), "x")?;
        check_len(m, controller.inner.scenario().m(), "u_out")?;
        if u_out.is_null() {
            return Err(null("u_out"));
        }
        let out = controller.inner.step(&x, budget(max_iterations, deadline_ms))?;
        write_vector(u_out, m, &out.u, "u_out")?;
        if let Some(info) = info.as_mut() {
            let d = &out.diagnostics;
            *info = AmpcStepInfo {
                t: d.t,
                phi: d.phi,
                f_plus: d.f_plus,
                cost: d.cost,
                inner_iterations: d.inner_iterations,
                fallback_used: d.fallback_used,
                solver_status: match d.solver_status {
                    StepSolverStatus::Skipped => AmpcStepStatus::Skipped,
                    StepSolverStatus::Converged => AmpcStepStatus::Converged,
                    StepSolverStatus::BudgetExhausted => AmpcStepStatus::BudgetExhausted,
                    StepSolverStatus::Failed => AmpcStepStatus::Failed,
                },
            };
        }
        Ok(())
    })
}

/// # Safety
/// `controller` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn ampc_controller_free(controller: *mut AmpcController) {
    if !controller.is_null() {
        drop(Box::from_raw(controller));
    }
}
