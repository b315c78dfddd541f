//! Linear MPC with a terminal set and a decreasing slack budget, solved in an
//! anytime fashion.
//!
//! The problem at time `t` is posed over
//! `z = (u_0, …, u_{N−1}, x_1, …, x_N, ε_1, …, ε_{N−1})` with the dynamics as
//! equalities. Besides input/output bounds and the terminal constraint
//! `f(x_N) ≤ 0`, the slack rows `ε_k ≥ f_i(x_k)`, `ε_k ≥ 0` and
//! `Σ ε_k ≤ φ(t−1) − f(x(t))₊` make
//! `φ(t) = Σ_{k=1}^{N−1} f(x_k)₊` decrease along the closed loop.
//!
//! Every step first builds the shifted plan of the previous step (drop the
//! first input, append the terminal feedback), which is feasible by
//! construction. The optimizer starts from it and whatever it returns is only
//! adopted if it is feasible and not more expensive.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::budget::Budget;
use crate::error::{check_dim, Error, Result};
use crate::feas::{solve_feasibility, FeasOptions, FeasStatus};
use crate::opt::{bracket_around, solve, OptOptions, OptStatus};
use crate::problem::{
    min_eigenvalue, ConvexFunction, FeasibilityProblem, HessianMode, LinearEquality, OptimizationProblem,
};
use crate::terminal::{SteadyStateTarget, TerminalSet};

/// Tolerance on input/output rows of an adopted plan.
const STAGE_TOL: f64 = 1e-9;
/// Tolerance on `f(x_N)` of an adopted plan.
const TERMINAL_TOL: f64 = 1e-10;
/// Absolute tolerance on the slack budget row of an adopted plan; kept below
/// the decrease tolerance of `φ` whatever the size of `φ`.
const BUDGET_TOL: f64 = 1e-9;
/// A shifted plan violating its rows by more than this is reported as an error.
const FALLBACK_TOL: f64 = 1e-7;
/// Bisection steps when blending an optimizer plan with the fallback.
const REPAIR_STEPS: usize = 60;

/// Linear model, constraints, costs and terminal ingredients of one MPC setup.
#[derive(Clone, Debug)]
pub struct MpcScenario {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub y_min: DVector<f64>,
    pub y_max: DVector<f64>,
    pub horizon: usize,
    pub q_stage: DMatrix<f64>,
    pub r_stage: DMatrix<f64>,
    pub p_cost: DMatrix<f64>,
    pub terminal: TerminalSet,
    pub k_term: DMatrix<f64>,
    pub reference_vertices: Vec<DVector<f64>>,
}

impl MpcScenario {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, p) = (self.n(), self.m(), self.p());
        check_dim(n, self.a.ncols())?;
        check_dim(n, self.b.nrows())?;
        check_dim(n, self.c.ncols())?;
        for v in [&self.u_min, &self.u_max] {
            check_dim(m, v.len())?;
        }
        for v in [&self.y_min, &self.y_max] {
            check_dim(p, v.len())?;
        }
        for (mat, dim) in [(&self.q_stage, n), (&self.r_stage, m), (&self.p_cost, n)] {
            check_dim(dim, mat.nrows())?;
            check_dim(dim, mat.ncols())?;
        }
        check_dim(m, self.k_term.nrows())?;
        check_dim(n, self.k_term.ncols())?;
        check_dim(n, self.terminal.dim())?;
        for r in &self.reference_vertices {
            check_dim(p, r.len())?;
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if self.u_min.iter().any(|v| *v >= 0.0) || self.u_max.iter().any(|v| *v <= 0.0) {
            return Err(Error::InvalidArgument("input bounds must satisfy u_min < 0 < u_max".into()));
        }
        if self.y_min.iter().any(|v| *v >= 0.0) || self.y_max.iter().any(|v| *v <= 0.0) {
            return Err(Error::InvalidArgument("output bounds must satisfy y_min < 0 < y_max".into()));
        }
        let psd_tol = |mat: &DMatrix<f64>| -1e-9 * mat.amax().max(1.0);
        if min_eigenvalue(&self.q_stage) < psd_tol(&self.q_stage) {
            return Err(Error::NotConvex(min_eigenvalue(&self.q_stage)));
        }
        if min_eigenvalue(&self.p_cost) < psd_tol(&self.p_cost) {
            return Err(Error::NotConvex(min_eigenvalue(&self.p_cost)));
        }
        if self.r_stage.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite);
        }
        if let TerminalSet::Ellipsoid(e) = &self.terminal {
            if e.p.clone().cholesky().is_none() {
                return Err(Error::NotPositiveDefinite);
            }
            if e.rho.is_nan() || e.rho <= 0.0 {
                return Err(Error::InvalidArgument("ellipsoid level must be positive".into()));
            }
        }
        Ok(())
    }

    /// One step of the nominal model `x⁺ = Ax + Bu`. Plans and the simulated
    /// plant both use this, so shifted plans reproduce plant states exactly.
    pub fn step_model(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }

    /// `(x − x_r)'Q(x − x_r) + (u − u_r)'R(u − u_r)`.
    pub fn stage_cost(&self, target: &SteadyStateTarget, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let dx = x - &target.x_r;
        let du = u - &target.u_r;
        dx.dot(&(&self.q_stage * &dx)) + du.dot(&(&self.r_stage * &du))
    }

    pub fn terminal_cost(&self, target: &SteadyStateTarget, x: &DVector<f64>) -> f64 {
        let dx = x - &target.x_r;
        dx.dot(&(&self.p_cost * &dx))
    }

    /// Largest violation of the input bounds on `u` and the output bounds on `y`.
    pub fn stage_violation(&self, u: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let mut v = f64::NEG_INFINITY;
        for i in 0..u.len() {
            v = v.max(u[i] - self.u_max[i]).max(self.u_min[i] - u[i]);
        }
        for i in 0..y.len() {
            v = v.max(y[i] - self.y_max[i]).max(self.y_min[i] - y[i]);
        }
        v
    }

    /// `f(x)₊`.
    pub fn terminal_excess(&self, x: &DVector<f64>) -> f64 {
        self.terminal.value(x).max(0.0)
    }
}

/// Input sequence with the states it generates from `x_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub inputs: Vec<DVector<f64>>,
    /// `x_0, …, x_N`.
    pub states: Vec<DVector<f64>>,
    /// `f(x_k)₊` for `k = 1, …, N−1`.
    pub slacks: Vec<f64>,
    pub cost: f64,
}

impl Plan {
    /// Simulates `inputs` from `x0` and evaluates the slacks and the cost.
    pub fn from_inputs(
        scenario: &MpcScenario,
        target: &SteadyStateTarget,
        x0: &DVector<f64>,
        inputs: Vec<DVector<f64>>,
    ) -> Result<Self> {
        check_dim(scenario.horizon, inputs.len())?;
        check_dim(scenario.n(), x0.len())?;
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0.clone());
        let mut cost = 0.0;
        for u in &inputs {
            check_dim(scenario.m(), u.len())?;
            let x = states.last().expect("states start with x0");
            cost += scenario.stage_cost(target, x, u);
            let next = scenario.step_model(x, u);
            states.push(next);
        }
        cost += scenario.terminal_cost(target, &states[inputs.len()]);
        let slacks = states[1..inputs.len()]
            .iter()
            .map(|x| scenario.terminal_excess(x))
            .collect();
        Ok(Self {
            inputs,
            states,
            slacks,
            cost,
        })
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn terminal_state(&self) -> &DVector<f64> {
        &self.states[self.inputs.len()]
    }

    /// Largest violation of the input and next-output bounds along the plan.
    pub fn stage_violation(&self, scenario: &MpcScenario) -> f64 {
        self.inputs
            .iter()
            .zip(&self.states[1..])
            .map(|(u, x)| scenario.stage_violation(u, &scenario.output(x)))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `φ = Σ_{k=1}^{N−1} f(x_k)₊` recomputed from the states of `plan`.
pub fn compute_phi(plan: &Plan, terminal: &TerminalSet) -> f64 {
    let n = plan.horizon();
    plan.states[1..n].iter().map(|x| terminal.value(x).max(0.0)).sum()
}

/// Drops the first input of `prev` and appends `K_term(x_N − x_r) + u_r`;
/// the states are re-simulated from `prev`'s `x_1`.
pub fn shift_plan(prev: &Plan, scenario: &MpcScenario, target: &SteadyStateTarget) -> Result<Plan> {
    check_dim(scenario.horizon, prev.horizon())?;
    let x_n = prev.terminal_state();
    let tail = &scenario.k_term * (x_n - &target.x_r) + &target.u_r;
    let mut inputs: Vec<_> = prev.inputs[1..].to_vec();
    inputs.push(tail);
    Plan::from_inputs(scenario, target, &prev.states[1], inputs)
}

/// Offsets of the blocks of the decision vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecisionLayout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
}

impl DecisionLayout {
    pub fn dim(&self) -> usize {
        self.horizon * (self.m + self.n) + self.horizon.saturating_sub(1)
    }

    /// Offset of `u_k`, `k = 0, …, N−1`.
    pub fn input(&self, k: usize) -> usize {
        k * self.m
    }

    /// Offset of `x_k`, `k = 1, …, N`.
    pub fn state(&self, k: usize) -> usize {
        self.horizon * self.m + (k - 1) * self.n
    }

    /// Index of `ε_k`, `k = 1, …, N−1`.
    pub fn slack(&self, k: usize) -> usize {
        self.horizon * (self.m + self.n) + (k - 1)
    }

    pub fn encode(&self, plan: &Plan) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        for (k, u) in plan.inputs.iter().enumerate() {
            z.rows_mut(self.input(k), self.m).copy_from(u);
        }
        for k in 1..=self.horizon {
            z.rows_mut(self.state(k), self.n).copy_from(&plan.states[k]);
        }
        for k in 1..self.horizon {
            z[self.slack(k)] = plan.slacks[k - 1];
        }
        z
    }

    pub fn inputs(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.horizon)
            .map(|k| z.rows(self.input(k), self.m).into_owned())
            .collect()
    }
}

/// The optimization problem of one step, with the layout of its variables.
#[derive(Clone, Debug)]
pub struct MpcProblem {
    pub problem: OptimizationProblem,
    pub layout: DecisionLayout,
    /// Right-hand side `φ(t−1) − f(x(t))₊` of the budget row, when present.
    pub slack_budget: Option<f64>,
    /// Number of input/output rows, which come first among the inequalities.
    pub stage_rows: usize,
    /// Number of terminal rows, which follow the stage rows.
    pub terminal_rows: usize,
}

/// Builds the problem at state `x_now`. An infinite `phi_prev` omits the
/// budget row, as at the first step.
pub fn build_mpc_problem(
    scenario: &MpcScenario,
    x_now: &DVector<f64>,
    phi_prev: f64,
    target: &SteadyStateTarget,
) -> Result<MpcProblem> {
    let (n, m, p, horizon) = (scenario.n(), scenario.m(), scenario.p(), scenario.horizon);
    check_dim(n, x_now.len())?;
    check_dim(n, target.x_r.len())?;
    check_dim(m, target.u_r.len())?;
    let layout = DecisionLayout { n, m, horizon };
    let dim = layout.dim();

    let slack_budget = if phi_prev.is_infinite() && phi_prev > 0.0 {
        None
    } else {
        if phi_prev.is_nan() || phi_prev < 0.0 {
            return Err(Error::InvalidArgument(format!("slack budget φ must be nonnegative, got {phi_prev}")));
        }
        let budget = phi_prev - scenario.terminal_excess(x_now);
        if budget < -1e-9 * phi_prev.max(1.0) {
            return Err(Error::NegativeSlackBudget(budget));
        }
        Some(budget.max(0.0))
    };

    // Objective: stage costs with the k = 0 state term as a constant.
    let mut hess = DMatrix::zeros(dim, dim);
    let mut lin = DVector::zeros(dim);
    let mut constant = scenario.stage_cost(target, x_now, &target.u_r);
    let ru = &scenario.r_stage * &target.u_r;
    let qx = &scenario.q_stage * &target.x_r;
    let px = &scenario.p_cost * &target.x_r;
    for k in 0..horizon {
        let o = layout.input(k);
        hess.view_mut((o, o), (m, m)).copy_from(&(&scenario.r_stage * 2.0));
        lin.rows_mut(o, m).copy_from(&(&ru * -2.0));
        constant += target.u_r.dot(&ru);
    }
    for k in 1..=horizon {
        let o = layout.state(k);
        let (w, wx) = if k < horizon { (&scenario.q_stage, &qx) } else { (&scenario.p_cost, &px) };
        hess.view_mut((o, o), (n, n)).copy_from(&(w * 2.0));
        lin.rows_mut(o, n).copy_from(&(wx * -2.0));
        constant += target.x_r.dot(wx);
    }
    let objective = ConvexFunction::quadratic(hess, lin, constant)?;

    let mut equalities = Vec::with_capacity(horizon * n);
    for k in 0..horizon {
        for i in 0..n {
            let mut coeffs = DVector::zeros(dim);
            coeffs[layout.state(k + 1) + i] = 1.0;
            for j in 0..m {
                coeffs[layout.input(k) + j] = -scenario.b[(i, j)];
            }
            let rhs = if k == 0 {
                scenario.a.row(i).transpose().dot(x_now)
            } else {
                for j in 0..n {
                    coeffs[layout.state(k) + j] = -scenario.a[(i, j)];
                }
                0.0
            };
            equalities.push(LinearEquality::new(coeffs, rhs));
        }
    }

    let mut inequalities = Vec::new();
    for k in 0..horizon {
        let row = |offset: usize, coeffs: &[f64], sign: f64, bound: f64| {
            let mut a = DVector::zeros(dim);
            for (j, c) in coeffs.iter().enumerate() {
                a[offset + j] = sign * c;
            }
            ConvexFunction::linear(a, -sign * bound)
        };
        for i in 0..m {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            inequalities.push(row(layout.input(k), &e, 1.0, scenario.u_max[i]));
        }
        for i in 0..m {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            inequalities.push(row(layout.input(k), &e, -1.0, scenario.u_min[i]));
        }
        for i in 0..p {
            let c: Vec<f64> = scenario.c.row(i).iter().copied().collect();
            inequalities.push(row(layout.state(k + 1), &c, 1.0, scenario.y_max[i]));
        }
        for i in 0..p {
            let c: Vec<f64> = scenario.c.row(i).iter().copied().collect();
            inequalities.push(row(layout.state(k + 1), &c, -1.0, scenario.y_min[i]));
        }
    }
    let stage_rows = inequalities.len();

    let pieces = scenario.terminal.pieces();
    for f in &pieces {
        inequalities.push(f.embedded(layout.state(horizon), dim)?);
    }
    let terminal_rows = pieces.len();

    for k in 1..horizon {
        for f in &pieces {
            inequalities.push(f.embedded(layout.state(k), dim)?.with_linear_term(layout.slack(k), -1.0));
        }
    }
    for k in 1..horizon {
        let mut a = DVector::zeros(dim);
        a[layout.slack(k)] = -1.0;
        inequalities.push(ConvexFunction::linear(a, 0.0));
    }
    if let Some(budget) = slack_budget {
        let mut a = DVector::zeros(dim);
        for k in 1..horizon {
            a[layout.slack(k)] = 1.0;
        }
        inequalities.push(ConvexFunction::linear(a, -budget));
    }

    let constraints = FeasibilityProblem::new(dim, inequalities, equalities)?;
    Ok(MpcProblem {
        problem: OptimizationProblem::new(objective, constraints)?,
        layout,
        slack_budget,
        stage_rows,
        terminal_rows,
    })
}

/// Row-family violations of a plan, as used to accept it.
#[derive(Clone, Copy, Debug, PartialEq)]
struct PlanCheck {
    stage: f64,
    terminal: f64,
    phi: f64,
}

impl PlanCheck {
    fn of(plan: &Plan, scenario: &MpcScenario) -> Self {
        Self {
            stage: plan.stage_violation(scenario),
            terminal: scenario.terminal.value(plan.terminal_state()),
            phi: compute_phi(plan, &scenario.terminal),
        }
    }

    /// Within tolerance, or no worse than `reference` on each family.
    fn acceptable(&self, reference: Option<&PlanCheck>, budget: Option<f64>) -> bool {
        let (stage, terminal, phi) = match reference {
            Some(r) => (r.stage, r.terminal, r.phi),
            None => (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        };
        self.stage <= STAGE_TOL.max(stage)
            && self.terminal <= TERMINAL_TOL.max(terminal)
            && budget.is_none_or(|b| self.phi <= (b + BUDGET_TOL).max(phi))
    }
}

/// Largest `λ ∈ [0, 1]` such that the inputs `λ·candidate + (1 − λ)·reference`
/// give an acceptable plan; `None` when only `λ = 0` qualifies. Each row
/// family is convex along the segment, so the admissible `λ` form an interval.
fn blend_with_reference(
    scenario: &MpcScenario,
    target: &SteadyStateTarget,
    x0: &DVector<f64>,
    candidate: &[DVector<f64>],
    reference: &Plan,
    budget: Option<f64>,
) -> Result<Option<Plan>> {
    let ref_check = PlanCheck::of(reference, scenario);
    let blend = |lambda: f64| -> Result<Plan> {
        let inputs = candidate
            .iter()
            .zip(&reference.inputs)
            .map(|(c, r)| c * lambda + r * (1.0 - lambda))
            .collect();
        Plan::from_inputs(scenario, target, x0, inputs)
    };
    let full = blend(1.0)?;
    if PlanCheck::of(&full, scenario).acceptable(Some(&ref_check), budget) {
        return Ok(Some(full));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = None;
    for _ in 0..REPAIR_STEPS {
        let mid = 0.5 * (lo + hi);
        let plan = blend(mid)?;
        if PlanCheck::of(&plan, scenario).acceptable(Some(&ref_check), budget) {
            lo = mid;
            best = Some(plan);
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug)]
pub struct ControllerOptions {
    /// Solver settings; the budget is replaced at every step.
    pub opt: OptOptions,
    /// Tightening of the stage and terminal rows when searching the first plan.
    pub init_margin: f64,
    /// Inner iteration cap of the first-plan search.
    pub init_iterations: usize,
}

impl Default for ControllerOptions {
    fn default() -> Self {
        Self {
            opt: OptOptions {
                eps: 1e-6,
                relative_eps: Some(1e-8),
                feas: FeasOptions {
                    hessian: HessianMode::Full,
                    ..FeasOptions::default()
                },
                ..OptOptions::default()
            },
            init_margin: 1e-6,
            init_iterations: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ControllerState {
    pub plan: Option<Plan>,
    /// `φ(t−1)`; infinite before the first step.
    pub phi_prev: f64,
    pub target: SteadyStateTarget,
    pub t: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepSolverStatus {
    /// No optimization was attempted (zero budget).
    Skipped,
    Converged,
    BudgetExhausted,
    /// The solver failed or returned nothing usable; the fallback was kept.
    Failed,
}

impl StepSolverStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepSolverStatus::Skipped => "skipped",
            StepSolverStatus::Converged => "converged",
            StepSolverStatus::BudgetExhausted => "budget_exhausted",
            StepSolverStatus::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub t: usize,
    /// `φ(t)` of the chosen plan.
    pub phi: f64,
    /// `f(x(t))₊`.
    pub f_plus: f64,
    /// Objective value of the chosen plan.
    pub cost: f64,
    pub inner_iterations: usize,
    pub fallback_used: bool,
    pub solver_status: StepSolverStatus,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub u: DVector<f64>,
    pub plan: Plan,
    pub diagnostics: StepDiagnostics,
}

/// Anytime MPC controller for one control loop.
#[derive(Clone, Debug)]
pub struct AnytimeController {
    scenario: MpcScenario,
    options: ControllerOptions,
    state: ControllerState,
}

impl AnytimeController {
    pub fn new(scenario: MpcScenario, target: SteadyStateTarget, options: ControllerOptions) -> Result<Self> {
        scenario.validate()?;
        check_dim(scenario.n(), target.x_r.len())?;
        check_dim(scenario.m(), target.u_r.len())?;
        options.opt.feas.validate()?;
        Ok(Self {
            scenario,
            options,
            state: ControllerState {
                plan: None,
                phi_prev: f64::INFINITY,
                target,
                t: 0,
            },
        })
    }

    pub fn scenario(&self) -> &MpcScenario {
        &self.scenario
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn options(&self) -> &ControllerOptions {
        &self.options
    }

    /// Computes the input to apply at state `x_now` within `budget`.
    pub fn step(&mut self, x_now: &DVector<f64>, budget: Budget) -> Result<StepOutput> {
        check_dim(self.scenario.n(), x_now.len())?;
        let target = self.state.target.clone();
        let f_plus = self.scenario.terminal_excess(x_now);

        let (fallback, phi_row) = match &self.state.plan {
            Some(prev) => {
                let shifted = shift_plan(prev, &self.scenario, &target)?;
                let shifted = if &shifted.states[0] == x_now {
                    shifted
                } else {
                    Plan::from_inputs(&self.scenario, &target, x_now, shifted.inputs)?
                };
                (shifted, self.state.phi_prev)
            }
            None => (self.initial_plan(x_now, &target)?, f64::INFINITY),
        };
        let mpc = build_mpc_problem(&self.scenario, x_now, phi_row, &target)?;
        let fb_check = PlanCheck::of(&fallback, &self.scenario);
        let fb_tol = FALLBACK_TOL;
        if fb_check.stage > fb_tol
            || fb_check.terminal > fb_tol
            || mpc.slack_budget.is_some_and(|b| fb_check.phi > b + fb_tol)
        {
            return Err(Error::InfeasiblePlan(format!(
                "shifted plan violates its constraints (stage {:e}, terminal {:e}, φ {:e})",
                fb_check.stage, fb_check.terminal, fb_check.phi
            )));
        }

        let (candidate, inner_iterations, solver_status) = if budget.is_zero() || budget.deadline_passed() {
            (None, 0, StepSolverStatus::Skipped)
        } else {
            self.optimize(&mpc, &fallback, x_now, &target, budget)?
        };

        let (plan, fallback_used) = match candidate {
            Some(c) if c.cost <= fallback.cost => (c, false),
            _ => (fallback, true),
        };
        let phi = compute_phi(&plan, &self.scenario.terminal);
        let diagnostics = StepDiagnostics {
            t: self.state.t,
            phi,
            f_plus,
            cost: plan.cost,
            inner_iterations,
            fallback_used,
            solver_status,
        };
        self.state.plan = Some(plan.clone());
        self.state.phi_prev = phi;
        self.state.t += 1;
        Ok(StepOutput {
            u: plan.inputs[0].clone(),
            plan,
            diagnostics,
        })
    }

    /// First plan: a feasibility solve of the problem without the budget row
    /// and with the stage and terminal rows tightened by `init_margin`. Its
    /// iterations are not charged to the step budget.
    fn initial_plan(&self, x_now: &DVector<f64>, target: &SteadyStateTarget) -> Result<Plan> {
        let mpc = build_mpc_problem(&self.scenario, x_now, f64::INFINITY, target)?;
        let cons = mpc.problem.constraints();
        let tightened_rows = mpc.stage_rows + mpc.terminal_rows;
        let rows = cons
            .inequalities()
            .iter()
            .enumerate()
            .map(|(i, f)| if i < tightened_rows { f.shifted(self.options.init_margin) } else { f.clone() })
            .collect();
        let tightened = FeasibilityProblem::new(cons.dim(), rows, cons.equalities().to_vec())?;
        let hold = vec![target.u_r.clone(); self.scenario.horizon];
        let guess = Plan::from_inputs(&self.scenario, target, x_now, hold)?;
        let opts = FeasOptions {
            max_iterations: self.options.init_iterations,
            ..self.options.opt.feas.clone()
        };
        let out = solve_feasibility(&tightened, &mpc.layout.encode(&guess), &opts)?;
        if out.status != FeasStatus::Feasible {
            return Err(Error::Initialization(format!(
                "no feasible plan from the initial state (solver status {:?}, max violation {:e})",
                out.status, out.max_violation
            )));
        }
        let plan = Plan::from_inputs(&self.scenario, target, x_now, mpc.layout.inputs(&out.x))?;
        if !PlanCheck::of(&plan, &self.scenario).acceptable(None, None) {
            return Err(Error::Initialization("initial plan violates its constraints".into()));
        }
        Ok(plan)
    }

    fn optimize(
        &self,
        mpc: &MpcProblem,
        fallback: &Plan,
        x_now: &DVector<f64>,
        target: &SteadyStateTarget,
        budget: Budget,
    ) -> Result<(Option<Plan>, usize, StepSolverStatus)> {
        let options = OptOptions {
            budget,
            ..self.options.opt.clone()
        };
        let mut used = 0;
        let bracket = match bracket_around(&mpc.problem, mpc.layout.encode(fallback), &options, &mut used) {
            Ok(b) => b,
            Err(Error::BudgetExhausted(_)) => return Ok((None, used, StepSolverStatus::BudgetExhausted)),
            Err(Error::NoLowerBound) => return Ok((None, used, StepSolverStatus::Failed)),
            Err(e) => return Err(e),
        };
        let remaining = Budget {
            max_iterations: budget.max_iterations.map(|m| m.saturating_sub(used)),
            deadline: budget.deadline,
        };
        let (x, status) = if remaining.is_zero() || remaining.deadline.is_some_and(|d| Instant::now() >= d) {
            (bracket.x_feasible, StepSolverStatus::BudgetExhausted)
        } else {
            let result = solve(
                &mpc.problem,
                &OptOptions {
                    budget: remaining,
                    ..options
                },
                bracket,
            )?;
            used += result.inner_iterations;
            let status = match result.status {
                OptStatus::Converged => StepSolverStatus::Converged,
                OptStatus::BudgetExhausted => StepSolverStatus::BudgetExhausted,
            };
            (result.x, status)
        };
        let inputs = mpc.layout.inputs(&x);
        let candidate = blend_with_reference(&self.scenario, target, x_now, &inputs, fallback, mpc.slack_budget)?;
        let status = if candidate.is_none() { StepSolverStatus::Failed } else { status };
        Ok((candidate, used, status))
    }
}
