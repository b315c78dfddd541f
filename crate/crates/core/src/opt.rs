//! Convex minimization by bisection on the optimal value.
//!
//! For a level `t`, the set `S(t) = {x ∈ C : f_0(x) ≤ t}` is nonempty iff
//! `t ≥ f⋆`, and the Newton feasibility solver decides which case holds.
//! The bracket `[t_minus, t_plus]` is then tightened beyond the midpoint:
//!
//! * an empty verdict yields multipliers `μ_i = f_i(x_t)₊ / (f_0(x_t) − t)`
//!   and the Lagrangian value at `x_t` is a lower bound on `f⋆`;
//! * a feasible point `x_F` and an infeasible point `x_I` interpolate to a
//!   feasible point whose objective bounds `f⋆` from above.
//!
//! At every instant a feasible point with a certified gap is available, which
//! is what the anytime controller relies on.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::budget::Budget;
use crate::error::{check_dim, Error, Result};
use crate::feas::{solve_feasibility, FeasOptions, FeasOutcome, FeasStatus};
use crate::problem::{ConvexFunction, FeasibilityProblem, FunctionKind, LinearEquality, OptimizationProblem};

/// Objective excess below which the dual multipliers are not formed.
const MIN_DUAL_DENOMINATOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct OptOptions {
    /// Absolute tolerance on `t_plus − t_minus`.
    pub eps: f64,
    /// Optional tolerance relative to `max(1, |t_plus|)`; the looser of the two applies.
    pub relative_eps: Option<f64>,
    pub max_bisections: usize,
    pub budget: Budget,
    /// Dual lower bounds and interpolated upper bounds; `false` gives plain midpoint bisection.
    pub strengthen: bool,
    pub feas: FeasOptions,
}

impl Default for OptOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            relative_eps: None,
            max_bisections: 200,
            budget: Budget::unlimited(),
            strengthen: true,
            feas: FeasOptions::default(),
        }
    }
}

impl OptOptions {
    fn tolerance(&self, t_plus: f64) -> f64 {
        match self.relative_eps {
            Some(r) => self.eps.max(r * t_plus.abs().max(1.0)),
            None => self.eps,
        }
    }
}

/// Certified bounds `t_minus ≤ f⋆ ≤ t_plus` together with their witnesses.
#[derive(Clone, Debug)]
pub struct Bracket {
    pub t_minus: f64,
    pub t_plus: f64,
    /// Feasible point with `f_0(x_feasible) ≤ t_plus` (up to the feasibility tolerance).
    pub x_feasible: DVector<f64>,
    /// Point outside `C` with `f_0(x_infeasible) ≤ t_plus`, when one is known.
    pub x_infeasible: Option<DVector<f64>>,
}

impl Bracket {
    pub fn width(&self) -> f64 {
        self.t_plus - self.t_minus
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptStatus {
    Converged,
    BudgetExhausted,
}

/// What the inner solve decided at one bisection level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LevelVerdict {
    Feasible,
    Empty,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BisectionRecord {
    pub level: f64,
    pub verdict: LevelVerdict,
    pub t_minus: f64,
    pub t_plus: f64,
    pub inner_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct OptResult {
    pub x: DVector<f64>,
    pub objective: f64,
    pub bracket: Bracket,
    pub bisections: usize,
    pub inner_iterations: usize,
    pub status: OptStatus,
    pub history: Vec<BisectionRecord>,
}

impl OptResult {
    pub fn gap(&self) -> f64 {
        self.bracket.width()
    }
}

/// `C ∩ {f_0(x) − t ≤ 0}`; the objective cut is the last inequality.
pub fn level_set_problem(opt: &OptimizationProblem, t: f64) -> FeasibilityProblem {
    opt.constraints()
        .with_inequality(opt.objective().shifted(-t))
        .expect("objective and constraints share a dimension")
}

/// Lagrangian value at an (approximately) stationary point `x_t` of the
/// level-set merit function, with `μ_i = f_i(x_t)₊ / (f_0(x_t) − t)` and
/// equality multipliers `ν_j = (c_j'x_t − d_j) / (f_0(x_t) − t)`.
pub fn dual_lower_bound(opt: &OptimizationProblem, x_t: &DVector<f64>, t: f64) -> Result<f64> {
    check_dim(opt.dim(), x_t.len())?;
    let f0 = opt.objective().value(x_t);
    let excess = f0 - t;
    if excess < MIN_DUAL_DENOMINATOR {
        return Err(Error::DualBoundUndefined(excess));
    }
    let r = opt.constraints().eval_residuals(x_t)?;
    let ineq: f64 = r
        .inequality
        .iter()
        .map(|&v| {
            let mu = (v.max(0.0) / excess).max(0.0);
            mu * v
        })
        .sum();
    let eq: f64 = r.equality.iter().map(|&h| h * h / excess).sum();
    Ok(f0 + ineq + eq)
}

/// Lower bound on `f⋆` from the multipliers of [`dual_lower_bound`] that
/// stays valid when `x_t` is only approximately stationary.
///
/// The Lagrangian `L(·, μ, ν)` is a convex quadratic; its infimum over
/// `x_t + range(∇²L)` is `L(x_t) − ½ g'(∇²L)⁺g` with `g = ∇L(x_t)`. The
/// component of `g` in the null space of `∇²L` is charged over a distance
/// `1 + ‖x_t‖`. `None` when `f_0(x_t) − t` is too small to form multipliers.
pub fn certified_dual_bound(opt: &OptimizationProblem, x_t: &DVector<f64>, t: f64) -> Option<f64> {
    let value = dual_lower_bound(opt, x_t, t).ok()?;
    let excess = opt.objective().value(x_t) - t;
    let n = opt.dim();
    let r = opt.constraints().eval_residuals(x_t).ok()?;
    let mut grad = opt.objective().gradient(x_t);
    let mut curvature = opt.objective().hessian().cloned().unwrap_or_else(|| DMatrix::zeros(n, n));
    for (f, &v) in opt.constraints().inequalities().iter().zip(r.inequality.iter()) {
        if v > 0.0 {
            let mu = v / excess;
            grad.axpy(mu, &f.gradient(x_t), 1.0);
            if let Some(q) = f.hessian() {
                curvature += q * mu;
            }
        }
    }
    for (e, &h) in opt.constraints().equalities().iter().zip(r.equality.iter()) {
        grad.axpy(h / excess, &e.coeffs, 1.0);
    }
    let eig = curvature.symmetric_eigen();
    let cutoff = 1e-10 * eig.eigenvalues.amax();
    let mut descent = 0.0;
    let mut slope_sq = 0.0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let proj = eig.eigenvectors.column(k).dot(&grad);
        if lambda > cutoff && lambda > 0.0 {
            descent += proj * proj / lambda;
        } else {
            slope_sq += proj * proj;
        }
    }
    Some(value - 0.5 * descent - slope_sq.sqrt() * (1.0 + x_t.norm()))
}

/// Upper bound on `f⋆` interpolating a feasible and an infeasible point,
/// together with the interpolated point `(Γ x_F + x_I)/(Γ + 1)`, which is
/// feasible and attains at most the bound.
///
/// `None` when some constraint is tight at `x_F` (within `eps_feas`) but
/// violated at `x_I`, or when `x_I` violates an equality.
pub fn bertsekas_upper_bound(
    opt: &OptimizationProblem,
    x_feasible: &DVector<f64>,
    x_infeasible: &DVector<f64>,
    eps_feas: f64,
) -> Option<(f64, DVector<f64>)> {
    let c = opt.constraints();
    let rf = c.eval_residuals(x_feasible).ok()?;
    let ri = c.eval_residuals(x_infeasible).ok()?;
    if rf.max_violation() > eps_feas {
        return None;
    }
    if ri.equality.iter().any(|h| h.abs() > eps_feas) {
        return None;
    }
    let mut gamma = 0.0_f64;
    for (&vf, &vi) in rf.inequality.iter().zip(ri.inequality.iter()) {
        if vf.abs() <= eps_feas {
            if vi > 0.0 {
                return None;
            }
        } else {
            gamma = gamma.max(vi / -vf);
        }
    }
    let f_feasible = opt.objective().value(x_feasible);
    let f_infeasible = opt.objective().value(x_infeasible);
    let w = 1.0 / (gamma + 1.0);
    let bound = gamma * w * f_feasible + w * f_infeasible;
    let point = x_feasible * (gamma * w) + x_infeasible * w;
    Some((bound, point))
}

/// Bracket construction: an upper bound from a plain feasibility solve
/// started at `x0`, and a lower bound from [`lower_bound`].
pub fn initial_bounds(opt: &OptimizationProblem, x0: &DVector<f64>, options: &OptOptions) -> Result<(Bracket, usize)> {
    check_dim(opt.dim(), x0.len())?;
    let feas_opts = FeasOptions {
        max_iterations: options.budget.remaining(0, options.feas.max_iterations),
        deadline: options.budget.deadline,
        ..options.feas.clone()
    };
    let upper = solve_feasibility(opt.constraints(), x0, &feas_opts)?;
    match upper.status {
        FeasStatus::Feasible => {}
        FeasStatus::Empty => return Err(Error::Infeasible),
        FeasStatus::BudgetExhausted => {
            return Err(Error::BudgetExhausted("no feasible point found for the upper bound".into()))
        }
    }
    let mut used = upper.iterations;
    let bracket = bracket_around(opt, upper.x, options, &mut used)?;
    Ok((bracket, used))
}

/// Bracket whose upper end is the objective at a known feasible point; the
/// lower end comes from [`lower_bound`], whose iterations are added to `used`.
pub fn bracket_around(
    opt: &OptimizationProblem,
    x_feasible: DVector<f64>,
    options: &OptOptions,
    used: &mut usize,
) -> Result<Bracket> {
    check_dim(opt.dim(), x_feasible.len())?;
    let t_plus = opt.objective().value(&x_feasible);
    let lower = lower_bound(opt, &x_feasible, options, used)?;
    let mut bracket = Bracket {
        t_minus: lower.value.min(t_plus),
        t_plus,
        x_feasible,
        x_infeasible: None,
    };
    if let Some(z) = lower.point {
        if opt.constraints().max_violation(&z)? <= options.feas.eps_feas {
            // The relaxed minimizer is feasible, hence optimal.
            bracket.t_plus = opt.objective().value(&z).min(bracket.t_plus);
            bracket.t_minus = bracket.t_minus.min(bracket.t_plus);
            bracket.x_feasible = z;
        } else {
            bracket.x_infeasible = Some(z);
        }
    }
    Ok(bracket)
}

/// A lower bound on `f⋆`, with the relaxed minimizer when one was computed.
#[derive(Clone, Debug)]
pub struct LowerBound {
    pub value: f64,
    pub point: Option<DVector<f64>>,
}

/// Lower bound on `f⋆`, tried in order:
///
/// 1. minimum of `f_0` over the equality constraints alone, when `f_0` is
///    bounded below there (the unconstrained minimum `−Q⁻¹q` when there are
///    no equalities);
/// 2. a dual feasible point of the relaxation keeping only the affine
///    inequalities, found by a feasibility solve in `(x, μ, ν)` with `μ ≥ 0`;
/// 3. multipliers making `x_feasible` stationary for the Lagrangian.
pub fn lower_bound(
    opt: &OptimizationProblem,
    x_feasible: &DVector<f64>,
    options: &OptOptions,
    iterations: &mut usize,
) -> Result<LowerBound> {
    if let Some(z) = equality_constrained_minimum(opt) {
        return Ok(LowerBound {
            value: opt.objective().value(&z),
            point: Some(z),
        });
    }
    if let Some(v) = affine_relaxation_dual_bound(opt, options, iterations)? {
        return Ok(LowerBound { value: v, point: None });
    }
    if let Some(v) = dual_bound_at(opt, x_feasible, options, iterations)? {
        return Ok(LowerBound { value: v, point: None });
    }
    Err(Error::NoLowerBound)
}

/// Minimizer of `f_0` subject to the equalities of `C`, when it exists.
fn equality_constrained_minimum(opt: &OptimizationProblem) -> Option<DVector<f64>> {
    let n = opt.dim();
    let f0 = opt.objective();
    let eqs = opt.constraints().equalities();
    let me = eqs.len();
    let mut kkt = DMatrix::zeros(n + me, n + me);
    if let Some(q) = f0.hessian() {
        kkt.view_mut((0, 0), (n, n)).copy_from(q);
    }
    let mut rhs = DVector::zeros(n + me);
    rhs.rows_mut(0, n).copy_from(&(-f0.linear_part()));
    for (j, e) in eqs.iter().enumerate() {
        for i in 0..n {
            kkt[(n + j, i)] = e.coeffs[i];
            kkt[(i, n + j)] = e.coeffs[i];
        }
        rhs[n + j] = e.rhs;
    }
    let scale = kkt.amax().max(1.0);
    let sol = kkt.clone().svd(true, true).solve(&rhs, 1e-12 * scale).ok()?;
    let residual = (&kkt * &sol - &rhs).norm();
    if !residual.is_finite() || residual > 1e-9 * (1.0 + rhs.norm()) * scale {
        return None;
    }
    Some(sol.rows(0, n).into_owned())
}

/// Feasibility solve for `∇f_0(x) + Σ μ_i a_i + Σ ν_j c_j = 0`, `μ ≥ 0`,
/// over the affine inequalities `a_i'x + b_i ≤ 0` of `C`.
fn affine_relaxation_dual_bound(
    opt: &OptimizationProblem,
    options: &OptOptions,
    iterations: &mut usize,
) -> Result<Option<f64>> {
    let n = opt.dim();
    let f0 = opt.objective();
    let affine: Vec<&ConvexFunction> = opt
        .constraints()
        .inequalities()
        .iter()
        .filter(|f| f.kind() == FunctionKind::Linear)
        .collect();
    let eqs = opt.constraints().equalities();
    let (ma, me) = (affine.len(), eqs.len());
    let dim = n + ma + me;

    let mut equalities = Vec::with_capacity(n);
    for row in 0..n {
        let mut a = DVector::zeros(dim);
        if let Some(q) = f0.hessian() {
            for col in 0..n {
                a[col] = q[(row, col)];
            }
        }
        for (i, f) in affine.iter().enumerate() {
            a[n + i] = f.linear_part()[row];
        }
        for (j, e) in eqs.iter().enumerate() {
            a[n + ma + j] = e.coeffs[row];
        }
        equalities.push(LinearEquality::new(a, -f0.linear_part()[row]));
    }
    let nonneg = (0..ma)
        .map(|i| {
            let mut a = DVector::zeros(dim);
            a[n + i] = -1.0;
            ConvexFunction::linear(a, 0.0)
        })
        .collect();
    let dual = FeasibilityProblem::new(dim, nonneg, equalities)?;
    let Some(mut z) = run_budgeted(&dual, &DVector::zeros(dim), options, iterations)? else {
        return Ok(None);
    };
    polish_stationarity(&dual, &mut z, n..n + ma);
    let x = z.rows(0, n).into_owned();
    let mut value = f0.value(&x);
    for (i, f) in affine.iter().enumerate() {
        value += z[n + i].max(0.0) * f.value(&x);
    }
    for (j, e) in eqs.iter().enumerate() {
        value += z[n + ma + j] * e.residual(&x);
    }
    Ok(Some(value))
}

/// Multipliers `μ ≥ 0`, `ν` with `∇f_0(x_F) + Σ μ_i ∇f_i(x_F) + Σ ν_j c_j = 0`.
fn dual_bound_at(
    opt: &OptimizationProblem,
    x_feasible: &DVector<f64>,
    options: &OptOptions,
    iterations: &mut usize,
) -> Result<Option<f64>> {
    let n = opt.dim();
    let ineqs = opt.constraints().inequalities();
    let eqs = opt.constraints().equalities();
    let (m, me) = (ineqs.len(), eqs.len());
    let dim = m + me;
    let grads: Vec<DVector<f64>> = ineqs.iter().map(|f| f.gradient(x_feasible)).collect();
    let g0 = opt.objective().gradient(x_feasible);
    let equalities = (0..n)
        .map(|row| {
            let mut a = DVector::zeros(dim);
            for (i, g) in grads.iter().enumerate() {
                a[i] = g[row];
            }
            for (j, e) in eqs.iter().enumerate() {
                a[m + j] = e.coeffs[row];
            }
            LinearEquality::new(a, -g0[row])
        })
        .collect();
    let nonneg = (0..m)
        .map(|i| {
            let mut a = DVector::zeros(dim);
            a[i] = -1.0;
            ConvexFunction::linear(a, 0.0)
        })
        .collect();
    let dual = FeasibilityProblem::new(dim, nonneg, equalities)?;
    let Some(mut z) = run_budgeted(&dual, &DVector::zeros(dim), options, iterations)? else {
        return Ok(None);
    };
    polish_stationarity(&dual, &mut z, 0..m);
    let mut value = opt.objective().value(x_feasible);
    for (i, f) in ineqs.iter().enumerate() {
        value += z[i].max(0.0) * f.value(x_feasible);
    }
    for (j, e) in eqs.iter().enumerate() {
        value += z[m + j] * e.residual(x_feasible);
    }
    Ok(Some(value))
}

/// Removes the stationarity residual left by the feasibility tolerance.
///
/// The inner solve stops with `‖Ez − e‖ ≤ ε_feas`; in a Lagrangian that is
/// affine in `x` such a residual shifts the bound by `residual · ‖x‖`. The
/// minimal-norm correction moving only the free variables and the positive
/// multipliers (those in `multipliers` at zero stay there) brings it down to
/// rounding level.
fn polish_stationarity(dual: &FeasibilityProblem, z: &mut DVector<f64>, multipliers: std::ops::Range<usize>) {
    for i in multipliers.clone() {
        z[i] = z[i].max(0.0);
    }
    let eqs = dual.equalities();
    if eqs.is_empty() {
        return;
    }
    let free: Vec<usize> = (0..z.len()).filter(|i| !multipliers.contains(i) || z[*i] > 0.0).collect();
    let e = DMatrix::from_fn(eqs.len(), free.len(), |r, c| eqs[r].coeffs[free[c]]);
    let residual = DVector::from_fn(eqs.len(), |r, _| -eqs[r].residual(z));
    let tol = 1e-12 * e.amax().max(1.0);
    let Ok(step) = e.svd(true, true).solve(&residual, tol) else {
        return;
    };
    for (k, &i) in free.iter().enumerate() {
        z[i] += step[k];
    }
    for i in multipliers {
        z[i] = z[i].max(0.0);
    }
}

fn run_budgeted(
    problem: &FeasibilityProblem,
    x0: &DVector<f64>,
    options: &OptOptions,
    iterations: &mut usize,
) -> Result<Option<DVector<f64>>> {
    let feas = FeasOptions {
        max_iterations: options.budget.remaining(*iterations, options.feas.max_iterations),
        deadline: options.budget.deadline,
        ..options.feas.clone()
    };
    let out = solve_feasibility(problem, x0, &feas)?;
    *iterations += out.iterations;
    match out.status {
        FeasStatus::Feasible => Ok(Some(out.x)),
        FeasStatus::Empty => Ok(None),
        FeasStatus::BudgetExhausted => Err(Error::BudgetExhausted("lower bound computation".into())),
    }
}

/// Computes the initial bracket from the origin and runs the bisection.
pub fn minimize(opt: &OptimizationProblem, options: &OptOptions) -> Result<OptResult> {
    let (bracket, used) = initial_bounds(opt, &DVector::zeros(opt.dim()), options)?;
    let mut result = solve(opt, options, bracket)?;
    result.inner_iterations += used;
    Ok(result)
}

/// Bisection on `t` starting from a valid bracket.
///
/// An inner solve that runs out of its iteration cap leaves the certified
/// bracket untouched; the search then continues above that level, so later
/// levels can still improve the feasible witness. If the search closes on
/// the upper end without certifying the gap, or the budget runs out, the
/// status is [`OptStatus::BudgetExhausted`]. The returned point is always the
/// current feasible witness.
pub fn solve(opt: &OptimizationProblem, options: &OptOptions, mut bracket: Bracket) -> Result<OptResult> {
    check_dim(opt.dim(), bracket.x_feasible.len())?;
    options.feas.validate()?;
    let eps_feas = options.feas.eps_feas;
    let mut used = 0;
    let mut bisections = 0;
    let mut history = Vec::new();
    let mut warm = bracket.x_feasible.clone();
    let mut status = OptStatus::Converged;
    // Levels below `search_floor` are not revisited; it only exceeds
    // `t_minus` after inconclusive inner solves.
    let mut search_floor = bracket.t_minus;

    while bracket.width() > options.tolerance(bracket.t_plus) {
        if bracket.t_plus - search_floor <= options.tolerance(bracket.t_plus) {
            status = OptStatus::BudgetExhausted;
            break;
        }
        let remaining = options.budget.remaining(used, options.feas.max_iterations);
        if bisections >= options.max_bisections
            || remaining == 0
            || options.budget.deadline.is_some_and(|d| Instant::now() >= d)
        {
            status = OptStatus::BudgetExhausted;
            break;
        }
        let t = 0.5 * (search_floor + bracket.t_plus);
        let level = level_set_problem(opt, t);
        let feas = FeasOptions {
            max_iterations: remaining,
            deadline: options.budget.deadline,
            ..options.feas.clone()
        };
        let FeasOutcome {
            status: inner,
            x: x_t,
            iterations,
            gradient_norm,
            ..
        } = solve_feasibility(&level, &warm, &feas)?;
        used += iterations;

        let verdict = match inner {
            FeasStatus::Empty => {
                let lower = if options.strengthen {
                    dual_lower_bound(opt, &x_t, t).map_or(t, |v| v.max(t))
                } else {
                    t
                };
                bracket.t_minus = bracket.t_minus.max(lower.min(bracket.t_plus));
                bracket.x_infeasible = Some(x_t.clone());
                if options.strengthen {
                    tighten_upper(opt, &mut bracket, eps_feas);
                }
                LevelVerdict::Empty
            }
            FeasStatus::Feasible => {
                let f = opt.objective().value(&x_t);
                bracket.x_feasible = x_t.clone();
                bracket.t_plus = if options.strengthen { f.min(t) } else { t };
                if options.strengthen {
                    tighten_upper(opt, &mut bracket, eps_feas);
                }
                // `x_t` may violate constraints by up to ε_feas, so `f` can
                // undershoot the certified lower bound slightly.
                bracket.t_plus = bracket.t_plus.max(bracket.t_minus);
                LevelVerdict::Feasible
            }
            FeasStatus::BudgetExhausted => {
                // Stationary with a merit too small to call the level empty:
                // the Lagrangian bound at `x_t` may still certify it.
                let certified = (options.strengthen && gradient_norm <= options.feas.eps_grad)
                    .then(|| certified_dual_bound(opt, &x_t, t))
                    .flatten()
                    .filter(|&v| v > t);
                match certified {
                    Some(lower) => {
                        bracket.t_minus = bracket.t_minus.max(lower.min(bracket.t_plus));
                        bracket.x_infeasible = Some(x_t.clone());
                        tighten_upper(opt, &mut bracket, eps_feas);
                        LevelVerdict::Empty
                    }
                    None => LevelVerdict::Unknown,
                }
            }
        };
        history.push(BisectionRecord {
            level: t,
            verdict,
            t_minus: bracket.t_minus,
            t_plus: bracket.t_plus,
            inner_iterations: iterations,
        });
        search_floor = match verdict {
            LevelVerdict::Unknown => t,
            _ => search_floor.max(bracket.t_minus).min(bracket.t_plus),
        };
        bisections += 1;
        if verdict != LevelVerdict::Unknown {
            warm = x_t;
        }
    }

    let objective = opt.objective().value(&bracket.x_feasible);
    Ok(OptResult {
        x: bracket.x_feasible.clone(),
        objective,
        bracket,
        bisections,
        inner_iterations: used,
        status,
        history,
    })
}

fn tighten_upper(opt: &OptimizationProblem, bracket: &mut Bracket, eps_feas: f64) {
    let Some(x_i) = &bracket.x_infeasible else {
        return;
    };
    if let Some((bound, point)) = bertsekas_upper_bound(opt, &bracket.x_feasible, x_i, eps_feas) {
        if bound < bracket.t_plus {
            bracket.t_plus = bound.max(bracket.t_minus);
            bracket.x_feasible = point;
        }
    }
}
