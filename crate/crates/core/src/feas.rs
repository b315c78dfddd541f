//! Regularized piecewise-smooth Newton method for convex feasibility.
//!
//! Minimizes the merit function `F` of a [`FeasibilityProblem`]. Each
//! iteration solves `(H + δI) d = −∇F` with `H` the generalized Hessian over
//! the active set and `δ = ζ‖∇F‖`, then backtracks on `τ ∈ {1, ½, ¼, …}`
//! until the Armijo condition `F(x + τd) ≤ F(x) + στ∇F'd` holds.
//!
//! After a short step `δ` is multiplied by a factor that grows tenfold per
//! short step and shrinks back after full steps, in the manner of
//! Levenberg–Marquardt. Without it, flat directions of the active piece give
//! steps of length `O(1/ζ)` that run straight into rows the model ignores.
//!
//! A zero merit value certifies feasibility; a stationary point with
//! positive merit certifies that the set is empty, since `F` is convex.

use std::io::Write;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::problem::{merit_from, ActiveIndexSet, FeasibilityProblem, HessianMode};

#[derive(Clone, Debug, PartialEq)]
pub struct FeasOptions {
    /// Armijo slope fraction, in `(0, ½)`.
    pub sigma: f64,
    /// Regularization fraction, in `(0, 1)`.
    pub zeta: f64,
    /// Tolerance on the largest constraint violation.
    pub eps_feas: f64,
    /// Tolerance on `‖∇F‖` for declaring a stationary point.
    pub eps_grad: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub deadline: Option<Instant>,
    pub hessian: HessianMode,
}

impl Default for FeasOptions {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            zeta: 0.5,
            eps_feas: 1e-8,
            eps_grad: 1e-10,
            max_iterations: 500,
            max_halvings: 50,
            deadline: None,
            hessian: HessianMode::Full,
        }
    }
}

impl FeasOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma < 0.5) {
            return Err(Error::InvalidArgument(format!("sigma must lie in (0, 1/2), got {}", self.sigma)));
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(Error::InvalidArgument(format!("zeta must lie in (0, 1), got {}", self.zeta)));
        }
        if !(self.eps_feas > 0.0 && self.eps_grad > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        Ok(())
    }

    /// Merit value above which a stationary point may count as proof of
    /// emptiness; the Lagrangian certificate is required as well.
    pub fn empty_merit_threshold(&self) -> f64 {
        self.eps_feas * self.eps_feas / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeasStatus {
    Feasible,
    Empty,
    BudgetExhausted,
}

#[derive(Clone, Debug)]
pub struct FeasOutcome {
    pub status: FeasStatus,
    pub x: DVector<f64>,
    pub merit: f64,
    pub max_violation: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// The line search broke down before the budget ran out.
    pub stalled: bool,
}

/// One row of the iteration trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub merit: f64,
    pub gradient_norm: f64,
    pub step: f64,
    pub active: usize,
}

/// Solves `(∇²F_I(x) + δI) d = −∇F(x)` with `δ = ζ‖∇F(x)‖`.
pub fn newton_step(
    problem: &FeasibilityProblem,
    x: &DVector<f64>,
    active: &ActiveIndexSet,
    zeta: f64,
    mode: HessianMode,
) -> Result<DVector<f64>> {
    check_dim(problem.dim(), x.len())?;
    let r = problem.eval_residuals(x)?;
    // Rows outside `active` are masked out of the Hessian by a negative value.
    let mut masked = r.inequality.clone();
    for (i, v) in masked.iter_mut().enumerate() {
        if !active.contains(i) {
            *v = -1.0;
        }
    }
    let n = problem.dim();
    let mut grad = DVector::zeros(n);
    let mut scratch = DVector::zeros(n);
    problem.gradient_from(x, &r.inequality, &r.equality, &mut grad, &mut scratch);
    let mut hess = DMatrix::zeros(n, n);
    problem.hessian_from(x, &masked, mode, &mut hess, &mut scratch);
    regularized_solve(hess, &grad, zeta)
}

fn regularized_solve(mut hess: DMatrix<f64>, grad: &DVector<f64>, zeta: f64) -> Result<DVector<f64>> {
    let gnorm = grad.norm();
    if gnorm == 0.0 {
        return Err(Error::ZeroGradient);
    }
    let delta = zeta * gnorm;
    for i in 0..hess.nrows() {
        hess[(i, i)] += delta;
    }
    let chol = Cholesky::new(hess).ok_or(Error::NotPositiveDefinite)?;
    Ok(-chol.solve(grad))
}

/// Largest `τ = 2^{-i}`, `i ≤ 50`, with `F(x+τd) ≤ F(x) + στ∇F(x)'d`.
pub fn armijo_linesearch(problem: &FeasibilityProblem, x: &DVector<f64>, d: &DVector<f64>, sigma: f64) -> Result<f64> {
    check_dim(problem.dim(), x.len())?;
    check_dim(problem.dim(), d.len())?;
    let merit = problem.eval_merit(x)?;
    let slope = problem.eval_merit_gradient(x)?.dot(d);
    let mut ws = Workspace::new(problem);
    ws.line_search(problem, x, d, merit, slope, sigma, FeasOptions::default().max_halvings, 0.0, 0.0)
        .map(|(tau, _)| tau)
}

struct Workspace {
    ineq: DVector<f64>,
    eq: DVector<f64>,
    grad: DVector<f64>,
    scratch: DVector<f64>,
    hess: DMatrix<f64>,
    trial: DVector<f64>,
    grad_scratch: DVector<f64>,
}

impl Workspace {
    fn new(problem: &FeasibilityProblem) -> Self {
        let n = problem.dim();
        Self {
            ineq: DVector::zeros(problem.inequalities().len()),
            eq: DVector::zeros(problem.equalities().len()),
            grad: DVector::zeros(n),
            scratch: DVector::zeros(n),
            hess: DMatrix::zeros(n, n),
            trial: DVector::zeros(n),
            grad_scratch: DVector::zeros(n),
        }
    }

    /// Returns the accepted step and the merit value there.
    #[allow(clippy::too_many_arguments)]
    fn line_search(
        &mut self,
        problem: &FeasibilityProblem,
        x: &DVector<f64>,
        d: &DVector<f64>,
        merit: f64,
        slope: f64,
        sigma: f64,
        max_halvings: usize,
        grad_norm: f64,
        noise: f64,
    ) -> Result<(f64, f64)> {
        let mut tau = 1.0;
        for _ in 0..=max_halvings {
            self.trial.copy_from(x);
            self.trial.axpy(tau, d, 1.0);
            problem.fill_residuals(&self.trial, &mut self.ineq, &mut self.eq);
            let trial_merit = merit_from(&self.ineq, &self.eq);
            if self.trial == *x {
                // The step is below the resolution of `x`.
                break;
            }
            if trial_merit <= merit + sigma * tau * slope {
                return Ok((tau, trial_merit));
            }
            if tau == 1.0 && -slope <= noise && trial_merit <= merit + noise {
                // The predicted decrease is below the resolution of the merit,
                // so Armijo cannot discriminate; take the Newton step when it
                // reduces the gradient instead.
                problem.gradient_from(&self.trial, &self.ineq, &self.eq, &mut self.scratch, &mut self.grad_scratch);
                if self.scratch.norm() < grad_norm {
                    return Ok((tau, trial_merit));
                }
            }
            tau *= 0.5;
        }
        Err(Error::LineSearchFailed(max_halvings))
    }
}

/// Positive when the multipliers `λ_i = f_i(x)₊`, `ν_j = c_j'x − d_j` prove
/// the set empty.
///
/// Every feasible `y` has `L(y) = Σ λ_i f_i(y) + Σ ν_j (c_j'y − d_j) ≤ 0`.
/// `L` is a convex quadratic with `L(x) = 2F(x)` and `∇L(x) = ∇F(x)`, so its
/// infimum over `x + range(∇²L)` is `2F(x) − ½ g'(∇²L)⁺g` with `g = ∇F(x)`.
/// Along the null space of `∇²L`, `L` is affine with slope `g₀`, the
/// projection of `g`; that slope is charged over a distance `1 + ‖x‖`.
fn emptiness_margin(
    problem: &FeasibilityProblem,
    x: &DVector<f64>,
    merit: f64,
    ineq: &DVector<f64>,
    grad: &DVector<f64>,
) -> f64 {
    let n = problem.dim();
    let mut curvature = DMatrix::zeros(n, n);
    for (f, &v) in problem.inequalities().iter().zip(ineq.iter()) {
        if v > 0.0 {
            if let Some(q) = f.hessian() {
                curvature += q * v;
            }
        }
    }
    let eig = curvature.symmetric_eigen();
    let cutoff = 1e-10 * eig.eigenvalues.amax();
    let mut descent = 0.0;
    let mut slope_sq = 0.0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let proj = eig.eigenvectors.column(k).dot(grad);
        if lambda > cutoff && lambda > 0.0 {
            descent += proj * proj / lambda;
        } else {
            slope_sq += proj * proj;
        }
    }
    2.0 * merit - 0.5 * descent - slope_sq.sqrt() * (1.0 + x.norm())
}

/// Step length below which the regularization is judged too weak: the model
/// ignored rows that switch on along the step, typically in directions where
/// the active rows give no curvature.
const SHORT_STEP: f64 = 0.1;
/// Growth and shrink factor of the regularization multiplier.
const BOOST_FACTOR: f64 = 10.0;
const MAX_BOOST: f64 = 1e12;

/// Rounding error in `F(x)`: each residual carries an error proportional to
/// the magnitude of its terms, weighted by the residual itself.
fn merit_noise(problem: &FeasibilityProblem, x: &DVector<f64>, ineq: &DVector<f64>, eq: &DVector<f64>) -> f64 {
    let mut noise = 0.0;
    for (f, &v) in problem.inequalities().iter().zip(ineq.iter()) {
        if v > 0.0 {
            noise += v * f.value_magnitude(x);
        }
    }
    for (e, &h) in problem.equalities().iter().zip(eq.iter()) {
        let magnitude: f64 = e.coeffs.iter().zip(x.iter()).map(|(c, xi)| (c * xi).abs()).sum::<f64>() + e.rhs.abs();
        noise += h.abs() * magnitude;
    }
    16.0 * f64::EPSILON * (noise + merit_from(ineq, eq))
}

fn max_violation(ineq: &DVector<f64>, eq: &DVector<f64>) -> f64 {
    let a = ineq.iter().fold(0.0_f64, |m, v| m.max(*v));
    eq.iter().fold(a, |m, v| m.max(v.abs()))
}

pub fn solve_feasibility(problem: &FeasibilityProblem, x0: &DVector<f64>, options: &FeasOptions) -> Result<FeasOutcome> {
    solve_feasibility_traced(problem, x0, options, None)
}

pub fn solve_feasibility_traced(
    problem: &FeasibilityProblem,
    x0: &DVector<f64>,
    options: &FeasOptions,
    mut trace: Option<&mut dyn FnMut(&IterationRecord)>,
) -> Result<FeasOutcome> {
    options.validate()?;
    check_dim(problem.dim(), x0.len())?;
    let mut ws = Workspace::new(problem);
    let mut x = x0.clone();
    let mut k = 0;
    let mut stalled = false;
    let mut boost = 1.0;

    problem.fill_residuals(&x, &mut ws.ineq, &mut ws.eq);
    let mut merit = merit_from(&ws.ineq, &ws.eq);

    loop {
        let violation = max_violation(&ws.ineq, &ws.eq);
        problem.gradient_from(&x, &ws.ineq, &ws.eq, &mut ws.grad, &mut ws.scratch);
        let gnorm = ws.grad.norm();
        let outcome = |status, x: DVector<f64>, stalled| FeasOutcome {
            status,
            x,
            merit,
            max_violation: violation,
            gradient_norm: gnorm,
            iterations: k,
            stalled,
        };

        if violation <= options.eps_feas {
            return Ok(outcome(FeasStatus::Feasible, x, false));
        }
        // A small gradient alone also occurs while crawling toward a thin
        // set, so emptiness additionally needs the Lagrangian certificate.
        if gnorm <= options.eps_grad
            && merit > options.empty_merit_threshold()
            && emptiness_margin(problem, &x, merit, &ws.ineq, &ws.grad) > 0.0
        {
            return Ok(outcome(FeasStatus::Empty, x, false));
        }
        if stalled || k >= options.max_iterations || options.deadline.is_some_and(|d| Instant::now() >= d) || gnorm == 0.0
        {
            return Ok(outcome(FeasStatus::BudgetExhausted, x, stalled));
        }

        problem.hessian_from(&x, &ws.ineq, options.hessian, &mut ws.hess, &mut ws.scratch);
        let d = regularized_solve(ws.hess.clone(), &ws.grad, options.zeta * boost)?;
        let slope = ws.grad.dot(&d);
        let noise = merit_noise(problem, &x, &ws.ineq, &ws.eq);
        let active = ws.ineq.iter().filter(|v| **v >= 0.0).count();

        match ws.line_search(problem, &x, &d, merit, slope, options.sigma, options.max_halvings, gnorm, noise) {
            Ok((tau, new_merit)) => {
                if let Some(t) = trace.as_mut() {
                    t(&IterationRecord {
                        iteration: k,
                        merit,
                        gradient_norm: gnorm,
                        step: tau,
                        active,
                    });
                }
                x.axpy(tau, &d, 1.0);
                merit = new_merit;
                k += 1;
                if tau == 1.0 {
                    boost = (boost / BOOST_FACTOR).max(1.0);
                } else if tau < SHORT_STEP {
                    boost = (boost * BOOST_FACTOR).min(MAX_BOOST);
                }
            }
            Err(Error::LineSearchFailed(_)) if boost < MAX_BOOST => boost = (boost * BOOST_FACTOR).min(MAX_BOOST),
            Err(Error::LineSearchFailed(_)) => stalled = true,
            Err(e) => return Err(e),
        }
        problem.fill_residuals(&x, &mut ws.ineq, &mut ws.eq);
    }
}

/// Writes trace records as CSV with header `k,F,grad_norm,tau,active`.
pub fn write_trace_csv<W: Write>(records: &[IterationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "F", "grad_norm", "tau", "active"])?;
    for r in records {
        w.write_record(&[
            r.iteration.to_string(),
            format!("{:.16e}", r.merit),
            format!("{:.16e}", r.gradient_norm),
            format!("{:.16e}", r.step),
            r.active.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
