//! Closed-loop simulation and solver timing.

use std::io::{Read, Write};
use std::time::{Duration, Instant};

use nalgebra::DVector;

use crate::budget::Budget;
use crate::error::{Error, Result};
use crate::formats::{ScenarioFile, TerminalSetFile};
use crate::mpc::{build_mpc_problem, AnytimeController, ControllerOptions, MpcScenario, StepSolverStatus};
use crate::opt::{minimize, OptOptions};
use crate::terminal::SteadyStateTarget;

/// Steps whose plan costs make up the cumulated cost `J`.
pub const COST_STEPS: usize = 11;

/// The oscillator example shipped with the crate.
pub const OSCILLATOR_SCENARIO: &str = include_str!("../scenarios/oscillator.json");
pub const OSCILLATOR_ELLIPSOID: &str = include_str!("../scenarios/oscillator_ellipsoid.json");
pub const OSCILLATOR_POLYHEDRON: &str = include_str!("../scenarios/oscillator_polyhedron.json");

pub fn oscillator_scenario() -> ScenarioFile {
    serde_json::from_str(OSCILLATOR_SCENARIO).expect("shipped scenario parses")
}

pub fn oscillator_terminal_set(polyhedral: bool) -> TerminalSetFile {
    let text = if polyhedral { OSCILLATOR_POLYHEDRON } else { OSCILLATOR_ELLIPSOID };
    serde_json::from_str(text).expect("shipped terminal set parses")
}

/// Per-step computation allowance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BudgetPolicy {
    Unbounded,
    /// Cap on inner Newton iterations per step.
    Iterations(usize),
    /// Wall-clock allowance per step.
    Deadline(Duration),
}

impl BudgetPolicy {
    pub fn budget(&self) -> Budget {
        match *self {
            BudgetPolicy::Unbounded => Budget::unlimited(),
            BudgetPolicy::Iterations(k) => Budget::iterations(k),
            BudgetPolicy::Deadline(d) => Budget::for_duration(d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    /// `φ(t)` of the chosen plan.
    pub phi: f64,
    /// `f(x(t))₊`.
    pub f_plus: f64,
    /// Realized `(x − x_r)'Q(x − x_r) + (u − u_r)'R(u − u_r)`.
    pub stage_cost: f64,
    /// Objective value of the chosen plan.
    pub plan_cost: f64,
    pub inner_iterations: usize,
    pub fallback_used: bool,
    pub solver_status: StepSolverStatus,
}

#[derive(Clone, Debug)]
pub struct SimulationRun {
    pub policy: BudgetPolicy,
    pub steps: usize,
    pub records: Vec<StepRecord>,
    /// Sum of the plan costs over the first [`COST_STEPS`] steps.
    pub cumulated_cost: f64,
}

/// Simulates `x(t+1) = Ax(t) + Bu(t)` under the anytime controller.
pub fn run_closed_loop(
    scenario: &MpcScenario,
    target: &SteadyStateTarget,
    options: &ControllerOptions,
    policy: BudgetPolicy,
    steps: usize,
    x0: &DVector<f64>,
) -> Result<SimulationRun> {
    if steps < COST_STEPS {
        return Err(Error::InvalidArgument(format!(
            "at least {COST_STEPS} steps are needed for the cumulated cost, got {steps}"
        )));
    }
    let mut controller = AnytimeController::new(scenario.clone(), target.clone(), options.clone())?;
    let mut x = x0.clone();
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let out = controller.step(&x, policy.budget())?;
        let d = out.diagnostics;
        records.push(StepRecord {
            t: d.t,
            x: x.clone(),
            u: out.u.clone(),
            y: scenario.output(&x),
            phi: d.phi,
            f_plus: d.f_plus,
            stage_cost: scenario.stage_cost(target, &x, &out.u),
            plan_cost: d.cost,
            inner_iterations: d.inner_iterations,
            fallback_used: d.fallback_used,
            solver_status: d.solver_status,
        });
        x = scenario.step_model(&x, &out.u);
    }
    let cumulated_cost = records[..COST_STEPS].iter().map(|r| r.plan_cost).sum();
    Ok(SimulationRun {
        policy,
        steps,
        records,
        cumulated_cost,
    })
}

fn header(n: usize, m: usize, p: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("x{i}")));
    h.extend((1..=m).map(|i| format!("u{i}")));
    h.extend((1..=p).map(|i| format!("y{i}")));
    for name in ["phi", "f_plus", "stage_cost", "inner_iters", "fallback_used", "plan_cost"] {
        h.push(name.to_string());
    }
    h
}

/// Writes one row per step; reals use 17 significant digits.
pub fn write_run_csv<W: Write>(run: &SimulationRun, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let first = run
        .records
        .first()
        .ok_or_else(|| Error::InvalidArgument("run has no steps".into()))?;
    w.write_record(header(first.x.len(), first.u.len(), first.y.len()))?;
    let real = |v: f64| format!("{v:.16e}");
    for r in &run.records {
        let mut row = vec![r.t.to_string()];
        row.extend(r.x.iter().chain(r.u.iter()).chain(r.y.iter()).map(|v| real(*v)));
        row.push(real(r.phi));
        row.push(real(r.f_plus));
        row.push(real(r.stage_cost));
        row.push(r.inner_iterations.to_string());
        row.push(if r.fallback_used { "1" } else { "0" }.to_string());
        row.push(real(r.plan_cost));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One parsed row of a run CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub phi: f64,
    pub f_plus: f64,
    pub stage_cost: f64,
    pub inner_iterations: usize,
    pub fallback_used: bool,
    pub plan_cost: f64,
}

pub fn read_run_csv<R: Read>(input: R) -> Result<Vec<RunRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let count = |prefix: char| {
        headers
            .iter()
            .filter(|h| h.starts_with(prefix) && h[1..].parse::<usize>().is_ok())
            .count()
    };
    let (n, m, p) = (count('x'), count('u'), count('y'));
    let bad = |what: &str| Error::InvalidArgument(format!("malformed run CSV field {what}"));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let real = |i: usize| -> Result<f64> { rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad(&i.to_string())) };
        let block = |start: usize, len: usize| -> Result<DVector<f64>> {
            Ok(DVector::from_vec((start..start + len).map(real).collect::<Result<Vec<_>>>()?))
        };
        let base = 1 + n + m + p;
        rows.push(RunRow {
            t: rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("t"))?,
            x: block(1, n)?,
            u: block(1 + n, m)?,
            y: block(1 + n + m, p)?,
            phi: real(base)?,
            f_plus: real(base + 1)?,
            stage_cost: real(base + 2)?,
            inner_iterations: rec.get(base + 3).and_then(|s| s.parse().ok()).ok_or_else(|| bad("inner_iters"))?,
            fallback_used: rec.get(base + 4).ok_or_else(|| bad("fallback_used"))? == "1",
            plan_cost: real(base + 5)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub horizon: usize,
    pub dim: usize,
    pub inequalities: usize,
    pub equalities: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub inner_iterations: usize,
    pub objective: f64,
}

/// Solves the first-step problem of `base` to optimality for each horizon and
/// reports wall-clock statistics over `repetitions` solves.
pub fn benchmark_solver(
    base: &MpcScenario,
    target: &SteadyStateTarget,
    x0: &DVector<f64>,
    horizons: &[usize],
    repetitions: usize,
) -> Result<Vec<BenchRow>> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("at least one repetition is needed".into()));
    }
    let mut rows = Vec::with_capacity(horizons.len());
    for &horizon in horizons {
        let scenario = MpcScenario {
            horizon,
            ..base.clone()
        };
        scenario.validate()?;
        let mpc = build_mpc_problem(&scenario, x0, f64::INFINITY, target)?;
        let options = OptOptions {
            relative_eps: Some(1e-8),
            ..OptOptions::default()
        };
        let mut times = Vec::with_capacity(repetitions);
        let mut last = None;
        for _ in 0..repetitions {
            let start = Instant::now();
            let result = minimize(&mpc.problem, &options)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            last = Some(result);
        }
        times.sort_by(f64::total_cmp);
        let result = last.expect("at least one repetition");
        let cons = mpc.problem.constraints();
        rows.push(BenchRow {
            horizon,
            dim: mpc.layout.dim(),
            inequalities: cons.inequalities().len(),
            equalities: cons.equalities().len(),
            median_ms: times[times.len() / 2],
            p95_ms: times[((times.len() as f64 * 0.95).ceil() as usize).clamp(1, times.len()) - 1],
            inner_iterations: result.inner_iterations,
            objective: result.objective,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "horizon",
        "dim",
        "inequalities",
        "equalities",
        "median_ms",
        "p95_ms",
        "inner_iters",
        "objective",
    ])?;
    for r in rows {
        w.write_record([
            r.horizon.to_string(),
            r.dim.to_string(),
            r.inequalities.to_string(),
            r.equalities.to_string(),
            format!("{:.6e}", r.median_ms),
            format!("{:.6e}", r.p95_ms),
            r.inner_iterations.to_string(),
            format!("{:.16e}", r.objective),
        ])?;
    }
    w.flush()?;
    Ok(())
}
