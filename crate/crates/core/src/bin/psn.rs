use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anytime_mpc::feas::{solve_feasibility_traced, write_trace_csv, FeasOptions, FeasStatus, IterationRecord};
use anytime_mpc::formats::ProblemFile;
use anytime_mpc::opt::{minimize, BisectionRecord, LevelVerdict, OptOptions, OptStatus};
use anytime_mpc::{Budget, Error};
use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde_json::json;

/// Exit codes beyond 0 (converged / feasible), 1 (error) and 2 (usage).
const EXIT_BUDGET_EXHAUSTED: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

/// Convex feasibility and optimization with the piecewise-smooth Newton solver.
#[derive(Parser)]
#[command(name = "psn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimize the objective over the constraints; prints {x, f0, gap, iterations}.
    Solve {
        problem: PathBuf,
        /// Absolute tolerance on the certified gap.
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Wall-clock allowance in milliseconds.
        #[arg(long)]
        budget_ms: Option<f64>,
        /// Write the bisection levels as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Find a point satisfying the constraints; the objective is ignored.
    Feasible {
        problem: PathBuf,
        /// Starting point, comma separated; the origin when absent.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        start: Option<Vec<f64>>,
        #[arg(long)]
        budget_ms: Option<f64>,
        /// Write the Newton iterations as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn budget(ms: Option<f64>) -> Budget {
    ms.map_or(Budget::unlimited(), |ms| Budget::for_duration(Duration::from_secs_f64(ms.max(0.0) / 1e3)))
}

fn write_bisection_csv(history: &[BisectionRecord], path: &PathBuf) -> anytime_mpc::Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["k", "level", "verdict", "t_minus", "t_plus", "inner_iters"])?;
    for (k, r) in history.iter().enumerate() {
        let verdict = match r.verdict {
            LevelVerdict::Feasible => "feasible",
            LevelVerdict::Empty => "empty",
            LevelVerdict::Unknown => "unknown",
        };
        w.write_record([
            k.to_string(),
            format!("{:.16e}", r.level),
            verdict.to_string(),
            format!("{:.16e}", r.t_minus),
            format!("{:.16e}", r.t_plus),
            r.inner_iterations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn vector_json(x: &DVector<f64>) -> serde_json::Value {
    json!(x.iter().copied().collect::<Vec<_>>())
}

fn status_exit(status: &str) -> ExitCode {
    match status {
        "converged" | "feasible" => ExitCode::SUCCESS,
        "budget_exhausted" => ExitCode::from(EXIT_BUDGET_EXHAUSTED),
        _ => ExitCode::from(EXIT_INFEASIBLE),
    }
}

fn run(cli: Cli) -> anytime_mpc::Result<ExitCode> {
    match cli.command {
        Command::Solve {
            problem,
            eps,
            budget_ms,
            trace,
        } => {
            let opt = ProblemFile::load(&problem)?.to_problem()?;
            let options = OptOptions {
                eps,
                budget: budget(budget_ms),
                ..OptOptions::default()
            };
            let (report, status) = match minimize(&opt, &options) {
                Ok(result) => {
                    if let Some(path) = &trace {
                        write_bisection_csv(&result.history, path)?;
                    }
                    let status = match result.status {
                        OptStatus::Converged => "converged",
                        OptStatus::BudgetExhausted => "budget_exhausted",
                    };
                    let report = json!({
                        "status": status,
                        "x": vector_json(&result.x),
                        "f0": result.objective,
                        "gap": result.gap(),
                        "iterations": result.bisections,
                        "inner_iterations": result.inner_iterations,
                    });
                    (report, status)
                }
                Err(Error::Infeasible) => (json!({"status": "infeasible", "x": null}), "infeasible"),
                Err(Error::BudgetExhausted(_)) => (json!({"status": "budget_exhausted", "x": null}), "budget_exhausted"),
                Err(e) => return Err(e),
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(status_exit(status))
        }
        Command::Feasible {
            problem,
            start,
            budget_ms,
            trace,
        } => {
            let opt = ProblemFile::load(&problem)?.to_problem()?;
            let c = opt.constraints();
            let x0 = start.map_or_else(|| DVector::zeros(c.dim()), DVector::from_vec);
            let options = FeasOptions {
                deadline: budget(budget_ms).deadline,
                ..FeasOptions::default()
            };
            let mut records = Vec::new();
            let mut record = |r: &IterationRecord| records.push(*r);
            let out = solve_feasibility_traced(c, &x0, &options, Some(&mut record))?;
            if let Some(path) = &trace {
                write_trace_csv(&records, BufWriter::new(File::create(path)?))?;
            }
            let status = match out.status {
                FeasStatus::Feasible => "feasible",
                FeasStatus::Empty => "empty",
                FeasStatus::BudgetExhausted => "budget_exhausted",
            };
            let report = json!({
                "status": status,
                "x": vector_json(&out.x),
                "merit": out.merit,
                "max_violation": out.max_violation,
                "iterations": out.iterations,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(status_exit(status))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
