use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anytime_mpc::formats::{ScenarioFile, TerminalSetFile};
use anytime_mpc::mpc::ControllerOptions;
use anytime_mpc::sim::{
    benchmark_solver, oscillator_scenario, oscillator_terminal_set, run_closed_loop, write_bench_csv, write_run_csv,
    BudgetPolicy,
};
use clap::{ArgGroup, Parser, Subcommand, ValueEnum};

/// Closed-loop simulation of the anytime MPC controller.
#[derive(Parser)]
#[command(name = "mpc-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the closed loop and write one CSV row per step.
    #[command(group(ArgGroup::new("budget").required(true).args(["budget_iters", "budget_ms", "unbounded"])))]
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        terminal_set: PathBuf,
        /// Inner Newton iterations allowed per step.
        #[arg(long)]
        budget_iters: Option<usize>,
        /// Wall-clock milliseconds allowed per step.
        #[arg(long)]
        budget_ms: Option<f64>,
        #[arg(long)]
        unbounded: bool,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time first-step solves for a range of horizons.
    Bench {
        #[arg(long = "type", value_enum)]
        kind: ProblemKind,
        #[arg(long, value_delimiter = ',', default_value = "6,12,24")]
        horizons: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        /// Scenario file; the shipped oscillator example when absent.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Terminal set; the shipped set matching the problem type when absent.
        #[arg(long)]
        terminal_set: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the maximal λ-contractive admissible polyhedron of the LQR loop.
    TerminalSet {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemKind {
    /// Polyhedral terminal set.
    Qp,
    /// Ellipsoidal terminal set.
    Qcqp,
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> anytime_mpc::Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            terminal_set,
            budget_iters,
            budget_ms,
            unbounded: _,
            steps,
            out,
        } => {
            let model = ScenarioFile::load(&scenario)?.model()?;
            let (scenario, target) = model.scenario(&TerminalSetFile::load(&terminal_set)?)?;
            let policy = match (budget_iters, budget_ms) {
                (Some(k), _) => BudgetPolicy::Iterations(k),
                (_, Some(ms)) => BudgetPolicy::Deadline(Duration::from_secs_f64(ms.max(0.0) / 1e3)),
                _ => BudgetPolicy::Unbounded,
            };
            let run = run_closed_loop(&scenario, &target, &ControllerOptions::default(), policy, steps, &model.x0)?;
            write_run_csv(&run, output(&out)?)?;
            eprintln!("J = {:.6}", run.cumulated_cost);
        }
        Command::Bench {
            kind,
            horizons,
            repetitions,
            scenario,
            terminal_set,
            out,
        } => {
            let file = match scenario {
                Some(p) => ScenarioFile::load(p)?,
                None => oscillator_scenario(),
            };
            let set = match terminal_set {
                Some(p) => TerminalSetFile::load(p)?,
                None => oscillator_terminal_set(matches!(kind, ProblemKind::Qp)),
            };
            let model = file.model()?;
            let (scenario, target) = model.scenario(&set)?;
            let rows = benchmark_solver(&scenario, &target, &model.x0, &horizons, repetitions)?;
            write_bench_csv(&rows, output(&out)?)?;
        }
        Command::TerminalSet { scenario, lambda, out } => {
            let set = ScenarioFile::load(scenario)?.model()?.lqr_polyhedron(lambda)?;
            let mut w = output(&out)?;
            serde_json::to_writer_pretty(&mut w, &set)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
