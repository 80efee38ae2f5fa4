//! The `slq` command-line driver.
//!
//! Exit status: 0 on success, 1 when a solver reaches a negative
//! mathematical verdict that the caller asked to treat as failure, 2 on
//! input errors (missing files, malformed JSON, dimension mismatches).

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::matnum::Tolerances;
use crate::model::{load_problem_file, LQProblem, Strategy};
use crate::oracle::{self, DEFAULT_CAP};
use crate::perturb::{self, EpsilonSchedule, DEFAULT_GROWTH_TOL};
use crate::riccati;
use crate::sim::{self, Policy};
use crate::stationarity;
use crate::tree::AdaptedProcess;

#[derive(Debug, Parser)]
#[command(
    name = "slq",
    version,
    about = "Solvability analysis for indefinite stochastic LQ problems"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Problem file (JSON).
    pub input: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// ε schedule: `geometric:<e0>:<ratio>:<count>` or a decreasing list `1,0.5,0.1`.
    #[arg(long, default_value = "geometric:1:0.5:21")]
    pub schedule: String,
    /// Relative change bound between the last two control norms.
    #[arg(long, default_value_t = DEFAULT_GROWTH_TOL)]
    pub growth_tol: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generalized Riccati recursion and regularity verdicts.
    Riccati {
        #[command(flatten)]
        common: Common,
        /// Range/symmetry residual bound.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Exit with status 1 unless the solution is regular.
        #[arg(long)]
        require_regular: bool,
    },
    /// ε-sweep; writes `epsilon,control_norm,value` CSV.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: SweepArgs,
        /// Also write the full JSON sweep report to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// ε-sweep followed by open-loop and weak closed-loop extraction.
    Weakcl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: SweepArgs,
        /// Last step of the feedback window (default N-2).
        #[arg(long)]
        window_end: Option<usize>,
        /// Convergence tolerance of the extrapolated limits.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Also write the `epsilon,control_norm,value` CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Exact minimization over tree-adapted controls.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Maximum number of stacked control coordinates.
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: usize,
    },
    /// Equilibrium residual of a control or strategy file.
    Check {
        #[command(flatten)]
        common: Common,
        /// Open-loop tree control (JSON list or {"tree": ...}).
        #[arg(long, conflicts_with = "strategy", required_unless_present = "strategy")]
        control: Option<PathBuf>,
        /// Feedback strategy {"gains": [...], "offsets": ...}.
        #[arg(long)]
        strategy: Option<PathBuf>,
        /// Exit with status 1 if the residual exceeds this bound.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Monte-Carlo cost estimate.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// Defaults to the seed in the problem file.
        #[arg(long)]
        seed: Option<u64>,
        /// `zero`, `riccati`, or `eps:<ε>`; ignored with --strategy/--control.
        #[arg(long, default_value = "riccati")]
        policy: String,
        #[arg(long, conflicts_with = "control")]
        strategy: Option<PathBuf>,
        /// Tree control; requires rademacher noise.
        #[arg(long)]
        control: Option<PathBuf>,
        /// Dump paths to this CSV file.
        #[arg(long)]
        paths: Option<PathBuf>,
        /// Number of paths in the dump.
        #[arg(long, default_value_t = 10)]
        path_count: usize,
    },
}

/// Report plus the exit status it implies.
pub struct Outcome {
    pub report: String,
    pub status: i32,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

fn load_control(path: &Path, p: &LQProblem) -> Result<AdaptedProcess> {
    let v = read_json(path)?;
    let inner = v.get("control").unwrap_or(&v);
    AdaptedProcess::from_json(inner, 0, p.horizon, p.control_dim, "control")
}

fn load_strategy(path: &Path, p: &LQProblem) -> Result<Strategy> {
    Strategy::from_json(&read_json(path)?, p)
}

fn policy_strategy(spec: &str, p: &LQProblem) -> Result<Strategy> {
    let tol = Tolerances::default();
    if spec == "zero" {
        return Ok(Strategy::zero(p));
    }
    if spec == "riccati" {
        let sol = riccati::riccati_backward(p, &tol)?;
        return Ok(sol.strategy());
    }
    if let Some(e) = spec.strip_prefix("eps:") {
        let eps: f64 = e
            .parse()
            .map_err(|_| Error::parse("policy", format!("bad epsilon in {spec:?}")))?;
        return Ok(perturb::perturbed_riccati(p, eps, &tol)?.strategy());
    }
    Err(Error::parse(
        "policy",
        format!("expected zero, riccati or eps:<e>, got {spec:?}"),
    ))
}

/// Runs one subcommand.
pub fn dispatch(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Riccati {
            common,
            tol,
            require_regular,
        } => {
            let p = load_problem_file(&common.input)?;
            let tol = Tolerances::default().with_residual_tol(*tol);
            tol.validate()?;
            let sol = riccati::riccati_backward(&p, &tol)?;
            let status = if *require_regular && !sol.regular() { 1 } else { 0 };
            Ok(Outcome {
                report: pretty(&riccati::report(&sol, &p)),
                status,
            })
        }
        Command::Perturb { common, sweep, json } => {
            let p = load_problem_file(&common.input)?;
            let schedule = EpsilonSchedule::parse(&sweep.schedule)?;
            let run = perturb::epsilon_sweep(&p, &schedule, &Tolerances::default());
            if let Some(path) = json {
                let verdict = perturb::boundedness_verdict(&run, sweep.growth_tol);
                std::fs::write(path, pretty(&perturb::sweep_report(&run, &verdict)))?;
            }
            let mut buf = Vec::new();
            perturb::write_csv(&run, &mut buf)?;
            Ok(Outcome {
                report: String::from_utf8(buf).expect("csv is utf-8"),
                status: 0,
            })
        }
        Command::Weakcl {
            common,
            sweep,
            window_end,
            tol,
            csv,
        } => {
            let p = load_problem_file(&common.input)?;
            let schedule = EpsilonSchedule::parse(&sweep.schedule)?;
            let run = perturb::epsilon_sweep(&p, &schedule, &Tolerances::default());
            if let Some(path) = csv {
                perturb::write_csv(&run, File::create(path).map_err(|e| Error::io_at(path, e))?)?;
            }
            let verdict = perturb::boundedness_verdict(&run, sweep.growth_tol);
            let window_end = window_end.unwrap_or(p.horizon.saturating_sub(2));
            let mut report = perturb::sweep_report(&run, &verdict);
            report["kind"] = json!("weakcl");
            let status = match perturb::extract_weak_closed_loop(&run, window_end, *tol) {
                Ok(w) => {
                    report["weak_closed_loop"] = perturb::weak_closed_loop_report(&w);
                    0
                }
                Err(e @ Error::InvalidInput(_)) => return Err(e),
                Err(e) => {
                    report["weak_closed_loop"] = Value::Null;
                    report["error"] = json!(e.to_string());
                    if let Error::WindowTooLong { step } = e {
                        report["divergent_step"] = json!(step);
                    }
                    1
                }
            };
            Ok(Outcome {
                report: pretty(&report),
                status,
            })
        }
        Command::Oracle { common, cap } => {
            let p = load_problem_file(&common.input)?;
            let sol = oracle::exact_value(&p, *cap)?;
            Ok(Outcome {
                report: pretty(&sol.to_json()),
                status: 0,
            })
        }
        Command::Check {
            common,
            control,
            strategy,
            tol,
        } => {
            let p = load_problem_file(&common.input)?;
            let res = match (control, strategy) {
                (Some(c), _) => stationarity::control_residual(&p, &load_control(c, &p)?)?,
                (None, Some(s)) => stationarity::closed_loop_residual(&p, &load_strategy(s, &p)?)?,
                (None, None) => return Err(Error::invalid("check needs --control or --strategy")),
            };
            let mut report = res.to_json();
            report["tol"] = json!(tol);
            report["stationary"] = json!(res.max_residual <= *tol);
            Ok(Outcome {
                report: pretty(&report),
                status: if res.max_residual <= *tol { 0 } else { 1 },
            })
        }
        Command::Simulate {
            common,
            samples,
            seed,
            policy,
            strategy,
            control,
            paths,
            path_count,
        } => {
            let p = load_problem_file(&common.input)?;
            let seed = seed.unwrap_or(p.noise.seed);
            let tree;
            let strat;
            let pol = if let Some(c) = control {
                tree = load_control(c, &p)?;
                Policy::Tree(&tree)
            } else {
                strat = match strategy {
                    Some(s) => load_strategy(s, &p)?,
                    None => policy_strategy(policy, &p)?,
                };
                Policy::Feedback(&strat)
            };
            let rep = sim::simulate_cost(&p, pol, *samples, seed)?;
            if let Some(path) = paths {
                sim::write_paths(
                    &p,
                    pol,
                    *path_count,
                    seed,
                    BufWriter::new(File::create(path).map_err(|e| Error::io_at(path, e))?),
                )?;
            }
            Ok(Outcome {
                report: pretty(&rep.to_json()),
                status: 0,
            })
        }
    }
}

fn out_path(cli: &Cli) -> Option<&Path> {
    let common = match &cli.command {
        Command::Riccati { common, .. }
        | Command::Perturb { common, .. }
        | Command::Weakcl { common, .. }
        | Command::Oracle { common, .. }
        | Command::Check { common, .. }
        | Command::Simulate { common, .. } => common,
    };
    common.out.as_deref()
}

/// Parses arguments, dispatches, writes the report, and returns the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(outcome) => {
            let written = match out_path(&cli) {
                Some(path) => std::fs::write(path, outcome.report.as_bytes()),
                None => io::stdout().lock().write_all(outcome.report.as_bytes()),
            };
            if let Err(e) = written {
                eprintln!("slq: {e}");
                return 2;
            }
            outcome.status
        }
        Err(e) => {
            eprintln!("slq: {e}");
            match e {
                Error::NotClosedLoopSolvable(_)
                | Error::NotOpenLoopSolvable(_)
                | Error::WindowTooLong { .. }
                | Error::ConvergenceFailure(_)
                | Error::IllConditioned { .. } => 1,
                _ => 2,
            }
        }
    }
}
