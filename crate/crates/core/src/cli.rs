//! Command-line front end shared by the `regime-lq` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use crate::bsde::{solve_adjoint_ode, solve_adjoint_regression, DEFAULT_DEGREE};
use crate::control::build_strategy;
use crate::error::{Error, Result};
use crate::export;
use crate::grid::TimeGrid;
use crate::oracle::{self, ClosedForms, ModulatedHomogeneous};
use crate::problem::{load_file, validate_spec, Initial, ProblemSpec};
use crate::riccati::{regularity_report, solve_gre, solve_perturbed, Classification, RiccatiSolution};
use crate::sim::{estimate_cost, generate_scenarios, simulate_closed_loop, simulate_open_loop};
use crate::sweep::{self, extrapolate_theta, run_sweep, SweepOptions, DEFAULT_LADDER, DEFAULT_T_PRIME_FRACTION};

/// Tolerance on the range-inclusion residual when classifying a Riccati solution.
const REGULARITY_TOL: f64 = 1e-8;

#[derive(Debug, Parser)]
#[command(
    name = "regime-lq",
    version,
    about = "Regime-switching stochastic LQ control: Riccati solves, epsilon sweeps, closed-loop simulation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub args: RunArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Load and check a problem file.
    Validate,
    /// Solve the Riccati equation (general, or perturbed at each --eps).
    Riccati,
    /// Run an epsilon sweep and extract the limit strategy.
    Sweep,
    /// Simulate perturbed closed loops and estimate their costs.
    Simulate,
    /// Check every built-in fixture against its closed form.
    OracleCheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Riccati => "riccati",
            Command::Sweep => "sweep",
            Command::Simulate => "simulate",
            Command::OracleCheck => "oracle-check",
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunArgs {
    /// Problem file (JSON), or `builtin:NAME` for one of the reference problems.
    #[arg(long, global = true)]
    pub problem: Option<String>,
    /// Grid steps on [0, T] (default 2000 for riccati, 1000 otherwise).
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Comma-separated epsilon values, strictly decreasing.
    #[arg(long, global = true, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Monte Carlo scenarios.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Random seed for the scenario set (default 1).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Truncation time for the limit strategy (default 0.9 T).
    #[arg(long, global = true)]
    pub tprime: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

/// Fully resolved run parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    pub problem: Option<String>,
    pub steps: usize,
    pub eps: Vec<f64>,
    pub paths: usize,
    pub seed: u64,
    pub t_prime: Option<f64>,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

pub const DEFAULT_PATHS: usize = 10_000;
pub const DEFAULT_SEED: u64 = 1;

impl RunConfig {
    pub fn resolve(command: Command, a: &RunArgs) -> Result<Self> {
        let steps = a.steps.unwrap_or(if command == Command::Riccati { 2000 } else { 1000 });
        let eps = match (&a.eps, command) {
            (Some(e), _) => e.clone(),
            (None, Command::Sweep) => DEFAULT_LADDER.to_vec(),
            (None, Command::Simulate) => vec![0.01],
            (None, _) => Vec::new(),
        };
        let cfg = RunConfig {
            command: command.name(),
            problem: a.problem.clone(),
            steps,
            eps,
            paths: a.paths.unwrap_or(DEFAULT_PATHS),
            seed: a.seed.unwrap_or(DEFAULT_SEED),
            t_prime: a.tprime,
            out: a.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            threads: a.threads,
        };
        if cfg.steps == 0 {
            return Err(Error::Config("--steps must be positive".into()));
        }
        if cfg.paths == 0 {
            return Err(Error::Config("--paths must be positive".into()));
        }
        if cfg.threads == Some(0) {
            return Err(Error::Config("--threads must be positive".into()));
        }
        if cfg.eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::Config("--eps values must be positive".into()));
        }
        if cfg.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("--eps list must be strictly decreasing".into()));
        }
        if command == Command::Sweep && cfg.eps.len() < 3 {
            return Err(Error::Config(format!("sweep needs at least 3 eps values, got {}", cfg.eps.len())));
        }
        if let Some(t) = cfg.t_prime {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config("--tprime must be positive".into()));
            }
        }
        Ok(cfg)
    }
}

/// 2 for bad input or configuration, 1 for solver failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Structural(_) | Error::Config(_) | Error::Load { .. } | Error::Unsupported(_) => 2,
        Error::Sweep { source, .. } => exit_code(source),
        _ => 1,
    }
}

/// Reference problems reachable as `builtin:NAME`, started at `x = 1` in regime 1.
pub fn builtin(name: &str) -> Option<ProblemSpec> {
    let mut spec = match name {
        "modulated-homogeneous" => oracle::modulated_homogeneous_spec(),
        "modulated-drift" => oracle::modulated_drift_spec(),
        "anti-convex" => oracle::anti_convex_spec(),
        "scalar-classical" => oracle::scalar_classical_spec(),
        _ => return None,
    };
    spec.initial = Some(Initial {
        state: DVector::from_element(spec.n, 1.0),
        regime: 0,
    });
    Some(spec)
}

fn load_problem(cfg: &RunConfig) -> Result<ProblemSpec> {
    let p = cfg
        .problem
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`{}` needs --problem", cfg.command)))?;
    match p.strip_prefix("builtin:") {
        Some(name) => builtin(name).ok_or_else(|| Error::Config(format!("unknown built-in problem `{name}`"))),
        None => load_file(p),
    }
}

fn initial_pair(spec: &ProblemSpec) -> Result<(DVector<f64>, usize)> {
    spec.initial
        .as_ref()
        .map(|i| (i.state.clone(), i.regime))
        .ok_or_else(|| Error::Config("problem file has no `initial` state".into()))
}

fn grid_for(spec: &ProblemSpec, cfg: &RunConfig) -> Result<TimeGrid> {
    TimeGrid::new(0.0, spec.horizon, cfg.steps)
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match RunConfig::resolve(cli.command, &cli.args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    match run(&cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Run one command. Returns the exit code for outcomes that are not errors
/// (a failed validation is 2, a failed oracle check 1).
pub fn run(cfg: &RunConfig) -> Result<i32> {
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = cfg.threads {
            b = b.num_threads(t);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?
    };
    pool.install(|| match cfg.command {
        "validate" => cmd_validate(cfg),
        "riccati" => cmd_riccati(cfg),
        "sweep" => cmd_sweep(cfg),
        "simulate" => cmd_simulate(cfg),
        "oracle-check" => cmd_oracle_check(cfg),
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    })
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_validate(cfg: &RunConfig) -> Result<i32> {
    let spec = load_problem(cfg)?;
    let grid = grid_for(&spec, cfg)?;
    let report = validate_spec(&spec, &grid);
    prepare_out(&cfg.out)?;
    export::write_json(&cfg.out.join("validate.json"), &report)?;
    println!(
        "{}: {}",
        spec.name.as_deref().unwrap_or("problem"),
        if report.passed { "ok" } else { "FAILED" }
    );
    for e in &report.errors {
        println!("  error: {e}");
    }
    for w in &report.warnings {
        println!("  warning: {w}");
    }
    for (field, flag) in &report.flags {
        println!("  {field}: {flag}");
    }
    Ok(if report.passed { 0 } else { 2 })
}

fn classification_name(c: Classification) -> &'static str {
    match c {
        Classification::StronglyRegular => "strongly-regular",
        Classification::Regular => "regular",
        Classification::NotRegular => "not-regular",
    }
}

#[derive(Serialize)]
struct RiccatiRun {
    epsilon: f64,
    file: String,
    regularity: crate::riccati::RegularityReport,
}

fn cmd_riccati(cfg: &RunConfig) -> Result<i32> {
    let spec = load_problem(cfg)?;
    let grid = grid_for(&spec, cfg)?;
    prepare_out(&cfg.out)?;
    let solves: Vec<(f64, RiccatiSolution)> = if cfg.eps.is_empty() {
        vec![(0.0, solve_gre(&spec, &grid)?)]
    } else {
        cfg.eps
            .iter()
            .map(|&e| Ok((e, solve_perturbed(&spec, e, &grid)?)))
            .collect::<Result<_>>()?
    };
    let mut runs = Vec::new();
    for (eps, sol) in &solves {
        let file = if *eps == 0.0 {
            "riccati_gre.csv".to_string()
        } else {
            format!("riccati_eps_{eps:e}.csv")
        };
        export::write_riccati(&cfg.out.join(&file), sol)?;
        let regularity = regularity_report(sol, &spec, REGULARITY_TOL);
        println!(
            "eps = {eps}: P is {} under the unperturbed regularity conditions -> {file}",
            classification_name(regularity.classification)
        );
        runs.push(RiccatiRun {
            epsilon: *eps,
            file,
            regularity,
        });
    }
    export::write_json(&cfg.out.join("report.json"), &runs)?;
    Ok(0)
}

fn cmd_sweep(cfg: &RunConfig) -> Result<i32> {
    let spec = load_problem(cfg)?;
    let (x0, i0) = initial_pair(&spec)?;
    let grid = grid_for(&spec, cfg)?;
    let t_prime = cfg.t_prime.unwrap_or(DEFAULT_T_PRIME_FRACTION * spec.horizon);
    let scenarios = generate_scenarios(&spec, &grid, cfg.paths, cfg.seed, i0)?;
    let report = run_sweep(&spec, &x0, &cfg.eps, &scenarios, t_prime, &SweepOptions::default())?;
    export::write_sweep_bundle(&cfg.out, &report)?;
    println!("{:>10} {:>14} {:>12} {:>14}", "eps", "E int |u|^2", "std err", "J_eps");
    for r in &report.records {
        match r.escape_time {
            Some(t) => println!("{:>10} escape at s = {t:.6}", r.epsilon),
            None => println!(
                "{:>10} {:>14.6} {:>12.2e} {:>14.6}",
                r.epsilon,
                r.control_l2.unwrap_or(f64::NAN),
                r.control_l2_se.unwrap_or(f64::NAN),
                r.value.unwrap_or(f64::NAN)
            ),
        }
    }
    println!("verdict: {}", report.verdict);
    if let Some(limit) = &report.limit {
        let fb = sweep::verify_feedback_identity(&spec, &report, limit, &scenarios)?;
        export::write_json(&cfg.out.join("feedback_identity.json"), &fb)?;
        println!(
            "feedback identity residual on [0, {}]: {:.3e} (se {:.1e})",
            fb.t_prime, fb.residual, fb.residual_se
        );
    }
    if report.verdict != sweep::Verdict::NotSolvable {
        let vg = sweep::value_gap(&report)?;
        export::write_json(&cfg.out.join("value_gap.json"), &vg)?;
    }
    Ok(0)
}

fn cmd_simulate(cfg: &RunConfig) -> Result<i32> {
    let spec = load_problem(cfg)?;
    let (x0, i0) = initial_pair(&spec)?;
    let grid = grid_for(&spec, cfg)?;
    let scenarios = generate_scenarios(&spec, &grid, cfg.paths, cfg.seed, i0)?;
    prepare_out(&cfg.out)?;
    for &eps in &cfg.eps {
        let riccati = solve_perturbed(&spec, eps, &grid)?;
        let adjoint = if spec.has_modulated_inputs() {
            solve_adjoint_regression(&spec, &riccati, &scenarios, DEFAULT_DEGREE)?
        } else {
            solve_adjoint_ode(&spec, &riccati)?
        };
        let strategy = build_strategy(&riccati, &adjoint, &spec)?;
        let ens = simulate_closed_loop(&spec, &x0, &strategy, &scenarios)?;
        let cost = estimate_cost(&spec, &ens, eps, Some(&scenarios))?;
        let name = format!("closed_loop_eps_{eps:e}");
        export::write_ensemble(&cfg.out, &name, &ens)?;
        export::write_cost(&cfg.out.join(format!("{name}_cost.json")), &cost)?;
        println!(
            "eps = {eps}: J_eps = {:.6} (se {:.2e}), E int |u|^2 = {:.6} (se {:.2e})",
            cost.mean, cost.std_error, cost.control_l2, cost.control_l2_se
        );
    }
    Ok(0)
}

/// One line of the oracle-check table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub fixture: String,
    pub check: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn row(fixture: &str, check: &str, value: f64, tolerance: f64) -> CheckRow {
    CheckRow {
        fixture: fixture.into(),
        check: check.into(),
        value,
        tolerance,
        passed: value.is_finite() && value <= tolerance,
    }
}

/// Compare the solvers against every built-in fixture. Monte Carlo checks
/// use `paths` scenarios on a `1e-3` grid.
pub fn oracle_checks(paths: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let fine = TimeGrid::new(0.0, 1.0, 2000)?;
    let mc = TimeGrid::new(0.0, 1.0, 1000)?;
    for suite in [
        oracle::modulated_homogeneous(),
        oracle::modulated_drift(),
        oracle::classical_reference(2, 2)?,
    ] {
        let tol = |k: &str| suite.tolerances[k];
        let spec = &suite.spec;
        match &suite.closed_forms {
            ClosedForms::ModulatedHomogeneous(ex) => {
                let gre = solve_gre(spec, &fine)?;
                let err = gre
                    .p
                    .iter()
                    .flatten()
                    .map(|p| (p[(0, 0)] - ex.gre_p(0.0)).abs())
                    .fold(0.0, f64::max);
                rows.push(row(&suite.name, "gre_p", err, tol("gre_p")));
                let reg = regularity_report(&gre, spec, REGULARITY_TOL);
                let not_regular = reg.classification == Classification::NotRegular && reg.range_residual >= 0.5;
                rows.push(row(&suite.name, "not_regular", if not_regular { 0.0 } else { 1.0 }, 0.0));
                let (cost, se) = modulated_homogeneous_u_bar_cost(ex, &mc, paths, seed, 1.0)?;
                rows.push(row(&suite.name, "cost_u_bar", cost, tol("cost_u_bar").max(3.0 * se)));
            }
            ClosedForms::ModulatedDrift(ex) => {
                let mut err = 0.0f64;
                for eps in [1.0, 0.1, 0.01] {
                    let sol = solve_perturbed(spec, eps, &fine)?;
                    for k in 0..fine.len() {
                        for i in 0..2 {
                            err = err.max((sol.p[k][i][(0, 0)] - ex.p_eps(eps, fine.node(k))).abs());
                        }
                    }
                }
                rows.push(row(&suite.name, "p_eps", err, tol("p_eps")));
                let kp = mc.floor_index(0.9);
                let theta = extrapolate_theta(spec, &mc, 0.01, SweepOptions::default().theta_halvings, kp)?;
                let err = (0..=kp)
                    .flat_map(|k| (0..2).map(move |i| (k, i)))
                    .map(|(k, i)| (theta[k][i][(0, 0)] - ex.theta_star(mc.node(k))).abs())
                    .fold(0.0, f64::max);
                rows.push(row(&suite.name, "theta_star", err, tol("theta_star")));
                let eps = 0.1;
                let scenarios = generate_scenarios(spec, &mc, paths, seed, 0)?;
                let ric = solve_perturbed(spec, eps, &mc)?;
                let adj = solve_adjoint_regression(spec, &ric, &scenarios, DEFAULT_DEGREE)?;
                let rel = (adj.eta(0, 0, 1.0)[0] / ex.eta_eps_at_zero(eps) - 1.0).abs();
                rows.push(row(&suite.name, "eta_eps_zero_rel", rel, tol("eta_eps_zero_rel")));
            }
            ClosedForms::Classical(reference) => {
                let coarse = solve_perturbed(spec, 1e-14, &fine)?;
                let err = (0..fine.len())
                    .flat_map(|k| (0..2).map(move |i| (k, i)))
                    .map(|(k, i)| (&coarse.p[k][i] - reference.p(fine.node(k), i)).amax())
                    .fold(0.0, f64::max);
                rows.push(row(&suite.name, "p_coarse_vs_dense", err, tol("p_coarse_vs_dense")));
                let theta0 = crate::control::build_theta(&solve_gre(spec, &fine)?)?;
                let mut worst = 0.0f64;
                for eps in [0.1, 0.01] {
                    let th = crate::control::build_theta(&solve_perturbed(spec, eps, &fine)?)?;
                    let gap = th
                        .iter()
                        .flatten()
                        .zip(theta0.iter().flatten())
                        .map(|(a, b)| (a - b).amax())
                        .fold(0.0, f64::max);
                    worst = worst.max(gap / eps);
                }
                rows.push(row(&suite.name, "theta_gap_over_eps", worst, tol("theta_gap_over_eps")));
            }
        }
    }
    Ok(rows)
}

/// `J(0, x, 1; ū)` for the homogeneous example, with `ū` driven by each
/// scenario's modulator. Returns the estimate and its standard error.
pub fn modulated_homogeneous_u_bar_cost(ex: &ModulatedHomogeneous, grid: &TimeGrid, paths: usize, seed: u64, x: f64) -> Result<(f64, f64)> {
    // the modulated example shares chain and noise with the homogeneous one
    // and carries the modulator `M`
    let carrier = oracle::modulated_drift_spec();
    let spec = oracle::modulated_homogeneous_spec();
    let scenarios = generate_scenarios(&carrier, grid, paths, seed, 0)?;
    let u: Vec<Vec<DVector<f64>>> = (0..paths)
        .map(|p| {
            (0..grid.len())
                .map(|k| DVector::from_element(1, ex.u_bar(x, 0.0, scenarios.modulator(p, k))))
                .collect()
        })
        .collect();
    let ens = simulate_open_loop(&spec, &DVector::from_element(1, x), &u, &scenarios)?;
    let cost = estimate_cost(&spec, &ens, 0.0, None)?;
    Ok((cost.mean, cost.std_error))
}

fn cmd_oracle_check(cfg: &RunConfig) -> Result<i32> {
    let clock = Instant::now();
    let rows = oracle_checks(cfg.paths, cfg.seed)?;
    println!("{:<18} {:<20} {:>12} {:>12}  result", "fixture", "check", "value", "tolerance");
    for r in &rows {
        println!(
            "{:<18} {:<20} {:>12.3e} {:>12.3e}  {}",
            r.fixture,
            r.check,
            r.value,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    println!("{:.1} s", clock.elapsed().as_secs_f64());
    prepare_out(&cfg.out)?;
    export::write_json(&cfg.out.join("oracle_check.json"), &rows)?;
    Ok(if rows.iter().all(|r| r.passed) { 0 } else { 1 })
}
