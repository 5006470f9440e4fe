//! ε-sweeps over one shared scenario set.
//!
//! For each ε on a decreasing ladder the perturbed problem is solved
//! (Riccati → adjoint → strategy) and the closed loop is simulated on the
//! same scenarios, so differences between ε are common-random-number
//! differences. The report carries the control norms, perturbed values,
//! Cauchy distances and a solvability verdict; when the verdict is
//! `solvable` it also carries the extrapolated limit strategy `(Θ*, v*)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{self, AdjointSolution, Backend, DEFAULT_DEGREE};
use crate::chain::stream_rng;
use crate::control::{build_strategy, build_theta, GainTable, Offset, Strategy};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::mean_and_se;
use crate::problem::{homogenize, ProblemSpec};
use crate::riccati::solve_perturbed;
use crate::sim::{step_guard, Control, CostTables, PathBuffers, PathSimulator, ScenarioSet};

pub const DEFAULT_LADDER: [f64; 7] = [1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01];
pub const DEFAULT_GROWTH_TOL: f64 = 0.05;
/// `control_l2` growing by this factor across the ladder means unbounded.
pub const BLOWUP_FACTOR: f64 = 10.0;
/// Fraction of the horizon used as `t'` when none is given.
pub const DEFAULT_T_PRIME_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// `None` picks the ODE backend for deterministic inputs and regression otherwise.
    pub backend: Option<Backend>,
    pub degree: usize,
    pub growth_tol: f64,
    /// Extra halvings of the smallest ε used to extrapolate `Θ*`.
    pub theta_halvings: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            backend: None,
            degree: DEFAULT_DEGREE,
            growth_tol: DEFAULT_GROWTH_TOL,
            theta_halvings: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Solvable,
    NotSolvable,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Solvable => "solvable",
            Verdict::NotSolvable => "not-solvable",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Everything measured at one ε. Monte Carlo fields are `None` when the
/// Riccati solution escaped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsRecord {
    pub epsilon: f64,
    /// Time at which the Riccati solution left every bounded set.
    pub escape_time: Option<f64>,
    pub backend: Option<Backend>,
    /// `E∫|u_ε|²`.
    pub control_l2: Option<f64>,
    pub control_l2_se: Option<f64>,
    /// `J_ε(u_ε)`.
    pub value: Option<f64>,
    pub value_se: Option<f64>,
    /// `η(t0)` in the initial regime (forward estimate for regression).
    pub eta0: Option<Vec<f64>>,
    pub eta0_se: Option<Vec<f64>>,
    /// Side tables holding `Θ_ε` and `v_ε`.
    pub theta_table: String,
    pub v_table: String,
    pub warnings: Vec<String>,
}

/// Compact description of the limit strategy for the JSON report; the full
/// tables go to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSummary {
    pub valid_until: f64,
    /// `Θ*(t0, i0)` and `v*(t0, i0)` (modulator 1).
    pub theta0: Vec<f64>,
    pub v0: Vec<f64>,
    /// Standard error of `v*(t0)` from the adjoint forward estimates.
    pub v0_se: Vec<f64>,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub epsilons: Vec<f64>,
    pub x0: Vec<f64>,
    pub initial_regime: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
    pub t_prime: f64,
    pub seed: u64,
    pub scenarios: usize,
    pub records: Vec<EpsRecord>,
    /// `E∫|u_a − u_b|²` over the whole horizon, under common random numbers.
    pub cauchy_u: Vec<Vec<Option<f64>>>,
    /// `∫₀^{t'} |Θ_a − Θ_b|²`, maximum over regimes.
    pub cauchy_theta: Vec<Vec<Option<f64>>>,
    /// `E∫₀^{t'} |v_a − v_b|²` along the scenarios.
    pub cauchy_v: Vec<Vec<Option<f64>>>,
    pub verdict: Verdict,
    pub limit_summary: Option<LimitSummary>,
    #[serde(skip)]
    pub strategies: Vec<Option<Strategy>>,
    #[serde(skip)]
    pub limit: Option<Strategy>,
}

impl SweepReport {
    /// Index of the last grid node not after `t'`.
    pub fn t_prime_index(&self) -> usize {
        self.grid().floor_index(self.t_prime + 1e-12 * (self.t_end - self.t_start))
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.t_start, self.t_end, self.steps).expect("grid was valid when the sweep ran")
    }

    fn live(&self) -> Vec<usize> {
        (0..self.epsilons.len()).filter(|&e| self.strategies[e].is_some()).collect()
    }
}

fn pick_backend(spec: &ProblemSpec, opts: &SweepOptions) -> Backend {
    opts.backend.unwrap_or(if spec.has_modulated_inputs() {
        Backend::Regression
    } else {
        Backend::Ode
    })
}

fn check_ladder(epsilons: &[f64]) -> Result<()> {
    if epsilons.len() < 3 {
        return Err(Error::Config(format!(
            "an eps ladder needs at least 3 values, got {}",
            epsilons.len()
        )));
    }
    if epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::Config("eps values must be positive and finite".into()));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("eps ladder must be strictly decreasing".into()));
    }
    Ok(())
}

struct EpsSolve {
    strategy: Option<Strategy>,
    record: EpsRecord,
}

fn solve_one(spec: &ProblemSpec, eps: f64, grid: &TimeGrid, scenarios: &ScenarioSet, backend: Backend, degree: usize) -> Result<EpsSolve> {
    let tag = format!("{eps:e}");
    let mut record = EpsRecord {
        epsilon: eps,
        escape_time: None,
        backend: Some(backend),
        control_l2: None,
        control_l2_se: None,
        value: None,
        value_se: None,
        eta0: None,
        eta0_se: None,
        theta_table: format!("theta_eps_{tag}.csv"),
        v_table: format!("v_eps_{tag}.csv"),
        warnings: Vec::new(),
    };
    let wrap = |e: Error| Error::Sweep {
        epsilon: eps,
        source: Box::new(e),
    };
    let riccati = match solve_perturbed(spec, eps, grid) {
        Ok(r) => r,
        Err(Error::FiniteTimeEscape { time, .. }) => {
            record.escape_time = Some(time);
            record.backend = None;
            return Ok(EpsSolve { strategy: None, record });
        }
        Err(e) => return Err(wrap(e)),
    };
    let adjoint: AdjointSolution = match backend {
        Backend::Ode => bsde::solve_adjoint_ode(spec, &riccati),
        Backend::Regression => bsde::solve_adjoint_regression(spec, &riccati, scenarios, degree),
    }
    .map_err(wrap)?;
    let i0 = scenarios.initial_regime;
    match &adjoint.diagnostics {
        Some(d) => {
            record.eta0 = Some(d.eta0_forward.clone());
            record.eta0_se = Some(d.eta0_forward_se.clone());
            record.warnings.extend(d.warnings.iter().cloned());
        }
        None => {
            record.eta0 = Some(adjoint.eta(0, i0, 1.0).as_slice().to_vec());
            record.eta0_se = Some(vec![0.0; spec.n]);
        }
    }
    let strategy = build_strategy(&riccati, &adjoint, spec).map_err(wrap)?;
    if let Some(msg) = step_guard(grid, eps) {
        record.warnings.push(msg);
    }
    Ok(EpsSolve {
        strategy: Some(strategy),
        record,
    })
}

fn pair_index(e: usize, a: usize, b: usize) -> usize {
    // upper triangle, row-major, a < b
    a * e - a * (a + 1) / 2 + (b - a - 1)
}

fn trapezoid_weight(grid: &TimeGrid, k: usize, last: usize) -> f64 {
    let left = if k > 0 { grid.node(k) - grid.node(k - 1) } else { 0.0 };
    let right = if k < last { grid.node(k + 1) - grid.node(k) } else { 0.0 };
    0.5 * (left + right)
}

fn diff_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Run the perturbation ladder on a shared scenario set.
///
/// The grid and initial regime are those of `scenarios`. A Riccati escape at
/// some ε is recorded rather than raised; any other sub-solver error aborts
/// the sweep with the offending ε attached.
pub fn run_sweep(
    spec: &ProblemSpec,
    x0: &DVector<f64>,
    epsilons: &[f64],
    scenarios: &ScenarioSet,
    t_prime: f64,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    check_ladder(epsilons)?;
    let grid = scenarios.grid;
    if !(t_prime > grid.t_start() && t_prime < grid.t_end()) {
        return Err(Error::Config(format!(
            "t' = {t_prime} must lie strictly inside ({}, {})",
            grid.t_start(),
            grid.t_end()
        )));
    }
    if x0.len() != spec.n {
        return Err(Error::Config(format!("initial state has length {}, expected {}", x0.len(), spec.n)));
    }
    let backend = pick_backend(spec, opts);
    let solved: Vec<Result<EpsSolve>> = epsilons
        .par_iter()
        .map(|&eps| solve_one(spec, eps, &grid, scenarios, backend, opts.degree))
        .collect();
    let mut records = Vec::with_capacity(epsilons.len());
    let mut strategies = Vec::with_capacity(epsilons.len());
    for s in solved {
        let s = s?;
        records.push(s.record);
        strategies.push(s.strategy);
    }
    let ne = epsilons.len();
    let mut report = SweepReport {
        epsilons: epsilons.to_vec(),
        x0: x0.as_slice().to_vec(),
        initial_regime: scenarios.initial_regime,
        t_start: grid.t_start(),
        t_end: grid.t_end(),
        steps: grid.steps(),
        t_prime,
        seed: scenarios.seed,
        scenarios: scenarios.count,
        records,
        cauchy_u: vec![vec![None; ne]; ne],
        cauchy_theta: vec![vec![None; ne]; ne],
        cauchy_v: vec![vec![None; ne]; ne],
        verdict: Verdict::Inconclusive,
        limit_summary: None,
        strategies,
        limit: None,
    };
    let live = report.live();
    let kp = report.t_prime_index();

    // deterministic Θ distances
    for (ia, &a) in live.iter().enumerate() {
        report.cauchy_theta[a][a] = Some(0.0);
        for &b in &live[ia + 1..] {
            let (ta, tb) = (
                &report.strategies[a].as_ref().unwrap().theta,
                &report.strategies[b].as_ref().unwrap().theta,
            );
            let d = (0..spec.num_regimes())
                .map(|i| {
                    (0..=kp)
                        .map(|k| trapezoid_weight(&grid, k, kp) * (&ta[k][i] - &tb[k][i]).norm_squared())
                        .sum::<f64>()
                })
                .fold(0.0, f64::max);
            report.cauchy_theta[a][b] = Some(d);
            report.cauchy_theta[b][a] = Some(d);
        }
    }

    if !live.is_empty() {
        let stats = simulate_ladder(spec, x0, scenarios, &report, &live, kp)?;
        let nl = live.len();
        let column = |f: &dyn Fn(&PathStats) -> f64| -> (f64, f64) {
            let xs: Vec<f64> = stats.iter().map(f).collect();
            mean_and_se(&xs)
        };
        for (il, &e) in live.iter().enumerate() {
            let (l2, l2_se) = column(&|s| s.l2[il]);
            let eps = epsilons[e];
            let (val, val_se) = column(&|s| s.cost[il] + eps * s.l2[il]);
            let r = &mut report.records[e];
            r.control_l2 = Some(l2);
            r.control_l2_se = Some(l2_se);
            r.value = Some(val);
            r.value_se = Some(val_se);
            report.cauchy_u[e][e] = Some(0.0);
            report.cauchy_v[e][e] = Some(0.0);
        }
        for a in 0..nl {
            for b in a + 1..nl {
                let idx = pair_index(nl, a, b);
                let (du, _) = column(&|s| s.du[idx]);
                let (dv, _) = column(&|s| s.dv[idx]);
                let (ea, eb) = (live[a], live[b]);
                report.cauchy_u[ea][eb] = Some(du);
                report.cauchy_u[eb][ea] = Some(du);
                report.cauchy_v[ea][eb] = Some(dv);
                report.cauchy_v[eb][ea] = Some(dv);
            }
        }
    }

    report.verdict = solvability_verdict(&report, opts.growth_tol);
    if report.verdict == Verdict::Solvable {
        let limit = limit_strategy(&report, spec, opts.theta_halvings)?;
        report.limit_summary = Some(summarize_limit(&report, &limit, opts.theta_halvings));
        report.limit = Some(limit);
    }
    Ok(report)
}

struct PathStats {
    cost: Vec<f64>,
    l2: Vec<f64>,
    du: Vec<f64>,
    dv: Vec<f64>,
}

/// All live ε on each path in turn, so per-path differences never need the
/// full ensembles in memory.
fn simulate_ladder(
    spec: &ProblemSpec,
    x0: &DVector<f64>,
    scenarios: &ScenarioSet,
    report: &SweepReport,
    live: &[usize],
    kp: usize,
) -> Result<Vec<PathStats>> {
    let grid = scenarios.grid;
    let (n, m) = (spec.n, spec.m);
    let nodes = grid.len();
    let last = grid.steps();
    let nl = live.len();
    let npairs = nl * (nl - 1) / 2;
    let sim = PathSimulator::new(spec, grid);
    let costs = CostTables::new(spec, &grid);
    let strategies: Vec<&Strategy> = live.iter().map(|&e| report.strategies[e].as_ref().unwrap()).collect();
    (0..scenarios.count)
        .into_par_iter()
        .map_init(
            || {
                (
                    (0..nl).map(|_| PathBuffers::new(n, m, nodes)).collect::<Vec<_>>(),
                    vec![0.0; nl * m],
                )
            },
            |(bufs, vbuf), p| {
                let mut st = PathStats {
                    cost: vec![0.0; nl],
                    l2: vec![0.0; nl],
                    du: vec![0.0; npairs],
                    dv: vec![0.0; npairs],
                };
                for (il, strat) in strategies.iter().enumerate() {
                    sim.run(x0.as_slice(), scenarios, p, Control::Feedback(strat), last, &mut bufs[il])
                        .map_err(|e| Error::Sweep {
                            epsilon: strat.epsilon,
                            source: Box::new(e),
                        })?;
                    let (c, l2) = costs.path_cost(
                        spec,
                        &grid,
                        &bufs[il].x,
                        &bufs[il].u,
                        last,
                        |k| scenarios.regime(p, k),
                        |k| scenarios.modulator(p, k),
                    );
                    st.cost[il] = c;
                    st.l2[il] = l2;
                }
                for k in 0..=last {
                    let wu = trapezoid_weight(&grid, k, last);
                    let at_kp = k <= kp;
                    if at_kp {
                        let i = scenarios.regime(p, k);
                        let mk = scenarios.modulator(p, k);
                        for (il, strat) in strategies.iter().enumerate() {
                            strat.offset.eval_into(&mut vbuf[il * m..(il + 1) * m], k, i, mk);
                        }
                    }
                    let wv = if at_kp { trapezoid_weight(&grid, k, kp) } else { 0.0 };
                    for a in 0..nl {
                        for b in a + 1..nl {
                            let idx = pair_index(nl, a, b);
                            let (ua, ub) = (&bufs[a].u[k * m..(k + 1) * m], &bufs[b].u[k * m..(k + 1) * m]);
                            st.du[idx] += wu * diff_sq(ua, ub);
                            if at_kp {
                                st.dv[idx] += wv * diff_sq(&vbuf[a * m..(a + 1) * m], &vbuf[b * m..(b + 1) * m]);
                            }
                        }
                    }
                }
                Ok(st)
            },
        )
        .collect()
}

/// Classify the sweep from the control norms and Cauchy distances.
///
/// * `not-solvable`: some ε escaped, or `control_l2` at the smallest ε is at
///   least [`BLOWUP_FACTOR`] times that at the largest;
/// * `solvable`: the two smallest ε have `control_l2` within `growth_tol`
///   (relative) and the consecutive `cauchy_u` distances over the three
///   smallest ε decrease;
/// * `inconclusive` otherwise, and always for fewer than three ε.
pub fn solvability_verdict(report: &SweepReport, growth_tol: f64) -> Verdict {
    let ne = report.epsilons.len();
    if report.records.iter().any(|r| r.escape_time.is_some()) {
        return Verdict::NotSolvable;
    }
    if ne < 3 {
        return Verdict::Inconclusive;
    }
    let l2: Vec<f64> = match report.records.iter().map(|r| r.control_l2).collect::<Option<Vec<_>>>() {
        Some(v) => v,
        None => return Verdict::Inconclusive,
    };
    let (first, last) = (l2[0], l2[ne - 1]);
    if !last.is_finite() || (first > 0.0 && last >= BLOWUP_FACTOR * first) {
        return Verdict::NotSolvable;
    }
    let (a, b) = (l2[ne - 2], l2[ne - 1]);
    let scale = a.abs().max(b.abs());
    let bounded = scale == 0.0 || (a - b).abs() <= growth_tol * scale;
    let cu = |x: usize, y: usize| report.cauchy_u[x][y].unwrap_or(f64::NAN);
    let (d1, d2) = (cu(ne - 3, ne - 2), cu(ne - 2, ne - 1));
    let shrinking = (d1 == 0.0 && d2 == 0.0) || d2 < d1;
    if bounded && shrinking {
        Verdict::Solvable
    } else {
        Verdict::Inconclusive
    }
}

/// Polynomial extrapolation to `ε = 0` through `(ε_j, y_j)` (Neville).
fn neville_at_zero(eps: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let n = eps.len();
    for level in 1..n {
        for j in 0..n - level {
            let (a, b) = (eps[j], eps[j + level]);
            p[j] = (b * p[j] - a * p[j + 1]) / (b - a);
        }
    }
    p[0]
}

/// Linear extrapolation to zero through the two smallest ε: weights `(w_a, w_b)`
/// with `y* ≈ w_a y(ε_a) + w_b y(ε_b)`, `ε_b < ε_a`.
fn richardson_weights(ea: f64, eb: f64) -> (f64, f64) {
    (-eb / (ea - eb), ea / (ea - eb))
}

/// The limit strategy `(Θ*, v*)` on `[t0, t']`.
///
/// `Θ*` is extrapolated to `ε = 0` node by node through Riccati-only solves
/// at the smallest ε and `halvings` successive halvings of it (Neville); a
/// linear fit through two ε is not accurate enough near `t'` when the gains
/// blow up at the horizon. `v*` is the linear extrapolation through the two
/// smallest ε of the sweep. Beyond `t'` the smallest-ε strategy is kept so the
/// tables stay finite; the strategy is only claimed valid up to `t'`.
pub fn limit_strategy(report: &SweepReport, spec: &ProblemSpec, halvings: usize) -> Result<Strategy> {
    if report.verdict == Verdict::NotSolvable {
        return Err(Error::Config("no limit strategy: the sweep verdict is not-solvable".into()));
    }
    let live = report.live();
    if live.len() < 2 {
        return Err(Error::Config("no limit strategy: fewer than two eps were solved".into()));
    }
    let grid = report.grid();
    let kp = report.t_prime_index();
    let (ia, ib) = (live[live.len() - 2], live[live.len() - 1]);
    let (sa, sb) = (report.strategies[ia].as_ref().unwrap(), report.strategies[ib].as_ref().unwrap());
    let eps_min = report.epsilons[ib];

    let extrapolated = extrapolate_theta(spec, &grid, eps_min, halvings, kp)?;
    let theta: GainTable = extrapolated
        .into_iter()
        .enumerate()
        .map(|(k, row)| if k > kp { sb.theta[k].clone() } else { row })
        .collect();

    let (wa, wb) = richardson_weights(report.epsilons[ia], eps_min);
    let offset = combine_offsets(&sa.offset, &sb.offset, wa, wb, kp)?;
    Ok(Strategy {
        epsilon: 0.0,
        grid,
        theta,
        offset,
        valid_until: grid.node(kp),
    })
}

/// `Θ` extrapolated to `ε = 0` on nodes `0..=until` from Riccati solves at
/// `eps_min · 2^{-j}`, `j = 0..=halvings` (Neville); later nodes hold the
/// smallest-ε gains.
pub fn extrapolate_theta(spec: &ProblemSpec, grid: &TimeGrid, eps_min: f64, halvings: usize, until: usize) -> Result<GainTable> {
    let ladder: Vec<f64> = (0..=halvings).map(|j| eps_min / f64::powi(2.0, j as i32)).collect();
    let thetas: Vec<GainTable> = ladder
        .par_iter()
        .map(|&e| {
            let r = solve_perturbed(spec, e, grid).map_err(|err| Error::Sweep {
                epsilon: e,
                source: Box::new(err),
            })?;
            build_theta(&r)
        })
        .collect::<Result<_>>()?;
    let smallest = thetas.last().expect("ladder is non-empty");
    Ok((0..grid.len())
        .map(|k| {
            (0..spec.num_regimes())
                .map(|i| {
                    if k > until {
                        return smallest[k][i].clone();
                    }
                    let (r, c) = smallest[k][i].shape();
                    DMatrix::from_fn(r, c, |a, b| {
                        let ys: Vec<f64> = thetas.iter().map(|t| t[k][i][(a, b)]).collect();
                        neville_at_zero(&ladder, &ys)
                    })
                })
                .collect()
        })
        .collect())
}

/// `wa·a + wb·b` on nodes `0..=kp`, `b` beyond.
fn combine_offsets(a: &Offset, b: &Offset, wa: f64, wb: f64, kp: usize) -> Result<Offset> {
    match (a, b) {
        (Offset::Deterministic(ta), Offset::Deterministic(tb)) => Ok(Offset::Deterministic(
            ta.iter()
                .zip(tb)
                .enumerate()
                .map(|(k, (ra, rb))| {
                    ra.iter()
                        .zip(rb)
                        .map(|(va, vb)| if k <= kp { va * wa + vb * wb } else { vb.clone() })
                        .collect()
                })
                .collect(),
        )),
        (Offset::PerScenario(pa), Offset::PerScenario(pb)) => {
            if pa.normalization != pb.normalization {
                return Err(Error::Mismatch("offsets were fitted on different scenario sets".into()));
            }
            let mut out = pb.clone();
            for k in 0..=kp.min(out.coeffs.len() - 1) {
                for i in 0..out.coeffs[k].len() {
                    let (ca, cb) = (&pa.coeffs[k][i], &pb.coeffs[k][i]);
                    let cols = ca.ncols().max(cb.ncols());
                    let mut c = DMatrix::zeros(cb.nrows(), cols);
                    for j in 0..ca.ncols() {
                        c.column_mut(j).axpy(wa, &ca.column(j), 1.0);
                    }
                    for j in 0..cb.ncols() {
                        c.column_mut(j).axpy(wb, &cb.column(j), 1.0);
                    }
                    out.coeffs[k][i] = c;
                }
            }
            Ok(Offset::PerScenario(out))
        }
        _ => Err(Error::Mismatch("cannot combine deterministic and per-scenario offsets".into())),
    }
}

fn summarize_limit(report: &SweepReport, limit: &Strategy, halvings: usize) -> LimitSummary {
    let i0 = report.initial_regime;
    let live = report.live();
    let (ia, ib) = (live[live.len() - 2], live[live.len() - 1]);
    let (ea, eb) = (report.epsilons[ia], report.epsilons[ib]);
    let (wa, wb) = richardson_weights(ea, eb);
    let v0 = limit.v(0, i0, 1.0);
    // v0 is linear in η(t0); its error bar scales with the adjoint forward SE
    // through |v_ε(t0)| / |η_ε(t0)|.
    let se_of = |e: usize| -> f64 {
        let r = &report.records[e];
        let v = report.strategies[e].as_ref().unwrap().v(0, i0, 1.0).norm();
        match (&r.eta0, &r.eta0_se) {
            (Some(eta), Some(se)) => {
                let en: f64 = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
                let sn: f64 = se.iter().map(|x| x * x).sum::<f64>().sqrt();
                if en > 0.0 {
                    v * sn / en
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    };
    let se = ((wa * se_of(ia)).powi(2) + (wb * se_of(ib)).powi(2)).sqrt();
    LimitSummary {
        valid_until: limit.valid_until,
        theta0: limit.theta(0, i0).iter().copied().collect(),
        v0: v0.iter().copied().collect(),
        v0_se: vec![se; v0.len()],
        method: format!("theta: polynomial extrapolation in eps over {halvings} halvings of eps_min; v: linear through eps = {ea}, {eb}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResidual {
    pub t_prime: f64,
    /// `E∫₀^{t'} |u_closed − u*|²` and its standard error.
    pub residual: f64,
    pub residual_se: f64,
    /// Costs on `[t0, t']` with the terminal weight applied at `t'`.
    pub cost_closed: f64,
    pub cost_star: f64,
    pub cost_gap: f64,
    pub cost_gap_se: f64,
}

/// Simulate the closed loop under `limit` on `[t0, t']` and compare its control
/// with `u*`, the linear extrapolation to `ε = 0` of the two smallest-ε
/// closed-loop controls of the sweep on the same scenarios.
pub fn verify_feedback_identity(
    spec: &ProblemSpec,
    report: &SweepReport,
    limit: &Strategy,
    scenarios: &ScenarioSet,
) -> Result<FeedbackResidual> {
    let grid = scenarios.grid;
    if limit.grid != grid || report.grid() != grid {
        return Err(Error::Mismatch("limit strategy, sweep and scenarios must share a grid".into()));
    }
    let live = report.live();
    if live.len() < 2 {
        return Err(Error::Config("feedback identity needs two solved eps".into()));
    }
    let kp = report.t_prime_index();
    let (ia, ib) = (live[live.len() - 2], live[live.len() - 1]);
    let (sa, sb) = (report.strategies[ia].as_ref().unwrap(), report.strategies[ib].as_ref().unwrap());
    let (wa, wb) = richardson_weights(report.epsilons[ia], report.epsilons[ib]);
    let x0 = DVector::from_column_slice(&report.x0);
    let (n, m) = (spec.n, spec.m);
    let sim = PathSimulator::new(spec, grid);
    let costs = CostTables::new(spec, &grid);
    let per: Vec<(f64, f64, f64)> = (0..scenarios.count)
        .into_par_iter()
        .map_init(
            || {
                (
                    PathBuffers::new(n, m, kp + 1),
                    PathBuffers::new(n, m, kp + 1),
                    PathBuffers::new(n, m, kp + 1),
                    vec![0.0; m * (kp + 1)],
                )
            },
            |(closed, ba, bb, ustar), p| -> Result<(f64, f64, f64)> {
                sim.run(x0.as_slice(), scenarios, p, Control::Feedback(limit), kp, closed)?;
                sim.run(x0.as_slice(), scenarios, p, Control::Feedback(sa), kp, ba)?;
                sim.run(x0.as_slice(), scenarios, p, Control::Feedback(sb), kp, bb)?;
                for (j, u) in ustar.iter_mut().enumerate() {
                    *u = wa * ba.u[j] + wb * bb.u[j];
                }
                let mut res = 0.0;
                for k in 0..=kp {
                    res += trapezoid_weight(&grid, k, kp) * diff_sq(&closed.u[k * m..(k + 1) * m], &ustar[k * m..(k + 1) * m]);
                }
                // state under u*, open loop on the same noise
                sim.run(x0.as_slice(), scenarios, p, Control::Flat(ustar), kp, ba)?;
                let reg = |k: usize| scenarios.regime(p, k);
                let md = |k: usize| scenarios.modulator(p, k);
                let (jc, _) = costs.path_cost(spec, &grid, &closed.x, &closed.u, kp, reg, md);
                let (js, _) = costs.path_cost(spec, &grid, &ba.x, ustar, kp, reg, md);
                Ok((res, jc, js))
            },
        )
        .collect::<Result<_>>()?;
    let col = |f: &dyn Fn(&(f64, f64, f64)) -> f64| mean_and_se(&per.iter().map(f).collect::<Vec<_>>());
    let (residual, residual_se) = col(&|t| t.0);
    let (cost_closed, _) = col(&|t| t.1);
    let (cost_star, _) = col(&|t| t.2);
    let (gap, gap_se) = col(&|t| t.1 - t.2);
    Ok(FeedbackResidual {
        t_prime: grid.node(kp),
        residual,
        residual_se,
        cost_closed,
        cost_star,
        cost_gap: gap.abs(),
        cost_gap_se: gap_se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityProbe {
    /// `(mean, std error)` of `J⁰(t0, 0, i0; u)` for each sampled control.
    pub estimates: Vec<(f64, f64)>,
    pub minimum: f64,
    pub minimum_se: f64,
    /// Some estimate is below `−3` standard errors.
    pub negative: bool,
}

/// Number of constant pieces of each random probe control.
const PROBE_PIECES: usize = 10;

/// Estimate `J⁰(t0, 0, i0; u)` on the homogenized problem for random
/// piecewise-constant controls with standard normal values. A clearly
/// negative estimate rules out open-loop solvability.
pub fn convexity_probe(spec: &ProblemSpec, scenarios: &ScenarioSet, num_controls: usize, seed: u64) -> Result<ConvexityProbe> {
    if num_controls < 10 {
        return Err(Error::Config(format!(
            "convexity probe needs at least 10 controls, got {num_controls}"
        )));
    }
    let hom = homogenize(spec);
    let grid = scenarios.grid;
    let (n, m) = (hom.n, hom.m);
    let controls: Vec<Vec<DVector<f64>>> = (0..num_controls)
        .map(|c| {
            let mut rng = stream_rng(seed, (1u64 << 48) + c as u64);
            let pieces: Vec<DVector<f64>> = (0..PROBE_PIECES)
                .map(|_| DVector::from_fn(m, |_, _| rng.sample(StandardNormal)))
                .collect();
            (0..grid.len())
                .map(|k| pieces[(k * PROBE_PIECES / grid.len()).min(PROBE_PIECES - 1)].clone())
                .collect()
        })
        .collect();
    let x0 = vec![0.0; n];
    let sim = PathSimulator::new(&hom, grid);
    let costs = CostTables::new(&hom, &grid);
    let last = grid.steps();
    let per: Vec<Vec<f64>> = (0..scenarios.count)
        .into_par_iter()
        .map_init(
            || PathBuffers::new(n, m, grid.len()),
            |buf, p| -> Result<Vec<f64>> {
                controls
                    .iter()
                    .map(|u| {
                        sim.run(&x0, scenarios, p, Control::Shared(u), last, buf)?;
                        Ok(costs
                            .path_cost(
                                &hom,
                                &grid,
                                &buf.x,
                                &buf.u,
                                last,
                                |k| scenarios.regime(p, k),
                                |k| scenarios.modulator(p, k),
                            )
                            .0)
                    })
                    .collect()
            },
        )
        .collect::<Result<_>>()?;
    let estimates: Vec<(f64, f64)> = (0..num_controls)
        .map(|c| mean_and_se(&per.iter().map(|v| v[c]).collect::<Vec<_>>()))
        .collect();
    let (minimum, minimum_se) = estimates
        .iter()
        .copied()
        .fold((f64::INFINITY, 0.0), |acc, e| if e.0 < acc.0 { e } else { acc });
    Ok(ConvexityProbe {
        negative: estimates.iter().any(|(m, se)| *m < -3.0 * se && *m < 0.0),
        estimates,
        minimum,
        minimum_se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueGap {
    pub epsilons: Vec<f64>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// `V_ε` does not increase as ε decreases, within 3 pooled standard errors.
    pub monotone: bool,
    /// Linear extrapolation to `ε = 0` through the two smallest ε (a heuristic:
    /// no rate is known for `V_ε → V`).
    pub extrapolated: f64,
    pub extrapolated_se: f64,
}

pub fn value_gap(report: &SweepReport) -> Result<ValueGap> {
    if report.verdict == Verdict::NotSolvable {
        return Err(Error::Config("value gap undefined: the sweep verdict is not-solvable".into()));
    }
    let mut eps = Vec::new();
    let mut values = Vec::new();
    let mut ses = Vec::new();
    for r in &report.records {
        if let (Some(v), Some(se)) = (r.value, r.value_se) {
            eps.push(r.epsilon);
            values.push(v);
            ses.push(se);
        }
    }
    if values.len() < 2 {
        return Err(Error::Config("value gap needs two solved eps".into()));
    }
    let monotone = values
        .windows(2)
        .zip(ses.windows(2))
        .all(|(v, s)| v[1] <= v[0] + 3.0 * (s[0] * s[0] + s[1] * s[1]).sqrt());
    let l = values.len();
    let (wa, wb) = richardson_weights(eps[l - 2], eps[l - 1]);
    Ok(ValueGap {
        extrapolated: wa * values[l - 2] + wb * values[l - 1],
        extrapolated_se: ((wa * ses[l - 2]).powi(2) + (wb * ses[l - 1]).powi(2)).sqrt(),
        epsilons: eps,
        values,
        std_errors: ses,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_index_is_dense() {
        let e = 5;
        let mut seen = vec![false; e * (e - 1) / 2];
        for a in 0..e {
            for b in a + 1..e {
                let i = pair_index(e, a, b);
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn neville_recovers_polynomials() {
        let eps = [0.1, 0.05, 0.025, 0.0125];
        let ys: Vec<f64> = eps.iter().map(|e| 3.0 - 2.0 * e + 5.0 * e * e - e * e * e).collect();
        assert!((neville_at_zero(&eps, &ys) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn richardson_weights_cancel_linear_term() {
        let (wa, wb) = richardson_weights(0.02, 0.01);
        let f = |e: f64| 1.5 + 4.0 * e;
        assert!((wa * f(0.02) + wb * f(0.01) - 1.5).abs() < 1e-14);
    }

    #[test]
    fn short_or_unsorted_ladders_are_rejected() {
        assert!(check_ladder(&[1.0, 0.5]).is_err());
        assert!(check_ladder(&[1.0, 0.5, 0.5]).is_err());
        assert!(check_ladder(&[1.0, -0.5, -1.0]).is_err());
        assert!(check_ladder(&[1.0, 0.5, 0.1]).is_ok());
    }
}
