//! Scenario generation, forward Euler–Maruyama simulation and cost estimation.
//!
//! A [`ScenarioSet`] fixes the randomness — chain paths and Brownian
//! increments — once, so every ε in a sweep is simulated on the same
//! paths. Steps containing a regime jump are split at the exact jump times
//! (the Brownian increment is split by a Brownian bridge), and every
//! coefficient on a sub-segment uses the regime in force on that segment.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{rate_integral, sample_chain, stream_rng, ChainPath};
use crate::control::Strategy;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::{bilinear, dot, matvec_acc, mean_and_se, pairwise_sum};
use crate::problem::{Loadings, ProblemSpec};
use crate::riccati::RiccatiSolution;

/// One constant-regime piece of a time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub regime: usize,
    pub start: f64,
    pub dt: f64,
    pub dw: f64,
}

/// A step that contains at least one regime jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStep {
    pub step: usize,
    pub segments: Vec<Segment>,
}

/// Reproducible ensemble of `(chain, Brownian)` path pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub seed: u64,
    pub count: usize,
    pub grid: TimeGrid,
    pub initial_regime: usize,
    pub chains: Vec<ChainPath>,
    /// Per-step increments, `[path * steps + k]`.
    dw: Vec<f64>,
    /// Regime at each node, `[path * nodes + k]`.
    regimes: Vec<u8>,
    /// Split steps per path, sorted by step.
    splits: Vec<Vec<SplitStep>>,
    /// Modulator loadings the values below were computed with.
    pub loadings: Option<Loadings>,
    /// `M(s_k)` per path, `[path * nodes + k]` (empty without loadings).
    modulator: Vec<f64>,
}

impl ScenarioSet {
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn nodes(&self) -> usize {
        self.grid.len()
    }

    #[inline]
    pub fn dw(&self, path: usize, k: usize) -> f64 {
        self.dw[path * self.steps() + k]
    }

    pub fn increments(&self, path: usize) -> &[f64] {
        let n = self.steps();
        &self.dw[path * n..(path + 1) * n]
    }

    /// Regime at node `k`.
    #[inline]
    pub fn regime(&self, path: usize, k: usize) -> usize {
        self.regimes[path * self.nodes() + k] as usize
    }

    /// `W(s_k) − W(t0)`.
    pub fn brownian(&self, path: usize, k: usize) -> f64 {
        pairwise_sum(&self.increments(path)[..k])
    }

    /// Modulator value at node `k` (1 when the set carries no loadings).
    #[inline]
    pub fn modulator(&self, path: usize, k: usize) -> f64 {
        if self.modulator.is_empty() {
            1.0
        } else {
            self.modulator[path * self.nodes() + k]
        }
    }

    pub fn has_modulator(&self) -> bool {
        !self.modulator.is_empty()
    }

    /// Constant-regime pieces of step `k` on `path`.
    pub fn segments(&self, path: usize, k: usize) -> SegmentIter<'_> {
        let splits = &self.splits[path];
        if !splits.is_empty() {
            if let Ok(pos) = splits.binary_search_by_key(&k, |s| s.step) {
                return SegmentIter::Split(splits[pos].segments.iter());
            }
        }
        SegmentIter::Single(Some(Segment {
            regime: self.regime(path, k),
            start: self.grid.node(k),
            dt: self.grid.node(k + 1) - self.grid.node(k),
            dw: self.dw(path, k),
        }))
    }

    pub fn is_split(&self, path: usize, k: usize) -> bool {
        self.splits[path].binary_search_by_key(&k, |s| s.step).is_ok()
    }

    /// A copy with the first `count` paths.
    pub fn head(&self, count: usize) -> ScenarioSet {
        let count = count.min(self.count);
        let (s, n) = (self.steps(), self.nodes());
        ScenarioSet {
            seed: self.seed,
            count,
            grid: self.grid,
            initial_regime: self.initial_regime,
            chains: self.chains[..count].to_vec(),
            dw: self.dw[..count * s].to_vec(),
            regimes: self.regimes[..count * n].to_vec(),
            splits: self.splits[..count].to_vec(),
            loadings: self.loadings.clone(),
            modulator: if self.modulator.is_empty() {
                Vec::new()
            } else {
                self.modulator[..count * n].to_vec()
            },
        }
    }
}

pub enum SegmentIter<'a> {
    Single(Option<Segment>),
    Split(std::slice::Iter<'a, Segment>),
}

impl Iterator for SegmentIter<'_> {
    type Item = Segment;
    fn next(&mut self) -> Option<Segment> {
        match self {
            SegmentIter::Single(s) => s.take(),
            SegmentIter::Split(it) => it.next().copied(),
        }
    }
}

struct PathDraw {
    chain: ChainPath,
    dw: Vec<f64>,
    regimes: Vec<u8>,
    splits: Vec<SplitStep>,
    modulator: Vec<f64>,
}

fn draw_path(spec: &ProblemSpec, grid: &TimeGrid, seed: u64, path: usize, i0: usize, loadings: Option<&Loadings>) -> Result<PathDraw> {
    let p = path as u64;
    let mut rng_chain = stream_rng(seed, 3 * p);
    let mut rng_w = stream_rng(seed, 3 * p + 1);
    let mut rng_bridge = stream_rng(seed, 3 * p + 2);
    let chain = sample_chain(&spec.generator, grid.t_start(), i0, grid.t_end(), &mut rng_chain)?;
    let steps = grid.steps();
    let dw: Vec<f64> = (0..steps)
        .map(|k| {
            let h = grid.node(k + 1) - grid.node(k);
            let z: f64 = rng_w.sample(StandardNormal);
            z * h.sqrt()
        })
        .collect();
    let regimes: Vec<u8> = grid.nodes().map(|t| chain.regime_at(t) as u8).collect();
    let mut splits = Vec::new();
    let mut k_prev = usize::MAX;
    for &tau in &chain.jump_times {
        let k = grid.floor_index(tau).min(steps - 1);
        if k == k_prev || tau == grid.node(k) {
            continue;
        }
        k_prev = k;
        let (a, b) = (grid.node(k), grid.node(k + 1));
        let pieces = chain.pieces(a, b);
        if pieces.len() < 2 {
            continue;
        }
        // Brownian bridge from (a, 0) to (b, ΔW) through the cut points
        let total = dw[k];
        let mut segments = Vec::with_capacity(pieces.len());
        let mut w = 0.0;
        for (idx, &(regime, s0, s1)) in pieces.iter().enumerate() {
            let next = if idx + 1 == pieces.len() {
                total
            } else {
                let remaining = b - s0;
                let frac = (s1 - s0) / remaining;
                let mean = w + frac * (total - w);
                let var = (s1 - s0) * (b - s1) / remaining;
                let z: f64 = rng_bridge.sample(StandardNormal);
                mean + var.max(0.0).sqrt() * z
            };
            segments.push(Segment {
                regime,
                start: s0,
                dt: s1 - s0,
                dw: next - w,
            });
            w = next;
        }
        splits.push(SplitStep { step: k, segments });
    }
    let mut modulator = Vec::new();
    if let Some(l) = loadings {
        modulator.reserve(steps + 1);
        let mut log_m = 0.0;
        modulator.push(1.0);
        let mut split_iter = splits.iter().peekable();
        for k in 0..steps {
            if split_iter.peek().is_some_and(|s| s.step == k) {
                for seg in &split_iter.next().unwrap().segments {
                    log_m += l.wiener[seg.regime] * seg.dw + l.drift[seg.regime] * seg.dt;
                }
            } else {
                let r = regimes[k] as usize;
                log_m += l.wiener[r] * dw[k] + l.drift[r] * (grid.node(k + 1) - grid.node(k));
            }
            modulator.push(log_m.exp());
        }
    }
    Ok(PathDraw {
        chain,
        dw,
        regimes,
        splits,
        modulator,
    })
}

/// Draw `count` scenarios on `grid` starting in regime `initial_regime` (0-based).
///
/// Path `p` uses counter-based streams `3p`, `3p + 1`, `3p + 2` of `seed`
/// (chain, increments, bridges), so the set is a pure function of its
/// arguments and independent of the thread count.
pub fn generate_scenarios(spec: &ProblemSpec, grid: &TimeGrid, count: usize, seed: u64, initial_regime: usize) -> Result<ScenarioSet> {
    if count == 0 {
        return Err(Error::Config("scenario count must be positive".into()));
    }
    if initial_regime >= spec.num_regimes() {
        return Err(Error::Config(format!("initial regime {} out of range", initial_regime + 1)));
    }
    if spec.num_regimes() > u8::MAX as usize {
        return Err(Error::Unsupported("more than 255 regimes".into()));
    }
    let loadings = spec.modulator().cloned();
    let draws: Vec<PathDraw> = (0..count)
        .into_par_iter()
        .map(|p| draw_path(spec, grid, seed, p, initial_regime, loadings.as_ref()))
        .collect::<Result<_>>()?;
    let mut set = ScenarioSet {
        seed,
        count,
        grid: *grid,
        initial_regime,
        chains: Vec::with_capacity(count),
        dw: Vec::with_capacity(count * grid.steps()),
        regimes: Vec::with_capacity(count * grid.len()),
        splits: Vec::with_capacity(count),
        loadings,
        modulator: Vec::new(),
    };
    for d in draws {
        set.chains.push(d.chain);
        set.dw.extend_from_slice(&d.dw);
        set.regimes.extend_from_slice(&d.regimes);
        set.splits.push(d.splits);
        set.modulator.extend_from_slice(&d.modulator);
    }
    Ok(set)
}

/// Simulated states and controls, `x[path][node]`, `u[path][node]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEnsemble {
    pub grid: TimeGrid,
    pub x0: DVector<f64>,
    pub x: Vec<Vec<DVector<f64>>>,
    pub u: Vec<Vec<DVector<f64>>>,
    /// Regime at the final node of each path.
    pub terminal_regime: Vec<usize>,
    /// Node regimes per path (needed for the running cost).
    pub regimes: Vec<Vec<usize>>,
    pub description: String,
}

impl StateEnsemble {
    pub fn count(&self) -> usize {
        self.x.len()
    }
}

/// Precomputed per-step, per-regime coefficients.
struct Tables {
    a: Vec<Vec<DMatrix<f64>>>,
    b: Vec<Vec<DMatrix<f64>>>,
    c: Vec<Vec<DMatrix<f64>>>,
    d: Vec<Vec<DMatrix<f64>>>,
    /// `∫` of the deterministic part of `b` over the full step.
    drift_int: Vec<Vec<DVector<f64>>>,
    /// `σ` at the step start with unit modulator.
    sigma: Vec<Vec<DVector<f64>>>,
}

impl Tables {
    fn new(spec: &ProblemSpec, grid: &TimeGrid) -> Self {
        let dn = spec.num_regimes();
        let at = |f: &dyn Fn(f64, usize) -> DMatrix<f64>| -> Vec<Vec<DMatrix<f64>>> {
            (0..grid.steps()).map(|k| (0..dn).map(|i| f(grid.node(k), i)).collect()).collect()
        };
        Tables {
            a: at(&|s, i| spec.a.eval(s, i)),
            b: at(&|s, i| spec.b.eval(s, i)),
            c: at(&|s, i| spec.c.eval(s, i)),
            d: at(&|s, i| spec.d.eval(s, i)),
            drift_int: (0..grid.steps())
                .map(|k| {
                    (0..dn)
                        .map(|i| spec.drift.base_integral(grid.node(k), grid.node(k + 1), i))
                        .collect()
                })
                .collect(),
            sigma: (0..grid.steps())
                .map(|k| {
                    let (a, b) = (grid.node(k), grid.node(k + 1));
                    (0..dn).map(|i| spec.sigma.stage_eval(a, a, b, i, 1.0)).collect()
                })
                .collect(),
        }
    }
}

/// Where the control comes from in a forward run.
#[derive(Clone, Copy)]
pub(crate) enum Control<'a> {
    Feedback(&'a Strategy),
    Open(&'a [Vec<DVector<f64>>]),
    /// The same deterministic control `u[node]` on every path.
    Shared(&'a [DVector<f64>]),
    /// Node-major control of the single path being integrated.
    Flat(&'a [f64]),
}

impl Control<'_> {
    fn write(&self, out: &mut [f64], p: usize, k: usize, i: usize, x: &[f64], modulator: f64) {
        match self {
            Control::Feedback(st) => st.control_into(out, k, i, x, modulator),
            Control::Open(u) => out.copy_from_slice(u[p][k].as_slice()),
            Control::Shared(u) => out.copy_from_slice(u[k].as_slice()),
            Control::Flat(u) => out.copy_from_slice(&u[k * out.len()..(k + 1) * out.len()]),
        }
    }
}

/// Node-major state and control of one path: `x[k*n..(k+1)*n]`, `u[k*m..(k+1)*m]`.
pub(crate) struct PathBuffers {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    useg: Vec<f64>,
    delta: Vec<f64>,
}

impl PathBuffers {
    pub fn new(n: usize, m: usize, nodes: usize) -> Self {
        PathBuffers {
            x: vec![0.0; n * nodes],
            u: vec![0.0; m * nodes],
            useg: vec![0.0; m],
            delta: vec![0.0; n],
        }
    }
}

/// Euler stepping of the state equation, one path at a time, with coefficients
/// tabulated once per grid.
pub(crate) struct PathSimulator<'a> {
    spec: &'a ProblemSpec,
    grid: TimeGrid,
    tables: Tables,
    drift_modulated: bool,
    sigma_modulated: bool,
    sigma_zero: bool,
}

impl<'a> PathSimulator<'a> {
    pub fn new(spec: &'a ProblemSpec, grid: TimeGrid) -> Self {
        PathSimulator {
            spec,
            grid,
            tables: Tables::new(spec, &grid),
            drift_modulated: spec.drift.is_modulated(),
            sigma_modulated: spec.sigma.is_modulated(),
            sigma_zero: spec.sigma.is_zero(),
        }
    }

    /// Integrate path `p` from `x0` up to node `until` (inclusive).
    pub fn run(&self, x0: &[f64], sc: &ScenarioSet, p: usize, control: Control<'_>, until: usize, buf: &mut PathBuffers) -> Result<()> {
        let (n, m) = (self.spec.n, self.spec.m);
        let t = &self.tables;
        buf.x[..n].copy_from_slice(x0);
        for k in 0..=until {
            let i = sc.regime(p, k);
            let mk = sc.modulator(p, k);
            let (xk, xnext) = buf.x.split_at_mut((k + 1) * n);
            let xk = &xk[k * n..];
            control.write(&mut buf.u[k * m..(k + 1) * m], p, k, i, xk, mk);
            if k == until {
                break;
            }
            let h = self.grid.node(k + 1) - self.grid.node(k);
            let x = &mut xnext[..n];
            x.copy_from_slice(xk);
            for seg in sc.segments(p, k) {
                let r = seg.regime;
                let u: &[f64] = if r == i && seg.start == self.grid.node(k) {
                    &buf.u[k * m..(k + 1) * m]
                } else {
                    control.write(&mut buf.useg, p, k, r, x, mk);
                    &buf.useg
                };
                let d = &mut buf.delta;
                d.iter_mut().for_each(|v| *v = 0.0);
                matvec_acc(d, &t.a[k][r], x, seg.dt);
                matvec_acc(d, &t.b[k][r], u, seg.dt);
                matvec_acc(d, &t.c[k][r], x, seg.dw);
                matvec_acc(d, &t.d[k][r], u, seg.dw);
                let bscale = if self.drift_modulated { mk } else { 1.0 };
                if seg.dt == h {
                    axpy(d, bscale, t.drift_int[k][r].as_slice());
                } else {
                    let bint = self.spec.drift.base_integral(seg.start, seg.start + seg.dt, r);
                    axpy(d, bscale, bint.as_slice());
                }
                if !self.sigma_zero {
                    let sscale = seg.dw * if self.sigma_modulated { mk } else { 1.0 };
                    if seg.dt == h {
                        axpy(d, sscale, t.sigma[k][r].as_slice());
                    } else {
                        let sv = self.spec.sigma.stage_eval(seg.start, seg.start, seg.start + seg.dt, r, 1.0);
                        axpy(d, sscale, sv.as_slice());
                    }
                }
                for (xv, dv) in x.iter_mut().zip(d.iter()) {
                    *xv += dv;
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { path: p, node: k + 1 });
            }
        }
        Ok(())
    }
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

fn simulate(
    spec: &ProblemSpec,
    x0: &DVector<f64>,
    scenarios: &ScenarioSet,
    control: Control<'_>,
    until: usize,
    description: String,
) -> Result<StateEnsemble> {
    let grid = scenarios.grid;
    let (n, m) = (spec.n, spec.m);
    if x0.len() != n {
        return Err(Error::Config(format!("initial state has length {}, expected {n}", x0.len())));
    }
    let sim = PathSimulator::new(spec, grid);
    type PathOut = (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<usize>);
    let results: Vec<Result<PathOut>> = (0..scenarios.count)
        .into_par_iter()
        .map_init(
            || PathBuffers::new(n, m, until + 1),
            |buf, p| {
                sim.run(x0.as_slice(), scenarios, p, control, until, buf)?;
                let xs = buf.x.chunks(n).map(DVector::from_column_slice).collect();
                let us = if m == 0 {
                    vec![DVector::zeros(0); until + 1]
                } else {
                    buf.u.chunks(m).map(DVector::from_column_slice).collect()
                };
                let regs = (0..=until).map(|k| scenarios.regime(p, k)).collect();
                Ok((xs, us, regs))
            },
        )
        .collect();
    let mut ens = StateEnsemble {
        grid,
        x0: x0.clone(),
        x: Vec::with_capacity(scenarios.count),
        u: Vec::with_capacity(scenarios.count),
        terminal_regime: Vec::with_capacity(scenarios.count),
        regimes: Vec::with_capacity(scenarios.count),
        description,
    };
    for r in results {
        let (xs, us, regs) = r?;
        ens.terminal_regime.push(*regs.last().unwrap());
        ens.x.push(xs);
        ens.u.push(us);
        ens.regimes.push(regs);
    }
    Ok(ens)
}

/// Warn when the step is too coarse for the `1/ε`-sized gains of a perturbed strategy.
pub fn step_guard(grid: &TimeGrid, epsilon: f64) -> Option<String> {
    if epsilon > 0.0 && grid.h() > epsilon / 10.0 {
        let suggested = ((grid.t_end() - grid.t_start()) * 10.0 / epsilon).ceil() as usize;
        let msg = format!(
            "step h = {} exceeds eps/10 = {}; explicit stepping may be unstable (suggest N >= {suggested})",
            grid.h(),
            epsilon / 10.0
        );
        log::warn!("{msg}");
        Some(msg)
    } else {
        None
    }
}

/// Forward closed-loop run `u = Θ X + v` on every scenario.
pub fn simulate_closed_loop(spec: &ProblemSpec, x0: &DVector<f64>, strategy: &Strategy, scenarios: &ScenarioSet) -> Result<StateEnsemble> {
    if strategy.grid != scenarios.grid {
        return Err(Error::Mismatch("strategy and scenario grids differ".into()));
    }
    step_guard(&scenarios.grid, strategy.epsilon);
    simulate(
        spec,
        x0,
        scenarios,
        Control::Feedback(strategy),
        scenarios.steps(),
        format!("closed-loop eps = {}", strategy.epsilon),
    )
}

/// Closed-loop run stopped at node `until` (inclusive).
pub fn simulate_closed_loop_until(
    spec: &ProblemSpec,
    x0: &DVector<f64>,
    strategy: &Strategy,
    scenarios: &ScenarioSet,
    until: usize,
) -> Result<StateEnsemble> {
    if strategy.grid != scenarios.grid {
        return Err(Error::Mismatch("strategy and scenario grids differ".into()));
    }
    simulate(
        spec,
        x0,
        scenarios,
        Control::Feedback(strategy),
        until.min(scenarios.steps()),
        format!("closed-loop eps = {} until node {until}", strategy.epsilon),
    )
}

/// Forward run with an exogenous control `u[path][node]` (held constant over each step).
pub fn simulate_open_loop(
    spec: &ProblemSpec,
    x0: &DVector<f64>,
    u: &[Vec<DVector<f64>>],
    scenarios: &ScenarioSet,
) -> Result<StateEnsemble> {
    if u.len() != scenarios.count || u.iter().any(|row| row.len() != scenarios.nodes()) {
        return Err(Error::Mismatch("control process is not aligned with the scenarios".into()));
    }
    if u.iter().flatten().any(|v| v.len() != spec.m) {
        return Err(Error::Mismatch(format!("controls must have length {}", spec.m)));
    }
    simulate(spec, x0, scenarios, Control::Open(u), scenarios.steps(), "open-loop".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub per_path: Vec<f64>,
    pub epsilon: f64,
    /// `E∫|u|²` and its standard error.
    pub control_l2: f64,
    pub control_l2_se: f64,
}

/// Trapezoid `∫|u|²` along one path on nodes `0..=until`.
pub fn path_control_l2(grid: &TimeGrid, u: &[DVector<f64>]) -> f64 {
    let terms: Vec<f64> = (0..u.len() - 1)
        .map(|k| 0.5 * (grid.node(k + 1) - grid.node(k)) * (u[k].norm_squared() + u[k + 1].norm_squared()))
        .collect();
    pairwise_sum(&terms)
}

/// Running- and terminal-cost coefficients per node and regime.
pub(crate) struct CostTables {
    q: Vec<Vec<DMatrix<f64>>>,
    s: Vec<Vec<DMatrix<f64>>>,
    r: Vec<Vec<DMatrix<f64>>>,
    /// `q` and `ρ` with unit modulator.
    qv: Vec<Vec<DVector<f64>>>,
    rho: Vec<Vec<DVector<f64>>>,
    qv_modulated: bool,
    rho_modulated: bool,
    linear: bool,
    running: bool,
}

impl CostTables {
    pub fn new(spec: &ProblemSpec, grid: &TimeGrid) -> Self {
        let running = !(spec.q_mat.is_zero() && spec.s_mat.is_zero() && spec.r_mat.is_zero() && spec.q_vec.is_zero() && spec.rho.is_zero());
        let dn = spec.num_regimes();
        let nodes = if running { grid.len() } else { 0 };
        let mats = |f: &dyn Fn(f64, usize) -> DMatrix<f64>| -> Vec<Vec<DMatrix<f64>>> {
            (0..nodes).map(|k| (0..dn).map(|i| f(grid.node(k), i)).collect()).collect()
        };
        let vecs = |f: &dyn Fn(f64, usize) -> DVector<f64>| -> Vec<Vec<DVector<f64>>> {
            (0..nodes).map(|k| (0..dn).map(|i| f(grid.node(k), i)).collect()).collect()
        };
        CostTables {
            q: mats(&|t, i| spec.q_mat.eval(t, i)),
            s: mats(&|t, i| spec.s_mat.eval(t, i)),
            r: mats(&|t, i| spec.r_mat.eval(t, i)),
            qv: vecs(&|t, i| spec.q_vec.eval(t, i, 1.0)),
            rho: vecs(&|t, i| spec.rho.eval(t, i, 1.0)),
            qv_modulated: spec.q_vec.is_modulated(),
            rho_modulated: spec.rho.is_modulated(),
            linear: !(spec.q_vec.is_zero() && spec.rho.is_zero()),
            running,
        }
    }

    pub fn needs_modulator(&self) -> bool {
        self.running && (self.qv_modulated || self.rho_modulated)
    }

    /// Running cost on nodes `0..=last` (trapezoid) plus the terminal form at
    /// node `last`, from node-major buffers. Returns `(cost, ∫|u|²)`.
    #[allow(clippy::too_many_arguments)]
    pub fn path_cost(
        &self,
        spec: &ProblemSpec,
        grid: &TimeGrid,
        xs: &[f64],
        us: &[f64],
        last: usize,
        regime: impl Fn(usize) -> usize,
        modulator: impl Fn(usize) -> f64,
    ) -> (f64, f64) {
        let (n, m) = (spec.n, spec.m);
        let x_at = |k: usize| &xs[k * n..(k + 1) * n];
        let u_at = |k: usize| &us[k * m..(k + 1) * m];
        let mut running = 0.0;
        let mut l2 = 0.0;
        let mut prev = (0.0, 0.0);
        for k in 0..=last {
            let u = u_at(k);
            let uu = dot(u, u);
            let c = if self.running {
                let i = regime(k);
                let x = x_at(k);
                let mut v = bilinear(&self.q[k][i], x, x) + 2.0 * bilinear(&self.s[k][i], u, x) + bilinear(&self.r[k][i], u, u);
                if self.linear {
                    let mk = if self.needs_modulator() { modulator(k) } else { 1.0 };
                    let sq = if self.qv_modulated { mk } else { 1.0 };
                    let sr = if self.rho_modulated { mk } else { 1.0 };
                    v += 2.0 * sq * dot(self.qv[k][i].as_slice(), x) + 2.0 * sr * dot(self.rho[k][i].as_slice(), u);
                }
                v
            } else {
                0.0
            };
            if k > 0 {
                let w = 0.5 * (grid.node(k) - grid.node(k - 1));
                running += w * (prev.0 + c);
                l2 += w * (prev.1 + uu);
            }
            prev = (c, uu);
        }
        let i_t = regime(last);
        let xt = x_at(last);
        let terminal = bilinear(&spec.g_mat[i_t], xt, xt) + 2.0 * dot(spec.g_vec[i_t].as_slice(), xt);
        (running + terminal, l2)
    }
}

/// Monte Carlo estimate of `J` (and `J_ε = J + ε E∫|u|²` when `epsilon > 0`).
///
/// `q` and `ρ` that carry a modulator are evaluated with the scenario's `M`,
/// so `scenarios` must be the set the ensemble was simulated on.
pub fn estimate_cost(spec: &ProblemSpec, ensemble: &StateEnsemble, epsilon: f64, scenarios: Option<&ScenarioSet>) -> Result<CostEstimate> {
    let grid = ensemble.grid;
    let tables = CostTables::new(spec, &grid);
    if tables.needs_modulator() && scenarios.is_none() {
        return Err(Error::Config("modulated weights need the scenario set".into()));
    }
    let per: Vec<(f64, f64)> = (0..ensemble.count())
        .into_par_iter()
        .map(|p| {
            let xs: Vec<f64> = ensemble.x[p].iter().flat_map(|v| v.iter().copied()).collect();
            let us: Vec<f64> = ensemble.u[p].iter().flat_map(|v| v.iter().copied()).collect();
            let last = ensemble.x[p].len() - 1;
            let regs = &ensemble.regimes[p];
            let (c, l2) = tables.path_cost(
                spec,
                &grid,
                &xs,
                &us,
                last,
                |k| regs[k],
                |k| scenarios.map_or(1.0, |sc| sc.modulator(p, k)),
            );
            (c + epsilon * l2, l2)
        })
        .collect();
    let per_path: Vec<f64> = per.iter().map(|x| x.0).collect();
    let l2s: Vec<f64> = per.iter().map(|x| x.1).collect();
    let (mean, std_error) = mean_and_se(&per_path);
    let (control_l2, control_l2_se) = mean_and_se(&l2s);
    Ok(CostEstimate {
        mean,
        std_error,
        per_path,
        epsilon,
        control_l2,
        control_l2_se,
    })
}

/// [`estimate_cost`] with a martingale control variate built from a Riccati
/// solution `P` on the same grid.
///
/// From each path's cost the sum
///
/// ```text
/// Σ_k 2⟨P_k(α_k) X_k, C X_k + D u_k + σ⟩ ΔW_k + Σ_j (⟨P_k(j) X_k, X_k⟩ − ⟨P_k(α_k) X_k, X_k⟩) ΔÑ_j
/// ```
///
/// is subtracted, where `ΔÑ_j` counts the jumps into `j` during the step minus
/// their compensator along the chain path. Every term is a coefficient known
/// at `s_k` times a mean-zero increment, so the estimator targets the same
/// expectation as the plain one. When `⟨P X, X⟩` is close to the cost-to-go of
/// the simulated control, the subtracted sum cancels most of the terminal
/// noise. That matters for costs driven by lognormal factors, where the
/// plain sample mean is dominated by rare paths.
pub fn estimate_cost_cv(
    spec: &ProblemSpec,
    ensemble: &StateEnsemble,
    epsilon: f64,
    scenarios: &ScenarioSet,
    riccati: &RiccatiSolution,
) -> Result<CostEstimate> {
    let grid = ensemble.grid;
    if scenarios.grid != grid || riccati.grid != grid {
        return Err(Error::Mismatch("ensemble, scenarios and Riccati solution must share a grid".into()));
    }
    if scenarios.count != ensemble.count() {
        return Err(Error::Mismatch("ensemble was not simulated on these scenarios".into()));
    }
    let plain = estimate_cost(spec, ensemble, epsilon, Some(scenarios))?;
    let tables = Tables::new(spec, &grid);
    let sigma_mod = spec.sigma.is_modulated();
    let sigma_zero = spec.sigma.is_zero();
    let dn = spec.num_regimes();
    let n = spec.n;
    let adjusted: Vec<f64> = (0..ensemble.count())
        .into_par_iter()
        .map(|p| {
            let mut diff = vec![0.0; n];
            let mut px = vec![0.0; n];
            let mut mart = 0.0;
            for k in 0..grid.steps() {
                let i = scenarios.regime(p, k);
                let x = ensemble.x[p][k].as_slice();
                let u = ensemble.u[p][k].as_slice();
                diff.iter_mut().for_each(|v| *v = 0.0);
                matvec_acc(&mut diff, &tables.c[k][i], x, 1.0);
                matvec_acc(&mut diff, &tables.d[k][i], u, 1.0);
                if !sigma_zero {
                    let scale = if sigma_mod { scenarios.modulator(p, k) } else { 1.0 };
                    for (d, v) in diff.iter_mut().zip(tables.sigma[k][i].iter()) {
                        *d += scale * v;
                    }
                }
                px.iter_mut().for_each(|v| *v = 0.0);
                matvec_acc(&mut px, &riccati.p[k][i], x, 1.0);
                mart += 2.0 * dot(&px, &diff) * scenarios.dw(p, k);
                if dn > 1 {
                    let own = bilinear(&riccati.p[k][i], x, x);
                    let mut prev: Option<usize> = None;
                    for seg in scenarios.segments(p, k) {
                        for j in 0..dn {
                            if j != seg.regime {
                                let w = bilinear(&riccati.p[k][j], x, x) - own;
                                mart -= w * rate_integral(&spec.generator, seg.regime, j, seg.start, seg.start + seg.dt);
                            }
                        }
                        if prev.is_some() {
                            mart += bilinear(&riccati.p[k][seg.regime], x, x) - own;
                        }
                        prev = Some(seg.regime);
                    }
                }
            }
            plain.per_path[p] - mart
        })
        .collect();
    let (mean, std_error) = mean_and_se(&adjusted);
    Ok(CostEstimate {
        mean,
        std_error,
        per_path: adjusted,
        ..plain
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    #[test]
    fn scenarios_are_deterministic() {
        let spec = oracle::modulated_drift_spec();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let a = generate_scenarios(&spec, &grid, 20, 9, 0).unwrap();
        let b = generate_scenarios(&spec, &grid, 20, 9, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.has_modulator());
        assert_eq!(a.modulator(3, 0), 1.0);
    }

    #[test]
    fn split_segments_sum_to_step() {
        let spec = oracle::modulated_drift_spec();
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let set = generate_scenarios(&spec, &grid, 200, 1, 0).unwrap();
        let mut seen = 0;
        for p in 0..set.count {
            for k in 0..grid.steps() {
                let segs: Vec<Segment> = set.segments(p, k).collect();
                let dt: f64 = segs.iter().map(|s| s.dt).sum();
                let dw: f64 = segs.iter().map(|s| s.dw).sum();
                assert!((dt - grid.h()).abs() < 1e-14);
                assert!((dw - set.dw(p, k)).abs() < 1e-12);
                assert_eq!(segs[0].regime, set.regime(p, k));
                if segs.len() > 1 {
                    seen += 1;
                    assert_eq!(segs.last().unwrap().regime, set.regime(p, k + 1));
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn constant_control_integrates_exactly() {
        let mut spec = oracle::zero_spec(1, 1);
        spec.b = crate::problem::MatrixProvider::scalars(&[1.0, 1.0]);
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let set = generate_scenarios(&spec, &grid, 3, 0, 0).unwrap();
        let u = vec![vec![DVector::from_element(1, 1.0); grid.len()]; 3];
        let ens = simulate_open_loop(&spec, &DVector::zeros(1), &u, &set).unwrap();
        for p in 0..3 {
            assert!((ens.x[p][100][0] - 1.0).abs() < 1e-12);
        }
    }
}
