//! Adjoint BSDE
//!
//! ```text
//! dη = −{Lᵀη + Kᵀζ + KᵀPσ + Θᵀρ + P b + q} ds + ζ dW + Σ_j ξ_j dÑ_j,   η(T) = g(α(T)),
//! L = A + BΘ,   K = C + DΘ,
//! ```
//!
//! with two backends.
//!
//! **ODE.** When `b, σ, q, ρ` are deterministic functions of `(s, i)` the
//! solution is Markov: `η(s) = h(s, α(s))` and `ζ ≡ 0`. Itô's formula for a
//! function of the chain gives
//!
//! ```text
//! dh(s, α(s)) = ḣ(s, α) ds + Σ_k λ_{αk} h(s, k) ds + Σ_k [h(s, k) − h(s, α)] dÑ_k,
//! ```
//!
//! so matching drifts with the BSDE yields the coupled terminal-value system
//! `ḣ_i + Σ_k λ_ik h_k + F_i = 0`, `h_i(T) = g(i)`, where `F_i` is the driver
//! at regime `i` with `ζ = 0`; the jump coefficients are `ξ_k = h_k − h_α`.
//! The system is integrated backward with RK4.
//!
//! **Regression.** For path-modulated inputs `η(s)` is approximated at each
//! node by a polynomial in the standardised modulator value
//! `z = (M(s) − mean)/sd`, one per regime. The scheme runs backward one step
//! at a time: the target is the next-node fit along each path plus the
//! trapezoid driver terms, minus the martingale increment of the next-node
//! fit frozen at the step start (a control variate with zero conditional
//! mean). It is regressed on the basis with weights `1/M²`, and the implicit
//! half of the trapezoid rule is solved in closed form; the driver is linear,
//! so this is a linear map on the coefficients. `ζ` is the regression of the
//! Brownian-weighted one-step residual.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{build_theta, theta_at};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::{matvec_acc, pairwise_sum, pinv};
use crate::problem::{Input, ProblemSpec};
use crate::riccati::RiccatiSolution;
use crate::sim::ScenarioSet;

/// Smallest ensemble the regression backend accepts.
pub const MIN_SCENARIOS: usize = 100;

/// Polynomial degree in the modulator used when none is given.
pub const DEFAULT_DEGREE: usize = 2;

/// A regime needs this many samples per basis function, otherwise the node
/// falls back to a fit pooled over all regimes.
const SAMPLES_PER_BASIS: usize = 100;

/// Gram matrices with relative eigenvalue spread below this are rank deficient.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Ode,
    Regression,
}

/// Per-node polynomials in the standardised modulator value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyTable {
    /// `(mean, sd)` of `M(s_k)` over the scenarios.
    pub normalization: Vec<(f64, f64)>,
    /// `coeffs[k][i]` is `dim × (degree + 1)`; column `j` multiplies `zʲ`.
    pub coeffs: Vec<Vec<DMatrix<f64>>>,
}

impl PolyTable {
    #[inline]
    pub fn z(&self, k: usize, modulator: f64) -> f64 {
        let (mean, sd) = self.normalization[k];
        (modulator - mean) / sd
    }

    pub fn eval(&self, k: usize, i: usize, modulator: f64) -> DVector<f64> {
        poly_eval(&self.coeffs[k][i], self.z(k, modulator))
    }
}

fn poly_eval(c: &DMatrix<f64>, z: f64) -> DVector<f64> {
    let mut out = DVector::zeros(c.nrows());
    let mut zp = 1.0;
    for j in 0..c.ncols() {
        out.axpy(zp, &c.column(j), 1.0);
        zp *= z;
    }
    out
}

pub(crate) fn poly_eval_into(out: &mut [f64], c: &DMatrix<f64>, z: f64) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let rows = c.nrows();
    let data = c.as_slice();
    let mut zp = 1.0;
    for j in 0..c.ncols() {
        for (o, &a) in out.iter_mut().zip(&data[j * rows..(j + 1) * rows]) {
            *o += a * zp;
        }
        zp *= z;
    }
}

/// `d/dz` of the polynomial with coefficient columns `c`.
fn poly_derivative_into(out: &mut [f64], c: &DMatrix<f64>, z: f64) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let rows = c.nrows();
    let data = c.as_slice();
    let mut zp = 1.0;
    for j in 1..c.ncols() {
        for (o, &a) in out.iter_mut().zip(&data[j * rows..(j + 1) * rows]) {
            *o += a * j as f64 * zp;
        }
        zp *= z;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AdjointData {
    /// `η(s_k, i)`, indexed `[node][regime]`; `ζ ≡ 0`.
    Table(Vec<Vec<DVector<f64>>>),
    Regression {
        eta: PolyTable,
        zeta: PolyTable,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressionDiagnostics {
    pub scenarios: usize,
    pub degree: usize,
    /// Standard error of the fitted conditional expectation at each node.
    pub eta_se: Vec<f64>,
    pub zeta_se: Vec<f64>,
    /// Forward Monte Carlo estimate of `E η(t0)`: `g(α(T)) + ∫ driver ds` summed
    /// along each path with the fitted `(η, ζ)`, and its standard error. This
    /// is the error bar quoted for `η(t0)`; the per-node `eta_se` only reflect
    /// the last regression step.
    pub eta0_forward: Vec<f64>,
    pub eta0_forward_se: Vec<f64>,
    /// Degree actually used at each node (after rank reduction).
    pub degree_used: Vec<usize>,
    /// `ζ` is estimated but no downstream formula needs it when `D ≡ 0`.
    pub zeta_low_confidence: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointSolution {
    pub backend: Backend,
    pub epsilon: f64,
    pub grid: TimeGrid,
    pub n: usize,
    pub num_regimes: usize,
    pub data: AdjointData,
    pub diagnostics: Option<RegressionDiagnostics>,
}

impl AdjointSolution {
    /// `η(s_k)` in regime `i` for a path with modulator value `modulator`.
    pub fn eta(&self, k: usize, i: usize, modulator: f64) -> DVector<f64> {
        match &self.data {
            AdjointData::Table(t) => t[k][i].clone(),
            AdjointData::Regression { eta, .. } => eta.eval(k, i, modulator),
        }
    }

    pub fn zeta(&self, k: usize, i: usize, modulator: f64) -> DVector<f64> {
        match &self.data {
            AdjointData::Table(_) => DVector::zeros(self.n),
            AdjointData::Regression { zeta, .. } => zeta.eval(k, i, modulator),
        }
    }

    /// Jump coefficient `ξ_j = η(s_k, j) − η(s_k, i)` for a path currently in regime `i`.
    pub fn xi(&self, k: usize, i: usize, j: usize, modulator: f64) -> DVector<f64> {
        self.eta(k, j, modulator) - self.eta(k, i, modulator)
    }

    /// `(η, ζ)` polynomial tables for the regression backend.
    pub fn per_scenario(&self) -> Option<(&PolyTable, &PolyTable)> {
        match &self.data {
            AdjointData::Table(_) => None,
            AdjointData::Regression { eta, zeta } => Some((eta, zeta)),
        }
    }

    /// `η` along every scenario, `[path][node]`.
    pub fn eta_paths(&self, scenarios: &ScenarioSet) -> Vec<Vec<DVector<f64>>> {
        (0..scenarios.count)
            .map(|p| {
                (0..scenarios.nodes())
                    .map(|k| self.eta(k, scenarios.regime(p, k), scenarios.modulator(p, k)))
                    .collect()
            })
            .collect()
    }

    pub fn zeta_paths(&self, scenarios: &ScenarioSet) -> Vec<Vec<DVector<f64>>> {
        (0..scenarios.count)
            .map(|p| {
                (0..scenarios.nodes())
                    .map(|k| self.zeta(k, scenarios.regime(p, k), scenarios.modulator(p, k)))
                    .collect()
            })
            .collect()
    }
}

/// `(Lᵀ, Kᵀ)` at `(s, i)` for gain `Θ`.
fn driver_mats(spec: &ProblemSpec, s: f64, i: usize, theta: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let l = spec.a.eval(s, i) + spec.b.eval(s, i) * theta;
    let k = spec.c.eval(s, i) + spec.d.eval(s, i) * theta;
    (l.transpose(), k.transpose())
}

/// Coefficients multiplying `σ`, `ρ` and `b` in the source `KᵀPσ + Θᵀρ + P b + q`.
struct SourceMats {
    ktp: DMatrix<f64>,
    theta_t: DMatrix<f64>,
    p: DMatrix<f64>,
}

impl SourceMats {
    fn new(spec: &ProblemSpec, s: f64, i: usize, p: DMatrix<f64>, theta: &DMatrix<f64>) -> Self {
        let k = spec.c.eval(s, i) + spec.d.eval(s, i) * theta;
        SourceMats {
            ktp: k.transpose() * &p,
            theta_t: theta.transpose(),
            p,
        }
    }

    /// Applies the source map to given `(σ, ρ, b, q)` values.
    fn apply(&self, sigma: &DVector<f64>, rho: &DVector<f64>, b: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        &self.ktp * sigma + &self.theta_t * rho + &self.p * b + q
    }

    /// `∫_a^b` of the source split into deterministic and modulated parts.
    fn integral(&self, spec: &ProblemSpec, a: f64, b: f64, i: usize) -> (DVector<f64>, DVector<f64>) {
        let part = |inp: &Input, modulated: bool| -> DVector<f64> {
            if inp.is_modulated() == modulated && !inp.is_zero() {
                inp.base_integral(a, b, i)
            } else {
                DVector::zeros(inp.len())
            }
        };
        let det = self.apply(
            &part(&spec.sigma, false),
            &part(&spec.rho, false),
            &part(&spec.drift, false),
            &part(&spec.q_vec, false),
        );
        let modu = self.apply(
            &part(&spec.sigma, true),
            &part(&spec.rho, true),
            &part(&spec.drift, true),
            &part(&spec.q_vec, true),
        );
        (det, modu)
    }
}

fn check_pair(spec: &ProblemSpec, riccati: &RiccatiSolution) -> Result<()> {
    if riccati.num_regimes() != spec.num_regimes() {
        return Err(Error::Mismatch(
            "Riccati solution and spec disagree on the number of regimes".into(),
        ));
    }
    if riccati.p.first().is_some_and(|row| row[0].nrows() != spec.n) {
        return Err(Error::Mismatch("Riccati solution and spec disagree on the state dimension".into()));
    }
    Ok(())
}

/// Deterministic-coefficient backend: backward RK4 on `ḣ_i + Σ_k λ_ik h_k + F_i = 0`.
pub fn solve_adjoint_ode(spec: &ProblemSpec, riccati: &RiccatiSolution) -> Result<AdjointSolution> {
    check_pair(spec, riccati)?;
    if spec.has_modulated_inputs() {
        return Err(Error::Unsupported("spec has path-modulated inputs; use regression backend".into()));
    }
    let grid = riccati.grid;
    let dn = spec.num_regimes();
    let n = spec.n;
    let theta_nodes = build_theta(riccati)?;
    let mut table: Vec<Vec<DVector<f64>>> = vec![Vec::new(); grid.len()];
    table[grid.steps()] = spec.g_vec.clone();
    if spec.is_homogeneous() {
        for row in table.iter_mut() {
            *row = vec![DVector::zeros(n); dn];
        }
    } else {
        let mut h = spec.g_vec.clone();
        for k in (0..grid.steps()).rev() {
            let (a, b) = (grid.node(k), grid.node(k + 1));
            let dt = b - a;
            let mid = 0.5 * (a + b);
            let at_b = ode_frame(spec, riccati, b, (a, b), Some(&theta_nodes[k + 1]))?;
            let at_mid = ode_frame(spec, riccati, mid, (a, b), None)?;
            let at_a = ode_frame(spec, riccati, a, (a, b), Some(&theta_nodes[k]))?;
            // integrate in τ = T − s: dh/dτ = +F
            let k1 = at_b.rhs(&h);
            let k2 = at_mid.rhs(&axpy_all(&h, &k1, 0.5 * dt));
            let k3 = at_mid.rhs(&axpy_all(&h, &k2, 0.5 * dt));
            let k4 = at_a.rhs(&axpy_all(&h, &k3, dt));
            for i in 0..dn {
                h[i] += (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (dt / 6.0);
            }
            if h.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(Error::Diverged { path: 0, node: k });
            }
            table[k] = h.clone();
        }
    }
    Ok(AdjointSolution {
        backend: Backend::Ode,
        epsilon: riccati.epsilon,
        grid,
        n,
        num_regimes: dn,
        data: AdjointData::Table(table),
        diagnostics: None,
    })
}

fn axpy_all(h: &[DVector<f64>], k: &[DVector<f64>], c: f64) -> Vec<DVector<f64>> {
    h.iter().zip(k).map(|(h, k)| h + k * c).collect()
}

/// Everything the ODE right-hand side needs at one time.
struct OdeFrame {
    lambda: DMatrix<f64>,
    lt: Vec<DMatrix<f64>>,
    src: Vec<DVector<f64>>,
}

impl OdeFrame {
    /// `F_i(h) = Σ_k λ_ik h_k + L_iᵀ h_i + src_i`.
    fn rhs(&self, h: &[DVector<f64>]) -> Vec<DVector<f64>> {
        (0..h.len())
            .map(|i| {
                let mut out = &self.lt[i] * &h[i] + &self.src[i];
                for (k, hk) in h.iter().enumerate() {
                    let l = self.lambda[(i, k)];
                    if l != 0.0 {
                        out.axpy(l, hk, 1.0);
                    }
                }
                out
            })
            .collect()
    }
}

fn ode_frame(
    spec: &ProblemSpec,
    riccati: &RiccatiSolution,
    s: f64,
    step: (f64, f64),
    theta: Option<&Vec<DMatrix<f64>>>,
) -> Result<OdeFrame> {
    let dn = spec.num_regimes();
    let mut lt = Vec::with_capacity(dn);
    let mut src = Vec::with_capacity(dn);
    for i in 0..dn {
        let th = match theta {
            Some(t) => t[i].clone(),
            None => theta_at(spec, riccati, s, i)?,
        };
        let p = riccati.p_at(s, i);
        let (l, _) = driver_mats(spec, s, i, &th);
        let mats = SourceMats::new(spec, s, i, p, &th);
        let ev = |inp: &Input| inp.stage_eval(s, step.0, step.1, i, 1.0);
        src.push(mats.apply(&ev(&spec.sigma), &ev(&spec.rho), &ev(&spec.drift), &ev(&spec.q_vec)));
        lt.push(l);
    }
    Ok(OdeFrame {
        lambda: spec.generator.at(s),
        lt,
        src,
    })
}

/// Least-squares fit of `targets` (row-major, `dim` per sample) on `{1, z, …, z^degree}`.
struct Fit {
    coeffs: DMatrix<f64>,
    degree: usize,
    residual_ss: f64,
    count: usize,
}

fn fit(z: &[f64], wt: &[f64], targets: &[f64], dim: usize, idx: &[usize], max_degree: usize, width: usize) -> (Fit, bool) {
    let mut reduced = false;
    let count = idx.len();
    let mut degree = max_degree.min(count.saturating_sub(1));
    if degree < max_degree {
        reduced = true;
    }
    loop {
        let nb = degree + 1;
        let mut gram = DMatrix::<f64>::zeros(nb, nb);
        let mut rhs = DMatrix::<f64>::zeros(nb, dim);
        let mut phi = vec![0.0; nb];
        for &p in idx {
            let mut zp = 1.0;
            for v in phi.iter_mut() {
                *v = zp;
                zp *= z[p];
            }
            let w = wt[p];
            for a in 0..nb {
                for b in 0..=a {
                    gram[(a, b)] += w * phi[a] * phi[b];
                }
                for d in 0..dim {
                    rhs[(a, d)] += w * phi[a] * targets[p * dim + d];
                }
            }
        }
        for a in 0..nb {
            for b in 0..a {
                gram[(b, a)] = gram[(a, b)];
            }
        }
        let eig = gram.clone().symmetric_eigen();
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
        if degree > 0 && (hi <= 0.0 || lo <= RANK_TOL * hi) {
            degree -= 1;
            reduced = true;
            continue;
        }
        let sol = pinv(&gram, RANK_TOL) * rhs; // nb × dim
        let mut coeffs = DMatrix::zeros(dim, width);
        for j in 0..nb {
            for d in 0..dim {
                coeffs[(d, j)] = sol[(j, d)];
            }
        }
        let mut ss = 0.0;
        let mut fitted = vec![0.0; dim];
        for &p in idx {
            poly_eval_into(&mut fitted, &coeffs, z[p]);
            for d in 0..dim {
                let r = targets[p * dim + d] - fitted[d];
                ss += r * r;
            }
        }
        return (
            Fit {
                coeffs,
                degree,
                residual_ss: ss,
                count,
            },
            reduced,
        );
    }
}

/// Per-regime fits with a pooled fallback for sparsely visited regimes.
struct NodeFit {
    coeffs: Vec<DMatrix<f64>>,
    degree: usize,
    se: f64,
    reduced: bool,
}

fn fit_node(z: &[f64], wt: &[f64], targets: &[f64], dim: usize, by_regime: &[Vec<usize>], max_degree: usize, width: usize) -> NodeFit {
    let min_count = SAMPLES_PER_BASIS * (max_degree + 1);
    let mut pooled: Option<Fit> = None;
    let mut coeffs = Vec::with_capacity(by_regime.len());
    let mut ss = 0.0;
    let mut dof = 0usize;
    let mut total = 0usize;
    let mut degree = 0;
    let mut reduced = false;
    for idx in by_regime {
        if idx.len() >= min_count {
            let (f, r) = fit(z, wt, targets, dim, idx, max_degree, width);
            reduced |= r;
            degree = degree.max(f.degree);
            ss += f.residual_ss;
            dof += f.count.saturating_sub(f.degree + 1);
            total += f.count;
            coeffs.push(f.coeffs);
        } else {
            if pooled.is_none() {
                let all: Vec<usize> = by_regime.iter().flatten().copied().collect();
                let (f, r) = fit(z, wt, targets, dim, &all, max_degree, width);
                reduced |= r;
                pooled = Some(f);
            }
            let f = pooled.as_ref().unwrap();
            if !idx.is_empty() {
                let mut fitted = vec![0.0; dim];
                for &p in idx {
                    poly_eval_into(&mut fitted, &f.coeffs, z[p]);
                    for d in 0..dim {
                        let r = targets[p * dim + d] - fitted[d];
                        ss += r * r;
                    }
                }
                dof += idx.len();
                total += idx.len();
            }
            degree = degree.max(f.degree);
            coeffs.push(f.coeffs.clone());
        }
    }
    let var = if dof > 0 { ss / (dof as f64 * dim as f64) } else { 0.0 };
    NodeFit {
        coeffs,
        degree,
        se: (var / total.max(1) as f64).sqrt(),
        reduced,
    }
}

/// Least-squares Monte Carlo backend for path-modulated inputs.
///
/// `scenarios` must live on the Riccati grid; `degree` is the polynomial
/// degree in the modulator value (2 is a sensible default).
pub fn solve_adjoint_regression(
    spec: &ProblemSpec,
    riccati: &RiccatiSolution,
    scenarios: &ScenarioSet,
    degree: usize,
) -> Result<AdjointSolution> {
    check_pair(spec, riccati)?;
    if scenarios.count < MIN_SCENARIOS {
        return Err(Error::Config(format!(
            "regression backend needs at least {MIN_SCENARIOS} scenarios, got {}",
            scenarios.count
        )));
    }
    if scenarios.grid != riccati.grid {
        return Err(Error::Mismatch("scenario and Riccati grids differ".into()));
    }
    if scenarios.loadings.as_ref() != spec.modulator() {
        return Err(Error::Mismatch("scenario modulator does not match the spec".into()));
    }
    let grid = riccati.grid;
    let dn = spec.num_regimes();
    let n = spec.n;
    let count = scenarios.count;
    let steps = grid.steps();
    let width = degree + 1;
    let theta = build_theta(riccati)?;

    // node matrices (Lᵀ, Kᵀ) and per-step source matrices at the midpoint
    let mut lt = Vec::with_capacity(grid.len());
    let mut kt = Vec::with_capacity(grid.len());
    for (k, th_row) in theta.iter().enumerate() {
        let s = grid.node(k);
        let (l_row, k_row): (Vec<_>, Vec<_>) = (0..dn).map(|i| driver_mats(spec, s, i, &th_row[i])).unzip();
        lt.push(l_row);
        kt.push(k_row);
    }
    let mats: Vec<Vec<SourceMats>> = (0..steps)
        .into_par_iter()
        .map(|k| {
            let mid = 0.5 * (grid.node(k) + grid.node(k + 1));
            (0..dn)
                .map(|i| {
                    Ok(SourceMats::new(
                        spec,
                        mid,
                        i,
                        riccati.p_at(mid, i),
                        &theta_at(spec, riccati, mid, i)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let full_src: Vec<Vec<(DVector<f64>, DVector<f64>)>> = (0..steps)
        .map(|k| {
            (0..dn)
                .map(|i| mats[k][i].integral(spec, grid.node(k), grid.node(k + 1), i))
                .collect()
        })
        .collect();

    let mut diag = RegressionDiagnostics {
        scenarios: count,
        degree,
        eta_se: vec![0.0; grid.len()],
        zeta_se: vec![0.0; grid.len()],
        degree_used: vec![0; grid.len()],
        eta0_forward: Vec::new(),
        eta0_forward_se: Vec::new(),
        zeta_low_confidence: spec.d.is_zero(),
        warnings: Vec::new(),
    };

    let mut normalization = vec![(0.0, 1.0); grid.len()];
    let mut eta_coeffs: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); grid.len()];
    let mut zeta_coeffs: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); grid.len()];

    // terminal node: η = g(i), ζ = 0
    let m_n: Vec<f64> = (0..count).map(|p| scenarios.modulator(p, steps)).collect();
    normalization[steps] = standardize(&m_n);
    eta_coeffs[steps] = (0..dn)
        .map(|i| {
            let mut c = DMatrix::zeros(n, width);
            c.set_column(0, &spec.g_vec[i]);
            c
        })
        .collect();
    zeta_coeffs[steps] = vec![DMatrix::zeros(n, width); dn];
    diag.degree_used[steps] = 0;

    // regression target per path
    let mut acc = vec![0.0; count * n];
    let mut eta_next = vec![0.0; count * n];
    let mut zeta_next = vec![0.0; count * n];
    for p in 0..count {
        let i = scenarios.regime(p, steps);
        eta_next[p * n..(p + 1) * n].copy_from_slice(spec.g_vec[i].as_slice());
        acc[p * n..(p + 1) * n].copy_from_slice(spec.g_vec[i].as_slice());
    }
    let mut reduced_nodes = 0usize;

    let wiener = scenarios.loadings.as_ref().map(|l| l.wiener.clone());
    let mut zeta_target = vec![0.0; count * n];
    for k in (0..steps).rev() {
        let h = grid.node(k + 1) - grid.node(k);
        let m_k: Vec<f64> = (0..count).map(|p| scenarios.modulator(p, k)).collect();
        let (mean, sd) = standardize(&m_k);
        let degenerate = sd == 1.0 && sd_raw(&m_k, mean) < 1e-14 * mean.abs().max(1.0);
        normalization[k] = (mean, sd);
        let z: Vec<f64> = m_k.iter().map(|m| (m - mean) / sd).collect();
        // conditional noise scales with M, so damp the lognormal tail
        let wt: Vec<f64> = m_k.iter().map(|m| 1.0 / (m * m)).collect();
        let node_degree = if degenerate { 0 } else { degree };
        let mut by_regime = vec![Vec::new(); dn];
        for p in 0..count {
            by_regime[scenarios.regime(p, k)].push(p);
        }

        // Pilot martingale increment from η̂_{k+1} frozen at (s_k, M_k):
        //   ζ̃ ΔW + Σ_j ξ̃_j ΔÑ_j,  ζ̃ = c(α) M ∂η̂/∂M,  ξ̃_j = η̂(j) − η̂(α).
        // It has zero conditional mean, so subtracting it leaves both
        // regression targets unbiased while removing their O(√h) noise.
        let next_coeffs = &eta_coeffs[k + 1];
        let (mean_next, sd_next) = normalization[k + 1];
        let lambda = spec.generator.at(grid.node(k));
        acc.par_chunks_mut(n)
            .zip(zeta_target.par_chunks_mut(n))
            .zip(eta_next.par_chunks(n))
            .zip(zeta_next.par_chunks(n))
            .enumerate()
            .for_each_init(
                || (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]),
                |(level, pilot, cv, other, add), (p, (((y, zt), en), zn))| {
                    let i = scenarios.regime(p, k);
                    let i1 = scenarios.regime(p, k + 1);
                    let dw = scenarios.dw(p, k);
                    let zn_at = (m_k[p] - mean_next) / sd_next;
                    poly_eval_into(level, &next_coeffs[i], zn_at);
                    pilot.iter_mut().for_each(|v| *v = 0.0);
                    if let Some(w) = &wiener {
                        poly_derivative_into(pilot, &next_coeffs[i], zn_at);
                        let scale = w[i] * m_k[p] / sd_next;
                        pilot.iter_mut().for_each(|v| *v *= scale);
                    }
                    for d in 0..n {
                        cv[d] = pilot[d] * dw;
                    }
                    for j in 0..dn {
                        let rate = lambda[(i, j)];
                        if j == i || (rate == 0.0 && j != i1) {
                            continue;
                        }
                        let dn_j = if j == i1 { 1.0 } else { 0.0 } - rate * h;
                        poly_eval_into(other, &next_coeffs[j], zn_at);
                        for d in 0..n {
                            cv[d] += (other[d] - level[d]) * dn_j;
                        }
                    }

                    // (h/2) f_{k+1} + Src_k
                    add.iter_mut().for_each(|v| *v = 0.0);
                    matvec_acc(add, &lt[k + 1][i1], en, 0.5 * h);
                    matvec_acc(add, &kt[k + 1][i1], zn, 0.5 * h);
                    let m_bar = 0.5 * (m_k[p] + scenarios.modulator(p, k + 1));
                    if scenarios.is_split(p, k) {
                        for seg in scenarios.segments(p, k) {
                            let (d, m) = mats[k][seg.regime].integral(spec, seg.start, seg.start + seg.dt, seg.regime);
                            for r in 0..n {
                                add[r] += d[r] + m[r] * m_bar;
                            }
                        }
                    } else {
                        let (d, m) = &full_src[k][i];
                        for r in 0..n {
                            add[r] += d[r] + m[r] * m_bar;
                        }
                    }
                    for d in 0..n {
                        let r = en[d] - level[d] - cv[d];
                        // Y_k = η̂_{k+1} − pilot + (h/2) f_{k+1} + Src_k
                        y[d] = level[d] + r + add[d];
                        zt[d] = pilot[d] + r * dw / h;
                    }
                },
            );

        let cond = fit_node(&z, &wt, &acc, n, &by_regime, node_degree, width);
        let zfit = fit_node(&z, &wt, &zeta_target, n, &by_regime, node_degree, width);
        if (cond.reduced || zfit.reduced) && !degenerate {
            reduced_nodes += 1;
        }
        diag.eta_se[k] = cond.se;
        diag.zeta_se[k] = zfit.se;
        diag.degree_used[k] = cond.degree.min(zfit.degree);

        // (I − h/2 Lᵀ) η = E[B] + h/2 Kᵀ ζ
        let mut row = Vec::with_capacity(dn);
        for i in 0..dn {
            let lhs = DMatrix::<f64>::identity(n, n) - &lt[k][i] * (0.5 * h);
            let rhs = &cond.coeffs[i] + &kt[k][i] * &zfit.coeffs[i] * (0.5 * h);
            let sol = lhs.clone().lu().solve(&rhs).unwrap_or_else(|| pinv(&lhs, RANK_TOL) * rhs);
            row.push(sol);
        }
        let zrow = zfit.coeffs;
        eta_next
            .par_chunks_mut(n)
            .zip(zeta_next.par_chunks_mut(n))
            .enumerate()
            .for_each(|(p, (en, zn))| {
                let i = scenarios.regime(p, k);
                poly_eval_into(en, &row[i], z[p]);
                poly_eval_into(zn, &zrow[i], z[p]);
            });
        if eta_next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged { path: 0, node: k });
        }
        eta_coeffs[k] = row;
        zeta_coeffs[k] = zrow;
    }
    let eta_table = PolyTable {
        normalization: normalization.clone(),
        coeffs: eta_coeffs,
    };
    let zeta_table = PolyTable {
        normalization,
        coeffs: zeta_coeffs,
    };
    let sums: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|p| {
            let (mut e, mut z) = (vec![0.0; n], vec![0.0; n]);
            let mut f_k = vec![0.0; n];
            let i_t = scenarios.regime(p, steps);
            let mut total = spec.g_vec[i_t].as_slice().to_vec();
            let mut f_next = vec![0.0; n];
            matvec_acc(&mut f_next, &lt[steps][i_t], &total, 1.0);
            for k in (0..steps).rev() {
                let h = grid.node(k + 1) - grid.node(k);
                let i = scenarios.regime(p, k);
                let m = scenarios.modulator(p, k);
                let zk = eta_table.z(k, m);
                poly_eval_into(&mut e, &eta_table.coeffs[k][i], zk);
                poly_eval_into(&mut z, &zeta_table.coeffs[k][i], zk);
                f_k.iter_mut().for_each(|v| *v = 0.0);
                matvec_acc(&mut f_k, &lt[k][i], &e, 1.0);
                matvec_acc(&mut f_k, &kt[k][i], &z, 1.0);
                let m_bar = 0.5 * (m + scenarios.modulator(p, k + 1));
                for d in 0..n {
                    total[d] += 0.5 * h * (f_k[d] + f_next[d]);
                }
                if scenarios.is_split(p, k) {
                    for seg in scenarios.segments(p, k) {
                        let (d, mm) = mats[k][seg.regime].integral(spec, seg.start, seg.start + seg.dt, seg.regime);
                        for r in 0..n {
                            total[r] += d[r] + mm[r] * m_bar;
                        }
                    }
                } else {
                    let (d, mm) = &full_src[k][i];
                    for r in 0..n {
                        total[r] += d[r] + mm[r] * m_bar;
                    }
                }
                std::mem::swap(&mut f_k, &mut f_next);
            }
            total
        })
        .collect();
    for d in 0..n {
        let col: Vec<f64> = sums.iter().map(|v| v[d]).collect();
        let (mean, se) = crate::linalg::mean_and_se(&col);
        diag.eta0_forward.push(mean);
        diag.eta0_forward_se.push(se);
    }
    if reduced_nodes > 0 {
        let msg = format!("regression matrix rank deficient at {reduced_nodes} nodes; basis degree reduced there");
        log::warn!("{msg}");
        diag.warnings.push(msg);
    }
    if diag.zeta_low_confidence {
        diag.warnings
            .push("zeta is estimated for diagnostics only (D = 0); low confidence".into());
    }
    Ok(AdjointSolution {
        backend: Backend::Regression,
        epsilon: riccati.epsilon,
        grid,
        n,
        num_regimes: dn,
        data: AdjointData::Regression {
            eta: eta_table,
            zeta: zeta_table,
        },
        diagnostics: Some(diag),
    })
}

fn sd_raw(xs: &[f64], mean: f64) -> f64 {
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (pairwise_sum(&dev) / xs.len() as f64).sqrt()
}

/// `(mean, sd)` with `sd` replaced by 1 for (numerically) constant samples.
fn standardize(xs: &[f64]) -> (f64, f64) {
    let mean = pairwise_sum(xs) / xs.len() as f64;
    let sd = sd_raw(xs, mean);
    if sd < 1e-14 * mean.abs().max(1.0) {
        (mean, 1.0)
    } else {
        (mean, sd)
    }
}

/// A posteriori check that the discrete solution satisfies the BSDE.
///
/// Returns `Σ_k ‖d_k‖`, the sum over steps of the one-step defect
/// `d_k = η(s_k) − [η(s_{k+1}) + ∫ drift − ζ ΔW − Σ_j ξ_j ΔÑ_j]`. For the ODE
/// backend the defect is deterministic (the jump martingale has been
/// integrated out, leaving the coupling term) and the drift integral uses
/// Simpson's rule with Hermite midpoints, so the sum is `O(h⁴)`. For the
/// regression backend `d_k` is averaged over `scenarios` before taking the
/// norm.
pub fn bsde_residual(sol: &AdjointSolution, spec: &ProblemSpec, riccati: &RiccatiSolution, scenarios: Option<&ScenarioSet>) -> Result<f64> {
    if sol.grid != riccati.grid || sol.epsilon != riccati.epsilon {
        return Err(Error::Mismatch("adjoint and Riccati solutions differ in grid or epsilon".into()));
    }
    match &sol.data {
        AdjointData::Table(table) => ode_residual(table, spec, riccati),
        AdjointData::Regression { .. } => {
            let sc = scenarios.ok_or_else(|| Error::Config("regression residual needs the scenario set".into()))?;
            if sc.grid != sol.grid {
                return Err(Error::Mismatch("scenario and adjoint grids differ".into()));
            }
            regression_residual(sol, spec, riccati, sc)
        }
    }
}

fn ode_residual(table: &[Vec<DVector<f64>>], spec: &ProblemSpec, riccati: &RiccatiSolution) -> Result<f64> {
    let grid = riccati.grid;
    let theta = build_theta(riccati)?;
    let mut defects = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let (a, b) = (grid.node(k), grid.node(k + 1));
        let h = b - a;
        let fa = ode_frame(spec, riccati, a, (a, b), Some(&theta[k]))?;
        let fb = ode_frame(spec, riccati, b, (a, b), Some(&theta[k + 1]))?;
        let fm = ode_frame(spec, riccati, 0.5 * (a + b), (a, b), None)?;
        let da = fa.rhs(&table[k]);
        let db = fb.rhs(&table[k + 1]);
        // ḣ = −F, cubic Hermite midpoint
        let mid: Vec<DVector<f64>> = (0..table[k].len())
            .map(|i| (&table[k][i] + &table[k + 1][i]) * 0.5 + (&db[i] - &da[i]) * (h / 8.0))
            .collect();
        let dm = fm.rhs(&mid);
        let worst = (0..mid.len())
            .map(|i| (&table[k][i] - &table[k + 1][i] - (&da[i] + &dm[i] * 4.0 + &db[i]) * (h / 6.0)).norm())
            .fold(0.0, f64::max);
        defects.push(worst);
    }
    Ok(pairwise_sum(&defects))
}

fn regression_residual(sol: &AdjointSolution, spec: &ProblemSpec, riccati: &RiccatiSolution, sc: &ScenarioSet) -> Result<f64> {
    let grid = sol.grid;
    let n = sol.n;
    let dn = sol.num_regimes;
    let theta = build_theta(riccati)?;
    let mut lt = Vec::with_capacity(grid.len());
    let mut kt = Vec::with_capacity(grid.len());
    for (k, row) in theta.iter().enumerate() {
        let (l, kk): (Vec<_>, Vec<_>) = (0..dn).map(|i| driver_mats(spec, grid.node(k), i, &row[i])).unzip();
        lt.push(l);
        kt.push(kk);
    }
    let mut defects = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let (a, b) = (grid.node(k), grid.node(k + 1));
        let h = b - a;
        let mid = 0.5 * (a + b);
        let mats: Vec<SourceMats> = (0..dn)
            .map(|i| {
                Ok(SourceMats::new(
                    spec,
                    mid,
                    i,
                    riccati.p_at(mid, i),
                    &theta_at(spec, riccati, mid, i)?,
                ))
            })
            .collect::<Result<_>>()?;
        let lambda = spec.generator.at(a);
        let per_path: Vec<DVector<f64>> = (0..sc.count)
            .into_par_iter()
            .map(|p| {
                let (i0, i1) = (sc.regime(p, k), sc.regime(p, k + 1));
                let (m0, m1) = (sc.modulator(p, k), sc.modulator(p, k + 1));
                let e0 = sol.eta(k, i0, m0);
                let z0 = sol.zeta(k, i0, m0);
                let e1 = sol.eta(k + 1, i1, m1);
                let z1 = sol.zeta(k + 1, i1, m1);
                let f0 = &lt[k][i0] * &e0 + &kt[k][i0] * &z0;
                let f1 = &lt[k + 1][i1] * &e1 + &kt[k + 1][i1] * &z1;
                let m_bar = 0.5 * (m0 + m1);
                let mut src = DVector::zeros(n);
                for seg in sc.segments(p, k) {
                    let (d, m) = mats[seg.regime].integral(spec, seg.start, seg.start + seg.dt, seg.regime);
                    src += d + m * m_bar;
                }
                let mut jumps = DVector::zeros(n);
                let chain = &sc.chains[p];
                let range = chain.jumps_in(a, b);
                for j in 0..dn {
                    if j == i0 {
                        continue;
                    }
                    let into_j = chain.jump_targets[range.clone()].iter().filter(|&&t| t == j).count() as f64;
                    let dn_j = into_j - lambda[(i0, j)] * h;
                    if dn_j != 0.0 {
                        jumps.axpy(dn_j, &sol.xi(k, i0, j, m0), 1.0);
                    }
                }
                &e0 - (&e1 + (f0 + f1) * (0.5 * h) + src - z0 * sc.dw(p, k) - jumps)
            })
            .collect();
        let mut mean = DVector::zeros(n);
        for d in 0..n {
            let col: Vec<f64> = per_path.iter().map(|v| v[d]).collect();
            mean[d] = pairwise_sum(&col) / sc.count as f64;
        }
        defects.push(mean.norm());
    }
    Ok(pairwise_sum(&defects))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::problem::MatrixProvider;
    use crate::riccati::solve_perturbed;

    #[test]
    fn homogeneous_ode_is_zero() {
        let spec = oracle::modulated_homogeneous_spec();
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let ric = solve_perturbed(&spec, 0.1, &grid).unwrap();
        let sol = solve_adjoint_ode(&spec, &ric).unwrap();
        for k in 0..grid.len() {
            for i in 0..2 {
                assert_eq!(sol.eta(k, i, 1.0)[0], 0.0);
            }
        }
        assert_eq!(bsde_residual(&sol, &spec, &ric, None).unwrap(), 0.0);
    }

    #[test]
    fn unit_drift_gives_linear_eta() {
        let mut spec = oracle::zero_spec(2, 1);
        spec.drift = Input::constant(DVector::from_element(2, 1.0), 2);
        spec.g_vec = vec![DVector::from_element(2, 1.0); 2];
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let ric = solve_perturbed(&spec, 0.5, &grid).unwrap();
        let sol = solve_adjoint_ode(&spec, &ric).unwrap();
        for k in 0..grid.len() {
            let want = 1.0 + 1.0 - grid.node(k);
            for i in 0..2 {
                assert!((sol.eta(k, i, 1.0) - DVector::from_element(2, want)).amax() < 1e-13);
            }
        }
    }

    #[test]
    fn modulated_spec_rejected_by_ode() {
        let spec = oracle::modulated_drift_spec();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let ric = solve_perturbed(&spec, 1.0, &grid).unwrap();
        assert!(matches!(solve_adjoint_ode(&spec, &ric), Err(Error::Unsupported(_))));
    }

    #[test]
    fn regime_coupling_matches_two_state_solution() {
        // dh/ds = −(λ(h_other − h_i) + q_i): with q = (1, 0) the mean evolves linearly
        // and the difference decays like e^{−2(T−s)}.
        let mut spec = oracle::zero_spec(1, 1);
        spec.q_vec = Input::Provider(MatrixProvider::scalars(&[1.0, 0.0]));
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let ric = solve_perturbed(&spec, 1.0, &grid).unwrap();
        let sol = solve_adjoint_ode(&spec, &ric).unwrap();
        for k in 0..grid.len() {
            let tau = 1.0 - grid.node(k);
            let mean = 0.5 * tau;
            let diff = 0.5 * (1.0 - (-2.0 * tau).exp());
            assert!((sol.eta(k, 0, 1.0)[0] - (mean + 0.5 * diff)).abs() < 1e-10);
            assert!((sol.eta(k, 1, 1.0)[0] - (mean - 0.5 * diff)).abs() < 1e-10);
        }
    }

    #[test]
    fn poly_eval_matches_horner() {
        let c = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        assert_eq!(poly_eval(&c, 2.0)[0], 1.0 + 4.0 + 12.0);
    }
}
