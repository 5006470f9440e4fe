//! Coupled Riccati equations, solved backward from `P(T, i) = G(i)`:
//!
//! ```text
//! Ṗ_i + P_i A + Aᵀ P_i + Cᵀ P_i C + Q − Ŝ_iᵀ K_i Ŝ_i + Σ_k λ_ik P_k = 0
//! Ŝ_i = Bᵀ P_i + Dᵀ P_i C + S,   R̂_i = R + Dᵀ P_i D
//! ```
//!
//! with `K_i = (R̂_i + εI)⁻¹` for the perturbed system and `K_i = R̂_i†` for
//! the general (ε = 0) equation.
//!
//! Integration is classical RK4 on the user grid. Each grid step is
//! subdivided by step doubling when the local error estimate exceeds
//! [`RiccatiOptions::error_tol`]; this keeps small-ε solves accurate near `T`
//! (where `Θ_ε ~ 1/ε`) while every returned node stays on the common grid.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::{min_eigenvalue, pinv, symmetrize, DEFAULT_PINV_TOL};
use crate::problem::ProblemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiccatiOptions {
    /// Relative cutoff for pseudo-inverses (general equation only).
    pub pinv_tol: f64,
    /// Step-doubling tolerance, relative to `1 + ‖P‖`; `None` disables substeps.
    pub error_tol: Option<f64>,
    /// `‖P‖` beyond which the solution is declared to have escaped.
    pub escape_norm: f64,
    /// Maximum number of halvings of a single grid step.
    pub max_depth: u32,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self {
            pinv_tol: DEFAULT_PINV_TOL,
            error_tol: Some(1e-11),
            escape_norm: 1e12,
            max_depth: 48,
        }
    }
}

/// Per-node, per-regime solution tables, indexed `[node][regime]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub epsilon: f64,
    pub grid: TimeGrid,
    pub p: Vec<Vec<DMatrix<f64>>>,
    pub s_hat: Vec<Vec<DMatrix<f64>>>,
    pub r_hat: Vec<Vec<DMatrix<f64>>>,
    /// `Ṗ` from the right-hand side, used for Hermite interpolation.
    pub p_dot: Vec<Vec<DMatrix<f64>>>,
}

impl RiccatiSolution {
    pub fn num_regimes(&self) -> usize {
        self.p.first().map_or(0, |v| v.len())
    }

    pub fn is_gre(&self) -> bool {
        self.epsilon == 0.0
    }

    /// `P(s, i)` between nodes by cubic Hermite interpolation.
    pub fn p_at(&self, s: f64, i: usize) -> DMatrix<f64> {
        let g = &self.grid;
        let k = g.floor_index(s).min(g.steps() - 1);
        let (s0, s1) = (g.node(k), g.node(k + 1));
        let h = s1 - s0;
        let t = ((s - s0) / h).clamp(0.0, 1.0);
        if t == 0.0 {
            return self.p[k][i].clone();
        }
        if t == 1.0 {
            return self.p[k + 1][i].clone();
        }
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        &self.p[k][i] * h00 + &self.p_dot[k][i] * (h10 * h) + &self.p[k + 1][i] * h01 + &self.p_dot[k + 1][i] * (h11 * h)
    }
}

/// `(Ŝ, R̂)` for a given `P` at `(s, i)`.
pub fn hats(spec: &ProblemSpec, s: f64, i: usize, p: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = spec.b.eval(s, i);
    let c = spec.c.eval(s, i);
    let d = spec.d.eval(s, i);
    let pd = p * &d;
    let s_hat = b.transpose() * p + pd.transpose() * &c + spec.s_mat.eval(s, i);
    let r_hat = symmetrize(&(spec.r_mat.eval(s, i) + d.transpose() * pd));
    (s_hat, r_hat)
}

#[derive(Clone, Copy)]
enum Mode {
    Perturbed(f64),
    General(f64),
}

impl Mode {
    fn epsilon(self) -> f64 {
        match self {
            Mode::Perturbed(e) => e,
            Mode::General(_) => 0.0,
        }
    }
}

/// `Ŝᵀ K Ŝ` for the mode; `Err` carries a convexity failure.
fn quadratic_term(mode: Mode, s_hat: &DMatrix<f64>, r_hat: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, ()> {
    match mode {
        Mode::Perturbed(eps) => {
            let m = r_hat.nrows();
            let reg = r_hat + DMatrix::identity(m, m) * eps;
            let chol = reg.cholesky().ok_or(())?;
            let x = chol.solve(s_hat);
            Ok(s_hat.transpose() * x)
        }
        Mode::General(tol) => Ok(s_hat.transpose() * pinv(r_hat, tol) * s_hat),
    }
}

/// Right-hand side `Ṗ = F(s, P)`; on failure returns the offending regime.
fn rhs(spec: &ProblemSpec, mode: Mode, s: f64, ps: &[DMatrix<f64>]) -> std::result::Result<Vec<DMatrix<f64>>, usize> {
    let dn = ps.len();
    let mut out = Vec::with_capacity(dn);
    for i in 0..dn {
        let p = &ps[i];
        let a = spec.a.eval(s, i);
        let c = spec.c.eval(s, i);
        let (s_hat, r_hat) = hats(spec, s, i, p);
        let quad = quadratic_term(mode, &s_hat, &r_hat).map_err(|_| i)?;
        let pa = p * &a;
        let mut f = &pa + pa.transpose() + c.transpose() * p * &c + spec.q_mat.eval(s, i) - quad;
        for (k, pk) in ps.iter().enumerate() {
            let l = spec.generator.rate(s, i, k);
            if l != 0.0 {
                f += pk * l;
            }
        }
        out.push(symmetrize(&(-f)));
    }
    Ok(out)
}

fn max_norm(ps: &[DMatrix<f64>]) -> f64 {
    ps.iter().map(|p| p.amax()).fold(0.0, f64::max)
}

fn axpy(ps: &[DMatrix<f64>], ks: &[DMatrix<f64>], h: f64) -> Vec<DMatrix<f64>> {
    ps.iter().zip(ks).map(|(p, k)| symmetrize(&(p + k * h))).collect()
}

enum StepError {
    Convexity(usize),
    Blowup,
}

/// One classical RK4 step from `s` to `s − h` (backward).
fn rk4_back(
    spec: &ProblemSpec,
    mode: Mode,
    s: f64,
    ps: &[DMatrix<f64>],
    h: f64,
    k1: &[DMatrix<f64>],
) -> std::result::Result<Vec<DMatrix<f64>>, StepError> {
    let half = 0.5 * h;
    let k2 = rhs(spec, mode, s - half, &axpy(ps, k1, -half)).map_err(StepError::Convexity)?;
    let k3 = rhs(spec, mode, s - half, &axpy(ps, &k2, -half)).map_err(StepError::Convexity)?;
    let k4 = rhs(spec, mode, s - h, &axpy(ps, &k3, -h)).map_err(StepError::Convexity)?;
    let out: Vec<DMatrix<f64>> = (0..ps.len())
        .map(|i| symmetrize(&(&ps[i] - (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (h / 6.0))))
        .collect();
    if out.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
        return Err(StepError::Blowup);
    }
    Ok(out)
}

struct Stepper<'a> {
    spec: &'a ProblemSpec,
    mode: Mode,
    opts: RiccatiOptions,
}

impl Stepper<'_> {
    /// Advance from `s` to `s − h`, subdividing as needed.
    fn advance(&self, s: f64, ps: Vec<DMatrix<f64>>, h: f64, depth: u32) -> Result<Vec<DMatrix<f64>>> {
        let escape = |time: f64| Error::FiniteTimeEscape {
            time,
            epsilon: self.mode.epsilon(),
        };
        let k1 = match rhs(self.spec, self.mode, s, &ps) {
            Ok(k) => k,
            Err(regime) => return Err(Error::ConvexityViolation { time: s, regime }),
        };
        let full = rk4_back(self.spec, self.mode, s, &ps, h, &k1);
        let accepted = match (&full, self.opts.error_tol) {
            (Ok(full), None) => {
                let scale = 1.0 + max_norm(&ps);
                let change = ps.iter().zip(full).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
                // magnitude guard: never jump over a pole in one step
                if change <= 0.5 * scale {
                    Some(full.clone())
                } else {
                    None
                }
            }
            (Ok(full), Some(tol)) => {
                let half = 0.5 * h;
                let two = rk4_back(self.spec, self.mode, s, &ps, half, &k1).and_then(|mid| {
                    let k1m = rhs(self.spec, self.mode, s - half, &mid).map_err(StepError::Convexity)?;
                    rk4_back(self.spec, self.mode, s - half, &mid, half, &k1m)
                });
                match two {
                    Ok(two) => {
                        let err = two.iter().zip(full).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
                        if err <= tol * (1.0 + max_norm(&two)) {
                            Some(two)
                        } else {
                            None
                        }
                    }
                    Err(_) => None,
                }
            }
            (Err(_), _) => None,
        };
        match accepted {
            Some(next) => {
                if max_norm(&next) > self.opts.escape_norm {
                    return Err(escape(s));
                }
                Ok(next)
            }
            None => {
                if depth >= self.opts.max_depth {
                    return Err(match full {
                        Err(StepError::Convexity(regime)) => Error::ConvexityViolation { time: s, regime },
                        _ => escape(s),
                    });
                }
                let half = 0.5 * h;
                let mid = self.advance(s, ps, half, depth + 1)?;
                self.advance(s - half, mid, half, depth + 1)
            }
        }
    }
}

fn solve(spec: &ProblemSpec, mode: Mode, grid: &TimeGrid, opts: RiccatiOptions) -> Result<RiccatiSolution> {
    if (grid.t_end() - spec.horizon).abs() > 1e-12 * spec.horizon.max(1.0) {
        return Err(Error::Config(format!(
            "grid ends at {} but the horizon is {}",
            grid.t_end(),
            spec.horizon
        )));
    }
    let n_nodes = grid.len();
    let dn = spec.num_regimes();
    let stepper = Stepper { spec, mode, opts };
    let mut p = vec![Vec::new(); n_nodes];
    p[n_nodes - 1] = spec.g_mat.clone();
    for k in (0..n_nodes - 1).rev() {
        let s = grid.node(k + 1);
        let h = s - grid.node(k);
        let next = stepper.advance(s, p[k + 1].clone(), h, 0)?;
        p[k] = next;
    }
    let mut s_hat = Vec::with_capacity(n_nodes);
    let mut r_hat = Vec::with_capacity(n_nodes);
    let mut p_dot = Vec::with_capacity(n_nodes);
    for (k, pk) in p.iter().enumerate() {
        let s = grid.node(k);
        let (sh, rh): (Vec<_>, Vec<_>) = (0..dn).map(|i| hats(spec, s, i, &pk[i])).unzip();
        s_hat.push(sh);
        r_hat.push(rh);
        p_dot.push(rhs(spec, mode, s, pk).map_err(|regime| Error::ConvexityViolation { time: s, regime })?);
    }
    Ok(RiccatiSolution {
        epsilon: mode.epsilon(),
        grid: *grid,
        p,
        s_hat,
        r_hat,
        p_dot,
    })
}

/// Perturbed system with `(R̂ + εI)⁻¹`, `ε > 0`.
pub fn solve_perturbed(spec: &ProblemSpec, epsilon: f64, grid: &TimeGrid) -> Result<RiccatiSolution> {
    solve_perturbed_with(spec, epsilon, grid, RiccatiOptions::default())
}

pub fn solve_perturbed_with(spec: &ProblemSpec, epsilon: f64, grid: &TimeGrid, opts: RiccatiOptions) -> Result<RiccatiSolution> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    solve(spec, Mode::Perturbed(epsilon), grid, opts)
}

/// General Riccati equation with `R̂†`.
pub fn solve_gre(spec: &ProblemSpec, grid: &TimeGrid) -> Result<RiccatiSolution> {
    solve_gre_with(spec, grid, RiccatiOptions::default())
}

pub fn solve_gre_with(spec: &ProblemSpec, grid: &TimeGrid, opts: RiccatiOptions) -> Result<RiccatiSolution> {
    solve(spec, Mode::General(opts.pinv_tol), grid, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum L2Flag {
    Finite,
    Diverging,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    StronglyRegular,
    Regular,
    NotRegular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub range_inclusion_ok: bool,
    /// `max ‖(I − R̂R̂†)Ŝ‖` over nodes and regimes.
    pub range_residual: f64,
    pub psd_ok: bool,
    pub min_eigenvalue: f64,
    /// `Σ_i ∫ ‖R̂†Ŝ‖²` by trapezoid quadrature.
    pub l2_estimate: f64,
    pub l2_flag: L2Flag,
    pub strong_lambda: f64,
    pub classification: Classification,
}

fn gain_norm2(sol: &RiccatiSolution, k: usize, i: usize, tol: f64) -> f64 {
    (pinv(&sol.r_hat[k][i], tol) * &sol.s_hat[k][i]).norm_squared()
}

/// Trapezoid integral of `‖R̂†Ŝ‖²` over nodes with `s ≥ from`.
fn l2_tail(sol: &RiccatiSolution, from: f64, tol: f64) -> f64 {
    let g = &sol.grid;
    let mut acc = 0.0;
    for k in 0..g.steps() {
        if g.node(k) < from - 1e-12 {
            continue;
        }
        let h = g.node(k + 1) - g.node(k);
        for i in 0..sol.num_regimes() {
            acc += 0.5 * h * (gain_norm2(sol, k, i, tol) + gain_norm2(sol, k + 1, i, tol));
        }
    }
    acc
}

/// Classify a Riccati solution as strongly regular, regular or not regular.
///
/// The L² membership of `R̂†Ŝ` is probed by re-solving on grids refined by
/// 2 and 4 and watching the contribution of the last 10% of the horizon.
pub fn regularity_report(sol: &RiccatiSolution, spec: &ProblemSpec, tol: f64) -> RegularityReport {
    let ptol = DEFAULT_PINV_TOL;
    let mut range_residual = 0.0f64;
    let mut range_ok = true;
    let mut min_eig = f64::INFINITY;
    for (sh_k, rh_k) in sol.s_hat.iter().zip(&sol.r_hat) {
        for (sh, rh) in sh_k.iter().zip(rh_k) {
            let m = rh.nrows();
            let proj = DMatrix::identity(m, m) - rh * pinv(rh, ptol);
            let res = (proj * sh).norm();
            range_residual = range_residual.max(res);
            if res > tol * (1.0 + sh.norm()) {
                range_ok = false;
            }
            min_eig = min_eig.min(min_eigenvalue(rh));
        }
    }
    let psd_ok = min_eig >= -tol;
    let strong_lambda = min_eig.max(0.0);

    let g = &sol.grid;
    let l2_estimate = l2_tail(sol, g.t_start(), ptol);
    let from = g.t_end() - 0.1 * (g.t_end() - g.t_start());
    let base = l2_tail(sol, from, ptol);
    let refine = |factor: usize| -> Option<f64> {
        let fine = g.refined(factor);
        let r = if sol.is_gre() {
            solve_gre(spec, &fine)
        } else {
            solve_perturbed(spec, sol.epsilon, &fine)
        };
        r.ok().map(|s| l2_tail(&s, from, ptol))
    };
    let l2_flag = if !l2_estimate.is_finite() {
        L2Flag::Diverging
    } else {
        match (refine(2), refine(4)) {
            (Some(t2), Some(t4)) => {
                let scale = base.abs().max(1e-300);
                if base > 0.0 && t4 >= 2.0 * base {
                    L2Flag::Diverging
                } else if (t4 - base).abs() <= 1e-2 * scale || (base == 0.0 && t2 == 0.0 && t4 == 0.0) {
                    L2Flag::Finite
                } else {
                    L2Flag::Inconclusive
                }
            }
            _ => L2Flag::Inconclusive,
        }
    };
    let regular = range_ok && psd_ok && l2_flag != L2Flag::Diverging;
    let classification = if !regular {
        Classification::NotRegular
    } else if strong_lambda > tol {
        Classification::StronglyRegular
    } else {
        Classification::Regular
    };
    RegularityReport {
        range_inclusion_ok: range_ok,
        range_residual,
        psd_ok,
        min_eigenvalue: min_eig,
        l2_estimate,
        l2_flag,
        strong_lambda,
        classification,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::Generator;
    use crate::problem::MatrixProvider;

    fn scalar_spec(g: f64, r: f64) -> ProblemSpec {
        let gen = Generator::from_rows(&[&[-1.0, 1.0], &[1.0, -1.0]]).unwrap();
        let mut spec = ProblemSpec::zero(1, 1, gen, 1.0);
        spec.b = MatrixProvider::scalars(&[1.0, 1.0]);
        spec.r_mat = MatrixProvider::scalars(&[r, r]);
        spec.g_mat = vec![DMatrix::from_element(1, 1, g); 2];
        spec
    }

    #[test]
    fn scalar_classical_closed_form() {
        let spec = scalar_spec(1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 2000).unwrap();
        for eps in [1e-6, 0.3] {
            let sol = solve_perturbed(&spec, eps, &grid).unwrap();
            for k in (0..=2000).step_by(100) {
                let s = grid.node(k);
                let want = (1.0 + eps) / ((1.0 + eps) + (1.0 - s));
                assert!((sol.p[k][0][(0, 0)] - want).abs() < 1e-9);
            }
        }
        let gre = solve_gre(&spec, &grid).unwrap();
        assert!((gre.p[0][1][(0, 0)] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn anti_convex_escapes_before_pole() {
        let spec = scalar_spec(-1.0, 0.0);
        let grid = TimeGrid::new(0.0, 1.0, 2000).unwrap();
        for eps in [0.2, 0.05, 0.01] {
            match solve_perturbed(&spec, eps, &grid) {
                Err(Error::FiniteTimeEscape { time, .. }) => {
                    assert!(time >= 1.0 - eps - 1e-9 && time < 1.0 - eps + 1e-3, "eps {eps}: {time}")
                }
                other => panic!("expected escape, got {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let spec = scalar_spec(1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        assert!(matches!(solve_perturbed(&spec, 0.0, &grid), Err(Error::Config(_))));
    }

    #[test]
    fn hermite_interpolation_is_accurate() {
        let spec = scalar_spec(1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let sol = solve_perturbed(&spec, 1.0, &grid).unwrap();
        let s = 0.4321;
        let want = 2.0 / (2.0 + (1.0 - s));
        assert!((sol.p_at(s, 0)[(0, 0)] - want).abs() < 1e-7);
    }

    #[test]
    fn strongly_regular_classical() {
        let spec = scalar_spec(1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let sol = solve_gre(&spec, &grid).unwrap();
        let rep = regularity_report(&sol, &spec, 1e-8);
        assert_eq!(rep.classification, Classification::StronglyRegular);
        assert!((rep.strong_lambda - 1.0).abs() < 1e-12);
        assert_eq!(rep.l2_flag, L2Flag::Finite);
    }
}
