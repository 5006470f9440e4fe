//! Closed-loop strategies `u = Θ X + v` assembled from Riccati and adjoint solutions:
//!
//! ```text
//! Θ_ε = −(R̂ + εI)⁻¹ Ŝ,    v_ε = −(R̂ + εI)⁻¹ ρ̂,
//! ρ̂ = Bᵀ η + Dᵀ ζ + Dᵀ P σ + ρ.
//! ```

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bsde::{poly_eval_into, AdjointSolution, PolyTable};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::{matvec_acc, pinv, DEFAULT_PINV_TOL};
use crate::problem::{Input, ProblemSpec};
use crate::riccati::{hats, RiccatiSolution};

/// Feedback gains indexed `[node][regime]`.
pub type GainTable = Vec<Vec<DMatrix<f64>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetKind {
    DeterministicTable,
    PerScenario,
}

/// Affine part `v` of a strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Offset {
    /// `v(s_k, i)`, indexed `[node][regime]`.
    Deterministic(Vec<Vec<DVector<f64>>>),
    /// Polynomial in the modulator value of each scenario.
    PerScenario(PolyTable),
}

impl Offset {
    pub fn kind(&self) -> OffsetKind {
        match self {
            Offset::Deterministic(_) => OffsetKind::DeterministicTable,
            Offset::PerScenario(_) => OffsetKind::PerScenario,
        }
    }

    pub fn eval(&self, k: usize, i: usize, modulator: f64) -> DVector<f64> {
        match self {
            Offset::Deterministic(t) => t[k][i].clone(),
            Offset::PerScenario(p) => p.eval(k, i, modulator),
        }
    }

    /// Allocation-free [`Offset::eval`].
    pub fn eval_into(&self, out: &mut [f64], k: usize, i: usize, modulator: f64) {
        match self {
            Offset::Deterministic(t) => out.copy_from_slice(t[k][i].as_slice()),
            Offset::PerScenario(p) => poly_eval_into(out, &p.coeffs[k][i], p.z(k, modulator)),
        }
    }

    pub fn zeros(nodes: usize, regimes: usize, m: usize) -> Self {
        Offset::Deterministic(vec![vec![DVector::zeros(m); regimes]; nodes])
    }
}

/// A (possibly limiting) closed-loop strategy on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    /// 0 marks a limit strategy.
    pub epsilon: f64,
    pub grid: TimeGrid,
    pub theta: GainTable,
    pub offset: Offset,
    /// Strategy is only meaningful on `[t_start, valid_until]`.
    pub valid_until: f64,
}

impl Strategy {
    pub fn theta(&self, k: usize, i: usize) -> &DMatrix<f64> {
        &self.theta[k][i]
    }

    pub fn v(&self, k: usize, i: usize, modulator: f64) -> DVector<f64> {
        self.offset.eval(k, i, modulator)
    }

    /// `u = Θ(s_k, i) x + v(s_k, i, M)` written into `out`.
    pub fn control_into(&self, out: &mut [f64], k: usize, i: usize, x: &[f64], modulator: f64) {
        self.offset.eval_into(out, k, i, modulator);
        matvec_acc(out, &self.theta[k][i], x, 1.0);
    }

    pub fn offset_kind(&self) -> OffsetKind {
        self.offset.kind()
    }

    pub fn num_regimes(&self) -> usize {
        self.theta.first().map_or(0, |v| v.len())
    }
}

/// Solve `(R̂ + εI) X = rhs`, falling back to the pseudo-inverse (with a warning)
/// when the matrix is not numerically positive definite.
fn gain_solve(r_hat: &DMatrix<f64>, eps: f64, rhs: &DMatrix<f64>, at: (f64, usize)) -> Result<DMatrix<f64>> {
    let m = r_hat.nrows();
    if eps > 0.0 {
        let reg = r_hat + DMatrix::identity(m, m) * eps;
        if let Some(ch) = reg.clone().cholesky() {
            return Ok(ch.solve(rhs));
        }
        log::warn!(
            "R_hat + eps*I not positive definite at s = {} (regime {}); using the pseudo-inverse",
            at.0,
            at.1 + 1
        );
        return Ok(pinv(&reg, DEFAULT_PINV_TOL) * rhs);
    }
    let pi = pinv(r_hat, DEFAULT_PINV_TOL);
    let residual = (rhs - r_hat * &pi * rhs).norm();
    if residual > 1e-8 * (1.0 + rhs.norm()) {
        return Err(Error::NotRegular { time: at.0, regime: at.1 });
    }
    Ok(pi * rhs)
}

/// `Θ(s_k, i)` at every node of the Riccati grid.
pub fn build_theta(riccati: &RiccatiSolution) -> Result<GainTable> {
    let eps = riccati.epsilon;
    let g = &riccati.grid;
    (0..g.len())
        .map(|k| {
            (0..riccati.num_regimes())
                .map(|i| gain_solve(&riccati.r_hat[k][i], eps, &riccati.s_hat[k][i], (g.node(k), i)).map(|x| -x))
                .collect()
        })
        .collect()
}

/// `Θ(s, i)` off the grid from the Hermite-interpolated `P`.
pub fn theta_at(spec: &ProblemSpec, riccati: &RiccatiSolution, s: f64, i: usize) -> Result<DMatrix<f64>> {
    let p = riccati.p_at(s, i);
    let (s_hat, r_hat) = hats(spec, s, i, &p);
    gain_solve(&r_hat, riccati.epsilon, &s_hat, (s, i)).map(|x| -x)
}

/// Deterministic part of `Dᵀ P σ + ρ` and its modulated part (coefficient of `M`).
fn rho_extra(spec: &ProblemSpec, p: &DMatrix<f64>, s: f64, i: usize) -> (DVector<f64>, DVector<f64>) {
    let d = spec.d.eval(s, i);
    let split = |inp: &Input| -> (DVector<f64>, DVector<f64>) {
        let n = inp.len();
        if inp.is_modulated() {
            (DVector::zeros(n), inp.eval(s, i, 1.0))
        } else {
            (inp.eval(s, i, 0.0), DVector::zeros(n))
        }
    };
    let (sig_det, sig_mod) = split(&spec.sigma);
    let (rho_det, rho_mod) = split(&spec.rho);
    let dtp = d.transpose() * p;
    (&dtp * sig_det + rho_det, &dtp * sig_mod + rho_mod)
}

/// Offset `v` from the Riccati and adjoint solutions.
pub fn build_v(riccati: &RiccatiSolution, adjoint: &AdjointSolution, spec: &ProblemSpec) -> Result<Offset> {
    if adjoint.grid != riccati.grid {
        return Err(Error::Mismatch("adjoint and Riccati grids differ".into()));
    }
    if adjoint.epsilon != riccati.epsilon {
        return Err(Error::Mismatch(format!(
            "adjoint solved at eps = {}, Riccati at eps = {}",
            adjoint.epsilon, riccati.epsilon
        )));
    }
    let g = &riccati.grid;
    let dn = riccati.num_regimes();
    let eps = riccati.epsilon;
    match adjoint.per_scenario() {
        None => {
            let mut table = Vec::with_capacity(g.len());
            for k in 0..g.len() {
                let s = g.node(k);
                let mut row = Vec::with_capacity(dn);
                for i in 0..dn {
                    let p = &riccati.p[k][i];
                    let (extra, _) = rho_extra(spec, p, s, i);
                    let rho_hat = spec.b.eval(s, i).transpose() * adjoint.eta(k, i, 1.0)
                        + spec.d.eval(s, i).transpose() * adjoint.zeta(k, i, 1.0)
                        + extra;
                    let rhs = DMatrix::from_column_slice(rho_hat.len(), 1, rho_hat.as_slice());
                    let v = -gain_solve(&riccati.r_hat[k][i], eps, &rhs, (s, i))?;
                    row.push(v.column(0).into_owned());
                }
                table.push(row);
            }
            Ok(Offset::Deterministic(table))
        }
        Some((eta, zeta)) => {
            // ρ̂ is affine in the basis coefficients, so v stays a polynomial in z
            let mut coeffs = Vec::with_capacity(g.len());
            for k in 0..g.len() {
                let s = g.node(k);
                let (mean, sd) = eta.normalization[k];
                let mut row = Vec::with_capacity(dn);
                for i in 0..dn {
                    let p = &riccati.p[k][i];
                    let (det, modulated) = rho_extra(spec, p, s, i);
                    let ce = &eta.coeffs[k][i];
                    let cz = &zeta.coeffs[k][i];
                    let cols = ce.ncols().max(cz.ncols()).max(2);
                    let mut c = DMatrix::zeros(spec.m, cols);
                    let bt = spec.b.eval(s, i).transpose();
                    let dt = spec.d.eval(s, i).transpose();
                    for j in 0..ce.ncols() {
                        let col = &bt * ce.column(j);
                        c.column_mut(j).add_assign(&col);
                    }
                    for j in 0..cz.ncols() {
                        let col = &dt * cz.column(j);
                        c.column_mut(j).add_assign(&col);
                    }
                    // M = mean + sd·z
                    c.column_mut(0).add_assign(&(det + &modulated * mean));
                    c.column_mut(1).add_assign(&(modulated * sd));
                    let v = -gain_solve(&riccati.r_hat[k][i], eps, &c, (s, i))?;
                    row.push(v);
                }
                coeffs.push(row);
            }
            Ok(Offset::PerScenario(PolyTable {
                normalization: eta.normalization.clone(),
                coeffs,
            }))
        }
    }
}

/// Convenience: gains and offset in one strategy.
pub fn build_strategy(riccati: &RiccatiSolution, adjoint: &AdjointSolution, spec: &ProblemSpec) -> Result<Strategy> {
    Ok(Strategy {
        epsilon: riccati.epsilon,
        grid: riccati.grid,
        theta: build_theta(riccati)?,
        offset: build_v(riccati, adjoint, spec)?,
        valid_until: riccati.grid.t_end(),
    })
}
