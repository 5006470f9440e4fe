//! Reference problems with known solutions.
//!
//! Stochastic closed forms take the modulator value `M(s)` of a simulated
//! path as an argument, so they can be compared path by path against the
//! solvers rather than only in expectation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain::Generator;
use crate::error::Result;
use crate::grid::TimeGrid;
use crate::problem::{Input, Loadings, MatrixProvider, ModulatedTerm, ProblemSpec, Profile};
use crate::riccati::{solve_perturbed, RiccatiSolution};

/// Two regimes with unit switching rates. The reference examples do not pin
/// the generator; their closed forms hold for any generator.
pub fn default_generator() -> Generator {
    Generator::from_rows(&[&[-1.0, 1.0], &[1.0, -1.0]]).expect("valid generator")
}

/// `dX = [−i X + u] ds + √(2i) X dW` on `[0, 1]`, `J = E|X(1)|²`, regimes `i ∈ {1, 2}`.
fn base_scalar_example(generator: Generator) -> ProblemSpec {
    let d = generator.num_regimes();
    let mut spec = ProblemSpec::zero(1, 1, generator, 1.0);
    let labels: Vec<f64> = (1..=d).map(|i| i as f64).collect();
    spec.a = MatrixProvider::scalars(&labels.iter().map(|i| -i).collect::<Vec<_>>());
    spec.b = MatrixProvider::scalars(&vec![1.0; d]);
    spec.c = MatrixProvider::scalars(&labels.iter().map(|i| (2.0 * i).sqrt()).collect::<Vec<_>>());
    spec.g_mat = vec![DMatrix::identity(1, 1); d];
    spec
}

/// Loadings of `M(s) = exp{∫√(2α) dW − 2∫α dr}`.
pub fn example_modulator(regimes: usize) -> Loadings {
    Loadings {
        wiener: (1..=regimes).map(|i| (2.0 * i as f64).sqrt()).collect(),
        drift: (1..=regimes).map(|i| -2.0 * i as f64).collect(),
    }
}

/// Homogeneous scalar problem whose general Riccati equation has no regular solution.
pub fn modulated_homogeneous_spec() -> ProblemSpec {
    let mut spec = base_scalar_example(default_generator());
    spec.name = Some("modulated-homogeneous".into());
    spec
}

/// Same dynamics with the modulated drift `b(s) = (1 − s)^{−1/2} M(s)`.
pub fn modulated_drift_spec() -> ProblemSpec {
    let mut spec = base_scalar_example(default_generator());
    spec.name = Some("modulated-drift".into());
    spec.drift = Input::Modulated {
        term: ModulatedTerm {
            base: Profile::Power {
                scale: 1.0,
                shift: 1.0,
                exponent: -0.5,
            },
            loadings: example_modulator(2),
        },
        direction: vec![DVector::from_element(1, 1.0); 2],
    };
    spec
}

/// `dX = u ds`, `J = −E|X(T)|²`: not convex, the perturbed Riccati solution escapes.
pub fn anti_convex_spec() -> ProblemSpec {
    let mut spec = ProblemSpec::zero(1, 1, default_generator(), 1.0);
    spec.name = Some("anti-convex".into());
    spec.b = MatrixProvider::scalars(&[1.0, 1.0]);
    spec.g_mat = vec![DMatrix::from_element(1, 1, -1.0); 2];
    spec
}

/// `dX = u ds`, `J = E{|X(T)|² + ∫|u|²}`.
pub fn scalar_classical_spec() -> ProblemSpec {
    let mut spec = ProblemSpec::zero(1, 1, default_generator(), 1.0);
    spec.name = Some("scalar-classical".into());
    spec.b = MatrixProvider::scalars(&[1.0, 1.0]);
    spec.r_mat = MatrixProvider::scalars(&[1.0, 1.0]);
    spec.g_mat = vec![DMatrix::identity(1, 1); 2];
    spec
}

/// All coefficients zero and `G = I`.
pub fn zero_spec(n: usize, m: usize) -> ProblemSpec {
    let mut spec = ProblemSpec::zero(n, m, default_generator(), 1.0);
    spec.name = Some("zero".into());
    spec.g_mat = vec![DMatrix::identity(n, n); 2];
    spec
}

/// Closed forms of the homogeneous example, started at `(t, x)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModulatedHomogeneous;

impl ModulatedHomogeneous {
    /// Cost `x²` of the Riccati feedback `u* ≡ 0` (which is not optimal).
    pub fn cost_at_zero_control(&self, x: f64) -> f64 {
        x * x
    }

    /// `ū(s) = x/(t − 1) · M(s)`, with `M` started at `t`.
    pub fn u_bar(&self, x: f64, t: f64, modulator: f64) -> f64 {
        x / (t - 1.0) * modulator
    }

    /// `X̄(s) = x (1 − s)/(1 − t) · M(s)`, so `X̄(1) = 0`.
    pub fn x_bar(&self, x: f64, t: f64, s: f64, modulator: f64) -> f64 {
        x * (1.0 - s) / (1.0 - t) * modulator
    }

    /// Solution of the general Riccati equation.
    pub fn gre_p(&self, _s: f64) -> f64 {
        1.0
    }
}

/// Closed forms of the modulated example, started at `(0, x)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModulatedDrift;

impl ModulatedDrift {
    /// `∫ₛ¹ (1 − r)^{−1/2} dr`.
    pub fn tail_integral(&self, s: f64) -> f64 {
        2.0 * (1.0 - s).max(0.0).sqrt()
    }

    pub fn p_eps(&self, eps: f64, s: f64) -> f64 {
        eps / (eps + 1.0 - s)
    }

    pub fn theta_eps(&self, eps: f64, s: f64) -> f64 {
        -1.0 / (eps + 1.0 - s)
    }

    pub fn eta_eps(&self, eps: f64, s: f64, modulator: f64) -> f64 {
        self.p_eps(eps, s) * modulator * self.tail_integral(s)
    }

    /// `ζ_ε = √(2i) η_ε` in regime `i` (1-based label).
    pub fn zeta_eps(&self, eps: f64, s: f64, regime_label: usize, modulator: f64) -> f64 {
        (2.0 * regime_label as f64).sqrt() * self.eta_eps(eps, s, modulator)
    }

    pub fn v_eps(&self, eps: f64, s: f64, modulator: f64) -> f64 {
        -self.eta_eps(eps, s, modulator) / eps
    }

    pub fn u_eps(&self, eps: f64, x: f64, modulator: f64) -> f64 {
        -(x + 2.0) / (eps + 1.0) * modulator
    }

    pub fn x_eps(&self, eps: f64, x: f64, s: f64, modulator: f64) -> f64 {
        modulator * ((eps + 1.0 - s) * (x + 2.0) / (eps + 1.0) - self.tail_integral(s))
    }

    /// `E∫₀¹ |u_ε|² ds = ((x + 2)/(ε + 1))²`.
    pub fn control_l2(&self, eps: f64, x: f64) -> f64 {
        let k = (x + 2.0) / (eps + 1.0);
        k * k
    }

    /// `J_ε(u_ε) = E|X_ε(1)|² + ε E∫|u_ε|² = ε (x + 2)²/(ε + 1)`.
    pub fn value_eps(&self, eps: f64, x: f64) -> f64 {
        eps * (x + 2.0).powi(2) / (eps + 1.0)
    }

    /// `η_ε(0) = 2ε/(ε + 1)`.
    pub fn eta_eps_at_zero(&self, eps: f64) -> f64 {
        2.0 * eps / (eps + 1.0)
    }

    pub fn u_star(&self, x: f64, modulator: f64) -> f64 {
        -(x + 2.0) * modulator
    }

    pub fn theta_star(&self, s: f64) -> f64 {
        -1.0 / (1.0 - s)
    }

    pub fn v_star(&self, s: f64, modulator: f64) -> f64 {
        -2.0 / (1.0 - s).sqrt() * modulator
    }

    pub fn x_star(&self, x: f64, s: f64, modulator: f64) -> f64 {
        modulator * ((1.0 - s) * (x + 2.0) - self.tail_integral(s))
    }

    /// `∫₀^{s} Θ*(r)² dr = 1/(1 − s) − 1`, unbounded as `s → 1`.
    pub fn theta_star_l2(&self, s: f64) -> f64 {
        1.0 / (1.0 - s) - 1.0
    }
}

/// Strongly regular reference `A = 0, B = I, Q = R = G = I` with a dense-grid solution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalReference {
    pub dense_steps: usize,
    pub reference: RiccatiSolution,
}

impl ClassicalReference {
    /// `P(s, i)` from the dense reference solve.
    pub fn p(&self, s: f64, i: usize) -> DMatrix<f64> {
        self.reference.p_at(s, i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClosedForms {
    ModulatedHomogeneous(ModulatedHomogeneous),
    ModulatedDrift(ModulatedDrift),
    Classical(Box<ClassicalReference>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSuite {
    pub name: String,
    pub spec: ProblemSpec,
    pub closed_forms: ClosedForms,
    pub tolerances: BTreeMap<String, f64>,
}

fn tolerances(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

pub fn modulated_homogeneous() -> OracleSuite {
    OracleSuite {
        name: "modulated-homogeneous".into(),
        spec: modulated_homogeneous_spec(),
        closed_forms: ClosedForms::ModulatedHomogeneous(ModulatedHomogeneous),
        tolerances: tolerances(&[("gre_p", 1e-8), ("x_bar_terminal_rms", 5e-2), ("cost_u_bar", 5e-2)]),
    }
}

pub fn modulated_drift() -> OracleSuite {
    OracleSuite {
        name: "modulated-drift".into(),
        spec: modulated_drift_spec(),
        closed_forms: ClosedForms::ModulatedDrift(ModulatedDrift),
        tolerances: tolerances(&[("p_eps", 1e-6), ("gre_p", 1e-8), ("theta_star", 1e-3), ("eta_eps_zero_rel", 5e-2)]),
    }
}

/// Dense steps used for the classical reference solution.
pub const CLASSICAL_DENSE_STEPS: usize = 100_000;

/// Perturbation used for the dense reference; `(R̂ + εI)` with `R = I` makes it
/// indistinguishable from the `ε = 0` solve at the tolerances used here.
const CLASSICAL_EPS: f64 = 1e-14;

pub fn classical_spec(n: usize, m: usize) -> ProblemSpec {
    let mut spec = ProblemSpec::zero(n, m, default_generator(), 1.0);
    spec.name = Some(format!("classical-{n}x{m}"));
    spec.b = MatrixProvider::constant(DMatrix::identity(n, m), 2);
    spec.q_mat = MatrixProvider::constant(DMatrix::identity(n, n), 2);
    spec.r_mat = MatrixProvider::constant(DMatrix::identity(m, m), 2);
    spec.g_mat = vec![DMatrix::identity(n, n); 2];
    spec
}

pub fn classical_reference(n: usize, m: usize) -> Result<OracleSuite> {
    let spec = classical_spec(n, m);
    let grid = TimeGrid::new(0.0, spec.horizon, CLASSICAL_DENSE_STEPS)?;
    let reference = solve_perturbed(&spec, CLASSICAL_EPS, &grid)?;
    Ok(OracleSuite {
        name: format!("classical-{n}x{m}"),
        spec,
        closed_forms: ClosedForms::Classical(Box::new(ClassicalReference {
            dense_steps: CLASSICAL_DENSE_STEPS,
            reference,
        })),
        tolerances: tolerances(&[("p_coarse_vs_dense", 1e-8), ("theta_gap_over_eps", 2.0)]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modulated_drift_closed_forms_are_consistent() {
        let e = ModulatedDrift;
        assert_eq!(e.theta_eps(1.0, 0.0), -0.5);
        assert_eq!(e.u_star(1.0, 1.0), -3.0);
        assert!((e.eta_eps(1.0, 0.0, 1.0) - 1.0).abs() < 1e-15);
        // u_ε = Θ_ε X_ε + v_ε pathwise
        for &(eps, s, m) in &[(0.1, 0.5, 1.7), (1.0, 0.2, 0.3), (0.01, 0.95, 2.0)] {
            let x = 1.0;
            let u = e.theta_eps(eps, s) * e.x_eps(eps, x, s, m) + e.v_eps(eps, s, m);
            assert!((u - e.u_eps(eps, x, m)).abs() < 1e-12);
            let us = e.theta_star(s) * e.x_star(x, s, m) + e.v_star(s, m);
            assert!((us - e.u_star(x, m)).abs() < 1e-12);
        }
        assert!((e.x_eps(0.3, 1.0, 0.0, 1.0) - 1.0).abs() < 1e-15);
        assert!(e.theta_star_l2(1.0 - 1e-12) > 1e11);
    }

    #[test]
    fn u_bar_steers_to_zero() {
        let e = ModulatedHomogeneous;
        assert_eq!(e.x_bar(2.0, 0.0, 1.0, 1.3), 0.0);
        assert_eq!(e.x_bar(2.0, 0.0, 0.0, 1.0), 2.0);
        assert_eq!(e.u_bar(1.0, 0.0, 1.0), -1.0);
    }

    #[test]
    fn specs_are_well_formed() {
        for spec in [
            modulated_homogeneous_spec(),
            modulated_drift_spec(),
            anti_convex_spec(),
            scalar_classical_spec(),
            zero_spec(2, 1),
            classical_spec(2, 2),
        ] {
            spec.checked().unwrap();
        }
    }
}
