//! Problem specification for the regime-switching LQ problem
//!
//! ```text
//! dX = [A X + B u + b] ds + [C X + D u + σ] dW,   X(t) = x, α(t) = i,
//! J  = E{ ⟨G X(T), X(T)⟩ + 2⟨g, X(T)⟩
//!        + ∫ ⟨[Q Sᵀ; S R][X; u], [X; u]⟩ + 2⟨[q; ρ], [X; u]⟩ ds }
//! ```
//!
//! with every coefficient evaluated at `(s, α(s))`.

mod document;
pub mod provider;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use document::{load_file, load_spec, render_spec, save_file};
pub use provider::{Input, Kind, Loadings, MatrixProvider, ModulatedTerm, Profile};

use crate::chain::{validate_generator, Generator};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::asymmetry;

/// Symmetric blocks with relative asymmetry above this are rejected.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Uniform sample count used by [`validate_spec`] in addition to the grid nodes.
pub const VALIDATION_SAMPLES: usize = 1001;

/// Optional default initial pair carried by a problem file (regime is 0-based here).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Initial {
    pub state: DVector<f64>,
    pub regime: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: Option<String>,
    pub horizon: f64,
    pub n: usize,
    pub m: usize,
    pub generator: Generator,
    pub a: MatrixProvider,
    pub b: MatrixProvider,
    pub c: MatrixProvider,
    pub d: MatrixProvider,
    /// Nonhomogeneous drift term `b`.
    pub drift: Input,
    pub sigma: Input,
    /// Terminal weight `G(i)`.
    pub g_mat: Vec<DMatrix<f64>>,
    /// Terminal linear weight `g(i)`.
    pub g_vec: Vec<DVector<f64>>,
    pub q_mat: MatrixProvider,
    pub s_mat: MatrixProvider,
    pub r_mat: MatrixProvider,
    pub q_vec: Input,
    pub rho: Input,
    pub initial: Option<Initial>,
}

impl ProblemSpec {
    /// All-zero problem on `[0, horizon]` (including `G = 0`); fill fields in afterwards.
    pub fn zero(n: usize, m: usize, generator: Generator, horizon: f64) -> Self {
        let d = generator.num_regimes();
        Self {
            name: None,
            horizon,
            n,
            m,
            generator,
            a: MatrixProvider::zeros(n, n, d),
            b: MatrixProvider::zeros(n, m, d),
            c: MatrixProvider::zeros(n, n, d),
            d: MatrixProvider::zeros(n, m, d),
            drift: Input::zero(n, d),
            sigma: Input::zero(n, d),
            g_mat: vec![DMatrix::zeros(n, n); d],
            g_vec: vec![DVector::zeros(n); d],
            q_mat: MatrixProvider::zeros(n, n, d),
            s_mat: MatrixProvider::zeros(m, n, d),
            r_mat: MatrixProvider::zeros(m, m, d),
            q_vec: Input::zero(n, d),
            rho: Input::zero(m, d),
            initial: None,
        }
    }

    pub fn num_regimes(&self) -> usize {
        self.generator.num_regimes()
    }

    /// Shape and symmetry checks; symmetric blocks within tolerance are symmetrized.
    pub fn checked(mut self) -> Result<Self> {
        let (n, m, d) = (self.n, self.m, self.num_regimes());
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::load("horizon", "must be positive and finite"));
        }
        if n == 0 || m == 0 {
            return Err(Error::load("dims", "n and m must be positive"));
        }
        let mats = [
            ("A", &self.a, (n, n)),
            ("B", &self.b, (n, m)),
            ("C", &self.c, (n, n)),
            ("D", &self.d, (n, m)),
            ("Q", &self.q_mat, (n, n)),
            ("S", &self.s_mat, (m, n)),
            ("R", &self.r_mat, (m, m)),
        ];
        for (name, p, shape) in mats {
            if p.shape() != shape {
                return Err(Error::load(name, format!("shape {:?}, expected {:?}", p.shape(), shape)));
            }
            if p.num_regimes() != d {
                return Err(Error::load(name, format!("{} regimes, expected {d}", p.num_regimes())));
            }
        }
        let inputs = [
            ("b", &self.drift, n),
            ("sigma", &self.sigma, n),
            ("q", &self.q_vec, n),
            ("rho", &self.rho, m),
        ];
        for (name, inp, len) in inputs {
            if inp.len() != len {
                return Err(Error::load(name, format!("length {}, expected {len}", inp.len())));
            }
            if inp.num_regimes() != d {
                return Err(Error::load(name, format!("{} regimes, expected {d}", inp.num_regimes())));
            }
        }
        if self.g_mat.len() != d || self.g_mat.iter().any(|g| g.shape() != (n, n)) {
            return Err(Error::load("G", format!("need {d} matrices of shape {n}x{n}")));
        }
        if self.g_vec.len() != d || self.g_vec.iter().any(|g| g.len() != n) {
            return Err(Error::load("g", format!("need {d} vectors of length {n}")));
        }
        // every modulated input must share one modulator
        let mut loadings: Option<&Loadings> = None;
        for (name, inp, _) in inputs {
            if let Some(l) = inp.loadings() {
                if l.wiener.len() != d || l.drift.len() != d {
                    return Err(Error::load(name, format!("modulator loadings need {d} entries")));
                }
                match loadings {
                    None => loadings = Some(l),
                    Some(prev) if prev != l => return Err(Error::load(name, "all modulated terms must share the same loadings")),
                    _ => {}
                }
            }
        }
        for g in self.g_mat.iter_mut() {
            *g = symmetrized("G", g)?;
        }
        self.q_mat = symmetrized_provider("Q", &self.q_mat)?;
        self.r_mat = symmetrized_provider("R", &self.r_mat)?;
        if let Some(init) = &self.initial {
            if init.state.len() != n || init.regime >= d {
                return Err(Error::load("initial", "state length or regime out of range"));
            }
        }
        Ok(self)
    }

    /// Modulator shared by all modulated inputs, if any.
    pub fn modulator(&self) -> Option<&Loadings> {
        [&self.drift, &self.sigma, &self.q_vec, &self.rho]
            .into_iter()
            .find_map(|i| i.loadings())
    }

    pub fn has_modulated_inputs(&self) -> bool {
        self.modulator().is_some()
    }

    /// True when every nonhomogeneous term vanishes.
    pub fn is_homogeneous(&self) -> bool {
        self.drift.is_zero()
            && self.sigma.is_zero()
            && self.q_vec.is_zero()
            && self.rho.is_zero()
            && self.g_vec.iter().all(|g| g.iter().all(|&x| x == 0.0))
    }
}

fn symmetrized(field: &str, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let norm = m.norm();
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL * norm.max(f64::MIN_POSITIVE) && asym > 0.0 {
        return Err(Error::load(
            field,
            format!("asymmetry {asym:.3e} exceeds tolerance {SYMMETRY_TOL:e}·‖M‖"),
        ));
    }
    Ok(crate::linalg::symmetrize(m))
}

fn symmetrized_provider(field: &str, p: &MatrixProvider) -> Result<MatrixProvider> {
    let (r, c) = p.shape();
    let sym = |v: &Vec<DMatrix<f64>>| v.iter().map(|m| symmetrized(field, m)).collect::<Result<Vec<_>>>();
    let kind = match p.kind() {
        Kind::Constant(v) => Kind::Constant(sym(v)?),
        Kind::Polynomial(v) => Kind::Polynomial(v.iter().map(sym).collect::<Result<_>>()?),
        Kind::Table { times, values } => Kind::Table {
            times: times.clone(),
            values: values.iter().map(sym).collect::<Result<_>>()?,
        },
    };
    MatrixProvider::new(r, c, kind)
}

/// Outcome of [`validate_spec`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpecReport {
    pub passed: bool,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
    /// `(field, flag)` pairs, e.g. `("b", "path-modulated")`.
    pub flags: Vec<(String, String)>,
}

/// Sample every provider on the grid plus [`VALIDATION_SAMPLES`] uniform nodes and
/// classify the inputs.
pub fn validate_spec(spec: &ProblemSpec, grid: &TimeGrid) -> SpecReport {
    let mut rep = SpecReport::default();
    let t = spec.horizon;
    let mut times: Vec<f64> = (0..VALIDATION_SAMPLES)
        .map(|k| t * k as f64 / (VALIDATION_SAMPLES - 1) as f64)
        .chain(grid.nodes())
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    match validate_generator(&spec.generator, &times) {
        Ok(g) => {
            rep.errors.extend(g.violations.into_iter().map(|v| format!("generator: {v}")));
            rep.warnings.extend(g.warnings.into_iter().map(|v| format!("generator: {v}")));
        }
        Err(e) => rep.errors.push(format!("generator: {e}")),
    }

    let d = spec.num_regimes();
    let mats = [
        ("A", &spec.a),
        ("B", &spec.b),
        ("C", &spec.c),
        ("D", &spec.d),
        ("Q", &spec.q_mat),
        ("S", &spec.s_mat),
        ("R", &spec.r_mat),
    ];
    for (name, p) in mats {
        'outer: for &s in &times {
            for i in 0..d {
                if p.eval(s, i).iter().any(|x| !x.is_finite()) {
                    rep.errors.push(format!("{name}: non-finite value at s = {s}, regime {}", i + 1));
                    break 'outer;
                }
            }
        }
    }
    for (i, g) in spec.g_mat.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            rep.errors.push(format!("G: non-finite entry in regime {}", i + 1));
        }
    }
    for (i, g) in spec.g_vec.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            rep.errors.push(format!("g: non-finite entry in regime {}", i + 1));
        }
    }

    let inputs = [("b", &spec.drift), ("sigma", &spec.sigma), ("q", &spec.q_vec), ("rho", &spec.rho)];
    for (name, inp) in inputs {
        if inp.is_modulated() {
            rep.flags.push((name.into(), "path-modulated".into()));
        }
        check_input(name, inp, &times, d, t, &mut rep);
    }
    rep.passed = rep.errors.is_empty();
    rep
}

fn check_input(name: &str, inp: &Input, times: &[f64], d: usize, t: f64, rep: &mut SpecReport) {
    let mut early = 0.0f64;
    let mut late = 0.0f64;
    for &s in times {
        for i in 0..d {
            let v = inp.eval(s, i, 1.0);
            if v.iter().any(|x| !x.is_finite()) {
                rep.errors.push(format!("{name}: non-finite value at s = {s}, regime {}", i + 1));
                return;
            }
            let a = v.amax();
            if s <= 0.9 * t {
                early = early.max(a);
            } else if s >= 0.99 * t {
                late = late.max(a);
            }
        }
    }
    if let Some(Profile::Power { exponent, .. }) = match inp {
        Input::Profiled { profile, .. } => Some(profile),
        Input::Modulated { term, .. } => Some(&term.base),
        Input::Provider(_) => None,
    } {
        if *exponent <= -1.0 {
            rep.warnings
                .push(format!("{name}: power profile with exponent {exponent} is not integrable"));
        } else if *exponent <= -0.5 {
            rep.warnings.push(format!(
                "{name}: power profile with exponent {exponent} is integrable but not square-integrable"
            ));
        }
        return;
    }
    if late > 50.0 * early.max(1e-300) && late > 1.0 {
        rep.warnings.push(format!(
            "{name}: magnitude grows from {early:.3e} to {late:.3e} near the horizon; check integrability"
        ));
    }
}

/// The associated homogeneous problem: `b = σ = q = ρ = 0` and `g = 0`.
pub fn homogenize(spec: &ProblemSpec) -> ProblemSpec {
    let d = spec.num_regimes();
    let mut out = spec.clone();
    out.drift = Input::zero(spec.n, d);
    out.sigma = Input::zero(spec.n, d);
    out.q_vec = Input::zero(spec.n, d);
    out.rho = Input::zero(spec.m, d);
    out.g_vec = vec![DVector::zeros(spec.n); d];
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> Generator {
        Generator::from_rows(&[&[-1.0, 1.0], &[1.0, -1.0]]).unwrap()
    }

    #[test]
    fn zero_problem_validates_without_flags() {
        let mut spec = ProblemSpec::zero(1, 1, two_state(), 1.0);
        spec.g_mat = vec![DMatrix::identity(1, 1); 2];
        let spec = spec.checked().unwrap();
        let rep = validate_spec(&spec, &TimeGrid::new(0.0, 1.0, 100).unwrap());
        assert!(rep.passed, "{rep:?}");
        assert!(rep.flags.is_empty());
    }

    #[test]
    fn homogenize_is_idempotent() {
        let mut spec = ProblemSpec::zero(1, 1, two_state(), 1.0);
        spec.drift = Input::constant(DVector::from_element(1, 3.0), 2);
        spec.g_vec = vec![DVector::from_element(1, 1.0); 2];
        let h = homogenize(&spec);
        assert!(h.is_homogeneous());
        assert_eq!(homogenize(&h), h);
        assert_eq!(h.a, spec.a);
        assert_eq!(h.g_mat, spec.g_mat);
    }

    #[test]
    fn asymmetric_weight_rejected() {
        let mut spec = ProblemSpec::zero(2, 1, two_state(), 1.0);
        spec.q_mat = MatrixProvider::constant(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0]), 2);
        match spec.checked() {
            Err(Error::Load { field, .. }) => assert_eq!(field, "Q"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn tiny_asymmetry_is_symmetrized() {
        let mut spec = ProblemSpec::zero(2, 1, two_state(), 1.0);
        spec.q_mat = MatrixProvider::constant(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5 + 1e-13, 1.0]), 2);
        let spec = spec.checked().unwrap();
        let q = spec.q_mat.eval(0.0, 0);
        assert_eq!(q[(0, 1)], q[(1, 0)]);
    }

    #[test]
    fn shape_errors_name_the_field() {
        let mut spec = ProblemSpec::zero(2, 1, two_state(), 1.0);
        spec.b = MatrixProvider::zeros(2, 2, 2);
        match spec.checked() {
            Err(Error::Load { field, .. }) => assert_eq!(field, "B"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn growing_table_input_warns() {
        let times: Vec<f64> = (0..=999).map(|k| k as f64 / 1000.0).collect();
        let values: Vec<DMatrix<f64>> = times.iter().map(|s| DMatrix::from_element(1, 1, 1.0 / (1.0 - s))).collect();
        let mut spec = ProblemSpec::zero(1, 1, two_state(), 1.0);
        spec.drift = Input::Provider(
            MatrixProvider::new(
                1,
                1,
                Kind::Table {
                    times,
                    values: vec![values.clone(), values],
                },
            )
            .unwrap(),
        );
        let rep = validate_spec(&spec, &TimeGrid::new(0.0, 1.0, 100).unwrap());
        assert!(rep.passed);
        assert!(rep.warnings.iter().any(|w| w.starts_with("b:")), "{rep:?}");
    }
}
