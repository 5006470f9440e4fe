//! Time- and regime-indexed coefficient providers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn interp(times: &[f64], t: f64) -> (usize, f64) {
    let last = times.len() - 1;
    if t <= times[0] || last == 0 {
        return (0, 0.0);
    }
    if t >= times[last] {
        return (last - 1, 1.0);
    }
    let k = times.partition_point(|&x| x <= t) - 1;
    (k, (t - times[k]) / (times[k + 1] - times[k]))
}

/// How a matrix coefficient depends on time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Kind {
    /// One matrix per regime.
    Constant(Vec<DMatrix<f64>>),
    /// `Σ_k c_k s^k`, coefficient list per regime.
    Polynomial(Vec<Vec<DMatrix<f64>>>),
    /// Linear interpolation between `times`, clamped outside; `values[regime][k]`.
    Table { times: Vec<f64>, values: Vec<Vec<DMatrix<f64>>> },
}

/// Matrix-valued coefficient `(s, i) ↦ M(s, i)` of fixed shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixProvider {
    rows: usize,
    cols: usize,
    kind: Kind,
}

impl MatrixProvider {
    pub fn new(rows: usize, cols: usize, kind: Kind) -> Result<Self> {
        let check = |m: &DMatrix<f64>| -> Result<()> {
            if m.shape() != (rows, cols) {
                return Err(Error::Structural(format!(
                    "provider entry is {}x{}, expected {rows}x{cols}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(())
        };
        match &kind {
            Kind::Constant(per) => {
                if per.is_empty() {
                    return Err(Error::Structural("provider has no regimes".into()));
                }
                per.iter().try_for_each(check)?;
            }
            Kind::Polynomial(per) => {
                if per.is_empty() || per.iter().any(|c| c.is_empty()) {
                    return Err(Error::Structural("polynomial provider needs coefficients".into()));
                }
                per.iter().flatten().try_for_each(check)?;
            }
            Kind::Table { times, values } => {
                if times.is_empty() || values.is_empty() {
                    return Err(Error::Structural("table provider is empty".into()));
                }
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Structural("table times must be strictly increasing".into()));
                }
                if values.iter().any(|v| v.len() != times.len()) {
                    return Err(Error::Structural("table needs one value per time".into()));
                }
                values.iter().flatten().try_for_each(check)?;
            }
        }
        Ok(Self { rows, cols, kind })
    }

    pub fn zeros(rows: usize, cols: usize, regimes: usize) -> Self {
        Self {
            rows,
            cols,
            kind: Kind::Constant(vec![DMatrix::zeros(rows, cols); regimes]),
        }
    }

    /// The same constant matrix in every regime.
    pub fn constant(m: DMatrix<f64>, regimes: usize) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            kind: Kind::Constant(vec![m; regimes]),
        }
    }

    pub fn per_regime(ms: Vec<DMatrix<f64>>) -> Result<Self> {
        let (r, c) = ms.first().map(|m| m.shape()).unwrap_or((0, 0));
        Self::new(r, c, Kind::Constant(ms))
    }

    /// 1×1 constants, one per regime.
    pub fn scalars(xs: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: 1,
            kind: Kind::Constant(xs.iter().map(|&x| DMatrix::from_element(1, 1, x)).collect()),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn kind(&self) -> &Kind {
        &self.kind
    }

    pub fn num_regimes(&self) -> usize {
        match &self.kind {
            Kind::Constant(v) => v.len(),
            Kind::Polynomial(v) => v.len(),
            Kind::Table { values, .. } => values.len(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, Kind::Constant(_))
    }

    pub fn is_zero(&self) -> bool {
        let z = |m: &DMatrix<f64>| m.iter().all(|&x| x == 0.0);
        match &self.kind {
            Kind::Constant(v) => v.iter().all(z),
            Kind::Polynomial(v) => v.iter().flatten().all(z),
            Kind::Table { values, .. } => values.iter().flatten().all(z),
        }
    }

    pub fn eval(&self, s: f64, i: usize) -> DMatrix<f64> {
        match &self.kind {
            Kind::Constant(v) => v[i].clone(),
            Kind::Polynomial(v) => {
                let c = &v[i];
                let mut acc = c[c.len() - 1].clone();
                for k in (0..c.len() - 1).rev() {
                    acc *= s;
                    acc += &c[k];
                }
                acc
            }
            Kind::Table { times, values } => {
                let (k, w) = interp(times, s);
                let v = &values[i];
                if v.len() == 1 {
                    return v[0].clone();
                }
                &v[k] * (1.0 - w) + &v[k + 1] * w
            }
        }
    }

    /// Scalar entry of a 1×1 provider, or `(r, c)` entry in general.
    pub fn entry(&self, s: f64, i: usize, r: usize, c: usize) -> f64 {
        match &self.kind {
            Kind::Constant(v) => v[i][(r, c)],
            _ => self.eval(s, i)[(r, c)],
        }
    }
}

/// Deterministic scalar base function `f(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Profile {
    Constant(f64),
    Polynomial(Vec<f64>),
    Table {
        times: Vec<f64>,
        values: Vec<f64>,
    },
    /// `scale · (shift − s)^exponent` for `s < shift`, and 0 from `shift` on.
    Power {
        scale: f64,
        shift: f64,
        exponent: f64,
    },
}

impl Profile {
    pub fn validate(&self) -> Result<()> {
        match self {
            Profile::Constant(c) if !c.is_finite() => Err(Error::Structural("non-finite profile".into())),
            Profile::Polynomial(c) if c.is_empty() || c.iter().any(|x| !x.is_finite()) => {
                Err(Error::Structural("polynomial profile needs finite coefficients".into()))
            }
            Profile::Table { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(Error::Structural("profile table needs one value per time".into()));
                }
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Structural("profile table times must increase".into()));
                }
                Ok(())
            }
            Profile::Power { scale, shift, exponent } => {
                if !(scale.is_finite() && shift.is_finite() && exponent.is_finite()) {
                    return Err(Error::Structural("non-finite power profile".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            Profile::Constant(c) => *c,
            Profile::Polynomial(c) => c.iter().rev().fold(0.0, |acc, &x| acc * s + x),
            Profile::Table { times, values } => {
                if values.len() == 1 {
                    return values[0];
                }
                let (k, w) = interp(times, s);
                values[k] * (1.0 - w) + values[k + 1] * w
            }
            Profile::Power { scale, shift, exponent } => {
                if s < *shift {
                    scale * (shift - s).powf(*exponent)
                } else {
                    0.0
                }
            }
        }
    }

    /// `∫_a^b f(s) ds`, exact for every variant (infinite if the singularity is not integrable).
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            Profile::Constant(c) => c * (b - a),
            Profile::Polynomial(c) => {
                let anti = |s: f64| c.iter().enumerate().rev().fold(0.0, |acc, (k, &x)| acc * s + x / (k as f64 + 1.0)) * s;
                anti(b) - anti(a)
            }
            Profile::Table { times, values } => {
                if values.len() == 1 {
                    return values[0] * (b - a);
                }
                let mut cuts = vec![a];
                cuts.extend(times.iter().copied().filter(|&t| t > a && t < b));
                cuts.push(b);
                cuts.windows(2)
                    .map(|w| 0.5 * (self.eval(w[0]) + self.eval(w[1])) * (w[1] - w[0]))
                    .sum()
            }
            Profile::Power { scale, shift, exponent } => {
                let (lo, hi) = (a.min(*shift), b.min(*shift));
                if hi <= lo {
                    return 0.0;
                }
                let (x0, x1) = (shift - lo, shift - hi);
                if (exponent + 1.0).abs() < 1e-14 {
                    scale * (x0.ln() - x1.ln())
                } else {
                    let p = exponent + 1.0;
                    scale * (x0.powf(p) - x1.powf(p)) / p
                }
            }
        }
    }

    /// True when the profile has an endpoint singularity (negative power).
    pub fn is_singular(&self) -> bool {
        matches!(self, Profile::Power { exponent, .. } if *exponent < 0.0)
    }

    /// Value used inside a quadrature stage at `s` within the step `[a, b]`:
    /// the point value for smooth profiles, the step average for singular ones.
    pub fn stage_value(&self, s: f64, a: f64, b: f64) -> f64 {
        if self.is_singular() && b > a {
            self.integral(a, b) / (b - a)
        } else {
            self.eval(s)
        }
    }
}

/// Per-regime loadings of the exponential modulator
/// `M(s) = exp{∫₀ˢ c(α(r)) dW(r) + ∫₀ˢ d(α(r)) dr}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loadings {
    pub wiener: Vec<f64>,
    pub drift: Vec<f64>,
}

impl Loadings {
    /// Martingale-normalised loadings `d(i) = −c(i)²/2`, so `E M(s) = 1`.
    pub fn martingale(wiener: Vec<f64>) -> Self {
        let drift = wiener.iter().map(|c| -0.5 * c * c).collect();
        Self { wiener, drift }
    }
}

/// Path-modulated scalar term `f(s) · M(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulatedTerm {
    pub base: Profile,
    pub loadings: Loadings,
}

/// Vector-valued nonhomogeneous term (`b`, `σ`, `q` or `ρ`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Input {
    /// Deterministic column provider.
    Provider(MatrixProvider),
    /// `f(s) · direction(i)`; allows integrable endpoint singularities.
    Profiled { profile: Profile, direction: Vec<DVector<f64>> },
    /// `f(s) · M(s) · direction(i)`.
    Modulated { term: ModulatedTerm, direction: Vec<DVector<f64>> },
}

impl Input {
    pub fn zero(len: usize, regimes: usize) -> Self {
        Input::Provider(MatrixProvider::zeros(len, 1, regimes))
    }

    /// The same constant vector in every regime.
    pub fn constant(v: DVector<f64>, regimes: usize) -> Self {
        Input::Provider(MatrixProvider::constant(
            DMatrix::from_column_slice(v.len(), 1, v.as_slice()),
            regimes,
        ))
    }

    pub fn len(&self) -> usize {
        match self {
            Input::Provider(p) => p.shape().0,
            Input::Profiled { direction, .. } | Input::Modulated { direction, .. } => direction.first().map_or(0, |d| d.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_regimes(&self) -> usize {
        match self {
            Input::Provider(p) => p.num_regimes(),
            Input::Profiled { direction, .. } | Input::Modulated { direction, .. } => direction.len(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Input::Provider(p) => p.is_zero(),
            Input::Profiled { profile, direction }
            | Input::Modulated {
                term: ModulatedTerm { base: profile, .. },
                direction,
            } => *profile == Profile::Constant(0.0) || direction.iter().all(|d| d.iter().all(|&x| x == 0.0)),
        }
    }

    pub fn is_modulated(&self) -> bool {
        matches!(self, Input::Modulated { .. })
    }

    pub fn loadings(&self) -> Option<&Loadings> {
        match self {
            Input::Modulated { term, .. } => Some(&term.loadings),
            _ => None,
        }
    }

    fn profile(&self) -> Option<&Profile> {
        match self {
            Input::Provider(_) => None,
            Input::Profiled { profile, .. } => Some(profile),
            Input::Modulated { term, .. } => Some(&term.base),
        }
    }

    pub fn is_singular(&self) -> bool {
        self.profile().is_some_and(Profile::is_singular)
    }

    /// Value at `(s, i)` given the current modulator value (ignored unless modulated).
    pub fn eval(&self, s: f64, i: usize, modulator: f64) -> DVector<f64> {
        match self {
            Input::Provider(p) => p.eval(s, i).column(0).into_owned(),
            Input::Profiled { profile, direction } => &direction[i] * profile.eval(s),
            Input::Modulated { term, direction } => &direction[i] * (term.base.eval(s) * modulator),
        }
    }

    /// Like [`Input::eval`] but singular profiles are replaced by their average over `[a, b]`.
    pub fn stage_eval(&self, s: f64, a: f64, b: f64, i: usize, modulator: f64) -> DVector<f64> {
        match self {
            Input::Provider(p) => p.eval(s, i).column(0).into_owned(),
            Input::Profiled { profile, direction } => &direction[i] * profile.stage_value(s, a, b),
            Input::Modulated { term, direction } => &direction[i] * (term.base.stage_value(s, a, b) * modulator),
        }
    }

    /// `∫_a^b` of the deterministic part (modulator excluded), by Simpson's rule for
    /// providers and exactly for profiles.
    pub fn base_integral(&self, a: f64, b: f64, i: usize) -> DVector<f64> {
        match self {
            Input::Provider(p) => {
                let m = 0.5 * (a + b);
                let v = (p.eval(a, i) + p.eval(m, i) * 4.0 + p.eval(b, i)) * ((b - a) / 6.0);
                v.column(0).into_owned()
            }
            Input::Profiled { profile, direction } => &direction[i] * profile.integral(a, b),
            Input::Modulated { term, direction } => &direction[i] * term.base.integral(a, b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_table_eval() {
        let p = MatrixProvider::new(
            1,
            1,
            Kind::Polynomial(vec![vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 2.0)]]),
        )
        .unwrap();
        assert_eq!(p.eval(0.5, 0)[(0, 0)], 2.0);
        let t = MatrixProvider::new(
            1,
            1,
            Kind::Table {
                times: vec![0.0, 1.0],
                values: vec![vec![DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, 4.0)]],
            },
        )
        .unwrap();
        assert_eq!(t.eval(0.25, 0)[(0, 0)], 1.0);
        assert_eq!(t.eval(2.0, 0)[(0, 0)], 4.0);
        assert_eq!(t.eval(-1.0, 0)[(0, 0)], 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(MatrixProvider::new(2, 2, Kind::Constant(vec![DMatrix::zeros(2, 1)])).is_err());
    }

    #[test]
    fn power_profile_integral() {
        let f = Profile::Power {
            scale: 1.0,
            shift: 1.0,
            exponent: -0.5,
        };
        assert!((f.integral(0.0, 1.0) - 2.0).abs() < 1e-15);
        assert!((f.integral(0.5, 2.0) - 2.0 * 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(f.eval(1.0), 0.0);
        let g = Profile::Power {
            scale: 1.0,
            shift: 1.0,
            exponent: -1.0,
        };
        assert!(g.integral(0.0, 1.0).is_infinite());
    }

    #[test]
    fn polynomial_profile_integral() {
        let f = Profile::Polynomial(vec![1.0, 0.0, 3.0]);
        assert!((f.integral(0.0, 2.0) - (2.0 + 8.0)).abs() < 1e-14);
    }

    #[test]
    fn table_profile_integral_is_piecewise_trapezoid() {
        let f = Profile::Table {
            times: vec![0.0, 1.0, 2.0],
            values: vec![0.0, 1.0, 0.0],
        };
        assert!((f.integral(0.0, 2.0) - 1.0).abs() < 1e-15);
        assert!((f.integral(0.5, 1.5) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn simpson_is_exact_for_quadratics() {
        let p = MatrixProvider::new(
            1,
            1,
            Kind::Polynomial(vec![vec![
                DMatrix::from_element(1, 1, 0.0),
                DMatrix::from_element(1, 1, 0.0),
                DMatrix::from_element(1, 1, 3.0),
            ]]),
        )
        .unwrap();
        let v = Input::Provider(p).base_integral(0.0, 1.0, 0);
        assert!((v[0] - 1.0).abs() < 1e-15);
    }
}
