//! Continuous-time Markov chain machinery: generators, path sampling and the
//! compensated jump martingales `Ñ_j = N_j − ∫ λ_{α(s−) j} 1{α(s−) ≠ j} ds`.
//!
//! Regimes are indexed from 0 inside the library; problem files and CSV
//! exports use 1-based labels.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Row-sum tolerance per regime: a row passes when `|Σ_j λ_ij| ≤ ROW_SUM_TOL · D`.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Rates {
    Constant(DMatrix<f64>),
    /// Piecewise-linear in time between `times`; clamped outside.
    Table {
        times: Vec<f64>,
        matrices: Vec<DMatrix<f64>>,
    },
}

/// Rate matrix `λ(t)` of a finite-state chain together with a uniform bound
/// `λ̄ ≥ sup_{t,i} |λ_ii(t)|` used for thinning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    num_regimes: usize,
    rates: Rates,
    rate_bound: f64,
}

fn check_square_finite(m: &DMatrix<f64>, d: usize, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Structural(format!(
            "{what}: rate matrix is {}x{}, not square",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() != d {
        return Err(Error::Structural(format!("{what}: expected {d} regimes, got {}", m.nrows())));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Structural(format!("{what}: non-finite rate")));
    }
    Ok(())
}

fn diag_bound(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(0.0, f64::max)
}

impl Generator {
    /// Time-homogeneous generator. Only structure is checked here; use
    /// [`validate_generator`] for the rate-matrix invariants.
    pub fn constant(rates: DMatrix<f64>) -> Result<Self> {
        let d = rates.nrows();
        if d == 0 {
            return Err(Error::Structural("generator needs at least one regime".into()));
        }
        check_square_finite(&rates, d, "generator")?;
        let rate_bound = diag_bound(&rates);
        Ok(Self {
            num_regimes: d,
            rates: Rates::Constant(rates),
            rate_bound,
        })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Structural("generator rows have unequal length".into()));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::constant(DMatrix::from_row_slice(d, d, &flat))
    }

    /// Time-dependent generator tabulated at strictly increasing `times`.
    pub fn table(times: Vec<f64>, matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != matrices.len() {
            return Err(Error::Structural("generator table needs one matrix per time".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Structural(
                "generator table times must be finite and strictly increasing".into(),
            ));
        }
        let d = matrices[0].nrows();
        if d == 0 {
            return Err(Error::Structural("generator needs at least one regime".into()));
        }
        for m in &matrices {
            check_square_finite(m, d, "generator table")?;
        }
        let rate_bound = matrices.iter().map(diag_bound).fold(0.0, f64::max);
        Ok(Self {
            num_regimes: d,
            rates: Rates::Table { times, matrices },
            rate_bound,
        })
    }

    /// Override the thinning bound `λ̄`.
    pub fn with_rate_bound(mut self, bound: f64) -> Self {
        self.rate_bound = bound;
        self
    }

    pub fn num_regimes(&self) -> usize {
        self.num_regimes
    }

    pub fn rate_bound(&self) -> f64 {
        self.rate_bound
    }

    pub fn rates(&self) -> &Rates {
        &self.rates
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.rates, Rates::Constant(_))
    }

    pub fn is_zero(&self) -> bool {
        match &self.rates {
            Rates::Constant(m) => m.iter().all(|&x| x == 0.0),
            Rates::Table { matrices, .. } => matrices.iter().all(|m| m.iter().all(|&x| x == 0.0)),
        }
    }

    /// `λ(t)` as a matrix.
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match &self.rates {
            Rates::Constant(m) => m.clone(),
            Rates::Table { .. } => DMatrix::from_fn(self.num_regimes, self.num_regimes, |i, j| self.rate(t, i, j)),
        }
    }

    /// Single entry `λ_ij(t)`.
    #[inline]
    pub fn rate(&self, t: f64, i: usize, j: usize) -> f64 {
        match &self.rates {
            Rates::Constant(m) => m[(i, j)],
            Rates::Table { times, matrices } => {
                let last = times.len() - 1;
                if t <= times[0] {
                    return matrices[0][(i, j)];
                }
                if t >= times[last] {
                    return matrices[last][(i, j)];
                }
                let k = times.partition_point(|&x| x <= t) - 1;
                let w = (t - times[k]) / (times[k + 1] - times[k]);
                (1.0 - w) * matrices[k][(i, j)] + w * matrices[k + 1][(i, j)]
            }
        }
    }

    /// Total exit intensity of regime `i` at time `t`, `Σ_{j≠i} λ_ij(t)`.
    #[inline]
    pub fn exit_rate(&self, t: f64, i: usize) -> f64 {
        (0..self.num_regimes).filter(|&j| j != i).map(|j| self.rate(t, i, j)).sum()
    }
}

/// Outcome of [`validate_generator`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub passed: bool,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

/// Check the rate-matrix invariants at every sample time.
pub fn validate_generator(gen: &Generator, sample_times: &[f64]) -> Result<GeneratorReport> {
    let d = gen.num_regimes();
    let mut report = GeneratorReport::default();
    let mut zero_off_diag = false;
    for &t in sample_times {
        let m = gen.at(t);
        check_square_finite(&m, d, "generator")?;
        for i in 0..d {
            let row_sum: f64 = m.row(i).iter().sum();
            if row_sum.abs() > ROW_SUM_TOL * d as f64 {
                report.violations.push(format!("t = {t}: row {} sums to {row_sum}", i + 1));
            }
            if m[(i, i)] > 0.0 {
                report
                    .violations
                    .push(format!("t = {t}: diagonal entry {} is positive ({})", i + 1, m[(i, i)]));
            }
            if m[(i, i)].abs() > gen.rate_bound() * (1.0 + 1e-12) {
                report.violations.push(format!(
                    "t = {t}: |λ_{0}{0}| = {1} exceeds rate bound {2}",
                    i + 1,
                    m[(i, i)].abs(),
                    gen.rate_bound()
                ));
            }
            for j in 0..d {
                if i == j {
                    continue;
                }
                if m[(i, j)] < 0.0 {
                    report
                        .violations
                        .push(format!("t = {t}: negative off-diagonal rate λ_{}{} = {}", i + 1, j + 1, m[(i, j)]));
                } else if m[(i, j)] == 0.0 {
                    zero_off_diag = true;
                }
            }
        }
    }
    if zero_off_diag {
        report
            .warnings
            .push("some off-diagonal rates are zero (strict positivity not met)".into());
    }
    report.passed = report.violations.is_empty();
    Ok(report)
}

/// Exact jump record of one chain trajectory on `[t0, t_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainPath {
    pub t0: f64,
    pub t_end: f64,
    pub initial_regime: usize,
    pub jump_times: Vec<f64>,
    pub jump_targets: Vec<usize>,
}

impl ChainPath {
    pub fn constant(t0: f64, t_end: f64, regime: usize) -> Self {
        Self {
            t0,
            t_end,
            initial_regime: regime,
            jump_times: Vec::new(),
            jump_targets: Vec::new(),
        }
    }

    pub fn num_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Right-continuous regime `α(t)`.
    pub fn regime_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s <= t);
        if k == 0 {
            self.initial_regime
        } else {
            self.jump_targets[k - 1]
        }
    }

    /// Left limit `α(t−)`.
    pub fn regime_before(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s < t);
        if k == 0 {
            self.initial_regime
        } else {
            self.jump_targets[k - 1]
        }
    }

    /// Regime at every grid node.
    pub fn grid_regimes(&self, grid: &TimeGrid) -> Vec<usize> {
        grid.nodes().map(|t| self.regime_at(t)).collect()
    }

    /// Indices of jumps in `(a, b]`.
    pub fn jumps_in(&self, a: f64, b: f64) -> std::ops::Range<usize> {
        let lo = self.jump_times.partition_point(|&s| s <= a);
        let hi = self.jump_times.partition_point(|&s| s <= b);
        lo..hi
    }

    /// Constant-regime pieces `(regime, start, end)` covering `[a, b]`.
    pub fn pieces(&self, a: f64, b: f64) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::with_capacity(1);
        let mut start = a;
        let mut regime = self.regime_at(a);
        for k in self.jumps_in(a, b) {
            let tau = self.jump_times[k];
            if tau > start {
                out.push((regime, start, tau));
            }
            start = tau;
            regime = self.jump_targets[k];
        }
        if b > start || out.is_empty() {
            out.push((regime, start, b));
        }
        out
    }

    /// Smallest gap between consecutive jumps (infinite with fewer than two jumps).
    pub fn min_gap(&self) -> f64 {
        self.jump_times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }
}

/// Counter-based per-stream generator: `(seed, stream)` fully determines the sequence.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn exp_sample<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

fn pick_target<R: Rng + ?Sized>(rng: &mut R, gen: &Generator, t: f64, i: usize, total: f64) -> usize {
    let d = gen.num_regimes();
    let mut v = rng.random::<f64>() * total;
    let mut last = i;
    for j in 0..d {
        if j == i {
            continue;
        }
        let r = gen.rate(t, i, j).max(0.0);
        if r <= 0.0 {
            continue;
        }
        last = j;
        if v < r {
            return j;
        }
        v -= r;
    }
    last
}

/// Sample a path on `[t0, t_end]` starting from `i0` (0-based).
///
/// Constant generators use exact competing exponentials; time-dependent ones
/// use Lewis–Shedler thinning against the global bound `λ̄`.
pub fn simulate_chain(gen: &Generator, t0: f64, i0: usize, t_end: f64, seed: u64) -> Result<ChainPath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_chain(gen, t0, i0, t_end, &mut rng)
}

/// [`simulate_chain`] driven by a caller-supplied generator.
pub fn sample_chain<R: Rng + ?Sized>(gen: &Generator, t0: f64, i0: usize, t_end: f64, rng: &mut R) -> Result<ChainPath> {
    if t0.partial_cmp(&t_end) != Some(std::cmp::Ordering::Less) {
        return Err(Error::Config(format!("chain horizon needs t0 < T, got [{t0}, {t_end}]")));
    }
    if i0 >= gen.num_regimes() {
        return Err(Error::Config(format!(
            "initial regime {} outside 1..={}",
            i0 + 1,
            gen.num_regimes()
        )));
    }
    if !gen.rate_bound().is_finite() {
        return Err(Error::Config("rate bound must be finite".into()));
    }
    let mut path = ChainPath::constant(t0, t_end, i0);
    if gen.is_zero() {
        return Ok(path);
    }
    let mut t = t0;
    let mut i = i0;
    if gen.is_constant() {
        loop {
            let q = gen.exit_rate(t, i);
            if q <= 0.0 {
                break;
            }
            t += exp_sample(rng, q);
            if t >= t_end {
                break;
            }
            i = pick_target(rng, gen, t, i, q);
            path.jump_times.push(t);
            path.jump_targets.push(i);
        }
    } else {
        let bound = gen.rate_bound();
        if bound <= 0.0 {
            return Err(Error::Config("rate bound is zero but the generator has nonzero rates".into()));
        }
        loop {
            t += exp_sample(rng, bound);
            if t >= t_end {
                break;
            }
            let q = gen.exit_rate(t, i);
            let accept: f64 = rng.random();
            if accept * bound < q {
                i = pick_target(rng, gen, t, i, q);
                path.jump_times.push(t);
                path.jump_targets.push(i);
            }
        }
    }
    Ok(path)
}

/// Row `i0` of `exp((t − t0) λ)`: the regime distribution at `t` given `α(t0) = i0`.
pub fn occupancy_reference(gen: &Generator, t0: f64, i0: usize, t: f64) -> Result<DVector<f64>> {
    let Rates::Constant(m) = gen.rates() else {
        return Err(Error::Unsupported("occupancy reference needs a time-homogeneous generator".into()));
    };
    if i0 >= gen.num_regimes() {
        return Err(Error::Config(format!("initial regime {} out of range", i0 + 1)));
    }
    let e = (m * (t - t0)).exp();
    Ok(e.row(i0).transpose())
}

/// Counting processes `N_j`, compensators and `Ñ_j` at grid nodes, indexed `[regime][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpMartingales {
    pub counts: Vec<Vec<f64>>,
    pub compensators: Vec<Vec<f64>>,
    pub compensated: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Integrate `∫_a^b λ_{r j}(s) ds` by the trapezoid rule (exact for constant rates).
pub(crate) fn rate_integral(gen: &Generator, r: usize, j: usize, a: f64, b: f64) -> f64 {
    if gen.is_constant() {
        gen.rate(a, r, j) * (b - a)
    } else {
        0.5 * (gen.rate(a, r, j) + gen.rate(b, r, j)) * (b - a)
    }
}

pub fn compensated_martingales(path: &ChainPath, gen: &Generator, grid: &TimeGrid) -> JumpMartingales {
    let d = gen.num_regimes();
    let n = grid.len();
    let mut counts = vec![vec![0.0; n]; d];
    let mut comp = vec![vec![0.0; n]; d];
    let mut warnings = Vec::new();
    if grid.h() > path.min_gap() {
        let msg = format!("grid step {} exceeds the minimum inter-jump gap {}", grid.h(), path.min_gap());
        log::warn!("{msg}");
        warnings.push(msg);
    }
    for k in 1..n {
        let (a, b) = (grid.node(k - 1), grid.node(k));
        for j in 0..d {
            counts[j][k] = counts[j][k - 1];
            comp[j][k] = comp[j][k - 1];
        }
        for idx in path.jumps_in(a, b) {
            counts[path.jump_targets[idx]][k] += 1.0;
        }
        for (r, s0, s1) in path.pieces(a, b) {
            for (j, c) in comp.iter_mut().enumerate() {
                if j != r {
                    c[k] += rate_integral(gen, r, j, s0, s1);
                }
            }
        }
    }
    let compensated = counts
        .iter()
        .zip(&comp)
        .map(|(c, l)| c.iter().zip(l).map(|(x, y)| x - y).collect())
        .collect();
    JumpMartingales {
        counts,
        compensators: comp,
        compensated,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym2() -> Generator {
        Generator::from_rows(&[&[-1.0, 1.0], &[1.0, -1.0]]).unwrap()
    }

    #[test]
    fn validate_examples() {
        let times = [0.0, 0.5, 1.0];
        let ok = Generator::from_rows(&[&[-1.0, 1.0], &[2.0, -2.0]]).unwrap();
        assert!(validate_generator(&ok, &times).unwrap().passed);

        let bad_sum = Generator::from_rows(&[&[-1.0, 0.5], &[1.0, -1.0]]).unwrap();
        let r = validate_generator(&bad_sum, &times).unwrap();
        assert!(!r.passed);
        assert!(r.violations.iter().any(|v| v.contains("row 1")));

        let neg = Generator::from_rows(&[&[-1.0, 1.0], &[-0.5, 0.5]]).unwrap();
        let r = validate_generator(&neg, &times).unwrap();
        assert!(!r.passed);
        assert!(r.violations.iter().any(|v| v.contains("negative off-diagonal")));
    }

    #[test]
    fn structural_errors() {
        assert!(Generator::constant(DMatrix::zeros(2, 3)).is_err());
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(Generator::constant(m), Err(Error::Structural(_))));
    }

    #[test]
    fn zero_rates_warn_and_never_jump() {
        let g = Generator::constant(DMatrix::zeros(2, 2)).unwrap();
        let r = validate_generator(&g, &[0.0]).unwrap();
        assert!(r.passed);
        assert!(!r.warnings.is_empty());
        let p = simulate_chain(&g, 0.0, 0, 1.0, 7).unwrap();
        assert_eq!(p.num_jumps(), 0);
        assert_eq!(p.regime_at(0.73), 0);
    }

    #[test]
    fn same_seed_same_path() {
        let g = sym2();
        let a = simulate_chain(&g, 0.0, 0, 5.0, 42).unwrap();
        let b = simulate_chain(&g, 0.0, 0, 5.0, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_chain(&g, 0.0, 0, 5.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn path_invariants() {
        let g = Generator::from_rows(&[&[-2.0, 1.0, 1.0], &[0.5, -1.0, 0.5], &[3.0, 0.0, -3.0]]).unwrap();
        for seed in 0..50 {
            let p = simulate_chain(&g, 0.0, 2, 3.0, seed).unwrap();
            assert_eq!(p.regime_at(0.0), 2);
            assert!(p.jump_times.windows(2).all(|w| w[0] < w[1]));
            assert!(p.jump_times.iter().all(|&t| t > 0.0 && t < 3.0));
            let mut prev = 2;
            for &j in &p.jump_targets {
                assert_ne!(j, prev);
                prev = j;
            }
        }
    }

    #[test]
    fn thinning_requires_positive_bound() {
        let g = Generator::table(vec![0.0, 1.0], vec![DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]); 2])
            .unwrap()
            .with_rate_bound(0.0);
        assert!(matches!(simulate_chain(&g, 0.0, 0, 1.0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn occupancy_at_zero_time_is_indicator() {
        let p = occupancy_reference(&sym2(), 0.3, 1, 0.3).unwrap();
        assert!((p[0]).abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn occupancy_closed_form() {
        // exp(tλ) for λ = [[-1,1],[1,-1]]: entry (0,0) = (1 + e^{-2t})/2
        let p = occupancy_reference(&sym2(), 0.0, 0, 0.5).unwrap();
        let want = 0.5 * (1.0 + (-1.0f64).exp());
        assert!((p[0] - want).abs() < 1e-12);
        assert!((p.sum() - 1.0).abs() < 1e-10);
        let far = occupancy_reference(&sym2(), 0.0, 0, 50.0).unwrap();
        assert!((far[0] - 0.5).abs() < 1e-10 && (far[1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn occupancy_rejects_tables() {
        let g = Generator::table(vec![0.0], vec![DMatrix::zeros(2, 2)]).unwrap();
        assert!(matches!(occupancy_reference(&g, 0.0, 0, 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn martingales_vanish_without_rates() {
        let g = Generator::constant(DMatrix::zeros(2, 2)).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let p = simulate_chain(&g, 0.0, 0, 1.0, 3).unwrap();
        let m = compensated_martingales(&p, &g, &grid);
        for j in 0..2 {
            assert!(m.counts[j].iter().all(|&x| x == 0.0));
            assert!(m.compensated[j].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn compensator_handles_jumps_exactly() {
        let g = sym2();
        let path = ChainPath {
            t0: 0.0,
            t_end: 1.0,
            initial_regime: 0,
            jump_times: vec![0.25],
            jump_targets: vec![1],
        };
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let m = compensated_martingales(&path, &g, &grid);
        // in regime 1 (0-based 0) until 0.25 → compensator of N_2 grows 0.25
        assert!((m.compensators[1][2] - 0.25).abs() < 1e-15);
        assert!((m.compensators[0][2] - 0.75).abs() < 1e-15);
        assert_eq!(m.counts[1][1], 1.0);
        assert_eq!(m.compensated[0][0], 0.0);
        assert!(m.counts[1].windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn pieces_cover_interval() {
        let path = ChainPath {
            t0: 0.0,
            t_end: 1.0,
            initial_regime: 0,
            jump_times: vec![0.2, 0.3],
            jump_targets: vec![1, 0],
        };
        let p = path.pieces(0.1, 0.4);
        assert_eq!(p, vec![(0, 0.1, 0.2), (1, 0.2, 0.3), (0, 0.3, 0.4)]);
        assert_eq!(path.regime_before(0.2), 0);
        assert_eq!(path.regime_at(0.2), 1);
    }
}
