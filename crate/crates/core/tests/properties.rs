use nalgebra::DMatrix;
use proptest::prelude::*;
use regime_lq::chain::{sample_chain, stream_rng, validate_generator, Generator};
use regime_lq::linalg::{asymmetry, min_eigenvalue, pinv};
use regime_lq::problem::{MatrixProvider, ProblemSpec};
use regime_lq::riccati::solve_gre;
use regime_lq::TimeGrid;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

/// Product of two random factors, so rank deficiency shows up often.
fn low_rank() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..5, 1usize..5, 1usize..4)
        .prop_flat_map(|(r, c, k)| (matrix(r, k), matrix(k, c)))
        .prop_map(|(a, b)| a * b)
}

fn rates(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(0.0..3.0f64, d * d).prop_map(move |v| {
        let mut q = DMatrix::from_vec(d, d, v);
        for i in 0..d {
            q[(i, i)] = 0.0;
            q[(i, i)] = -q.row(i).sum();
        }
        q
    })
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, scale: f64) -> bool {
    (a - b).norm() <= 1e-9 * scale.max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pinv_satisfies_penrose_identities(m in low_rank()) {
        let p = pinv(&m, 1e-10);
        let scale = m.norm() * p.norm() * (1.0 + m.norm());
        prop_assert!(close(&(&m * &p * &m), &m, scale));
        prop_assert!(close(&(&p * &m * &p), &p, scale * p.norm()));
        prop_assert!(asymmetry(&(&m * &p)) <= 1e-9 * scale);
        prop_assert!(asymmetry(&(&p * &m)) <= 1e-9 * scale);
    }

    #[test]
    fn chain_paths_are_well_formed(q in rates(3), i0 in 0usize..3, seed in any::<u64>()) {
        let gen = Generator::constant(q).unwrap();
        let path = sample_chain(&gen, 0.0, i0, 2.0, &mut stream_rng(seed, 0)).unwrap();
        prop_assert_eq!(path.jump_times.len(), path.jump_targets.len());
        prop_assert!(path.jump_times.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(path.jump_times.iter().all(|&t| t > 0.0 && t <= 2.0));
        let mut from = i0;
        for (&t, &to) in path.jump_times.iter().zip(&path.jump_targets) {
            prop_assert!(to < 3 && to != from);
            prop_assert!(gen.rate(t, from, to) > 0.0);
            prop_assert_eq!(path.regime_at(t), to);
            from = to;
        }
        prop_assert_eq!(path.regime_at(2.0), from);
    }

    #[test]
    fn generator_validation_spots_bad_rows(q in rates(3), row in 0usize..3, bump in 0.1..1.0f64) {
        let gen = Generator::constant(q.clone()).unwrap();
        prop_assert!(validate_generator(&gen, &[0.0, 1.0]).unwrap().passed);
        let mut bad = q;
        bad[(row, row)] += bump;
        let rejected = match Generator::constant(bad) {
            Err(_) => true,
            Ok(g) => !validate_generator(&g, &[0.0, 1.0]).unwrap().passed,
        };
        prop_assert!(rejected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn convex_riccati_is_symmetric_and_nonnegative(
        a in matrix(2, 2), b in matrix(2, 2), c in matrix(2, 2), d in matrix(2, 2),
        lq in matrix(2, 2), lg in matrix(2, 2), q in rates(2),
    ) {
        let mut spec = ProblemSpec::zero(2, 2, Generator::constant(q).unwrap(), 1.0);
        spec.a = MatrixProvider::constant(a, 2);
        spec.b = MatrixProvider::constant(b, 2);
        spec.c = MatrixProvider::constant(c * 0.5, 2);
        spec.d = MatrixProvider::constant(d * 0.5, 2);
        spec.q_mat = MatrixProvider::constant(&lq * lq.transpose(), 2);
        spec.r_mat = MatrixProvider::constant(DMatrix::identity(2, 2), 2);
        spec.g_mat = vec![&lg * lg.transpose(); 2];
        let sol = solve_gre(&spec, &TimeGrid::new(0.0, 1.0, 200).unwrap()).unwrap();
        for p in sol.p.iter().flatten() {
            prop_assert!(asymmetry(p) <= 1e-10 * p.norm().max(1.0));
            prop_assert!(min_eigenvalue(p) >= -1e-8 * p.norm().max(1.0));
        }
    }
}
