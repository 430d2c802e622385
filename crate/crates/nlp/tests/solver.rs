use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use impest_nlp::check::{check_derivatives, CompiledProblem};
use impest_nlp::{solve, Constraint, CscMatrix, Expr, Initialization, Ldl, QcqpProblem, SolveStatus, SolverOptions};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

/// min x y  s.t. x + y = 2, 0 <= x, y <= 2.
fn bilinear(x0: f64) -> QcqpProblem {
    let mut p = QcqpProblem::default();
    let x = p.add_variable(0.0, 2.0, x0);
    let y = p.add_variable(0.0, 2.0, 2.0 - x0);
    let mut obj = Expr::new();
    obj.add_quadratic(x, y, 1.0);
    p.objective = obj;
    let mut c = Expr::var(x);
    c.add_linear(y, 1.0);
    p.add_constraint(Constraint::equal(c, 2.0));
    p
}

/// min Σ (x_i - c_i)²  s.t. Σ x_i = s, free variables.
fn projection(c: &[f64], s: f64) -> QcqpProblem {
    let mut p = QcqpProblem::default();
    let mut obj = Expr::new();
    let mut sum = Expr::new();
    for &ci in c {
        let i = p.add_variable(f64::NEG_INFINITY, f64::INFINITY, 0.0);
        obj.add_quadratic(i, i, 1.0).add_linear(i, -2.0 * ci).add_constant(ci * ci);
        sum.add_linear(i, 1.0);
    }
    p.objective = obj;
    p.add_constraint(Constraint::equal(sum, s));
    p
}

fn random_qcqp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QcqpProblem {
    let mut p = QcqpProblem::default();
    for _ in 0..n {
        p.add_variable(-5.0, 5.0, rng.random_range(-1.0..1.0));
    }
    let expr = |rng: &mut ChaCha8Rng| {
        let mut e = Expr::new();
        for _ in 0..3 {
            e.add_linear(rng.random_range(0..n), rng.random_range(-3.0..3.0));
            e.add_quadratic(rng.random_range(0..n), rng.random_range(0..n), rng.random_range(-3.0..3.0));
        }
        e.add_constant(rng.random_range(-1.0..1.0));
        e
    };
    p.objective = expr(rng);
    for _ in 0..m {
        let e = expr(rng);
        p.add_constraint(Constraint::at_most(e, 1.0));
    }
    p
}

proptest! {
    #![proptest_config(config(32))]

    #[test]
    fn bilinear_reaches_a_stationary_point(x0 in 0.05f64..1.95) {
        let out = solve(&bilinear(x0), &SolverOptions::default()).unwrap();
        prop_assert_eq!(out.status, SolveStatus::OptimalLocal);
        let (x, y) = (out.point[0], out.point[1]);
        prop_assert!((x + y - 2.0).abs() < 1e-7);
        let near = |a: f64, b: f64| (x - a).abs() < 1e-4 && (y - b).abs() < 1e-4;
        prop_assert!(near(0.0, 2.0) || near(2.0, 0.0) || near(1.0, 1.0), "{} {}", x, y);
    }

    #[test]
    fn projection_matches_closed_form(c in prop::collection::vec(-10.0f64..10.0, 1..12), s in -20.0f64..20.0) {
        let out = solve(&projection(&c, s), &SolverOptions::default()).unwrap();
        prop_assert_eq!(out.status, SolveStatus::OptimalLocal);
        let shift = (s - c.iter().sum::<f64>()) / c.len() as f64;
        for (xi, ci) in out.point.iter().zip(&c) {
            prop_assert!((xi - ci - shift).abs() < 1e-6);
        }
    }

    #[test]
    fn warm_start_is_never_worse(c in prop::collection::vec(-10.0f64..10.0, 1..12), s in -20.0f64..20.0) {
        let p = projection(&c, s);
        let cold = solve(&p, &SolverOptions::default()).unwrap();
        let warm = solve(&p, &SolverOptions { initialization: Initialization::WarmStart(cold.point.clone()), ..SolverOptions::default() }).unwrap();
        prop_assert_eq!(warm.status, SolveStatus::OptimalLocal);
        prop_assert!(warm.objective <= cold.objective + 1e-8 * (1.0 + cold.objective.abs()));
        prop_assert!(warm.iterations <= cold.iterations);
    }

    #[test]
    fn analytic_derivatives_match_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_qcqp(&mut rng, 6, 4);
        let d = CompiledProblem::new(&p);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
        let r = check_derivatives(&d, &x, 1e-5);
        prop_assert!(r.max_error() < 1e-7, "{:?}", r);
    }

    #[test]
    fn quasi_definite_solves_have_small_residual(seed in any::<u64>(), n in 1usize..15, m in 0usize..10) {
        // [H + n I, Jᵀ; J, -I] is quasi-definite with inertia (n, m, 0)
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, n as f64 + rng.random_range(0.0..1.0)));
            for j in i + 1..n {
                if rng.random_bool(0.3) {
                    t.push((i, j, rng.random_range(-1.0..1.0)));
                }
            }
        }
        for r in 0..m {
            for j in 0..n {
                if rng.random_bool(0.4) {
                    t.push((j, n + r, rng.random_range(-2.0..2.0)));
                }
            }
            t.push((n + r, n + r, -1.0));
        }
        let dim = n + m;
        let a = CscMatrix::from_triplets(dim, dim, &t);
        let mut ldl = Ldl::analyze(&a);
        let inertia = ldl.factor(&a.values).unwrap();
        prop_assert_eq!((inertia.positive, inertia.negative, inertia.zero), (n, m, 0));
        let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x = b.clone();
        ldl.solve(&mut x);
        let mut ax = vec![0.0; dim];
        a.sym_upper_mul_add(&x, &mut ax);
        let res = ax.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(res < 1e-10, "{}", res);
    }
}

#[test]
fn warm_start_of_wrong_length_is_rejected() {
    let p = bilinear(0.5);
    let opts = SolverOptions { initialization: Initialization::WarmStart(vec![1.0]), ..SolverOptions::default() };
    assert!(solve(&p, &opts).is_err());
}
