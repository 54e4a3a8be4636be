use approx::assert_relative_eq;
use proptest::prelude::*;

use lsctl_core::config::LoadedConfig;
use lsctl_core::control::{Controller, ValueFunction};
use lsctl_core::hjb::{generator, solve_relaxation};
use lsctl_core::oracle::{solve_linear_bvp, solve_problem};
use lsctl_core::poly::{monomial_basis, Polynomial};
use lsctl_core::sdp::SolverSettings;
use lsctl_core::sim::mean_and_std_err;

fn poly_strategy(nvars: usize, max_degree: u32) -> impl Strategy<Value = Polynomial> {
    let basis = monomial_basis(nvars, max_degree);
    prop::collection::vec(prop_oneof![Just(0.0), -2.0f64..2.0], basis.len())
        .prop_map(move |coeffs| Polynomial::from_terms(nvars, basis.iter().cloned().zip(coeffs)))
}

fn point_strategy(nvars: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, nvars)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ring_axioms_hold_pointwise(
        p in poly_strategy(2, 4),
        q in poly_strategy(2, 4),
        r in poly_strategy(2, 3),
        x in point_strategy(2),
    ) {
        let pq = p.try_mul(&q).unwrap();
        prop_assert!(close(pq.eval(&x), p.eval(&x) * q.eval(&x)));
        let qp = q.try_mul(&p).unwrap();
        prop_assert!(pq.try_sub(&qp).unwrap().max_abs_coeff() <= 1e-12 * (1.0 + pq.max_abs_coeff()));
        let sum = p.try_add(&q).unwrap();
        prop_assert!(close(sum.eval(&x), p.eval(&x) + q.eval(&x)));
        let left = sum.try_mul(&r).unwrap();
        let right = p.try_mul(&r).unwrap().try_add(&q.try_mul(&r).unwrap()).unwrap();
        prop_assert!(close(left.eval(&x), right.eval(&x)));
        prop_assert!(p.try_sub(&p).unwrap().is_zero());
    }

    #[test]
    fn derivatives_match_finite_differences(p in poly_strategy(3, 6), x in point_strategy(3)) {
        let h = 1e-5;
        let grad = p.gradient().evaluate(&x).unwrap();
        for i in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (p.eval(&xp) - p.eval(&xm)) / (2.0 * h);
            prop_assert!((fd - grad[(i, 0)]).abs() < 1e-6, "d/dx{} fd {} exact {}", i, fd, grad[(i, 0)]);
        }
        let hess = p.hessian().evaluate(&x).unwrap();
        prop_assert!((&hess - hess.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn product_rule(p in poly_strategy(2, 4), q in poly_strategy(2, 4), x in point_strategy(2)) {
        let d = p.try_mul(&q).unwrap().differentiate(0).unwrap();
        let expected = p.differentiate(0).unwrap().eval(&x) * q.eval(&x)
            + p.eval(&x) * q.differentiate(0).unwrap().eval(&x);
        prop_assert!(close(d.eval(&x), expected));
    }

    #[test]
    fn parse_round_trips_through_display(p in poly_strategy(2, 4)) {
        let text = p.to_string_with(&["x", "y"]);
        let back = Polynomial::parse(&text, &["x", "y"]).unwrap();
        prop_assert!(p.try_sub(&back).unwrap().max_abs_coeff() <= 1e-12 * (1.0 + p.max_abs_coeff()));
    }

    #[test]
    fn discrete_maximum_principle(
        drift in poly_strategy(1, 3),
        cost in poly_strategy(1, 2),
        psi_a in 0.0f64..2.0,
        psi_b in 0.0f64..2.0,
    ) {
        // q = cost^2 >= 0, so the solution stays between 0 and the larger boundary value.
        let q = cost.try_mul(&cost).unwrap();
        let sigma = Polynomial::constant(1, 0.5);
        let grid = solve_linear_bvp(&drift, &sigma, &q, 1.0, (-1.0, 1.0), (psi_a, psi_b), 201).unwrap();
        let top = psi_a.max(psi_b);
        for v in &grid.values {
            prop_assert!(*v >= -1e-12 && *v <= top + 1e-12, "{} outside [0, {}]", v, top);
        }
    }

    #[test]
    fn std_err_is_sample_sd_over_sqrt_n(samples in prop::collection::vec(-10.0f64..10.0, 2..200)) {
        let n = samples.len() as f64;
        let (mean, se) = mean_and_std_err(&samples).unwrap();
        let m = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!(close(mean, m));
        prop_assert!((se - (var / n).sqrt()).abs() <= 1e-9 * (1.0 + se));
        let doubled: Vec<f64> = samples.iter().chain(samples.iter()).copied().collect();
        let (_, se2) = mean_and_std_err(&doubled).unwrap();
        prop_assert!(se2 <= se + 1e-12);
    }
}

const SCALAR: &str = r#"{
    "name": "scalar",
    "variables": ["x"],
    "drift": ["-x^3 + 5*x^2 + 3*x"],
    "input_gain": [["1"]],
    "noise_gain": [["1"]],
    "state_cost": "x^2",
    "control_penalty": [[1]],
    "noise_covariance": [[1]],
    "lambda": 1,
    "domain": {"generators": ["1 - x^2"], "boundary_factors": ["x + 1", "x - 1"], "bounds": [[-1, 1]]},
    "boundary": {"points": [{"x": [-1], "psi": "20*exp(-10)"}, {"x": [1], "psi": "20*exp(-10)"}]},
    "anchors": [{"x": [0], "psi": 1}],
    "partition_axis": 0,
    "hierarchy": {"min_degree": 8, "max_degree": 12}
}"#;

#[test]
fn controller_identity_and_sandwich_on_the_scalar_benchmark() {
    let config = LoadedConfig::from_json(SCALAR).unwrap().config;
    let settings = SolverSettings::default();
    for sub in config.subproblems().unwrap() {
        let oracle = solve_problem(&sub.problem, 2001).unwrap();
        let mut previous = f64::INFINITY;
        for degree in [8, 10, 12] {
            let rung = solve_relaxation(&sub.problem, degree, &settings).unwrap();
            let sol = rung.solution.expect("feasible rung");
            assert!(
                sol.epsilon <= previous + 1e-6,
                "{} d{degree}: {} after {previous}",
                sub.label,
                sol.epsilon
            );
            previous = sol.epsilon;
            for (x, star) in oracle.nodes() {
                let (l, u) = (sol.psi_l.eval(&[x]), sol.psi_u.eval(&[x]));
                assert!(
                    l <= star + 1e-4 && star <= u + 1e-4,
                    "{} d{degree} x={x}: {l} {star} {u}",
                    sub.label
                );
                assert!(u - l <= sol.epsilon + 1e-6);
            }

            // The subsolution inequality holds pointwise.
            let residual = generator(&sub.problem, &sol.psi_l)
                .unwrap()
                .try_sub(&sub.problem.q().try_mul(&sol.psi_l).unwrap())
                .unwrap();
            for (x, _) in oracle.nodes().step_by(50) {
                assert!(
                    residual.eval(&[x]) >= -1e-6,
                    "{} d{degree} x={x}",
                    sub.label
                );
            }

            let value = ValueFunction::new(sol.psi_l.clone(), 1.0).unwrap();
            let c = Controller::new(&sub.problem, value).unwrap();
            for (x, _) in oracle.nodes().step_by(97).filter(|(x, _)| x.abs() < 0.999) {
                let a = c.control_at(&[x]).unwrap();
                let b = c.control_from_value_gradient(&[x]).unwrap();
                assert_relative_eq!(a[0], b[0], epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }
}
