//! Property tests for the projection and the weight solver.

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use cate_forge::project_to_simplex;
use cate_forge::qp::{solve_regret_qp, GammaSystem, QpOptions};

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, len)
}

fn psd_strategy(s: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0..3.0f64, s * (s + 2)).prop_map(move |flat| {
        let b = Array2::from_shape_vec((s + 2, s), flat).unwrap();
        b.t().dot(&b) / (s + 2) as f64
    })
}

fn on_simplex(q: &Array1<f64>) -> bool {
    q.iter().all(|x| *x >= 0.0) && (q.sum() - 1.0).abs() < 1e-9
}

proptest! {
    #[test]
    fn projection_lands_on_simplex(v in vec_strategy(6)) {
        let q = project_to_simplex(&Array1::from(v)).unwrap();
        prop_assert!(on_simplex(&q));
    }

    #[test]
    fn projection_is_idempotent(v in vec_strategy(5)) {
        let q = project_to_simplex(&Array1::from(v)).unwrap();
        let q2 = project_to_simplex(&q).unwrap();
        for (a, b) in q.iter().zip(q2.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_nonexpansive(v in vec_strategy(4), w in vec_strategy(4)) {
        let v = Array1::from(v);
        let w = Array1::from(w);
        let pv = project_to_simplex(&v).unwrap();
        let pw = project_to_simplex(&w).unwrap();
        let d_in: f64 = (&v - &w).iter().map(|x| x * x).sum();
        let d_out: f64 = (&pv - &pw).iter().map(|x| x * x).sum();
        prop_assert!(d_out <= d_in + 1e-9);
    }

    #[test]
    fn projection_fixes_simplex_points(v in prop::collection::vec(0.01..1.0f64, 5)) {
        let total: f64 = v.iter().sum();
        let q = Array1::from_iter(v.iter().map(|x| x / total));
        let p = project_to_simplex(&q).unwrap();
        for (a, b) in q.iter().zip(p.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn solver_output_is_feasible_and_certified(gamma in psd_strategy(3)) {
        let system = GammaSystem::new(gamma).unwrap();
        let sol = solve_regret_qp(&system, &QpOptions::default()).unwrap();
        prop_assert!(on_simplex(&sol.weights));
        prop_assert!(sol.converged);
        let r_star = sol.worst_case_regret;
        prop_assert!(sol.kkt_residual <= 1e-6 * (1.0 + r_star));
        // No site (adversary vertex) beats the reported worst case.
        for r in system.per_site_regret(&sol.weights) {
            prop_assert!(r <= r_star + 1e-6 * (1.0 + r_star));
        }
    }

    #[test]
    fn solver_is_permutation_equivariant(gamma in psd_strategy(3)) {
        let system = GammaSystem::new(gamma.clone()).unwrap();
        let sol = solve_regret_qp(&system, &QpOptions::default()).unwrap();
        // Reverse the site order.
        let s = gamma.nrows();
        let mut permuted = Array2::zeros((s, s));
        for i in 0..s {
            for j in 0..s {
                permuted[[i, j]] = gamma[[s - 1 - i, s - 1 - j]];
            }
        }
        let psys = GammaSystem::new(permuted).unwrap();
        let psol = solve_regret_qp(&psys, &QpOptions::default()).unwrap();
        prop_assert!((sol.objective - psol.objective).abs() < 1e-7);
        for i in 0..s {
            prop_assert!((sol.weights[i] - psol.weights[s - 1 - i]).abs() < 1e-5);
        }
    }
}
