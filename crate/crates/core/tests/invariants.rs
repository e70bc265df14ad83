//! Property tests over generated populations and replicate summaries.

use perfed_core::experiments::{
    make_gaussian_population, run_replicates, GaussianExperimentSpec, Problem, RunSettings, Scenario,
    ScheduleChoice, WeightMode, MOMENT_TOL,
};
use perfed_core::model::LossModel;
use perfed_core::solution::{phi, solve_ps};
use proptest::prelude::*;

fn weighted_moments(x: &[f64], p: &[f64]) -> (f64, f64) {
    let m: f64 = x.iter().zip(p).map(|(v, w)| v * w).sum();
    (m, x.iter().zip(p).map(|(v, w)| w * (v - m).powi(2)).sum())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_moments_match_request(
        n in 2usize..40,
        m_bar in -20.0f64..20.0,
        var_m in 0.0f64..10.0,
        eps_bar in 0.05f64..0.95,
        rel in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        // Small enough that no sensitivity can be clipped at zero.
        let var_eps = (rel * eps_bar / (n as f64).sqrt()).powi(2);
        let spec = GaussianExperimentSpec {
            n, m_bar, var_m, eps_bar, var_eps, sigma: 1.0, weights: WeightMode::Uniform, seed, dim: 1,
        };
        let pop = make_gaussian_population(&spec).unwrap();
        let p = pop.weights();
        let m: Vec<f64> = pop.clients().iter().map(|c| c.shift.mean_at(&[0.0]).unwrap()[0]).collect();
        let e: Vec<f64> = pop.clients().iter().map(|c| c.shift.sensitivity()).collect();
        let (mm, vm) = weighted_moments(&m, &p);
        let (me, ve) = weighted_moments(&e, &p);
        let scale = 1.0 + m_bar.abs();
        prop_assert!((mm - m_bar).abs() <= MOMENT_TOL * scale);
        prop_assert!((vm - var_m).abs() <= MOMENT_TOL * (1.0 + var_m) * scale);
        prop_assert!((me - eps_bar).abs() <= MOMENT_TOL);
        prop_assert!((ve - var_eps).abs() <= MOMENT_TOL);
        prop_assert!(e.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn stable_point_is_a_fixed_point(
        n in 1usize..30,
        var_m in 0.0f64..5.0,
        eps_bar in 0.0f64..0.9,
        seed in any::<u64>(),
        alpha in 0.5f64..5.0,
    ) {
        let spec = GaussianExperimentSpec {
            n, m_bar: 3.0, var_m: if n > 1 { var_m } else { 0.0 }, eps_bar, var_eps: 0.0, sigma: 1.0,
            weights: WeightMode::Dirichlet { alpha }, seed, dim: 1,
        };
        let pop = make_gaussian_population(&spec).unwrap();
        let model = LossModel::quadratic();
        let ps = solve_ps(&pop, &model, &[0.0], 1e-12, 10_000).unwrap();
        let image = phi(&pop, &model, &ps.theta_ps.0, 1e-12).unwrap();
        prop_assert!((image.0[0] - ps.theta_ps.0[0]).abs() <= 1e-9);
        // Closed form for the affine Gaussian family: mean_bar / (1 - slope_bar).
        let closed = pop.mean_bar().unwrap()[0] / (1.0 - pop.slope_bar());
        prop_assert!((ps.theta_ps.0[0] - closed).abs() <= 1e-9 * (1.0 + closed.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn summary_ignores_seed_order(perm in Just((0u64..6).collect::<Vec<_>>()).prop_shuffle()) {
        let mut settings = RunSettings::new(300);
        settings.schedule = ScheduleChoice::Diminishing { beta: 40.0, gamma: 1600.0 };
        settings.theta0 = Some(vec![0.0]);
        let problem = GaussianExperimentSpec { var_m: 0.6, var_eps: 0.1, ..GaussianExperimentSpec::homogeneous() };
        let prepared = Scenario { problem: Problem::Gaussian(problem), settings }.prepare().unwrap();
        let sorted: Vec<u64> = (0..6).collect();
        let a = run_replicates(&prepared, &sorted, false).unwrap();
        let b = run_replicates(&prepared, &perm, false).unwrap();
        prop_assert_eq!(a.mean_dist_sq, b.mean_dist_sq);
        prop_assert_eq!(a.std_dist_sq, b.std_dist_sq);
        prop_assert_eq!(a.mean_loss, b.mean_loss);
    }
}
