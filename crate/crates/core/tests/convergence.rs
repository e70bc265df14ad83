//! Seeded simulation properties of the Gaussian setup.

use perfed_core::experiments::{
    paired_sign_test, run_replicates, sweep, AxisValue, GaussianExperimentSpec, Problem, ReplicateSummary,
    RunSettings, Scenario, ScheduleChoice, SchemeKind, SweepAxis,
};
use perfed_core::stats::spearman;

const GAMMA: f64 = 1600.0;

fn scenario(var_m: f64, var_eps: f64, horizon: u64) -> Scenario {
    let mut s = RunSettings::new(horizon);
    s.theta0 = Some(vec![90.0]);
    s.schedule = ScheduleChoice::Diminishing { beta: 40.0, gamma: GAMMA };
    s.record_every = Some(100);
    let problem = GaussianExperimentSpec { var_m, var_eps, ..GaussianExperimentSpec::homogeneous() };
    Scenario { problem: Problem::Gaussian(problem), settings: s }
}

fn seeds() -> Vec<u64> {
    (0..20).collect()
}

/// Window means of the seed-averaged curve on a geometric grid from `t_min`.
fn log_windows(r: &ReplicateSummary, t_min: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let t_max = *r.t.last().unwrap() as f64;
    let edges: Vec<f64> = (0..=n).map(|i| t_min * (t_max / t_min).powf(i as f64 / n as f64)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for w in edges.windows(2) {
        let vals: Vec<f64> = r
            .t
            .iter()
            .zip(&r.mean_dist_sq)
            .filter(|(t, _)| (**t as f64) >= w[0] && (**t as f64) < w[1])
            .map(|(_, d)| *d)
            .collect();
        if !vals.is_empty() {
            xs.push(w[0]);
            ys.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    (xs, ys)
}

#[test]
fn homogeneous_error_decreases_after_burn_in() {
    let p = scenario(0.0, 0.0, 200_000).prepare().unwrap();
    let r = run_replicates(&p, &seeds(), false).unwrap();
    assert!(r.failed.is_empty());
    let (x, y) = log_windows(&r, GAMMA, 25);
    let rho = spearman(&x, &y).unwrap();
    assert!(rho < -0.95, "spearman {rho}");
}

#[test]
fn longest_local_period_is_worst() {
    let mut base = scenario(0.6, 0.1, 20_000);
    base.settings.scheme = SchemeKind::Scheme1;
    base.settings.k = Some(20);
    let values = [1.0, 5.0, 10.0, 50.0].map(AxisValue::Number);
    let cells = sweep(&base, SweepAxis::Period, &values, &seeds()).unwrap();
    let finals: Vec<f64> = cells.iter().map(|c| c.result.as_ref().unwrap().1.last_decade_mean()).collect();
    let worst = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(finals[3], worst, "{finals:?}");
}

#[test]
fn sampling_without_replacement_beats_with_replacement() {
    let mut runs = Vec::new();
    for kind in [SchemeKind::Scheme1, SchemeKind::Scheme2] {
        let mut s = scenario(0.6, 0.1, 20_000);
        s.settings.scheme = kind;
        s.settings.k = Some(20);
        runs.push(run_replicates(&s.prepare().unwrap(), &seeds(), false).unwrap());
    }
    let test = paired_sign_test(&runs[1].per_seed_last_decade, &runs[0].per_seed_last_decade).unwrap();
    assert!(test.p_value < 0.1, "{test:?}");
}
