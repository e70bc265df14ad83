//! Sampling-based checks of the distribution maps and risk evaluators.

use perfed_core::model::{decoupled_risk, decoupled_risk_mc, Client, LossModel, Population, RiskEval, ShiftMap};
use perfed_core::rng::{CounterRng, Domain};
use perfed_core::solution::{performative_risk, performative_risk_mc};
use perfed_core::stats::Welford;

/// Two-sample Kolmogorov-Smirnov p-value via the asymptotic distribution.
fn ks_p_value(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    let q: f64 = (1..=100).map(|k| {
        let k = k as f64;
        2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
    }).sum();
    q.clamp(0.0, 1.0)
}

fn draws(shift: &ShiftMap, theta: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = CounterRng::for_stream(seed, Domain::MonteCarlo, 0, 0);
    (0..n).map(|_| shift.sample(&[theta], &mut rng).features[0]).collect()
}

#[test]
fn static_map_ignores_deployment() {
    let shift = ShiftMap::affine_gaussian(vec![1.0], 0.0, 1.0).unwrap();
    let p = ks_p_value(draws(&shift, 0.0, 10_000, 1), draws(&shift, 50.0, 10_000, 2));
    assert!(p > 0.01, "KS p-value {p}");
}

#[test]
fn ks_detects_a_moving_map() {
    let shift = ShiftMap::affine_gaussian(vec![1.0], 0.9, 1.0).unwrap();
    let p = ks_p_value(draws(&shift, 0.0, 10_000, 1), draws(&shift, 0.5, 10_000, 2));
    assert!(p < 1e-6, "KS p-value {p}");
}

#[test]
fn gaussian_sample_mean_at_theta_ten() {
    let shift = ShiftMap::affine_gaussian(vec![1.0], 0.9, 1.0).unwrap();
    let n = 100_000;
    let mut w = Welford::default();
    draws(&shift, 10.0, n, 3).into_iter().for_each(|x| w.push(x));
    assert!((w.mean() - 10.0).abs() <= 4.0 / (n as f64).sqrt());
}

#[test]
fn million_sample_risk_matches_closed_form() {
    let model = LossModel::quadratic();
    let shift = ShiftMap::affine_gaussian(vec![1.7, -0.4], 0.6, 1.3).unwrap();
    let (theta, tilde) = ([0.8, 2.1], [-1.5, 0.3]);
    let exact = decoupled_risk(&model, &shift, &theta, &tilde, RiskEval::Exact).unwrap();
    let (mc, se) = decoupled_risk_mc(&model, &shift, &theta, &tilde, 1_000_000, 7, 0).unwrap();
    assert!((mc - exact).abs() <= 1e-2, "mc {mc} exact {exact}");
    assert!((mc - exact).abs() <= 4.0 * se);
}

#[test]
fn performative_risk_mc_within_three_se() {
    let model = LossModel::quadratic();
    let clients = vec![
        Client { weight: 0.3, shift: ShiftMap::affine_gaussian(vec![2.0], 0.4, 1.0).unwrap() },
        Client { weight: 0.7, shift: ShiftMap::affine_gaussian(vec![-1.0], 0.8, 0.5).unwrap() },
    ];
    let pop = Population::new(clients).unwrap();
    let exact = performative_risk(&pop, &model, &[1.5], RiskEval::Exact).unwrap();
    let (mc, se) = performative_risk_mc(&pop, &model, &[1.5], 200_000, 21).unwrap();
    assert!((mc - exact).abs() <= 3.0 * se, "mc {mc} +- {se}, exact {exact}");
}
