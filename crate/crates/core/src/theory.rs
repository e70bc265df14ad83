//! Convergence constants, step-size rules and the bounds they imply.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decoupled_grad, dist_sq, LossModel, Population};

/// Relative slack for comparisons that hold with equality by construction.
pub const REL_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Full,
    Scheme1,
    Scheme2,
}

impl Mode {
    pub fn is_partial(self) -> bool {
        !matches!(self, Mode::Full)
    }
}

/// Problem-level constants. `sigma` and `varsigma` are the gradient-noise and
/// client-heterogeneity bounds; `d0` is `E|theta_bar^0 - theta_ps|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub mu: f64,
    pub l: f64,
    pub sigma: f64,
    pub varsigma: f64,
    pub delta: f64,
    pub eps_bar: f64,
    pub eps_max: f64,
    pub lz: Option<f64>,
    pub g: Option<f64>,
    pub d0: f64,
}

impl ProblemConstants {
    /// `mu - (1 + delta) eps_bar L`.
    pub fn mu_tilde(&self) -> f64 {
        self.mu - (1.0 + self.delta) * self.eps_bar * self.l
    }
}

/// Midpoint of the admissible interval `0 < delta < mu / (eps_bar L) - 1`.
pub fn default_delta(mu: f64, l: f64, eps_bar: f64) -> Option<f64> {
    let r = eps_bar * l;
    (r > 0.0 && r < mu).then(|| 0.5 * (mu / r - 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsBundle {
    pub inputs: ProblemConstants,
    pub e: u64,
    pub k: usize,
    pub n: usize,
    pub mu_tilde: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub eta_hat0: f64,
    pub eta_tilde0: f64,
    pub b: f64,
    pub b1: f64,
    pub b2: f64,
    /// The restated scheme-II variance factor `(N-K)/(K N (N-1))`, kept for
    /// comparison with `b2`.
    pub b2_alt: f64,
    pub c7: Option<f64>,
    pub c8: Option<f64>,
    pub c9: Option<f64>,
    pub gamma_full: f64,
    pub gamma_s1: f64,
    pub gamma_s2: f64,
    /// `(2/mu_tilde) sqrt(2E(2E+1)(12 sigma^2 + 18 L^2 (1+eps_max)^2))`,
    /// the expanded form of the third `gamma_full` candidate.
    pub gamma_full_sqrt_expanded: f64,
    pub upsilon_full: f64,
    pub upsilon_s1: f64,
    pub upsilon_s2: f64,
}

impl ConstantsBundle {
    pub fn beta(&self) -> f64 {
        2.0 / self.mu_tilde
    }

    pub fn gamma(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Full => self.gamma_full,
            Mode::Scheme1 => self.gamma_s1,
            Mode::Scheme2 => self.gamma_s2,
        }
    }

    pub fn upsilon(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Full => self.upsilon_full,
            Mode::Scheme1 => self.upsilon_s1,
            Mode::Scheme2 => self.upsilon_s2,
        }
    }

    /// Largest admissible initial step for `mode`.
    pub fn eta0_cap(&self, mode: Mode) -> f64 {
        if mode.is_partial() { self.eta_tilde0 } else { self.eta_hat0 }
    }
}

/// Evaluates every constant for aggregation period `e` and `k` of `n`
/// clients per round.
pub fn constants(pc: &ProblemConstants, e: u64, k: usize, n: usize) -> Result<ConstantsBundle> {
    if e == 0 {
        return Err(Error::invalid("aggregation period E must be >= 1"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("need 1 <= K <= N, got K = {k}, N = {n}")));
    }
    let mu_tilde = pc.mu_tilde();
    if !(mu_tilde > 0.0) {
        return Err(Error::NonContractiveRegime { mu_tilde });
    }
    if !(pc.delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    if !(pc.eps_bar > 0.0) {
        return Err(Error::invalid("eps_bar must be positive: c1 divides by delta * eps_bar"));
    }
    if !(pc.sigma > 0.0) {
        return Err(Error::invalid("sigma must be positive: the initial-step caps divide by sigma^2"));
    }
    if !(pc.d0 > 0.0) {
        return Err(Error::invalid("D0 must be positive: c4 divides by D0"));
    }
    if pc.varsigma < 0.0 || pc.l <= 0.0 {
        return Err(Error::invalid("need varsigma >= 0 and L > 0"));
    }

    let (sigma2, vs2) = (pc.sigma * pc.sigma, pc.varsigma * pc.varsigma);
    let lq = pc.l * pc.l * (1.0 + pc.eps_max).powi(2);
    let ef = e as f64;
    let kf = k as f64;
    let nf = n as f64;

    let c1 = pc.l * (1.0 + pc.eps_max).powi(2) / (2.0 * pc.delta * pc.eps_bar);
    let c2 = 4.0 * (sigma2 + lq);
    let c3 = 6.0 * (2.0 * sigma2 + 3.0 * lq);
    let c4 = 16.0 * sigma2 + 12.0 * vs2 + (8.0 * sigma2 + 12.0 * vs2) / pc.d0;
    let c5 = (48.0 * sigma2 + 36.0 * vs2) * pc.d0 + (24.0 * sigma2 + 36.0 * vs2);
    let c6 = (2.0 * ef * ef + 3.0 * ef + 1.0) * (ef + 1.0).ln();
    let full_factor = (2.0 * ef * ef - ef) * ef.ln();

    let eta_tilde0 = mu_tilde / (2.0 * sigma2 + (c1 * c3 + c2 / 6.0) * c4 * c6);
    let eta_hat0 = mu_tilde / (2.0 * sigma2 + (c1 * c3 + c2 / 6.0) * c4 * full_factor);

    let b = 2.0 * sigma2 + (4.0 * c1 * eta_hat0 + 4.0 * c2 * eta_hat0 * eta_hat0) * c5 * full_factor;
    let drift = 4.0 * c1 * eta_tilde0 + 4.0 * c2 * eta_tilde0 * eta_tilde0;
    let b1 = 2.0 * sigma2 + (drift + 1.0 / kf) * c5 * c6;
    let (v2, v2_alt) = if k == n {
        (0.0, 0.0)
    } else {
        ((nf - kf) / (kf * (nf - 1.0)), (nf - kf) / (kf * nf * (nf - 1.0)))
    };
    let b2 = 2.0 * sigma2 + (drift + v2) * c5 * c6;
    let b2_alt = 2.0 * sigma2 + (drift + v2_alt) * c5 * c6;

    let (c7, c8, c9) = match pc.g {
        Some(g) => {
            let g2 = g * g;
            (
                Some(4.0 * (ef - 1.0) * g2),
                Some(2.0 * sigma2 + 4.0 * ef * ef * g2 / kf),
                Some(2.0 * sigma2 + 4.0 * (nf - kf) * ef * ef * g2 / (kf * (nf - 1.0).max(1.0))),
            )
        }
        None => (None, None, None),
    };

    let two_over = 2.0 / mu_tilde;
    let gamma_full = (two_over / eta_hat0).max(ef).max(two_over * ((4.0 * ef * ef + 2.0 * ef) * c3).sqrt());
    let partial_window = 4.0 * ef * ef + 10.0 * ef + 6.0;
    let gamma_s1 = (two_over / eta_tilde0).max(ef).max(two_over * (partial_window * c3).sqrt());
    let gamma_s2 = (two_over / eta_tilde0).max(ef).max(two_over * (partial_window * c5).sqrt());
    let gamma_full_sqrt_expanded =
        two_over * (2.0 * ef * (2.0 * ef + 1.0) * (12.0 * sigma2 + 18.0 * lq)).sqrt();

    let mt2 = mu_tilde * mu_tilde;
    let upsilon_full = (4.0 * b / mt2).max(gamma_full * pc.d0);
    let upsilon_s1 = (4.0 * b1 / mt2).max(gamma_s1 * pc.d0);
    let upsilon_s2 = (4.0 * b2 / mt2).max(gamma_s2 * pc.d0);

    Ok(ConstantsBundle {
        inputs: pc.clone(),
        e,
        k,
        n,
        mu_tilde,
        c1,
        c2,
        c3,
        c4,
        c5,
        c6,
        eta_hat0,
        eta_tilde0,
        b,
        b1,
        b2,
        b2_alt,
        c7,
        c8,
        c9,
        gamma_full,
        gamma_s1,
        gamma_s2,
        gamma_full_sqrt_expanded,
        upsilon_full,
        upsilon_s1,
        upsilon_s2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepRule {
    /// `eta_t = beta / (t + gamma)`.
    Diminishing { beta: f64, gamma: f64 },
    Constant { eta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub rule: StepRule,
    /// Aggregation period `E`.
    pub period: u64,
    /// Set when the rule is the theorem schedule for this participation mode.
    pub theorem_mode: Option<Mode>,
}

impl ScheduleSpec {
    pub fn diminishing(beta: f64, gamma: f64, period: u64) -> Self {
        ScheduleSpec { rule: StepRule::Diminishing { beta, gamma }, period, theorem_mode: None }
    }

    pub fn constant(eta: f64, period: u64) -> Self {
        ScheduleSpec { rule: StepRule::Constant { eta }, period, theorem_mode: None }
    }

    /// `eta_t = 2 / (mu_tilde (t + gamma_mode))`.
    pub fn theorem(cb: &ConstantsBundle, mode: Mode) -> Self {
        ScheduleSpec {
            rule: StepRule::Diminishing { beta: cb.beta(), gamma: cb.gamma(mode) },
            period: cb.e,
            theorem_mode: Some(mode),
        }
    }
}

pub fn step_size(s: &ScheduleSpec, t: u64) -> f64 {
    match s.rule {
        StepRule::Diminishing { beta, gamma } => beta / (t as f64 + gamma),
        StepRule::Constant { eta } => eta,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionResult {
    pub name: &'static str,
    pub passed: bool,
    /// First step index at which the condition fails.
    pub first_failure: Option<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleReport {
    pub mode: Mode,
    pub conditions: Vec<ConditionResult>,
}

impl ScheduleReport {
    pub fn all_pass(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// Horizon cap for conditions checked step by step.
const SCAN_CAP: u64 = 1_000_000;

fn le(a: f64, b: f64) -> bool {
    a <= b * (1.0 + REL_SLACK)
}

/// Checks the step-size side conditions of the convergence theorems:
/// (a) non-increasing, (b) `eta_t <= 2 eta_{t+E}`, (c) the consensus window
/// condition `eta_t^2 <= 1 / (2 c3 k (1 + 2k))` with `k = t + 1 - t0`, and
/// (d) `eta_0` below the mode's initial-step cap.
pub fn validate_schedule(s: &ScheduleSpec, cb: &ConstantsBundle, mode: Mode, horizon: u64) -> ScheduleReport {
    let e = s.period.max(1);
    let scan = horizon.min(SCAN_CAP);
    let eta = |t: u64| step_size(s, t);

    let mut a_fail = None;
    for t in 0..scan {
        if eta(t + 1) > eta(t) {
            a_fail = Some(t);
            break;
        }
    }
    let a = ConditionResult {
        name: "non-increasing",
        passed: a_fail.is_none(),
        first_failure: a_fail,
        detail: format!("scanned t < {scan}"),
    };

    let mut b_fail = None;
    for t in 0..=scan {
        if !le(eta(t), 2.0 * eta(t + e)) {
            b_fail = Some(t);
            break;
        }
    }
    let b = ConditionResult {
        name: "period-ratio",
        passed: b_fail.is_none(),
        first_failure: b_fail,
        detail: format!("eta_t <= 2 eta_(t+{e}) for t <= {scan}"),
    };

    // Window values k repeat with period E; a non-increasing schedule is
    // tightest in the first period. Partial participation extends the window
    // by one step.
    let window_end = if mode.is_partial() { e } else { e - 1 };
    let c_end = if a.passed { window_end } else { scan.max(window_end) };
    let mut c_fail = None;
    let mut worst: f64 = 0.0;
    for t in 0..=c_end {
        let k = if mode.is_partial() && t <= window_end { t + 1 } else { t + 1 - e * (t / e) };
        let kf = k as f64;
        let cap = 1.0 / (2.0 * cb.c3 * kf * (1.0 + 2.0 * kf));
        let v = eta(t).powi(2);
        worst = worst.max(v / cap);
        if !le(v, cap) && c_fail.is_none() {
            c_fail = Some(t);
        }
    }
    let c = ConditionResult {
        name: "consensus-window",
        passed: c_fail.is_none(),
        first_failure: c_fail,
        detail: format!("max eta_t^2 / cap = {worst:.6e} over t <= {c_end}"),
    };

    let cap0 = cb.eta0_cap(mode);
    let d_ok = le(eta(0), cap0);
    let d = ConditionResult {
        name: "initial-step",
        passed: d_ok,
        first_failure: (!d_ok).then_some(0),
        detail: format!("eta_0 = {:.6e}, cap = {:.6e}", eta(0), cap0),
    };

    ScheduleReport { mode, conditions: vec![a, b, c, d] }
}

/// `upsilon / (gamma + t)`.
pub fn theoretical_bound(cb: &ConstantsBundle, mode: Mode, t: u64) -> f64 {
    cb.upsilon(mode) / (cb.gamma(mode) + t as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLemmaCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// `eta_1 < 2 / a`.
    pub first_step_ok: bool,
    /// `eta_j^p / eta_{j+1}^p <= 1 + (a/2) eta_{j+1}^p` for all `1 <= j <= t`.
    pub ratio_ok: bool,
}

/// Evaluates `sum_{j=1}^t eta_j^{p+1} prod_{l=j+1}^t (1 - a eta_l)` against
/// `(2/a) eta_t^p`.
pub fn step_lemma_check(s: &ScheduleSpec, a: f64, p: u32, t: u64) -> Result<StepLemmaCheck> {
    if !(1..=3).contains(&p) {
        return Err(Error::invalid(format!("power p must be 1, 2 or 3, got {p}")));
    }
    if t == 0 || !(a > 0.0) {
        return Err(Error::invalid("need t >= 1 and a > 0"));
    }
    let pi = p as i32;
    let eta = |j: u64| step_size(s, j);
    let mut lhs = 0.0;
    let mut prod = 1.0;
    for j in (1..=t).rev() {
        lhs += eta(j).powi(pi + 1) * prod;
        prod *= 1.0 - a * eta(j);
    }
    let rhs = 2.0 / a * eta(t).powi(pi);
    let first_step_ok = eta(1) < 2.0 / a;
    let ratio_ok = (1..=t).all(|j| {
        let next = eta(j + 1).powi(pi);
        eta(j).powi(pi) / next <= 1.0 + 0.5 * a * next
    });
    Ok(StepLemmaCheck { lhs, rhs, holds: le(lhs, rhs), first_step_ok, ratio_ok })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoClient {
    pub g1: f64,
    pub g2: f64,
    pub g: f64,
    pub theta_ps: f64,
    pub varsigma_ok: bool,
}

/// Two clients with `D_1(theta) = N(theta/2, s^2)`, `D_2(theta) = N(-theta/2, s^2)`,
/// equal weights and quadratic loss. Then `grad f_1(theta; theta) = theta/2`,
/// `grad f_2(theta; theta) = 3 theta/2`, their average is `theta`, the stable
/// point is 0, and the heterogeneity bound holds with `varsigma = 1/2`.
pub fn two_client_closed_forms(theta: f64) -> TwoClient {
    let g1 = theta - 0.5 * theta;
    let g2 = theta + 0.5 * theta;
    let g = 0.5 * (g1 + g2);
    let envelope = 0.25 * (1.0 + theta * theta);
    let varsigma_ok = le((g - g1).powi(2), envelope) && le((g - g2).powi(2), envelope);
    TwoClient { g1, g2, g, theta_ps: 0.0, varsigma_ok }
}

/// Constants for the reweighted objective `g_i = p_i N f_i`.
pub fn rescale_constants(pc: &ProblemConstants, p: &[f64]) -> Result<ProblemConstants> {
    if p.is_empty() || p.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("rescaling needs positive weights"));
    }
    let n = p.len() as f64;
    let q_max = n * p.iter().cloned().fold(f64::MIN, f64::max);
    let q_min = n * p.iter().cloned().fold(f64::MAX, f64::min);
    Ok(ProblemConstants {
        l: q_max * pc.l,
        mu: q_min * pc.mu,
        sigma: q_max.sqrt() * pc.sigma,
        varsigma: q_max.sqrt() * pc.varsigma,
        ..pc.clone()
    })
}

/// Estimates `varsigma` as the largest `|grad f - grad f_i|^2 / (1 + |theta - theta_ps|^2)`
/// over 1000 points along each coordinate axis through `theta_ps`, spanning
/// `+-10 (1 + |theta_ps|)`.
pub fn estimate_varsigma(pop: &Population, model: &LossModel, theta_ps: &[f64]) -> Result<f64> {
    const POINTS: usize = 1000;
    let spread = 10.0 * (1.0 + theta_ps.iter().map(|v| v * v).sum::<f64>().sqrt());
    let mut best: f64 = 0.0;
    let mut probe = theta_ps.to_vec();
    for j in 0..theta_ps.len() {
        for k in 0..POINTS {
            let u = -1.0 + 2.0 * k as f64 / (POINTS - 1) as f64;
            probe[j] = theta_ps[j] + u * spread;
            let grads: Vec<_> = pop
                .clients()
                .iter()
                .map(|c| decoupled_grad(model, &c.shift, &probe, &probe))
                .collect::<Result<_>>()?;
            let mut mean = vec![0.0; probe.len()];
            for (c, g) in pop.clients().iter().zip(&grads) {
                mean.iter_mut().zip(g.iter()).for_each(|(m, v)| *m += c.weight * v);
            }
            let denom = 1.0 + dist_sq(&probe, theta_ps);
            for g in &grads {
                best = best.max(dist_sq(&mean, g) / denom);
            }
        }
        probe[j] = theta_ps[j];
    }
    Ok(best.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pc(sigma: f64, eps_bar: f64, eps_max: f64, d0: f64) -> ProblemConstants {
        let delta = default_delta(1.0, 1.0, eps_bar).unwrap();
        ProblemConstants { mu: 1.0, l: 1.0, sigma, varsigma: 0.0, delta, eps_bar, eps_max, lz: None, g: None, d0 }
    }

    #[test]
    fn listed_constant_values() {
        let mut p = pc(1.0, 0.5, 1.0, 1.0);
        let cb = constants(&p, 1, 1, 1).unwrap();
        assert_eq!(cb.c2, 20.0);
        assert_eq!(cb.c3, 84.0);
        assert!((cb.c6 - 6.0 * 2f64.ln()).abs() < 1e-15);
        assert!((cb.c6 - 4.1589).abs() < 1e-4);
        p.delta = 1.5;
        assert!(matches!(constants(&p, 1, 1, 1), Err(Error::NonContractiveRegime { .. })));
    }

    #[test]
    fn default_delta_halves_the_margin() {
        let d = default_delta(1.0, 1.0, 0.9).unwrap();
        let p = ProblemConstants { delta: d, ..pc(1.0, 0.9, 0.9, 1.0) };
        assert!((p.mu_tilde() - 0.05).abs() < 1e-12);
        assert!(default_delta(1.0, 1.0, 1.0).is_none());
        assert!(default_delta(1.0, 1.0, 0.0).is_none());
    }

    #[test]
    fn unit_period_full_gamma() {
        // With E = 1 the log E factor vanishes: eta_hat0 = mu_tilde / (2 sigma^2)
        // and gamma_full = 4 sigma^2 / mu_tilde^2 = 1600.
        let cb = constants(&pc(1.0, 0.9, 0.9, 100.0), 1, 25, 25).unwrap();
        assert!((cb.eta_hat0 - 0.025).abs() < 1e-15);
        assert!((cb.gamma_full - 1600.0).abs() < 1e-9);
        assert!((cb.beta() - 40.0).abs() < 1e-12);
        assert_eq!(cb.b, 2.0);
        assert!((cb.upsilon_full - 160_000.0).abs() < 1e-6);
    }

    #[test]
    fn expanded_sqrt_form_coincides() {
        for e in [1, 2, 5, 10, 50] {
            let cb = constants(&pc(0.7, 0.6, 1.2, 3.0), e, 5, 25).unwrap();
            let ef = e as f64;
            let short = 2.0 / cb.mu_tilde * ((4.0 * ef * ef + 2.0 * ef) * cb.c3).sqrt();
            assert!((short - cb.gamma_full_sqrt_expanded).abs() <= 1e-12 * short);
        }
    }

    #[test]
    fn scheme_variance_ordering() {
        let cb = constants(&pc(1.0, 0.9, 1.0, 10.0), 5, 10, 25).unwrap();
        assert!(cb.b1 >= cb.b2);
        assert!(cb.b2 >= cb.b2_alt);
        let full = constants(&pc(1.0, 0.9, 1.0, 10.0), 5, 25, 25).unwrap();
        assert!(full.b1 > full.b2);
    }

    #[test]
    fn alternative_constants() {
        let p = ProblemConstants { g: Some(2.0), ..pc(1.0, 0.5, 0.5, 1.0) };
        let cb = constants(&p, 3, 4, 10).unwrap();
        assert_eq!(cb.c7, Some(32.0));
        assert_eq!(cb.c8, Some(2.0 + 4.0 * 9.0 * 4.0 / 4.0));
        assert!((cb.c9.unwrap() - (2.0 + 4.0 * 6.0 * 9.0 * 4.0 / (4.0 * 9.0))).abs() < 1e-12);
        assert!(constants(&pc(1.0, 0.5, 0.5, 1.0), 3, 4, 10).unwrap().c7.is_none());
    }

    #[test]
    fn step_size_values() {
        let s = ScheduleSpec::diminishing(2.0, 2.0, 1);
        assert_eq!(step_size(&s, 0), 1.0);
        assert_eq!(step_size(&s, 18), 0.1);
        let c = ScheduleSpec::constant(0.02, 5);
        assert_eq!(step_size(&c, 12_345), 0.02);
    }

    #[test]
    fn theorem_schedules_validate() {
        for e in [1, 2, 5, 10, 50] {
            let cb = constants(&pc(1.0, 0.9, 1.0, 100.0), e, 20, 25).unwrap();
            for mode in [Mode::Full, Mode::Scheme1, Mode::Scheme2] {
                let s = ScheduleSpec::theorem(&cb, mode);
                let rep = validate_schedule(&s, &cb, mode, 1_000_000);
                assert!(rep.all_pass(), "E={e} {mode:?}: {rep:?}");
            }
        }
    }

    #[test]
    fn small_gamma_fails_period_ratio_at_zero() {
        let cb = constants(&pc(1.0, 0.9, 1.0, 100.0), 10, 20, 25).unwrap();
        let s = ScheduleSpec::diminishing(1.0, 5.0, 10);
        let rep = validate_schedule(&s, &cb, Mode::Full, 1000);
        assert_eq!(rep.condition("period-ratio").unwrap().first_failure, Some(0));
    }

    #[test]
    fn constant_schedule_report() {
        let cb = constants(&pc(1.0, 0.9, 0.9, 100.0), 1, 25, 25).unwrap();
        let rep = validate_schedule(&ScheduleSpec::constant(0.02, 1), &cb, Mode::Full, 1000);
        assert!(rep.condition("non-increasing").unwrap().passed);
        // eta_hat0 = 0.025 at E = 1, so 0.02 is admissible initially.
        assert!(rep.condition("initial-step").unwrap().passed);
        let rep = validate_schedule(&ScheduleSpec::constant(0.05, 1), &cb, Mode::Full, 1000);
        assert!(!rep.condition("initial-step").unwrap().passed);
    }

    #[test]
    fn bound_properties() {
        let cb = constants(&pc(1.0, 0.9, 0.9, 100.0), 1, 25, 25).unwrap();
        assert!(theoretical_bound(&cb, Mode::Full, 0) >= 100.0 * (1.0 - 1e-12));
        let g = cb.gamma_full as u64;
        let ratio = theoretical_bound(&cb, Mode::Full, g) / theoretical_bound(&cb, Mode::Full, 3 * g);
        assert!((ratio - 2.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for t in (0..100_000).step_by(997) {
            let b = theoretical_bound(&cb, Mode::Full, t);
            assert!(b < prev);
            prev = b;
        }
    }

    #[test]
    fn step_lemma_single_term() {
        let s = ScheduleSpec::diminishing(1.0, 1.0, 1);
        let eta1: f64 = 0.5;
        for p in 1..=3 {
            let r = step_lemma_check(&s, 1.0, p, 1).unwrap();
            assert_eq!(r.lhs, eta1.powi(p as i32 + 1));
            assert_eq!(r.rhs, 2.0 * eta1.powi(p as i32));
            assert!(r.holds);
        }
        let r = step_lemma_check(&s, 10.0, 1, 1).unwrap();
        assert!(!r.first_step_ok);
        assert!(!r.holds);
    }

    #[test]
    fn step_lemma_matched_schedule() {
        let a = 0.5;
        let s = ScheduleSpec::diminishing(2.0 / a, 10.0, 1);
        assert!(step_lemma_check(&s, a, 1, 100).unwrap().holds);
    }

    #[test]
    fn two_client_values() {
        let ex = two_client_closed_forms(8.0);
        assert_eq!((ex.g1, ex.g2, ex.g, ex.theta_ps), (4.0, 12.0, 8.0, 0.0));
        assert!(ex.varsigma_ok);
        let z = two_client_closed_forms(0.0);
        assert_eq!((z.g1, z.g2, z.g), (0.0, 0.0, 0.0));
        assert!(two_client_closed_forms(1000.0).varsigma_ok);
    }

    #[test]
    fn rescaling() {
        let base = pc(1.0, 0.5, 0.5, 1.0);
        assert_eq!(rescale_constants(&base, &[0.25; 4]).unwrap(), base);
        let r = rescale_constants(&base, &[0.75, 0.25]).unwrap();
        assert_eq!(r.mu, 0.5);
        assert_eq!(r.l, 1.5);
        assert!((r.sigma - 1.5f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn constants_positive_and_reproducible(
            sigma in 0.1f64..3.0, eps_bar in 0.05f64..0.95, extra in 0.0f64..0.5,
            d0 in 0.01f64..1e4, varsigma in 0.0f64..2.0, e in 1u64..60, n in 1usize..40, kfrac in 0.0f64..1.0,
        ) {
            let k = ((kfrac * n as f64).ceil() as usize).clamp(1, n);
            let p = ProblemConstants { varsigma, ..pc(sigma, eps_bar, eps_bar + extra, d0) };
            let cb = constants(&p, e, k, n).unwrap();
            for v in [cb.c1, cb.c2, cb.c3, cb.c4, cb.c5, cb.c6, cb.b, cb.b1, cb.b2, cb.eta_hat0, cb.eta_tilde0] {
                prop_assert!(v.is_finite() && v > 0.0);
            }
            for m in [Mode::Full, Mode::Scheme1, Mode::Scheme2] {
                prop_assert!(cb.gamma(m) >= e as f64);
                prop_assert!(theoretical_bound(&cb, m, 0) >= p.d0 * (1.0 - REL_SLACK));
            }
            if k < n {
                prop_assert!(cb.b1 >= cb.b2);
            }
            let again = constants(&cb.inputs, cb.e, cb.k, cb.n).unwrap();
            prop_assert_eq!(again, cb);
        }
    }
}
