//! Performatively stable and performatively optimal points.
//!
//! The repeated-risk map `Phi(theta) = argmin_{theta'} sum_i p_i f_i(theta'; theta)`
//! has a closed form for quadratic loss under affine Gaussian shifts. For
//! finite-support shifts the inner problem is solved to a gradient-norm
//! tolerance with a line-searched descent method on the frozen objective.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    decoupled_risk, decoupled_risk_mc, dist_sq, LossModel, Population, RiskEval, Sample, ShiftMap, Theta,
};

/// Default fixed-point tolerance for closed-form populations.
pub const PS_TOL_CLOSED_FORM: f64 = 1e-10;
/// Default fixed-point tolerance for general populations.
pub const PS_TOL_GENERAL: f64 = 1e-6;
/// Default tolerance for the performative-optimum search.
pub const PO_TOL: f64 = 1e-6;

/// How `solve_ps` decides whether fixed-point iteration may be attempted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContractionGate {
    /// Refuse unless `eps_bar * L / mu < 1`.
    Analytic,
    /// Iterate regardless and fail only if the residuals keep growing. The
    /// analytic ratio is a worst-case bound and is far above one for the
    /// logistic model even when the iteration contracts.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerMethod {
    /// Newton direction with Armijo backtracking.
    Newton,
    /// Steepest descent with Armijo backtracking.
    GradientDescent,
}

#[derive(Debug, Clone, Copy)]
pub struct PhiOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub method: InnerMethod,
}

impl Default for PhiOptions {
    fn default() -> Self {
        PhiOptions { tol: 1e-8, max_iter: 100_000, method: InnerMethod::Newton }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PsOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub gate: ContractionGate,
    pub inner: PhiOptions,
}

impl PsOptions {
    /// Defaults matched to the population: tight tolerance when `Phi` is exact.
    pub fn for_population(pop: &Population, model: &LossModel) -> Self {
        let tol = if pop.is_gaussian_quadratic(model) { PS_TOL_CLOSED_FORM } else { PS_TOL_GENERAL };
        PsOptions { tol, max_iter: 10_000, gate: ContractionGate::Analytic, inner: PhiOptions::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PSResult {
    pub theta_ps: Theta,
    pub iterations: usize,
    /// `|Phi(theta_ps) - theta_ps|`.
    pub residual: f64,
    /// Largest observed ratio of successive step lengths.
    pub contraction_estimate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoMethod {
    ClosedForm,
    GridRefine,
}

#[derive(Debug, Clone, Serialize)]
pub struct POResult {
    pub theta_po: Theta,
    pub risk_at_po: f64,
    pub method: PoMethod,
    /// The minimiser sits on (or beyond) the search-box boundary.
    pub boundary: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct PoOptions {
    pub tol: f64,
    pub grid_points: usize,
    pub sweeps: usize,
}

impl Default for PoOptions {
    fn default() -> Self {
        PoOptions { tol: PO_TOL, grid_points: 101, sweeps: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapCheck {
    pub gap: f64,
    pub bound: f64,
    pub holds: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `eps_bar * L / mu` for the population under `model`.
pub fn contraction_ratio(pop: &Population, model: &LossModel) -> f64 {
    pop.eps_bar() * model.smoothness() / model.mu()
}

/// `theta' -> sum_i p_i f_i(theta'; theta)` with every distribution frozen.
struct FrozenObjective<'a> {
    model: &'a LossModel,
    parts: Vec<(f64, Vec<Sample>)>,
    dim: usize,
}

impl<'a> FrozenObjective<'a> {
    fn new(pop: &Population, model: &'a LossModel, theta: &[f64]) -> Result<Self> {
        let mut parts = Vec::with_capacity(pop.len());
        for c in pop.clients() {
            let support = c.shift.support(theta).ok_or_else(|| {
                Error::Unsupported(
                    "repeated risk minimisation needs closed-form or finite-support shifts".into(),
                )
            })?;
            let w = c.weight / support.len() as f64;
            parts.push((w, support));
        }
        Ok(FrozenObjective { model, parts, dim: theta.len() })
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (w, support) in &self.parts {
            let mut s = 0.0;
            for z in support {
                s += self.model.loss(x, z)?;
            }
            acc += w * s;
        }
        Ok(acc)
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut g = vec![0.0; self.dim];
        for (w, support) in &self.parts {
            for z in support {
                self.model.grad_into(x, z, &mut g)?;
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += w * v);
            }
        }
        Ok(acc)
    }

    fn hessian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = vec![0.0; self.dim * self.dim];
        for (w, support) in &self.parts {
            for z in support {
                self.model.add_hessian(x, z, *w, &mut h)?;
            }
        }
        Ok(h)
    }

    /// Minimises from `start` until the gradient norm is at most `opts.tol`.
    fn minimize(&self, start: &[f64], opts: &PhiOptions) -> Result<Theta> {
        let mut x = start.to_vec();
        let mut fx = self.value(&x)?;
        let mut g = self.grad(&x)?;
        let mut step: f64 = 1.0;
        for it in 0..opts.max_iter {
            let gn = norm(&g);
            if gn <= opts.tol {
                return Ok(Theta(x));
            }
            let dir = match opts.method {
                InnerMethod::Newton => {
                    let h = DMatrix::from_row_slice(self.dim, self.dim, &self.hessian(&x)?);
                    match h.cholesky() {
                        Some(ch) => ch.solve(&DVector::from_column_slice(&g)).as_slice().to_vec(),
                        None => g.clone(),
                    }
                }
                InnerMethod::GradientDescent => g.clone(),
            };
            let slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
            let mut t = match opts.method {
                InnerMethod::Newton => 1.0,
                InnerMethod::GradientDescent => (step * 2.0).min(1e6),
            };
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, d)| xi - t * d).collect();
                let ft = self.value(&trial)?;
                if ft <= fx - 1e-4 * t * slope {
                    x = trial;
                    fx = ft;
                    accepted = true;
                    break;
                }
                // Near the optimum the decrease can drown in rounding; accept
                // a step that still shrinks the gradient.
                if ft <= fx + 1e-14 * fx.abs() {
                    let gt = self.grad(&trial)?;
                    if norm(&gt) < gn {
                        x = trial;
                        fx = ft;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                return Err(Error::Convergence { iterations: it, residual: gn, last: Theta(x) });
            }
            step = t;
            g = self.grad(&x)?;
            if !fx.is_finite() {
                return Err(Error::Convergence { iterations: it, residual: f64::NAN, last: Theta(x) });
            }
        }
        let residual = norm(&g);
        Err(Error::Convergence { iterations: opts.max_iter, residual, last: Theta(x) })
    }
}

/// Closed-form `Phi(theta) = eps_bar theta + m_bar` (signed slopes) when available.
fn phi_closed_form(pop: &Population, model: &LossModel, theta: &[f64]) -> Option<Theta> {
    if !pop.is_gaussian_quadratic(model) {
        return None;
    }
    let m = pop.mean_bar()?;
    let s = pop.slope_bar();
    Some(Theta(theta.iter().zip(&m).map(|(t, mb)| s * t + mb).collect()))
}

/// The repeated-risk-minimisation map with inner gradient tolerance `tol`.
pub fn phi(pop: &Population, model: &LossModel, theta: &[f64], tol: f64) -> Result<Theta> {
    phi_with(pop, model, theta, &PhiOptions { tol, ..PhiOptions::default() })
}

pub fn phi_with(pop: &Population, model: &LossModel, theta: &[f64], opts: &PhiOptions) -> Result<Theta> {
    if theta.len() != pop.dim() {
        return Err(Error::DimensionMismatch { expected: pop.dim(), actual: theta.len() });
    }
    if model.mu() <= 0.0 {
        return Err(Error::invalid("repeated risk minimisation needs mu > 0"));
    }
    if let Some(t) = phi_closed_form(pop, model, theta) {
        return Ok(t);
    }
    FrozenObjective::new(pop, model, theta)?.minimize(theta, opts)
}

/// Fixed-point iteration of `Phi` with the analytic contraction gate.
pub fn solve_ps(
    pop: &Population,
    model: &LossModel,
    theta0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<PSResult> {
    let opts = PsOptions { tol, max_iter, ..PsOptions::for_population(pop, model) };
    solve_ps_with(pop, model, theta0, &opts)
}

pub fn solve_ps_with(
    pop: &Population,
    model: &LossModel,
    theta0: &[f64],
    opts: &PsOptions,
) -> Result<PSResult> {
    if opts.gate == ContractionGate::Analytic {
        let ratio = contraction_ratio(pop, model);
        if !(ratio < 1.0) {
            return Err(Error::NonContraction { ratio });
        }
    }
    let mut theta = Theta(theta0.to_vec());
    let mut prev_step: Option<f64> = None;
    let mut estimate: f64 = 0.0;
    let mut growth_run = 0;
    for it in 0..opts.max_iter {
        let next = phi_with(pop, model, &theta, &opts.inner)?;
        let r = dist_sq(&next, &theta).sqrt();
        if !r.is_finite() {
            return Err(Error::NonContraction { ratio: f64::INFINITY });
        }
        if r <= opts.tol {
            return Ok(PSResult { theta_ps: theta, iterations: it, residual: r, contraction_estimate: estimate });
        }
        if let Some(p) = prev_step {
            // Ratios of steps near the tolerance floor are rounding noise.
            if p > 1e3 * opts.tol {
                estimate = estimate.max(r / p);
            }
            if r > p {
                growth_run += 1;
                if growth_run >= 20 {
                    return Err(Error::NonContraction { ratio: r / p });
                }
            } else {
                growth_run = 0;
            }
        }
        prev_step = Some(r);
        theta = next;
    }
    let residual = dist_sq(&phi_with(pop, model, &theta, &opts.inner)?, &theta).sqrt();
    Err(Error::Convergence { iterations: opts.max_iter, residual, last: theta })
}

/// Magnitudes `|Phi^t(theta0)|` for `t = 0..=steps` in the regime where the
/// iteration is not guaranteed to contract.
pub fn divergence_demo(pop: &Population, model: &LossModel, theta0: &[f64], steps: usize) -> Result<Vec<f64>> {
    if pop.eps_bar() < model.mu() / model.smoothness() {
        return Err(Error::invalid(format!(
            "divergence demo needs eps_bar >= mu / L, got eps_bar = {}",
            pop.eps_bar()
        )));
    }
    if let Some(m) = pop.mean_bar() {
        if pop.is_gaussian_quadratic(model) && m.iter().all(|v| *v == 0.0) {
            return Err(Error::invalid("divergence demo needs a non-zero mean"));
        }
    }
    let mut out = Vec::with_capacity(steps + 1);
    let mut theta = Theta(theta0.to_vec());
    out.push(theta.norm());
    let opts = PhiOptions::default();
    for _ in 0..steps {
        theta = phi_with(pop, model, &theta, &opts)?;
        out.push(theta.norm());
    }
    Ok(out)
}

/// `sum_i p_i E_{Z ~ D_i(theta)} l(theta; Z)`. Monte Carlo evaluation gives
/// client `i` the stream `(seed, MonteCarlo, i)`.
pub fn performative_risk(pop: &Population, model: &LossModel, theta: &[f64], eval: RiskEval) -> Result<f64> {
    match eval {
        RiskEval::Exact => {
            let mut acc = 0.0;
            for c in pop.clients() {
                acc += c.weight * decoupled_risk(model, &c.shift, theta, theta, RiskEval::Exact)?;
            }
            Ok(acc)
        }
        RiskEval::MonteCarlo { samples, seed } => {
            performative_risk_mc(pop, model, theta, samples, seed).map(|(m, _)| m)
        }
    }
}

/// Monte Carlo performative risk and its standard error.
pub fn performative_risk_mc(
    pop: &Population,
    model: &LossModel,
    theta: &[f64],
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let (mut mean, mut var) = (0.0, 0.0);
    for (i, c) in pop.clients().iter().enumerate() {
        let (m, se) = decoupled_risk_mc(model, &c.shift, theta, theta, samples, seed, i as u64)?;
        mean += c.weight * m;
        var += c.weight * c.weight * se * se;
    }
    Ok((mean, var.sqrt()))
}

fn check_box(pop: &Population, search_box: &[(f64, f64)]) -> Result<()> {
    if search_box.len() != pop.dim() {
        return Err(Error::DimensionMismatch { expected: pop.dim(), actual: search_box.len() });
    }
    for (j, &(lo, hi)) in search_box.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("search box coordinate {j} is not a finite interval")));
        }
    }
    Ok(())
}

/// Minimiser of the performative risk: closed form when available, grid
/// search with golden-section refinement otherwise.
pub fn solve_po(pop: &Population, model: &LossModel, search_box: &[(f64, f64)], tol: f64) -> Result<POResult> {
    check_box(pop, search_box)?;
    if pop.is_gaussian_quadratic(model) {
        // Per coordinate: sum_i p_i (1 - eps_i) m_i / sum_i p_i (1 - eps_i)^2.
        let dim = pop.dim();
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        for c in pop.clients() {
            if let ShiftMap::AffineGaussian { base_mean, .. } = &c.shift {
                let a = 1.0 - c.shift.slope();
                den += c.weight * a * a;
                num.iter_mut().zip(base_mean).for_each(|(n, m)| *n += c.weight * a * m);
            }
        }
        if den == 0.0 {
            return Err(Error::invalid("performative risk is flat in theta; no unique optimum"));
        }
        let theta = Theta(num.into_iter().map(|n| n / den).collect());
        let boundary = theta.iter().zip(search_box).any(|(t, (lo, hi))| t <= lo || t >= hi);
        let risk_at_po = performative_risk(pop, model, &theta, RiskEval::Exact)?;
        return Ok(POResult { theta_po: theta, risk_at_po, method: PoMethod::ClosedForm, boundary });
    }
    solve_po_grid(pop, model, search_box, &PoOptions { tol, ..PoOptions::default() })
}

/// Coordinate descent: a coarse grid per coordinate, then golden-section
/// refinement inside the bracketing cells. The risk is evaluated exactly
/// (closed form or finite sums), so the objective is deterministic.
pub fn solve_po_grid(
    pop: &Population,
    model: &LossModel,
    search_box: &[(f64, f64)],
    opts: &PoOptions,
) -> Result<POResult> {
    check_box(pop, search_box)?;
    if opts.grid_points < 3 || opts.sweeps == 0 || !(opts.tol > 0.0) {
        return Err(Error::invalid("grid search needs >= 3 grid points, >= 1 sweep and tol > 0"));
    }
    let risk = |t: &[f64]| performative_risk(pop, model, t, RiskEval::Exact);
    let mut theta: Vec<f64> = search_box.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    let mut boundary = false;
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    for sweep in 0..opts.sweeps {
        let last_sweep = sweep + 1 == opts.sweeps;
        for j in 0..theta.len() {
            let (lo, hi) = search_box[j];
            let h = (hi - lo) / (opts.grid_points - 1) as f64;
            let mut probe = theta.clone();
            let mut eval = |x: f64| -> Result<f64> {
                probe[j] = x;
                risk(&probe)
            };
            let mut best = (0, f64::INFINITY);
            for k in 0..opts.grid_points {
                let v = eval(lo + k as f64 * h)?;
                if v < best.1 {
                    best = (k, v);
                }
            }
            if last_sweep && (best.0 == 0 || best.0 + 1 == opts.grid_points) {
                boundary = true;
            }
            let mut a = lo + best.0.saturating_sub(1) as f64 * h;
            let mut b = (lo + (best.0 + 1) as f64 * h).min(hi);
            let mut c = b - gr * (b - a);
            let mut d = a + gr * (b - a);
            let (mut fc, mut fd) = (eval(c)?, eval(d)?);
            while b - a > opts.tol {
                if fc < fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - gr * (b - a);
                    fc = eval(c)?;
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + gr * (b - a);
                    fd = eval(d)?;
                }
            }
            let mid = 0.5 * (a + b);
            // Keep the grid point if refinement did not improve on it.
            theta[j] = if eval(mid)? <= best.1 { mid } else { lo + best.0 as f64 * h };
        }
    }
    let risk_at_po = risk(&theta)?;
    Ok(POResult { theta_po: Theta(theta), risk_at_po, method: PoMethod::GridRefine, boundary })
}

/// Compares `|ps - po|` with `2 L_z eps_bar / mu`.
pub fn ps_po_gap_check(pop: &Population, model: &LossModel, ps: &[f64], po: &[f64]) -> Result<GapCheck> {
    let lz = model.lz().ok_or_else(|| {
        Error::Unsupported("the loss has no Lipschitz constant in z; declare a bounded sample domain".into())
    })?;
    if ps.len() != po.len() {
        return Err(Error::DimensionMismatch { expected: ps.len(), actual: po.len() });
    }
    let gap = dist_sq(ps, po).sqrt();
    let bound = 2.0 * lz * pop.eps_bar() / model.mu();
    Ok(GapCheck { gap, bound, holds: gap <= bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Client;
    use proptest::prelude::*;

    fn gaussian(specs: &[(f64, f64, f64)], sigma: f64) -> Population {
        Population::new(
            specs
                .iter()
                .map(|&(p, m, e)| Client { weight: p, shift: ShiftMap::affine_gaussian(vec![m], e, sigma).unwrap() })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn phi_closed_form_values() {
        let q = LossModel::quadratic();
        let pop = gaussian(&[(1.0, 10.0, 0.9)], 1.0);
        assert!((phi(&pop, &q, &[100.0], 1e-8).unwrap()[0] - 100.0).abs() < 1e-12);
        let pop = gaussian(&[(1.0, 10.0, 0.0)], 1.0);
        assert_eq!(phi(&pop, &q, &[-37.0], 1e-8).unwrap()[0], 10.0);
        let pop = gaussian(&[(1.0, 1.0, 0.5)], 1.0);
        assert_eq!(phi(&pop, &q, &[0.0], 1e-8).unwrap()[0], 1.0);
    }

    #[test]
    fn solve_ps_closed_form() {
        let q = LossModel::quadratic();
        let pop = gaussian(&[(0.5, 10.0, 0.9), (0.5, 10.0, 0.9)], 1.0);
        let r = solve_ps(&pop, &q, &[0.0], PS_TOL_CLOSED_FORM, 10_000).unwrap();
        assert!((r.theta_ps[0] - 100.0).abs() < 1e-8);
        assert!(r.residual <= PS_TOL_CLOSED_FORM);
        assert!(r.contraction_estimate <= 0.9 + 0.05);

        let pop = gaussian(&[(1.0, 10.0, 0.0)], 1.0);
        assert_eq!(solve_ps(&pop, &q, &[3.0], 1e-10, 100).unwrap().theta_ps[0], 10.0);

        let pop = gaussian(&[(0.5, 0.0, 0.5), (0.5, 0.0, -0.5)], 1.0);
        assert_eq!(solve_ps(&pop, &q, &[7.0], 1e-10, 100).unwrap().theta_ps[0], 0.0);
    }

    #[test]
    fn solve_ps_refuses_non_contraction() {
        let q = LossModel::quadratic();
        let pop = gaussian(&[(1.0, 1.0, 1.0)], 1.0);
        match solve_ps(&pop, &q, &[0.0], 1e-10, 100) {
            Err(Error::NonContraction { ratio }) => assert_eq!(ratio, 1.0),
            other => panic!("expected non-contraction, got {other:?}"),
        }
    }

    #[test]
    fn divergence_demo_growth() {
        let q = LossModel::quadratic();
        let pop = gaussian(&[(1.0, 1.0, 1.0)], 1.0);
        let seq = divergence_demo(&pop, &q, &[0.0], 50).unwrap();
        for (t, v) in seq.iter().enumerate() {
            assert_eq!(*v, t as f64);
        }
        let pop = gaussian(&[(1.0, 1.0, 2.0)], 1.0);
        let seq = divergence_demo(&pop, &q, &[0.0], 30).unwrap();
        for (t, v) in seq.iter().enumerate() {
            assert_eq!(*v, 2f64.powi(t as i32) - 1.0);
        }
        let pop = gaussian(&[(1.0, 1.0, 0.5)], 1.0);
        assert!(matches!(divergence_demo(&pop, &q, &[0.0], 3), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn performative_risk_closed_form() {
        let q = LossModel::quadratic();
        let pop = gaussian(&[(1.0, 10.0, 0.9)], 1.5);
        let r = performative_risk(&pop, &q, &[100.0], RiskEval::Exact).unwrap();
        assert!((r - 1.125).abs() < 1e-12);
        let pop = gaussian(&[(0.3, 4.0, 0.0), (0.7, 4.0, 0.0)], 2.0);
        assert_eq!(performative_risk(&pop, &q, &[4.0], RiskEval::Exact).unwrap(), 2.0);
    }

    #[test]
    fn solve_po_closed_form_and_grid() {
        let q = LossModel::quadratic();
        let pop = gaussian(&[(0.5, 10.0, 0.5), (0.5, 10.0, 1.3)], 1.0);
        let cf = solve_po(&pop, &q, &[(-200.0, 200.0)], PO_TOL).unwrap();
        // Oracle: minimise 1/2 sum p_i ((1 - eps_i) theta - m_i)^2 by hand.
        assert!((cf.theta_po[0] - 1.0 / 0.17).abs() < 1e-12);
        assert_eq!(cf.method, PoMethod::ClosedForm);
        let grid = solve_po_grid(&pop, &q, &[(-200.0, 200.0)], &PoOptions::default()).unwrap();
        assert!((grid.theta_po[0] - 1.0 / 0.17).abs() / (1.0 / 0.17) < 1e-4);
        assert!(!grid.boundary);
        let ps = solve_ps(&pop, &q, &[0.0], 1e-10, 10_000).unwrap();
        assert!((ps.theta_ps[0] - 100.0).abs() < 1e-8);
        let rp = performative_risk(&pop, &q, &ps.theta_ps, RiskEval::Exact).unwrap();
        assert!(cf.risk_at_po <= rp);
    }

    #[test]
    fn grid_flags_boundary() {
        let q = LossModel::quadratic();
        let pop = gaussian(&[(1.0, 10.0, 0.9)], 1.0);
        let r = solve_po_grid(&pop, &q, &[(-5.0, 5.0)], &PoOptions::default()).unwrap();
        assert!(r.boundary);
    }

    #[test]
    fn static_case_ps_equals_po() {
        let q = LossModel::quadratic();
        let pop = gaussian(&[(0.25, 3.0, 0.0), (0.75, 7.0, 0.0)], 1.0);
        let ps = solve_ps(&pop, &q, &[0.0], 1e-10, 100).unwrap();
        let po = solve_po(&pop, &q, &[(-100.0, 100.0)], PO_TOL).unwrap();
        assert_eq!(ps.theta_ps, po.theta_po);
        assert_eq!(ps.theta_ps[0], 6.0);
    }

    #[test]
    fn gap_check_needs_lz() {
        let pop = gaussian(&[(1.0, 10.0, 0.9)], 1.0);
        assert!(matches!(
            ps_po_gap_check(&pop, &LossModel::quadratic(), &[1.0], &[1.0]),
            Err(Error::Unsupported(_))
        ));
        let pop = gaussian(&[(1.0, 10.0, 0.0)], 1.0);
        let q = LossModel::QuadraticMean { lz_radius: Some(5.0) };
        let g = ps_po_gap_check(&pop, &q, &[10.0], &[10.0]).unwrap();
        assert_eq!(g, GapCheck { gap: 0.0, bound: 0.0, holds: true });
    }

    #[test]
    fn newton_and_gradient_descent_agree_on_logistic_phi() {
        let base: std::sync::Arc<[Sample]> = vec![
            Sample::labeled(vec![1.0, 0.5], 1.0),
            Sample::labeled(vec![-0.5, 1.0], -1.0),
            Sample::labeled(vec![0.3, -1.2], 1.0),
            Sample::labeled(vec![-1.0, -0.2], -1.0),
            Sample::labeled(vec![0.8, 0.9], -1.0),
        ]
        .into();
        let shift = ShiftMap::strategic_linear(base, 0.5, vec![0]).unwrap();
        let pop = Population::new(vec![Client { weight: 1.0, shift }]).unwrap();
        let model = LossModel::logistic(0.1, 2.0, 5.0).unwrap();
        let a = phi_with(&pop, &model, &[0.2, -0.1], &PhiOptions::default()).unwrap();
        let b = phi_with(
            &pop,
            &model,
            &[0.2, -0.1],
            &PhiOptions { method: InnerMethod::GradientDescent, ..PhiOptions::default() },
        )
        .unwrap();
        assert!(dist_sq(&a, &b).sqrt() < 1e-6);
    }

    proptest! {
        #[test]
        fn closed_form_phi_contracts(
            m in -20.0f64..20.0, e in 0.0f64..0.95,
            x in -1e3f64..1e3, y in -1e3f64..1e3,
        ) {
            let q = LossModel::quadratic();
            let pop = gaussian(&[(1.0, m, e)], 1.0);
            let fx = phi(&pop, &q, &[x], 1e-8).unwrap();
            let fy = phi(&pop, &q, &[y], 1e-8).unwrap();
            prop_assert!((fx[0] - fy[0]).abs() <= (e + 0.05) * (x - y).abs() + 1e-9);
        }

        #[test]
        fn po_minimises_risk_on_samples(
            e1 in 0.0f64..1.5, e2 in 0.0f64..1.5, m1 in -10.0f64..10.0, m2 in -10.0f64..10.0,
            probe in -100.0f64..100.0,
        ) {
            prop_assume!((1.0 - e1).abs() + (1.0 - e2).abs() > 1e-3);
            let q = LossModel::quadratic();
            let pop = gaussian(&[(0.5, m1, e1), (0.5, m2, e2)], 1.0);
            let po = solve_po(&pop, &q, &[(-1e4, 1e4)], PO_TOL).unwrap();
            let rp = performative_risk(&pop, &q, &[probe], RiskEval::Exact).unwrap();
            prop_assert!(po.risk_at_po <= rp + 1e-9 * rp.abs().max(1.0));
        }
    }
}
