//! Federated averaging with performative clients.
//!
//! Every client runs local SGD on samples drawn from the distribution its own
//! current parameters induce. Every `E` steps the server aggregates (all
//! clients, or a sampled subset) and broadcasts the result to everyone.
//! The simulator also tracks the weighted average `theta_bar^t` at every step,
//! which the protocol itself never materialises between rounds.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dist_sq, LossModel, Population, RiskEval, Sample, Theta};
use crate::rng::{CounterRng, Domain};
use crate::solution::performative_risk;
use crate::theory::{step_size, Mode, ScheduleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum Participation {
    Full,
    /// `K` i.i.d. draws with probabilities `p`, averaged with weight `1/K`.
    Scheme1 { k: usize },
    /// `K` clients uniformly without replacement, weighted `p_k N / K`.
    Scheme2 { k: usize },
}

impl Participation {
    pub fn mode(self) -> Mode {
        match self {
            Participation::Full => Mode::Full,
            Participation::Scheme1 { .. } => Mode::Scheme1,
            Participation::Scheme2 { .. } => Mode::Scheme2,
        }
    }

    /// Clients per round; `n` for full participation.
    pub fn k(self, n: usize) -> usize {
        match self {
            Participation::Full => n,
            Participation::Scheme1 { k } | Participation::Scheme2 { k } => k,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub population: Population,
    pub model: LossModel,
    /// Aggregation period `E`.
    pub period: u64,
    pub participation: Participation,
    pub schedule: ScheduleSpec,
    /// Total number of local steps `T`.
    pub horizon: u64,
    pub seed: u64,
    pub theta0: Theta,
    /// Record spacing; `None` means `max(1, T / 2000)`.
    pub record_every: Option<u64>,
    /// Also record every aggregation step.
    pub record_aggregations: bool,
    /// Samples averaged per local gradient.
    pub batch_size: usize,
    /// Optimise `g_i = p_i N f_i` with uniform weights instead of `p`.
    pub rescaled: bool,
}

impl RunConfig {
    pub fn new(
        population: Population,
        model: LossModel,
        period: u64,
        participation: Participation,
        schedule: ScheduleSpec,
        horizon: u64,
        seed: u64,
        theta0: Theta,
    ) -> Self {
        RunConfig {
            population,
            model,
            period,
            participation,
            schedule,
            horizon,
            seed,
            theta0,
            record_every: None,
            record_aggregations: true,
            batch_size: 1,
            rescaled: false,
        }
    }

    pub fn record_spacing(&self) -> u64 {
        self.record_every.unwrap_or((self.horizon / 2000).max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.population.len();
        if self.period == 0 {
            return Err(Error::Config("aggregation period E must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.theta0.dim() != self.population.dim() {
            return Err(Error::DimensionMismatch { expected: self.population.dim(), actual: self.theta0.dim() });
        }
        if !self.theta0.is_finite() {
            return Err(Error::Config("initial parameters must be finite".into()));
        }
        let k = self.participation.k(n);
        if k == 0 || k > n {
            return Err(Error::Config(format!("need 1 <= K <= N, got K = {k}, N = {n}")));
        }
        if matches!(self.participation, Participation::Scheme2 { .. })
            && !self.rescaled
            && !self.population.is_uniform(1e-12)
        {
            return Err(Error::Config(
                "scheme II with non-uniform weights needs the rescaled objective".into(),
            ));
        }
        Ok(())
    }

    /// Weights used for aggregation and the shadow average.
    pub fn effective_weights(&self) -> Vec<f64> {
        if self.rescaled {
            vec![1.0 / self.population.len() as f64; self.population.len()]
        } else {
            self.population.weights()
        }
    }
}

/// `theta - eta * mean_b grad l(theta; Z_b)` with `Z_b ~ D(theta)`.
pub fn local_update<R: RngCore + ?Sized>(
    theta: &[f64],
    shift: &crate::model::ShiftMap,
    model: &LossModel,
    eta: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<Theta> {
    let mut out = vec![0.0; theta.len()];
    let mut scratch = Scratch::new(theta.len());
    local_update_into(theta, shift, model, eta, 1.0, batch_size, rng, &mut scratch, &mut out)?;
    Ok(Theta(out))
}

struct Scratch {
    z: Sample,
    g: Vec<f64>,
    acc: Vec<f64>,
}

impl Scratch {
    fn new(dim: usize) -> Self {
        Scratch { z: Sample::unlabeled(Vec::with_capacity(dim)), g: vec![0.0; dim], acc: vec![0.0; dim] }
    }
}

#[allow(clippy::too_many_arguments)]
fn local_update_into<R: RngCore + ?Sized>(
    theta: &[f64],
    shift: &crate::model::ShiftMap,
    model: &LossModel,
    eta: f64,
    grad_scale: f64,
    batch_size: usize,
    rng: &mut R,
    s: &mut Scratch,
    out: &mut [f64],
) -> Result<()> {
    s.acc.iter_mut().for_each(|a| *a = 0.0);
    for _ in 0..batch_size {
        shift.sample_into(theta, rng, &mut s.z);
        model.grad_into(theta, &s.z, &mut s.g)?;
        s.acc.iter_mut().zip(&s.g).for_each(|(a, g)| *a += g);
    }
    let c = eta * grad_scale / batch_size as f64;
    for ((o, t), a) in out.iter_mut().zip(theta).zip(&s.acc) {
        *o = t - c * a;
    }
    Ok(())
}

/// `sum_j p_j w_j`.
pub fn aggregate_full(p: &[f64], w: &[Vec<f64>]) -> Result<Theta> {
    if p.len() != w.len() || w.is_empty() {
        return Err(Error::invalid("need one weight per parameter vector"));
    }
    let mut out = vec![0.0; w[0].len()];
    for (pj, wj) in p.iter().zip(w) {
        if wj.len() != out.len() {
            return Err(Error::DimensionMismatch { expected: out.len(), actual: wj.len() });
        }
        out.iter_mut().zip(wj).for_each(|(o, v)| *o += pj * v);
    }
    Ok(Theta(out))
}

/// `k` i.i.d. categorical draws with probabilities `p`, sorted.
pub fn sample_scheme1<R: RngCore + ?Sized>(p: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("K must be >= 1"));
    }
    let dist = WeightedIndex::new(p).map_err(|e| Error::invalid(format!("bad sampling weights: {e}")))?;
    Ok(draw_scheme1(&dist, k, rng))
}

fn draw_scheme1<R: RngCore + ?Sized>(dist: &WeightedIndex<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let mut s: Vec<usize> = (0..k).map(|_| dist.sample(rng)).collect();
    s.sort_unstable();
    s
}

/// A uniformly random `k`-subset of `0..n` by partial Fisher-Yates, sorted.
pub fn sample_scheme2<R: RngCore + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("need 1 <= K <= N, got K = {k}, N = {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let (chosen, _) = idx.partial_shuffle(rng, k);
    let mut s = chosen.to_vec();
    s.sort_unstable();
    Ok(s)
}

/// Combines the sampled clients' parameters: `(1/K) sum w_k` for scheme I,
/// `sum p_k (N/K) w_k` for scheme II. `p` are the effective weights; scheme II
/// needs them uniform unless `allow_nonuniform` (the rescaled objective).
pub fn aggregate_partial(
    scheme: Participation,
    sampled: &[usize],
    w: &[Vec<f64>],
    p: &[f64],
    allow_nonuniform: bool,
) -> Result<Theta> {
    let n = w.len();
    if p.len() != n || sampled.is_empty() {
        return Err(Error::invalid("need one weight per client and a non-empty sample"));
    }
    let k = sampled.len();
    let dim = w[0].len();
    let mut out = vec![0.0; dim];
    match scheme {
        Participation::Full => return aggregate_full(p, w),
        Participation::Scheme1 { .. } => {
            for &j in sampled {
                out.iter_mut().zip(&w[j]).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= k as f64);
        }
        Participation::Scheme2 { .. } => {
            let u = 1.0 / n as f64;
            if !allow_nonuniform && p.iter().any(|v| (v - u).abs() > 1e-12) {
                return Err(Error::Config(
                    "scheme II with non-uniform weights needs the rescaled objective".into(),
                ));
            }
            let scale = n as f64 / k as f64;
            for &j in sampled {
                let c = p[j] * scale;
                out.iter_mut().zip(&w[j]).for_each(|(o, v)| *o += c * v);
            }
        }
    }
    Ok(Theta(out))
}

/// Diagnostics at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Record<'a> {
    pub t: u64,
    pub theta_bar: &'a [f64],
    pub dist_sq: f64,
    pub loss: f64,
    pub consensus_err: f64,
    pub is_agg: bool,
}

/// Column-oriented run history.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunTrace {
    pub dim: usize,
    pub t: Vec<u64>,
    /// Row-major `len x dim`.
    pub theta_bar: Vec<f64>,
    pub dist_sq: Vec<f64>,
    pub loss: Vec<f64>,
    pub consensus_err: Vec<f64>,
    pub is_agg: Vec<bool>,
    pub communication_count: u64,
    pub batch_size: usize,
}

impl RunTrace {
    pub fn new(dim: usize, batch_size: usize) -> Self {
        RunTrace { dim, batch_size, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn push(&mut self, r: &Record<'_>) {
        self.t.push(r.t);
        self.theta_bar.extend_from_slice(r.theta_bar);
        self.dist_sq.push(r.dist_sq);
        self.loss.push(r.loss);
        self.consensus_err.push(r.consensus_err);
        self.is_agg.push(r.is_agg);
    }

    pub fn theta_at(&self, row: usize) -> &[f64] {
        &self.theta_bar[row * self.dim..(row + 1) * self.dim]
    }

    pub fn last_dist_sq(&self) -> Option<f64> {
        self.dist_sq.last().copied()
    }

    /// Writes `t,theta_bar,dist_sq,loss,consensus_err,is_agg` rows; the
    /// coordinates of `theta_bar` are joined with `;`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "theta_bar", "dist_sq", "loss", "consensus_err", "is_agg"])?;
        for row in 0..self.len() {
            let theta = self.theta_at(row).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
            w.write_record([
                self.t[row].to_string(),
                theta,
                self.dist_sq[row].to_string(),
                self.loss[row].to_string(),
                self.consensus_err[row].to_string(),
                u8::from(self.is_agg[row]).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A run that stopped on a numeric error, with everything recorded so far.
#[derive(Debug)]
pub struct RunAbort {
    pub error: Error,
    pub step: u64,
    pub trace: RunTrace,
}

impl std::fmt::Display for RunAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run aborted at step {}: {}", self.step, self.error)
    }
}

impl std::error::Error for RunAbort {}

/// Per-client parameters at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: u64,
    pub clients: Vec<Vec<f64>>,
    /// Communication rounds completed so far.
    pub rounds: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub is_agg: bool,
    /// Sampled clients at an aggregation step (all clients under full participation).
    pub sampled: Vec<usize>,
    /// The broadcast value at an aggregation step.
    pub broadcast: Option<Theta>,
}

/// Owns the per-run buffers; `advance` moves the state one step.
pub struct Simulator<'a> {
    cfg: &'a RunConfig,
    weights: Vec<f64>,
    grad_scale: Vec<f64>,
    scheme1: Option<WeightedIndex<f64>>,
    next: Vec<Vec<f64>>,
    scratch: Scratch,
}

impl<'a> Simulator<'a> {
    pub fn new(cfg: &'a RunConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.population.len();
        let weights = cfg.effective_weights();
        let grad_scale = if cfg.rescaled {
            cfg.population.weights().iter().map(|p| p * n as f64).collect()
        } else {
            vec![1.0; n]
        };
        let scheme1 = match cfg.participation {
            Participation::Scheme1 { .. } => Some(
                WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("bad sampling weights: {e}")))?,
            ),
            _ => None,
        };
        let dim = cfg.population.dim();
        Ok(Simulator { cfg, weights, grad_scale, scheme1, next: vec![vec![0.0; dim]; n], scratch: Scratch::new(dim) })
    }

    pub fn initial_state(&self) -> SimState {
        SimState { t: 0, clients: vec![self.cfg.theta0.0.clone(); self.cfg.population.len()], rounds: 0 }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// One local step for every client, then aggregation and broadcast when
    /// `t + 1` is a multiple of `E`.
    pub fn advance(&mut self, state: &mut SimState) -> Result<StepOutcome> {
        let cfg = self.cfg;
        let t = state.t;
        let eta = step_size(&cfg.schedule, t);
        for (i, client) in cfg.population.clients().iter().enumerate() {
            let mut rng = CounterRng::for_stream(cfg.seed, Domain::Client, i as u64, t);
            local_update_into(
                &state.clients[i],
                &client.shift,
                &cfg.model,
                eta,
                self.grad_scale[i],
                cfg.batch_size,
                &mut rng,
                &mut self.scratch,
                &mut self.next[i],
            )?;
            if self.next[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: t });
            }
        }
        state.t = t + 1;
        if !state.t.is_multiple_of(cfg.period) {
            std::mem::swap(&mut state.clients, &mut self.next);
            return Ok(StepOutcome { is_agg: false, sampled: Vec::new(), broadcast: None });
        }
        let n = cfg.population.len();
        let mut rng = CounterRng::for_stream(cfg.seed, Domain::Sampler, 0, state.t);
        let (sampled, theta) = match cfg.participation {
            Participation::Full => ((0..n).collect(), aggregate_full(&self.weights, &self.next)?),
            Participation::Scheme1 { k } => {
                let s = draw_scheme1(self.scheme1.as_ref().expect("built for scheme I"), k, &mut rng);
                let th = aggregate_partial(cfg.participation, &s, &self.next, &self.weights, true)?;
                (s, th)
            }
            Participation::Scheme2 { k } => {
                let s = sample_scheme2(n, k, &mut rng)?;
                let th = aggregate_partial(cfg.participation, &s, &self.next, &self.weights, cfg.rescaled)?;
                (s, th)
            }
        };
        for c in state.clients.iter_mut() {
            c.copy_from_slice(&theta);
        }
        state.rounds += 1;
        Ok(StepOutcome { is_agg: true, sampled, broadcast: Some(theta) })
    }
}

fn shadow_average(weights: &[f64], clients: &[Vec<f64>], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (w, c) in weights.iter().zip(clients) {
        out.iter_mut().zip(c).for_each(|(o, v)| *o += w * v);
    }
}

fn consensus(weights: &[f64], clients: &[Vec<f64>], bar: &[f64]) -> f64 {
    weights.iter().zip(clients).map(|(w, c)| w * dist_sq(c, bar)).sum()
}

/// Summary of a run streamed through an observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunStats {
    pub communication_count: u64,
    pub records: usize,
}

/// Runs `T` steps, handing each recorded step to `observe`. On a numeric
/// error returns the error and the failing step.
pub fn run_observed<F>(cfg: &RunConfig, theta_ps: &[f64], mut observe: F) -> std::result::Result<RunStats, (Error, u64)>
where
    F: FnMut(&Record<'_>),
{
    let mut sim = Simulator::new(cfg).map_err(|e| (e, 0))?;
    if theta_ps.len() != cfg.population.dim() {
        return Err((Error::DimensionMismatch { expected: cfg.population.dim(), actual: theta_ps.len() }, 0));
    }
    let mut state = sim.initial_state();
    let spacing = cfg.record_spacing();
    let dim = cfg.population.dim();
    let mut bar = vec![0.0; dim];
    let mut records = 0usize;
    let loss_at = |theta: &[f64]| {
        performative_risk(&cfg.population, &cfg.model, theta, RiskEval::Exact).unwrap_or(f64::NAN)
    };

    bar.copy_from_slice(&cfg.theta0);
    observe(&Record {
        t: 0,
        theta_bar: &bar,
        dist_sq: dist_sq(&bar, theta_ps),
        loss: loss_at(&bar),
        consensus_err: 0.0,
        is_agg: false,
    });
    records += 1;

    while state.t < cfg.horizon {
        let outcome = sim.advance(&mut state).map_err(|e| (e, state.t))?;
        let t = state.t;
        let wanted = t % spacing == 0 || t == cfg.horizon || (outcome.is_agg && cfg.record_aggregations);
        if !wanted {
            continue;
        }
        let cons = match &outcome.broadcast {
            // Every client holds exactly the broadcast value.
            Some(b) => {
                bar.copy_from_slice(b);
                0.0
            }
            None => {
                shadow_average(sim.weights(), &state.clients, &mut bar);
                consensus(sim.weights(), &state.clients, &bar)
            }
        };
        observe(&Record {
            t,
            theta_bar: &bar,
            dist_sq: dist_sq(&bar, theta_ps),
            loss: loss_at(&bar),
            consensus_err: cons,
            is_agg: outcome.is_agg,
        });
        records += 1;
    }
    Ok(RunStats { communication_count: 2 * state.rounds, records })
}

/// Runs `T` steps and keeps the full trace.
pub fn run(cfg: &RunConfig, theta_ps: &[f64]) -> std::result::Result<RunTrace, RunAbort> {
    let mut trace = RunTrace::new(cfg.population.dim(), cfg.batch_size);
    match run_observed(cfg, theta_ps, |r| trace.push(r)) {
        Ok(stats) => {
            trace.communication_count = stats.communication_count;
            Ok(trace)
        }
        Err((error, step)) => {
            trace.communication_count = 2 * (step / cfg.period.max(1));
            Err(RunAbort { error, step, trace })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Client, ShiftMap};

    fn homogeneous(n: usize, m: f64, eps: f64, sigma: f64) -> Population {
        Population::new(
            (0..n)
                .map(|_| Client { weight: 1.0 / n as f64, shift: ShiftMap::affine_gaussian(vec![m], eps, sigma).unwrap() })
                .collect(),
        )
        .unwrap()
    }

    fn config(pop: Population, e: u64, part: Participation, horizon: u64) -> RunConfig {
        RunConfig::new(
            pop,
            LossModel::quadratic(),
            e,
            part,
            ScheduleSpec::diminishing(2.0, 20.0, e),
            horizon,
            7,
            Theta::scalar(0.0),
        )
    }

    #[test]
    fn local_update_examples() {
        let q = LossModel::quadratic();
        let mut rng = CounterRng::seeded(0);
        let s = ShiftMap::affine_gaussian(vec![0.0], 0.0, 0.0).unwrap();
        assert_eq!(local_update(&[1.0], &s, &q, 1.0, 1, &mut rng).unwrap().0, vec![0.0]);
        let s = ShiftMap::affine_gaussian(vec![0.0], 0.0, 1.0).unwrap();
        assert_eq!(local_update(&[1.0], &s, &q, 0.0, 1, &mut rng).unwrap().0, vec![1.0]);
        let s = ShiftMap::affine_gaussian(vec![2.0], 0.5, 0.0).unwrap();
        assert_eq!(local_update(&[4.0], &s, &q, 0.5, 1, &mut rng).unwrap().0, vec![4.0]);
    }

    #[test]
    fn full_aggregation_examples() {
        assert_eq!(aggregate_full(&[0.5, 0.5], &[vec![0.0], vec![2.0]]).unwrap().0, vec![1.0]);
        assert_eq!(aggregate_full(&[0.3, 0.7], &[vec![4.0], vec![4.0]]).unwrap().0, vec![4.0]);
        let w: Vec<Vec<f64>> = (1..=10).map(|v| vec![v as f64]).collect();
        let r = aggregate_full(&[0.1; 10], &w).unwrap();
        assert!((r[0] - 5.5).abs() < 1e-14);
    }

    #[test]
    fn scheme_samplers_edge_cases() {
        let mut rng = CounterRng::seeded(3);
        assert_eq!(sample_scheme1(&[1.0], 4, &mut rng).unwrap(), vec![0; 4]);
        assert_eq!(sample_scheme1(&[1.0, 0.0, 0.0], 6, &mut rng).unwrap(), vec![0; 6]);
        assert_eq!(sample_scheme2(7, 7, &mut rng).unwrap(), (0..7).collect::<Vec<_>>());
        assert!(sample_scheme2(3, 4, &mut rng).is_err());
    }

    #[test]
    fn partial_aggregation_identities() {
        let w: Vec<Vec<f64>> = (0..5).map(|v| vec![v as f64 * 1.3, -(v as f64)]).collect();
        let p = [0.2; 5];
        let all: Vec<usize> = (0..5).collect();
        let full = aggregate_full(&p, &w).unwrap();
        let s2 = aggregate_partial(Participation::Scheme2 { k: 5 }, &all, &w, &p, false).unwrap();
        assert_eq!(full, s2);
        let s1 = aggregate_partial(Participation::Scheme1 { k: 3 }, &[2, 2, 2], &w, &p, false).unwrap();
        assert_eq!(s1.0, w[2]);
        let skew = [0.4, 0.15, 0.15, 0.15, 0.15];
        assert!(matches!(
            aggregate_partial(Participation::Scheme2 { k: 2 }, &[0, 1], &w, &skew, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_horizon_has_one_record() {
        let cfg = config(homogeneous(3, 10.0, 0.9, 1.0), 2, Participation::Full, 0);
        let tr = run(&cfg, &[100.0]).unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr.dist_sq[0], 10_000.0);
        assert_eq!(tr.communication_count, 0);
    }

    #[test]
    fn aggregation_identities_hold_exactly() {
        for part in [Participation::Full, Participation::Scheme1 { k: 3 }, Participation::Scheme2 { k: 3 }] {
            let cfg = config(homogeneous(5, 10.0, 0.9, 1.0), 4, part, 103);
            let tr = run(&cfg, &[100.0]).unwrap();
            assert_eq!(tr.communication_count, 2 * (103 / 4));
            for i in 0..tr.len() {
                if tr.t[i] > 0 && tr.t[i].is_multiple_of(4) {
                    assert!(tr.is_agg[i]);
                    assert_eq!(tr.consensus_err[i], 0.0);
                } else {
                    assert!(!tr.is_agg[i]);
                }
            }
            assert!(tr.consensus_err.iter().any(|&c| c > 0.0));
        }
    }

    #[test]
    fn unit_period_keeps_clients_identical() {
        let cfg = config(homogeneous(4, 1.0, 0.5, 1.0), 1, Participation::Full, 50);
        let mut sim = Simulator::new(&cfg).unwrap();
        let mut st = sim.initial_state();
        for _ in 0..50 {
            sim.advance(&mut st).unwrap();
            assert!(st.clients.iter().all(|c| c == &st.clients[0]));
        }
    }

    #[test]
    fn between_rounds_clients_keep_local_iterates() {
        let cfg = config(homogeneous(3, 1.0, 0.5, 1.0), 5, Participation::Full, 10);
        let mut sim = Simulator::new(&cfg).unwrap();
        let mut st = sim.initial_state();
        let out = sim.advance(&mut st).unwrap();
        assert!(!out.is_agg);
        assert_ne!(st.clients[0], st.clients[1]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let cfg = config(homogeneous(6, 10.0, 0.9, 1.0), 3, Participation::Scheme1 { k: 4 }, 500);
        let a = run(&cfg, &[100.0]).unwrap();
        let b = run(&cfg, &[100.0]).unwrap();
        assert_eq!(a, b);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        let header = String::from_utf8(ca).unwrap();
        assert!(header.starts_with("t,theta_bar,dist_sq,loss,consensus_err,is_agg\n"));
    }

    #[test]
    fn scheme2_rejects_skewed_weights_unless_rescaled() {
        let pop = Population::new(vec![
            Client { weight: 0.75, shift: ShiftMap::affine_gaussian(vec![1.0], 0.5, 1.0).unwrap() },
            Client { weight: 0.25, shift: ShiftMap::affine_gaussian(vec![1.0], 0.5, 1.0).unwrap() },
        ])
        .unwrap();
        let mut cfg = config(pop, 2, Participation::Scheme2 { k: 1 }, 10);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.rescaled = true;
        assert!(run(&cfg, &[2.0]).is_ok());
    }

    #[test]
    fn non_finite_iterate_aborts_with_partial_trace() {
        let mut cfg = config(homogeneous(2, 1.0, 0.5, 1.0), 1, Participation::Full, 5000);
        cfg.schedule = ScheduleSpec::constant(10.0, 1);
        cfg.record_every = Some(1);
        let err = run(&cfg, &[2.0]).unwrap_err();
        assert!(matches!(err.error, Error::NonFinite { .. }));
        assert_eq!(err.trace.len() as u64, err.step + 1);
    }
}
