//! Losses, distribution-shift maps and client populations.
//!
//! Two experiment families are covered: Gaussian mean estimation with a
//! quadratic loss and an affine location shift, and logistic classification
//! on a fixed dataset whose strategic features move against the deployed
//! parameters.

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Domain};
use crate::stats::Welford;

/// Tolerance on `sum(p) = 1` accepted by [`Population::new`].
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Theta(pub Vec<f64>);

impl Theta {
    pub fn zeros(dim: usize) -> Self {
        Theta(vec![0.0; dim])
    }

    pub fn scalar(v: f64) -> Self {
        Theta(vec![v])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dist_sq(&self, other: &[f64]) -> f64 {
        dist_sq(&self.0, other)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Theta {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Theta {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Theta {
    fn from(v: Vec<f64>) -> Self {
        Theta(v)
    }
}

pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

/// A data point `z = (x, y)`; the label is absent for mean estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Option<f64>,
}

impl Sample {
    pub fn unlabeled(features: Vec<f64>) -> Self {
        Sample { features, label: None }
    }

    pub fn labeled(features: Vec<f64>, label: f64) -> Self {
        Sample { features, label: Some(label) }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossModel {
    /// `l(theta; z) = |theta - z|^2 / 2`. `lz_radius`, when given, bounds
    /// `|theta - z|` on the sample domain and is then the Lipschitz constant
    /// of the loss in `z`.
    QuadraticMean { lz_radius: Option<f64> },
    /// `l(theta; x, y) = ln(1 + exp(-y theta.x)) + lambda |theta|^2 / 2` with
    /// `y` in {-1, +1}. `feature_bound` bounds `|x|` over the support and
    /// `param_bound` bounds `|theta|` over the region of interest.
    Logistic {
        lambda: f64,
        feature_bound: f64,
        param_bound: f64,
    },
}

impl LossModel {
    pub fn quadratic() -> Self {
        LossModel::QuadraticMean { lz_radius: None }
    }

    pub fn logistic(lambda: f64, feature_bound: f64, param_bound: f64) -> Result<Self> {
        if !(lambda >= 0.0 && feature_bound > 0.0 && param_bound > 0.0) {
            return Err(Error::invalid(
                "logistic loss needs lambda >= 0 and positive feature/parameter bounds",
            ));
        }
        Ok(LossModel::Logistic { lambda, feature_bound, param_bound })
    }

    /// Strong convexity modulus of the expected loss in `theta`.
    pub fn mu(&self) -> f64 {
        match self {
            LossModel::QuadraticMean { .. } => 1.0,
            LossModel::Logistic { lambda, .. } => *lambda,
        }
    }

    /// Joint smoothness constant `L` with
    /// `|grad l(theta; z) - grad l(theta'; z')| <= L (|theta - theta'| + |z - z'|)`.
    ///
    /// Logistic: the Hessian in `theta` is `s'(.) x x^T + lambda I` with
    /// `s' <= 1/4`, giving `R^2 / 4 + lambda`. The Jacobian in `x` is
    /// `-y s(.) I + s'(.) x theta^T`, of norm at most `1 + R Theta / 4`.
    /// `L` is the larger of the two.
    pub fn smoothness(&self) -> f64 {
        match self {
            LossModel::QuadraticMean { .. } => 1.0,
            LossModel::Logistic { lambda, feature_bound, param_bound } => {
                let in_theta = 0.25 * feature_bound * feature_bound + lambda;
                let in_z = 1.0 + 0.25 * feature_bound * param_bound;
                in_theta.max(in_z)
            }
        }
    }

    /// Lipschitz constant of the loss in `z`, when the model declares one.
    /// For the logistic loss `|d l / d x| = s(.) |theta| <= Theta`.
    pub fn lz(&self) -> Option<f64> {
        match self {
            LossModel::QuadraticMean { lz_radius } => *lz_radius,
            LossModel::Logistic { param_bound, .. } => Some(*param_bound),
        }
    }

    fn label_of(&self, z: &Sample) -> Result<f64> {
        let y = z
            .label
            .ok_or_else(|| Error::invalid("logistic loss needs a labelled sample"))?;
        if y != 1.0 && y != -1.0 {
            return Err(Error::invalid(format!("label must be -1 or +1, got {y}")));
        }
        Ok(y)
    }

    pub fn loss(&self, theta: &[f64], z: &Sample) -> Result<f64> {
        check_dim(theta.len(), z.dim())?;
        match self {
            LossModel::QuadraticMean { .. } => Ok(0.5 * dist_sq(theta, &z.features)),
            LossModel::Logistic { lambda, .. } => {
                let y = self.label_of(z)?;
                let margin = y * dot(theta, &z.features);
                Ok(softplus(-margin) + 0.5 * lambda * dot(theta, theta))
            }
        }
    }

    /// Writes `grad l(theta; z)` into `out`.
    pub fn grad_into(&self, theta: &[f64], z: &Sample, out: &mut [f64]) -> Result<()> {
        check_dim(theta.len(), z.dim())?;
        check_dim(theta.len(), out.len())?;
        match self {
            LossModel::QuadraticMean { .. } => {
                for ((o, t), x) in out.iter_mut().zip(theta).zip(&z.features) {
                    *o = t - x;
                }
            }
            LossModel::Logistic { lambda, .. } => {
                let y = self.label_of(z)?;
                let s = sigmoid(-y * dot(theta, &z.features));
                for ((o, t), x) in out.iter_mut().zip(theta).zip(&z.features) {
                    *o = -y * s * x + lambda * t;
                }
            }
        }
        Ok(())
    }

    /// Adds `weight * hess l(theta; z)` to the row-major `d x d` matrix `out`.
    pub fn add_hessian(&self, theta: &[f64], z: &Sample, weight: f64, out: &mut [f64]) -> Result<()> {
        let d = theta.len();
        check_dim(d, z.dim())?;
        check_dim(d * d, out.len())?;
        match self {
            LossModel::QuadraticMean { .. } => {
                for j in 0..d {
                    out[j * d + j] += weight;
                }
            }
            LossModel::Logistic { lambda, .. } => {
                let y = self.label_of(z)?;
                let s = sigmoid(y * dot(theta, &z.features));
                let c = weight * s * (1.0 - s);
                for j in 0..d {
                    for k in 0..d {
                        out[j * d + k] += c * z.features[j] * z.features[k];
                    }
                    out[j * d + j] += weight * lambda;
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, theta: &[f64], z: &Sample) -> Result<Theta> {
        let mut out = vec![0.0; theta.len()];
        self.grad_into(theta, z, &mut out)?;
        Ok(Theta(out))
    }
}

/// Returns `x` with `x_j - eps * theta_j` on the strategic coordinates.
pub fn strategic_shift(x: &Sample, theta: &[f64], eps: f64, strategic: &[usize]) -> Result<Sample> {
    check_dim(x.dim(), theta.len())?;
    let mut out = x.clone();
    for &j in strategic {
        if j >= x.dim() {
            return Err(Error::invalid(format!(
                "strategic index {j} out of range for {} features",
                x.dim()
            )));
        }
        out.features[j] -= eps * theta[j];
    }
    Ok(out)
}

/// A parameterised map `theta -> D(theta)`.
#[derive(Debug, Clone)]
pub enum ShiftMap {
    /// `D(theta) = N(m + eps * theta, sigma^2 I)`. The slope `eps` may be
    /// negative; the Wasserstein sensitivity of the map is `|eps|`.
    AffineGaussian {
        base_mean: Vec<f64>,
        sensitivity: f64,
        noise_std: f64,
    },
    /// Uniform draw from `base`, then `x_S <- x_S - eps * theta_S`.
    StrategicLinear {
        base: Arc<[Sample]>,
        sensitivity: f64,
        strategic: Vec<usize>,
    },
}

impl ShiftMap {
    pub fn affine_gaussian(base_mean: Vec<f64>, sensitivity: f64, noise_std: f64) -> Result<Self> {
        if base_mean.is_empty() {
            return Err(Error::invalid("base mean must be non-empty"));
        }
        if !sensitivity.is_finite() {
            return Err(Error::invalid(format!("sensitivity must be finite, got {sensitivity}")));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise std must be >= 0, got {noise_std}")));
        }
        Ok(ShiftMap::AffineGaussian { base_mean, sensitivity, noise_std })
    }

    pub fn strategic_linear(
        base: Arc<[Sample]>,
        sensitivity: f64,
        strategic: Vec<usize>,
    ) -> Result<Self> {
        let first = base
            .first()
            .ok_or_else(|| Error::invalid("strategic shift needs a non-empty base dataset"))?;
        let dim = first.dim();
        if base.iter().any(|s| s.dim() != dim) {
            return Err(Error::invalid("base records have inconsistent dimensions"));
        }
        if let Some(&j) = strategic.iter().find(|&&j| j >= dim) {
            return Err(Error::invalid(format!("strategic index {j} out of range for {dim} features")));
        }
        if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
            return Err(Error::invalid(format!("sensitivity must be >= 0, got {sensitivity}")));
        }
        Ok(ShiftMap::StrategicLinear { base, sensitivity, strategic })
    }

    /// Signed slope of the shift; equals the sensitivity except for affine
    /// maps that move against `theta`.
    pub fn slope(&self) -> f64 {
        match self {
            ShiftMap::AffineGaussian { sensitivity, .. }
            | ShiftMap::StrategicLinear { sensitivity, .. } => *sensitivity,
        }
    }

    /// Wasserstein-1 sensitivity `eps_i >= 0`.
    pub fn sensitivity(&self) -> f64 {
        self.slope().abs()
    }

    /// Dimension of the sample features, which equals the parameter dimension.
    pub fn dim(&self) -> usize {
        match self {
            ShiftMap::AffineGaussian { base_mean, .. } => base_mean.len(),
            ShiftMap::StrategicLinear { base, .. } => base[0].dim(),
        }
    }

    /// Mean of `D(theta)` for the affine Gaussian map.
    pub fn mean_at(&self, theta: &[f64]) -> Option<Vec<f64>> {
        match self {
            ShiftMap::AffineGaussian { base_mean, sensitivity, .. } => Some(
                base_mean
                    .iter()
                    .zip(theta)
                    .map(|(m, t)| m + sensitivity * t)
                    .collect(),
            ),
            ShiftMap::StrategicLinear { .. } => None,
        }
    }

    /// Draws one sample into `out`, reusing its buffers.
    pub fn sample_into<R: RngCore + ?Sized>(&self, theta: &[f64], rng: &mut R, out: &mut Sample) {
        match self {
            ShiftMap::AffineGaussian { base_mean, sensitivity, noise_std } => {
                out.label = None;
                out.features.clear();
                for (m, t) in base_mean.iter().zip(theta) {
                    let n: f64 = rng.sample(StandardNormal);
                    out.features.push(m + sensitivity * t + noise_std * n);
                }
            }
            ShiftMap::StrategicLinear { base, sensitivity, strategic } => {
                let rec = &base[rng.random_range(0..base.len())];
                out.features.clear();
                out.features.extend_from_slice(&rec.features);
                out.label = rec.label;
                for &j in strategic {
                    out.features[j] -= sensitivity * theta[j];
                }
            }
        }
    }

    pub fn sample<R: RngCore + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Sample {
        let mut out = Sample::unlabeled(Vec::with_capacity(self.dim()));
        self.sample_into(theta, rng, &mut out);
        out
    }

    /// Calls `f` on each point of the finite support of `D(theta)` (uniform
    /// weights), reusing one buffer. Errors for maps without finite support.
    pub fn visit_support<F>(&self, theta: &[f64], mut f: F) -> Result<()>
    where
        F: FnMut(&Sample) -> Result<()>,
    {
        match self {
            ShiftMap::AffineGaussian { .. } => {
                Err(Error::Unsupported("Gaussian shift has no finite support".into()))
            }
            ShiftMap::StrategicLinear { base, sensitivity, strategic } => {
                check_dim(base[0].dim(), theta.len())?;
                let mut z = base[0].clone();
                for rec in base.iter() {
                    z.features.copy_from_slice(&rec.features);
                    z.label = rec.label;
                    for &j in strategic {
                        z.features[j] -= sensitivity * theta[j];
                    }
                    f(&z)?;
                }
                Ok(())
            }
        }
    }

    /// The full support of `D(theta)` with uniform weights, when it is finite.
    pub fn support(&self, theta: &[f64]) -> Option<Vec<Sample>> {
        match self {
            ShiftMap::AffineGaussian { .. } => None,
            ShiftMap::StrategicLinear { base, sensitivity, strategic } => Some(
                base.iter()
                    .map(|rec| {
                        let mut s = rec.clone();
                        for &j in strategic {
                            s.features[j] -= sensitivity * theta[j];
                        }
                        s
                    })
                    .collect(),
            ),
        }
    }
}

/// How an expectation over `D(theta)` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskEval {
    /// Closed form for Gaussian/quadratic, exact finite average for
    /// finite-support maps.
    Exact,
    /// Average over `samples` draws from the stream keyed by `seed`.
    MonteCarlo { samples: usize, seed: u64 },
}

/// Default Monte Carlo sample count for decoupled risk estimates.
pub const DEFAULT_MC_SAMPLES: usize = 10_000;

/// `f(theta; theta_tilde) = E_{Z ~ D(theta_tilde)} l(theta; Z)`.
pub fn decoupled_risk(
    model: &LossModel,
    shift: &ShiftMap,
    theta: &[f64],
    theta_tilde: &[f64],
    eval: RiskEval,
) -> Result<f64> {
    check_dim(shift.dim(), theta.len())?;
    check_dim(shift.dim(), theta_tilde.len())?;
    match eval {
        RiskEval::Exact => match (model, shift) {
            (LossModel::QuadraticMean { .. }, ShiftMap::AffineGaussian { noise_std, .. }) => {
                let mean = shift.mean_at(theta_tilde).expect("affine map has a mean");
                let d = theta.len() as f64;
                Ok(0.5 * dist_sq(theta, &mean) + 0.5 * d * noise_std * noise_std)
            }
            (_, ShiftMap::StrategicLinear { base, .. }) => {
                let mut acc = 0.0;
                shift.visit_support(theta_tilde, |z| {
                    acc += model.loss(theta, z)?;
                    Ok(())
                })?;
                Ok(acc / base.len() as f64)
            }
            _ => Err(Error::Unsupported(
                "no exact expectation for this loss/shift pair; use Monte Carlo".into(),
            )),
        },
        RiskEval::MonteCarlo { samples, seed } => {
            decoupled_risk_mc(model, shift, theta, theta_tilde, samples, seed, 0).map(|(m, _)| m)
        }
    }
}

/// Monte Carlo estimate of `f(theta; theta_tilde)` and its standard error,
/// drawn from the stream `(seed, MonteCarlo, stream)`.
pub fn decoupled_risk_mc(
    model: &LossModel,
    shift: &ShiftMap,
    theta: &[f64],
    theta_tilde: &[f64],
    samples: usize,
    seed: u64,
    stream: u64,
) -> Result<(f64, f64)> {
    check_dim(shift.dim(), theta.len())?;
    check_dim(shift.dim(), theta_tilde.len())?;
    if samples == 0 {
        return Err(Error::invalid("Monte Carlo risk needs at least one sample"));
    }
    let mut rng = CounterRng::for_stream(seed, Domain::MonteCarlo, stream, 0);
    let mut z = Sample::unlabeled(Vec::with_capacity(theta.len()));
    let mut acc = Welford::default();
    for _ in 0..samples {
        shift.sample_into(theta_tilde, &mut rng, &mut z);
        acc.push(model.loss(theta, &z)?);
    }
    Ok((acc.mean(), acc.std_dev() / (samples as f64).sqrt()))
}

/// Exact `grad_theta f(theta; theta_tilde)`, closed form or finite average.
pub fn decoupled_grad(
    model: &LossModel,
    shift: &ShiftMap,
    theta: &[f64],
    theta_tilde: &[f64],
) -> Result<Theta> {
    check_dim(shift.dim(), theta.len())?;
    check_dim(shift.dim(), theta_tilde.len())?;
    match (model, shift) {
        (LossModel::QuadraticMean { .. }, ShiftMap::AffineGaussian { .. }) => {
            let mean = shift.mean_at(theta_tilde).expect("affine map has a mean");
            Ok(Theta(theta.iter().zip(&mean).map(|(t, m)| t - m).collect()))
        }
        (_, ShiftMap::StrategicLinear { base, .. }) => {
            let mut acc = vec![0.0; theta.len()];
            let mut g = vec![0.0; theta.len()];
            shift.visit_support(theta_tilde, |z| {
                model.grad_into(theta, z, &mut g)?;
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
                Ok(())
            })?;
            let n = base.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            Ok(Theta(acc))
        }
        _ => Err(Error::Unsupported(
            "no exact gradient for this loss/shift pair".into(),
        )),
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    pub weight: f64,
    pub shift: ShiftMap,
}

/// `N` clients with weights `p_i` summing to one.
#[derive(Debug, Clone)]
pub struct Population {
    clients: Vec<Client>,
    eps_bar: f64,
    eps_max: f64,
}

/// Neumaier-compensated sum; keeps weighted means of identical values exact.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

impl Population {
    pub fn new(clients: Vec<Client>) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| Error::invalid("population needs at least one client"))?;
        let dim = first.shift.dim();
        let mut total = 0.0;
        for (i, c) in clients.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::invalid(format!("client {i} has non-positive weight {}", c.weight)));
            }
            if c.shift.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: c.shift.dim() });
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("client weights sum to {total}, not 1")));
        }
        let eps_bar = compensated_sum(clients.iter().map(|c| c.weight * c.shift.sensitivity()));
        let eps_max = clients.iter().map(|c| c.shift.sensitivity()).fold(0.0, f64::max);
        Ok(Population { clients, eps_bar, eps_max })
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.clients[0].shift.dim()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.weight).collect()
    }

    pub fn eps_bar(&self) -> f64 {
        self.eps_bar
    }

    pub fn eps_max(&self) -> f64 {
        self.eps_max
    }

    /// True when every weight equals `1/N` to within `tol`.
    pub fn is_uniform(&self, tol: f64) -> bool {
        let u = 1.0 / self.len() as f64;
        self.clients.iter().all(|c| (c.weight - u).abs() <= tol)
    }

    /// `sum_i p_i eps_i` with signed slopes.
    pub fn slope_bar(&self) -> f64 {
        compensated_sum(self.clients.iter().map(|c| c.weight * c.shift.slope()))
    }

    /// `sum_i p_i m_i` when every client uses the affine Gaussian map.
    pub fn mean_bar(&self) -> Option<Vec<f64>> {
        let mut means = Vec::with_capacity(self.len());
        for c in &self.clients {
            match &c.shift {
                ShiftMap::AffineGaussian { base_mean, .. } => means.push((c.weight, base_mean)),
                ShiftMap::StrategicLinear { .. } => return None,
            }
        }
        Some((0..self.dim()).map(|j| compensated_sum(means.iter().map(|(w, m)| w * m[j]))).collect())
    }

    /// True when the loss is quadratic and every map is affine Gaussian, so
    /// the repeated-risk map and performative risk have closed forms.
    pub fn is_gaussian_quadratic(&self, model: &LossModel) -> bool {
        matches!(model, LossModel::QuadraticMean { .. })
            && self
                .clients
                .iter()
                .all(|c| matches!(c.shift, ShiftMap::AffineGaussian { .. }))
    }
}
