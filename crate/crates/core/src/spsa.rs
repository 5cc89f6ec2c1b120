//! Noisy loss model, gain sequences, the simultaneous perturbation
//! gradient estimate and the stochastic approximation recursion
//! `θ_{k+1} = θ_k - a_k ĝ_k(θ_k)`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpsaError};
use crate::perturbations::PerturbationDistribution;

/// Step used for central finite differences when no analytic gradient is
/// registered.
pub const FD_STEP: f64 = 1e-5;

/// Tolerance on `‖∇L(θ*)‖` accepted at problem construction.
pub const STATIONARY_TOL: f64 = 1e-9;

type EvalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A loss function `L: ℝᵖ → ℝ`.
#[derive(Clone)]
pub struct LossFunction {
    name: String,
    dim: usize,
    eval: Arc<EvalFn>,
    gradient: Option<Arc<GradFn>>,
    is_quadratic: bool,
    minimizer: Option<Vec<f64>>,
}

impl fmt::Debug for LossFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LossFunction")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("analytic_gradient", &self.gradient.is_some())
            .field("is_quadratic", &self.is_quadratic)
            .finish()
    }
}

impl LossFunction {
    pub fn new<F>(name: impl Into<String>, dim: usize, eval: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        LossFunction {
            name: name.into(),
            dim,
            eval: Arc::new(eval),
            gradient: None,
            is_quadratic: false,
            minimizer: None,
        }
    }

    pub fn with_gradient<G>(mut self, gradient: G) -> Self
    where
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    /// Marks the loss as quadratic, which makes the one-step closed forms
    /// exact. The caller vouches for it.
    pub fn quadratic_form(mut self) -> Self {
        self.is_quadratic = true;
        self
    }

    pub fn with_minimizer(mut self, theta_star: Vec<f64>) -> Self {
        self.minimizer = Some(theta_star);
        self
    }

    /// `L(θ) = ½ (θ - θ*)ᵀ H (θ - θ*)` for a symmetric `H` given row-major.
    pub fn quadratic(name: impl Into<String>, hessian: Vec<Vec<f64>>, center: Vec<f64>) -> Self {
        let dim = center.len();
        let (h1, c1) = (hessian.clone(), center.clone());
        let eval = move |t: &[f64]| {
            let d: Vec<f64> = t.iter().zip(&c1).map(|(x, c)| x - c).collect();
            let mut s = 0.0;
            for (i, row) in h1.iter().enumerate() {
                for (j, h) in row.iter().enumerate() {
                    s += d[i] * h * d[j];
                }
            }
            0.5 * s
        };
        let (h2, c2) = (hessian, center.clone());
        let grad = move |t: &[f64]| {
            h2.iter()
                .map(|row| row.iter().zip(t.iter().zip(&c2)).map(|(h, (x, c))| h * (x - c)).sum())
                .collect()
        };
        LossFunction::new(name, dim, eval)
            .with_gradient(grad)
            .quadratic_form()
            .with_minimizer(center)
    }

    /// `L = t₁² - t₁t₂ + t₂²`, minimized at the origin.
    pub fn quadratic_4_1() -> Self {
        LossFunction::new("quadratic_4_1", 2, |t| t[0] * t[0] - t[0] * t[1] + t[1] * t[1])
            .with_gradient(|t| vec![2.0 * t[0] - t[1], 2.0 * t[1] - t[0]])
            .quadratic_form()
            .with_minimizer(vec![0.0, 0.0])
    }

    /// `L = t₁⁴ + t₁² + t₁t₂ + t₂²`, minimized at the origin.
    pub fn quartic_4_2() -> Self {
        LossFunction::new("quartic_4_2", 2, |t| {
            let t1sq = t[0] * t[0];
            t1sq * t1sq + t1sq + t[0] * t[1] + t[1] * t[1]
        })
        .with_gradient(|t| vec![4.0 * t[0].powi(3) + 2.0 * t[0] + t[1], t[0] + 2.0 * t[1]])
        .with_minimizer(vec![0.0, 0.0])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_quadratic(&self) -> bool {
        self.is_quadratic
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    pub fn minimizer(&self) -> Option<&[f64]> {
        self.minimizer.as_deref()
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        (self.eval)(theta)
    }

    /// Analytic gradient if registered, otherwise central differences with
    /// step [`FD_STEP`].
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        match &self.gradient {
            Some(g) => g(theta),
            None => self.fd_gradient(theta, FD_STEP),
        }
    }

    pub fn fd_gradient(&self, theta: &[f64], step: f64) -> Vec<f64> {
        let mut probe = theta.to_vec();
        (0..theta.len())
            .map(|i| {
                probe[i] = theta[i] + step;
                let up = self.value(&probe);
                probe[i] = theta[i] - step;
                let down = self.value(&probe);
                probe[i] = theta[i];
                (up - down) / (2.0 * step)
            })
            .collect()
    }
}

/// Name-indexed collection of losses that configs can refer to.
#[derive(Debug, Clone)]
pub struct LossRegistry {
    losses: BTreeMap<String, LossFunction>,
}

impl LossRegistry {
    pub fn empty() -> Self {
        LossRegistry {
            losses: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = LossRegistry::empty();
        reg.register(LossFunction::quadratic_4_1());
        reg.register(LossFunction::quartic_4_2());
        reg
    }

    pub fn register(&mut self, loss: LossFunction) {
        self.losses.insert(loss.name.clone(), loss);
    }

    pub fn get(&self, name: &str) -> Result<LossFunction> {
        self.losses.get(name).cloned().ok_or_else(|| SpsaError::UnknownLoss {
            name: name.to_string(),
            known: self.losses.keys().cloned().collect::<Vec<_>>().join(", "),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.losses.keys().map(String::as_str)
    }
}

impl Default for LossRegistry {
    fn default() -> Self {
        LossRegistry::with_builtins()
    }
}

/// Law of the additive measurement noise `ε`, scaled to variance `σ²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLaw {
    #[default]
    Gaussian,
    /// Uniform on `(-√(3σ²), √(3σ²))`.
    Uniform,
}

impl NoiseLaw {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R, sigma2: f64) -> f64 {
        let sd = sigma2.sqrt();
        match self {
            NoiseLaw::Gaussian => {
                let z: f64 = rng.sample(StandardNormal);
                sd * z
            }
            NoiseLaw::Uniform => {
                let u: f64 = rng.random();
                sd * 3f64.sqrt() * (2.0 * u - 1.0)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseLaw::Gaussian => "gaussian",
            NoiseLaw::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProblemConfig {
    loss: LossFunction,
    theta_star: Vec<f64>,
    sigma2: f64,
    theta0: Vec<f64>,
    noise: NoiseLaw,
}

impl ProblemConfig {
    /// Validates dimensions, `σ² >= 0`, and (when an analytic gradient is
    /// available) that `θ*` is stationary.
    pub fn new(loss: LossFunction, theta_star: Vec<f64>, sigma2: f64, theta0: Vec<f64>) -> Result<Self> {
        let p = loss.dim();
        if p == 0 {
            return Err(SpsaError::Dimension {
                what: "loss",
                got: 0,
                expected: 1,
            });
        }
        check_len("theta_star", &theta_star, p)?;
        check_len("theta0", &theta0, p)?;
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(SpsaError::InvalidParameter {
                name: "sigma2",
                value: sigma2,
                constraint: "must be finite and >= 0",
            });
        }
        if loss.has_analytic_gradient() {
            let norm = norm2(&loss.gradient(&theta_star)).sqrt();
            if norm > STATIONARY_TOL {
                return Err(SpsaError::NotStationary {
                    loss: loss.name().to_string(),
                    norm,
                });
            }
        }
        Ok(ProblemConfig {
            loss,
            theta_star,
            sigma2,
            theta0,
            noise: NoiseLaw::default(),
        })
    }

    pub fn with_noise(mut self, noise: NoiseLaw) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Result<Self> {
        let loss = self.loss.clone();
        let noise = self.noise;
        self = ProblemConfig::new(loss, self.theta_star, sigma2, self.theta0)?;
        self.noise = noise;
        Ok(self)
    }

    pub fn p(&self) -> usize {
        self.loss.dim()
    }

    pub fn loss(&self) -> &LossFunction {
        &self.loss
    }

    pub fn theta_star(&self) -> &[f64] {
        &self.theta_star
    }

    pub fn theta0(&self) -> &[f64] {
        &self.theta0
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn noise(&self) -> NoiseLaw {
        self.noise
    }

    pub fn squared_error(&self, theta: &[f64]) -> f64 {
        theta.iter().zip(&self.theta_star).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(SpsaError::Dimension {
            what,
            got: v.len(),
            expected,
        });
    }
    Ok(())
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Gains `a_k = a/(k+2)^0.602` and `c_k = c/(k+1)^0.101`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSchedule {
    pub a: f64,
    pub c: f64,
}

impl GainSchedule {
    pub const EXPONENT_A: f64 = 0.602;
    pub const EXPONENT_C: f64 = 0.101;
    pub const OFFSET_A: f64 = 2.0;
    pub const OFFSET_C: f64 = 1.0;

    pub fn new(a: f64, c: f64) -> Result<Self> {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(SpsaError::InvalidParameter {
                name: "a",
                value: a,
                constraint: "must be finite and >= 0",
            });
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(SpsaError::InvalidParameter {
                name: "c",
                value: c,
                constraint: "must be finite and > 0",
            });
        }
        Ok(GainSchedule { a, c })
    }

    pub fn gain_a(&self, k: usize) -> f64 {
        self.a / (k as f64 + Self::OFFSET_A).powf(Self::EXPONENT_A)
    }

    pub fn gain_c(&self, k: usize) -> f64 {
        self.c / (k as f64 + Self::OFFSET_C).powf(Self::EXPONENT_C)
    }
}

/// `y(θ) = L(θ) + ε` with a fresh noise draw.
pub fn noisy_eval<R: Rng + ?Sized>(problem: &ProblemConfig, theta: &[f64], rng: &mut R) -> f64 {
    let eps = problem.noise.sample(rng, problem.sigma2);
    problem.loss.value(theta) + eps
}

/// Simultaneous perturbation gradient estimate with given noise
/// realizations. Evaluates the loss exactly twice.
pub fn sp_gradient(
    problem: &ProblemConfig,
    theta: &[f64],
    c_k: f64,
    delta: &[f64],
    eps_plus: f64,
    eps_minus: f64,
) -> Result<Vec<f64>> {
    let p = problem.p();
    check_len("theta", theta, p)?;
    check_len("delta", delta, p)?;
    if c_k.is_nan() || c_k <= 0.0 {
        return Err(SpsaError::InvalidParameter {
            name: "c_k",
            value: c_k,
            constraint: "must be > 0",
        });
    }
    if let Some(index) = delta.iter().position(|&d| d == 0.0) {
        return Err(SpsaError::ZeroPerturbation { index });
    }
    let mut probe = vec![0.0; p];
    Ok(sp_gradient_unchecked(
        problem, theta, c_k, delta, eps_plus, eps_minus, &mut probe,
    ))
}

fn sp_gradient_unchecked(
    problem: &ProblemConfig,
    theta: &[f64],
    c_k: f64,
    delta: &[f64],
    eps_plus: f64,
    eps_minus: f64,
    probe: &mut [f64],
) -> Vec<f64> {
    for ((x, t), d) in probe.iter_mut().zip(theta).zip(delta) {
        *x = t + c_k * d;
    }
    let y_plus = problem.loss.value(probe) + eps_plus;
    for ((x, t), d) in probe.iter_mut().zip(theta).zip(delta) {
        *x = t - c_k * d;
    }
    let y_minus = problem.loss.value(probe) + eps_minus;
    let diff = y_plus - y_minus;
    delta.iter().map(|d| diff / (2.0 * c_k * d)).collect()
}

/// Source of the randomness consumed by one SPSA run. Per iteration the
/// run asks for the `p` perturbation components first, then `ε⁺`, then
/// `ε⁻`.
pub trait DrawSource {
    fn perturbation(&mut self, dist: &PerturbationDistribution, out: &mut [f64]);
    fn noise(&mut self, law: NoiseLaw, sigma2: f64) -> f64;
}

/// Perturbations and noise from one stream, interleaved in the order
/// above.
pub struct SingleStream<'a, R: Rng + ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> DrawSource for SingleStream<'_, R> {
    fn perturbation(&mut self, dist: &PerturbationDistribution, out: &mut [f64]) {
        dist.sample_vector(self.0, out);
    }

    fn noise(&mut self, law: NoiseLaw, sigma2: f64) -> f64 {
        law.sample(self.0, sigma2)
    }
}

/// Perturbations and noise from separate streams, so the noise sequence
/// can be replayed against a different perturbation law.
pub struct SplitStreams<P, N> {
    pub perturbation: P,
    pub noise: N,
}

impl<P: Rng, N: Rng> DrawSource for SplitStreams<P, N> {
    fn perturbation(&mut self, dist: &PerturbationDistribution, out: &mut [f64]) {
        dist.sample_vector(&mut self.perturbation, out);
    }

    fn noise(&mut self, law: NoiseLaw, sigma2: f64) -> f64 {
        law.sample(&mut self.noise, sigma2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `θ̂₀ … θ̂_k`, truncated at the first non-finite iterate.
    pub thetas: Vec<Vec<f64>>,
    pub loss_evaluations: u64,
    /// Iteration index of the first non-finite iterate, if any.
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.thetas.last().expect("trajectory holds at least θ̂₀")
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// Outcome of [`iterate`]: number of loss evaluations and, on divergence,
/// the iteration at which it happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterateOutcome {
    pub loss_evaluations: u64,
    pub diverged_at: Option<usize>,
}

fn check_run_inputs(problem: &ProblemConfig, dist: &PerturbationDistribution, k_max: usize) -> Result<()> {
    if !dist.validate().is_valid() {
        return Err(SpsaError::UnknownDistribution(dist.to_string()));
    }
    if k_max == 0 {
        return Err(SpsaError::InvalidExperiment("k_max must be >= 1".into()));
    }
    check_len("theta0", problem.theta0(), problem.p())
}

/// Runs `k_max` iterations and calls `observe(k, θ̂_k)` after each update
/// (`k = 1 … k_max`). Stops early when an iterate turns non-finite.
pub fn iterate<D, F>(
    problem: &ProblemConfig,
    schedule: &GainSchedule,
    dist: &PerturbationDistribution,
    k_max: usize,
    draws: &mut D,
    mut observe: F,
) -> Result<IterateOutcome>
where
    D: DrawSource + ?Sized,
    F: FnMut(usize, &[f64]),
{
    check_run_inputs(problem, dist, k_max)?;
    let p = problem.p();
    let mut theta = problem.theta0().to_vec();
    let mut delta = vec![0.0; p];
    let mut probe = vec![0.0; p];
    let mut evaluations = 0u64;
    for k in 0..k_max {
        draws.perturbation(dist, &mut delta);
        let eps_plus = draws.noise(problem.noise, problem.sigma2);
        let eps_minus = draws.noise(problem.noise, problem.sigma2);
        let (a_k, c_k) = (schedule.gain_a(k), schedule.gain_c(k));
        let g = sp_gradient_unchecked(problem, &theta, c_k, &delta, eps_plus, eps_minus, &mut probe);
        evaluations += 2;
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= a_k * gi;
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Ok(IterateOutcome {
                loss_evaluations: evaluations,
                diverged_at: Some(k + 1),
            });
        }
        observe(k + 1, &theta);
    }
    Ok(IterateOutcome {
        loss_evaluations: evaluations,
        diverged_at: None,
    })
}

/// Full trajectory using one random stream for everything.
pub fn spsa_run<R: Rng + ?Sized>(
    problem: &ProblemConfig,
    schedule: &GainSchedule,
    dist: &PerturbationDistribution,
    k_max: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    spsa_run_with(problem, schedule, dist, k_max, &mut SingleStream(rng))
}

pub fn spsa_run_with<D: DrawSource + ?Sized>(
    problem: &ProblemConfig,
    schedule: &GainSchedule,
    dist: &PerturbationDistribution,
    k_max: usize,
    draws: &mut D,
) -> Result<Trajectory> {
    let mut thetas = Vec::with_capacity(k_max + 1);
    thetas.push(problem.theta0().to_vec());
    let outcome = iterate(problem, schedule, dist, k_max, draws, |_, t| thetas.push(t.to_vec()))?;
    Ok(Trajectory {
        thetas,
        loss_evaluations: outcome.loss_evaluations,
        diverged_at: outcome.diverged_at,
    })
}
