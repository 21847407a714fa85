//! The parameter update with states held fixed.
//!
//! Maximizes `Σ_b w_b J(x_b, θ) - ρ_θ ‖θ - θ_prev‖² + log p(θ)` over θ, where
//! each batch `b` is one state trajectory with its observations.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::model::{DiagonalGaussian, GaussianNoiseSpec, NoiseChannel, SystemModel, Vector};
use crate::optim::{adam, lbfgs, nelder_mead, AdamOptions, LbfgsOptions, NelderMeadOptions, OptimOutcome};

/// Parameter dimension up to which Nelder-Mead is the automatic choice.
pub const SIMPLEX_MAX_PARAMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerStrategy {
    NelderMead,
    /// Adaptive-moment gradient ascent.
    FirstOrder,
    /// L-BFGS.
    QuasiNewton,
}

impl LearnerStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NelderMead => "nelder-mead",
            Self::FirstOrder => "first-order",
            Self::QuasiNewton => "quasi-newton",
        }
    }

    /// Strategy used when none is configured.
    pub fn auto(num_params: usize) -> Self {
        if num_params <= SIMPLEX_MAX_PARAMS {
            Self::NelderMead
        } else {
            Self::QuasiNewton
        }
    }

    fn default_iterations(self) -> usize {
        match self {
            Self::NelderMead => NelderMeadOptions::default().max_iterations,
            Self::FirstOrder => AdamOptions::default().max_iterations,
            Self::QuasiNewton => LbfgsOptions::default().max_iterations,
        }
    }
}

impl fmt::Display for LearnerStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nelder-mead" => Ok(Self::NelderMead),
            "first-order" | "adam" => Ok(Self::FirstOrder),
            "quasi-newton" | "quasi-second-order" | "lbfgs" => Ok(Self::QuasiNewton),
            other => Err(Error::Config(format!("unknown learner strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerOptions {
    /// Trust-region weight ρ_θ.
    pub rho_theta: f64,
    /// `None` picks [`LearnerStrategy::auto`].
    pub strategy: Option<LearnerStrategy>,
    /// Inner iteration budget; `None` uses the strategy default.
    pub max_iterations: Option<usize>,
    /// Adam step size.
    pub step_size: f64,
    /// Adam harmonic step decay.
    pub step_decay: f64,
    /// Relative size of the initial simplex.
    pub simplex_scale: f64,
    pub lbfgs_history: usize,
    /// Optional Gaussian prior on θ.
    pub prior: Option<DiagonalGaussian>,
}

impl Default for LearnerOptions {
    fn default() -> Self {
        Self {
            rho_theta: 0.5,
            strategy: None,
            max_iterations: None,
            step_size: AdamOptions::default().step_size,
            step_decay: 0.0,
            simplex_scale: NelderMeadOptions::default().simplex_scale,
            lbfgs_history: LbfgsOptions::default().history,
            prior: None,
        }
    }
}

impl LearnerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_theta >= 0.0) || !self.rho_theta.is_finite() {
            return Err(Error::Config("learner rho_theta must be nonnegative".into()));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::Config("learner iteration budget must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || !(self.step_decay >= 0.0) {
            return Err(Error::Config("learner step size must be positive and decay nonnegative".into()));
        }
        if !(self.simplex_scale > 0.0) {
            return Err(Error::Config("simplex scale must be positive".into()));
        }
        if self.lbfgs_history == 0 {
            return Err(Error::Config("L-BFGS history must be at least 1".into()));
        }
        Ok(())
    }

    pub fn resolved_strategy(&self, num_params: usize) -> LearnerStrategy {
        self.strategy.unwrap_or_else(|| LearnerStrategy::auto(num_params))
    }
}

/// One fixed state trajectory and its data, weighted in the objective.
#[derive(Debug, Clone, Copy)]
pub struct StateBatch<'a> {
    pub weight: f64,
    pub x: &'a [Vector],
    pub y: &'a [Vector],
    pub u: &'a [Vector],
    /// Time index of the first sample.
    pub t0: usize,
}

impl<'a> StateBatch<'a> {
    pub fn new(x: &'a [Vector], y: &'a [Vector], u: &'a [Vector]) -> Self {
        Self { weight: 1.0, x, y, u, t0: 0 }
    }

    pub fn weighted(self, weight: f64) -> Self {
        Self { weight, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnResult {
    pub theta: Vector,
    /// Regularized objective at `theta`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub strategy: LearnerStrategy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradient {
    pub value: f64,
    pub gradient: Vector,
    /// Set when any parameter Jacobian came from finite differences.
    pub approximate: bool,
}

fn check_batches(model: &dyn SystemModel, noise: &GaussianNoiseSpec, batches: &[StateBatch<'_>], theta_prev: &Vector, options: &LearnerOptions) -> Result<()> {
    options.validate()?;
    noise.require_positive()?;
    check_dim("process noise", model.state_dim(), noise.sigma_w.len())?;
    check_dim("observation noise", model.obs_dim(), noise.sigma_v.len())?;
    let q = model.param_layout().len();
    check_dim("parameters", q, theta_prev.len())?;
    if theta_prev.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "previous parameters", t: 0 });
    }
    if let Some(p) = &options.prior {
        check_dim("parameter prior", q, p.dim())?;
    }
    if batches.is_empty() {
        return Err(Error::Config("learner needs at least one state trajectory".into()));
    }
    for b in batches {
        if !(b.weight >= 0.0) || !b.weight.is_finite() {
            return Err(Error::Config("batch weights must be finite and nonnegative".into()));
        }
        let horizon = b.y.len();
        check_dim("state sequence length", horizon, b.x.len())?;
        check_dim("input sequence length", horizon, b.u.len())?;
        for t in 0..horizon {
            check_dim("state", model.state_dim(), b.x[t].len())?;
            check_dim("observation", model.obs_dim(), b.y[t].len())?;
            check_dim("input", model.input_dim(), b.u[t].len())?;
            if b.x[t].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "fixed state", t });
            }
        }
    }
    Ok(())
}

fn weighted_sq(r: &Vector, sigma: &[f64]) -> f64 {
    r.iter().zip(sigma).map(|(r, s)| (r / s).powi(2)).sum()
}

/// `J` of one batch (observation and dynamics terms) and optionally its θ-gradient.
fn batch_terms(model: &dyn SystemModel, noise: &GaussianNoiseSpec, b: &StateBatch<'_>, theta: &Vector, with_grad: bool) -> (f64, Option<Vector>, bool) {
    let q = theta.len();
    let (sw, sv) = (&noise.sigma_w, &noise.sigma_v);
    let mut sq = 0.0;
    let mut grad = with_grad.then(|| Vector::zeros(q));
    let mut approximate = false;
    let horizon = b.y.len();
    for t in 0..horizon {
        let tt = b.t0 + t;
        let (x, u) = (&b.x[t], &b.u[t]);
        let r = &b.y[t] - model.observe(theta, x, u, tt);
        sq += weighted_sq(&r, sv);
        if let Some(g) = grad.as_mut() {
            let lin = model.observation_jacobians(theta, x, u, tt);
            approximate |= lin.approximate;
            let scaled = r.zip_map(&Vector::from_column_slice(sv), |r, s| r / (s * s));
            *g += lin.wrt_params.tr_mul(&scaled);
        }
        if t + 1 < horizon {
            let r = &b.x[t + 1] - model.step(theta, x, u, tt);
            sq += weighted_sq(&r, sw);
            if let Some(g) = grad.as_mut() {
                let lin = model.dynamics_jacobians(theta, x, u, tt);
                approximate |= lin.approximate;
                let scaled = r.zip_map(&Vector::from_column_slice(sw), |r, s| r / (s * s));
                *g += lin.wrt_params.tr_mul(&scaled);
            }
        }
    }
    let constant = horizon as f64 * noise.log_normalizer(NoiseChannel::Observation)
        + horizon.saturating_sub(1) as f64 * noise.log_normalizer(NoiseChannel::Process);
    (constant - 0.5 * sq, grad, approximate)
}

fn regularized(batches: &[StateBatch<'_>], per_batch: Vec<(f64, Option<Vector>, bool)>, theta: &Vector, theta_prev: &Vector, options: &LearnerOptions) -> (f64, Option<Vector>, bool) {
    let diff = theta - theta_prev;
    let mut value = -options.rho_theta * diff.norm_squared();
    let mut grad = per_batch[0].1.as_ref().map(|_| -2.0 * options.rho_theta * &diff);
    let mut approximate = false;
    // Sequential reduction in batch order.
    for (b, (v, g, a)) in batches.iter().zip(per_batch) {
        value += b.weight * v;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            *acc += b.weight * g;
        }
        approximate |= a;
    }
    if let Some(p) = &options.prior {
        value += p.log_prob(theta.as_slice());
        if let Some(acc) = grad.as_mut() {
            *acc += p.grad_log_prob(theta.as_slice());
        }
    }
    (value, grad, approximate)
}

fn evaluate(model: &dyn SystemModel, noise: &GaussianNoiseSpec, batches: &[StateBatch<'_>], theta: &Vector, theta_prev: &Vector, options: &LearnerOptions, with_grad: bool) -> (f64, Option<Vector>, bool) {
    let per_batch: Vec<_> = batches
        .par_iter()
        .map(|b| batch_terms(model, noise, b, theta, with_grad))
        .collect();
    regularized(batches, per_batch, theta, theta_prev, options)
}

/// The regularized learning objective at θ.
pub fn learner_objective(
    model: &dyn SystemModel,
    noise: &GaussianNoiseSpec,
    batches: &[StateBatch<'_>],
    theta: &Vector,
    theta_prev: &Vector,
    options: &LearnerOptions,
) -> Result<f64> {
    check_batches(model, noise, batches, theta_prev, options)?;
    check_dim("parameters", theta_prev.len(), theta.len())?;
    Ok(evaluate(model, noise, batches, theta, theta_prev, options, false).0)
}

/// Value and gradient of the regularized learning objective at θ.
pub fn objective_and_gradient(
    model: &dyn SystemModel,
    noise: &GaussianNoiseSpec,
    batches: &[StateBatch<'_>],
    theta: &Vector,
    theta_prev: &Vector,
    options: &LearnerOptions,
) -> Result<ObjectiveGradient> {
    check_batches(model, noise, batches, theta_prev, options)?;
    check_dim("parameters", theta_prev.len(), theta.len())?;
    let (value, gradient, approximate) = evaluate(model, noise, batches, theta, theta_prev, options, true);
    Ok(ObjectiveGradient {
        value,
        gradient: gradient.expect("gradient requested"),
        approximate,
    })
}

/// Runs the configured optimizer from `theta_prev`.
///
/// The result never has a lower regularized objective than `theta_prev`; if
/// the optimizer finds no improvement, `theta_prev` is returned unconverged.
pub fn learn(
    model: &dyn SystemModel,
    noise: &GaussianNoiseSpec,
    batches: &[StateBatch<'_>],
    theta_prev: &Vector,
    options: &LearnerOptions,
) -> Result<LearnResult> {
    check_batches(model, noise, batches, theta_prev, options)?;
    let q = theta_prev.len();
    let strategy = options.resolved_strategy(q);
    let budget = options.max_iterations.unwrap_or_else(|| strategy.default_iterations());
    let start = evaluate(model, noise, batches, theta_prev, theta_prev, options, false).0;
    if !start.is_finite() {
        return Err(Error::NonFinite { what: "learner objective at previous parameters", t: 0 });
    }
    let negated = |theta: &Vector| -evaluate(model, noise, batches, theta, theta_prev, options, false).0;
    let negated_grad = |theta: &Vector| {
        let (v, g, _) = evaluate(model, noise, batches, theta, theta_prev, options, true);
        (-v, -g.expect("gradient requested"))
    };

    let outcome: OptimOutcome = match strategy {
        LearnerStrategy::NelderMead => {
            let opts = NelderMeadOptions {
                max_iterations: budget,
                simplex_scale: options.simplex_scale,
                ..Default::default()
            };
            nelder_mead(negated, theta_prev, &opts)
        }
        LearnerStrategy::FirstOrder => {
            let opts = AdamOptions {
                max_iterations: budget,
                step_size: options.step_size,
                decay: options.step_decay,
                ..Default::default()
            };
            adam(negated_grad, theta_prev, &opts)
        }
        LearnerStrategy::QuasiNewton => {
            let opts = LbfgsOptions {
                max_iterations: budget,
                history: options.lbfgs_history,
                ..Default::default()
            };
            lbfgs(negated_grad, theta_prev, &opts)
        }
    };

    let value = -outcome.value;
    if value.is_finite() && value >= start && outcome.x.iter().all(|v| v.is_finite()) {
        Ok(LearnResult {
            theta: outcome.x,
            objective: value,
            iterations: outcome.iterations,
            converged: outcome.converged,
            strategy,
        })
    } else {
        Ok(LearnResult {
            theta: theta_prev.clone(),
            objective: start,
            iterations: outcome.iterations,
            converged: false,
            strategy,
        })
    }
}
