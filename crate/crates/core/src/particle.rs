//! Particle EM baseline: particle filtering, backward simulation and
//! stochastic-approximation EM.


use nalgebra::{Cholesky, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::ceem::{FitClock, FitProblem};
use crate::error::{check_dim, Error, Result};
use crate::learner::{learn, LearnResult, LearnerOptions, StateBatch};
use crate::model::{GaussianNoiseSpec, Matrix, SystemModel, Vector};
use crate::report::{EpochRecord, FitReport, Termination};
use crate::rng::{purpose, stream_rng};
use crate::simulate::{InitialConditionSpec, Trajectory};
use crate::smoother::joint_objective;

/// Buffers whose SAEM weight falls below this are discarded.
pub const SAEM_DROP_WEIGHT: f64 = 1e-3;

/// FFBSi rejection attempts before the exact categorical draw.
const REJECTION_TRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proposal {
    /// Exact conditional Gaussian given the next observation.
    FullyAdapted,
    Bootstrap,
}

/// Output of a forward particle filter over one trajectory.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    /// `particles[t][i]`.
    pub particles: Vec<Vec<Vector>>,
    /// Normalized filter weights `weights[t][i]`.
    pub weights: Vec<Vec<f64>>,
    /// Index of each particle's parent at `t - 1`; the identity at `t = 0`.
    pub ancestors: Vec<Vec<usize>>,
    pub ess: Vec<f64>,
    /// Noiseless predictions `f(x_t^i)` for `t < T - 1`.
    pub predictions: Vec<Vec<Vector>>,
    pub proposal: Proposal,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn num_particles(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn filtered_mean(&self, t: usize) -> Vector {
        let n = self.particles[t][0].len();
        self.particles[t]
            .iter()
            .zip(&self.weights[t])
            .fold(Vector::zeros(n), |acc, (x, w)| acc + x * *w)
    }

    pub fn filtered_means(&self) -> Vec<Vector> {
        (0..self.len()).map(|t| self.filtered_mean(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOptions {
    pub particles: usize,
    /// Resample when ESS drops below this fraction of the particle count.
    pub resample_threshold: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self { particles: 100, resample_threshold: 0.5 }
    }
}

impl FilterOptions {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("particle count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::Config("resample threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Effective sample size `1 / Σ w²` of normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: one uniform offset, `n` evenly spaced positions.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::Config("cannot resample from an empty weight vector".into()));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("resampling weights must be nonnegative and sum to 1, got sum {total}")));
    }
    let offset: f64 = rng.gen::<f64>() / n as f64;
    let mut indices = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut i = 0;
    for k in 0..n {
        let position = offset + k as f64 / n as f64;
        while position >= cumulative && i + 1 < weights.len() {
            i += 1;
            cumulative += weights[i];
        }
        indices.push(i);
    }
    Ok(indices)
}

/// Normalizes log-weights in place and returns the normalized weights.
fn normalize_log_weights(log_w: &[f64], t: usize) -> Result<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degeneracy { t });
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degeneracy { t });
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// `L` with `L Lᵀ = cov` for a positive semi-definite `cov`.
fn psd_factor(cov: &Matrix) -> Matrix {
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let scales = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * Matrix::from_diagonal(&scales)
}

fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn diag_sq(s: &[f64]) -> Matrix {
    Matrix::from_diagonal(&Vector::from_iterator(s.len(), s.iter().map(|v| v * v)))
}

/// Gaussian conditional of `x ~ N(mean, cov)` given `y = Cx + d + v`.
struct Conditional {
    gain: Matrix,
    factor: Matrix,
    s_inv: Matrix,
}

impl Conditional {
    fn new(cov: &Matrix, c: &Matrix, r: &Matrix, t: usize) -> Result<Self> {
        let s = c * cov * c.transpose() + r;
        let chol = Cholesky::new((&s + s.transpose()) * 0.5)
            .ok_or_else(|| Error::Numerical(format!("predictive observation covariance not positive definite at step {t}")))?;
        let gain = chol.solve(&(c * cov)).transpose();
        let post = cov - &gain * c * cov;
        Ok(Self { factor: psd_factor(&post), s_inv: chol.inverse(), gain })
    }

    fn log_predictive(&self, residual: &Vector) -> f64 {
        -0.5 * residual.dot(&(&self.s_inv * residual))
    }
}

fn obs_log_likelihood(residual: &Vector, sigma_v: &[f64]) -> f64 {
    -0.5 * residual.iter().zip(sigma_v).map(|(r, s)| (r / s) * (r / s)).sum::<f64>()
}

/// Forward particle filter at parameters θ.
///
/// Uses the fully adapted proposal when the model reports a linear
/// observation map and a bootstrap proposal otherwise. With a single particle
/// no weighting or resampling happens and the particle follows the dynamics
/// with process noise.
#[allow(clippy::too_many_arguments)]
pub fn particle_filter<R: Rng + ?Sized>(
    model: &dyn SystemModel,
    theta: &Vector,
    noise: &GaussianNoiseSpec,
    y: &[Vector],
    u: &[Vector],
    initial: &InitialConditionSpec,
    options: &FilterOptions,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    options.validate()?;
    let n = model.state_dim();
    let np = options.particles;
    check_dim("initial condition", n, initial.dim())?;
    check_dim("process noise", n, noise.sigma_w.len())?;
    check_dim("observation noise", model.obs_dim(), noise.sigma_v.len())?;
    check_dim("input sequence length", y.len(), u.len())?;
    if y.is_empty() {
        return Err(Error::Config("cannot filter an empty trajectory".into()));
    }
    if np > 1 && noise.sigma_v.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config("particle weighting needs positive observation noise".into()));
    }
    let adapted = np > 1 && model.linear_observation(theta, &u[0], 0).is_some();
    let proposal = if adapted { Proposal::FullyAdapted } else { Proposal::Bootstrap };
    if np > 1 && !adapted {
        log::info!("observation map of {} is not linear; using the bootstrap proposal", model.id());
    }
    let sigma_w = diag_sq(&noise.sigma_w);
    let r = diag_sq(&noise.sigma_v);
    let w_factor = Vector::from_column_slice(&noise.sigma_w);

    let horizon = y.len();
    let mut ens = ParticleEnsemble {
        particles: Vec::with_capacity(horizon),
        weights: Vec::with_capacity(horizon),
        ancestors: Vec::with_capacity(horizon),
        ess: Vec::with_capacity(horizon),
        predictions: Vec::with_capacity(horizon.saturating_sub(1)),
        proposal,
    };

    let m0 = Vector::from_column_slice(&initial.mean);
    let p0 = diag_sq(&initial.std);
    let uniform = vec![1.0 / np as f64; np];
    let (x0, w0) = if adapted {
        let (c, d) = model.linear_observation(theta, &u[0], 0).expect("checked above");
        let cond = Conditional::new(&p0, &c, &r, 0)?;
        let mean = &m0 + &cond.gain * (&y[0] - &c * &m0 - &d);
        let xs = (0..np).map(|_| &mean + &cond.factor * standard_normal(n, rng)).collect();
        (xs, uniform.clone())
    } else {
        let std = Vector::from_column_slice(&initial.std);
        let xs: Vec<Vector> = (0..np).map(|_| &m0 + standard_normal(n, rng).component_mul(&std)).collect();
        let w = if np > 1 {
            let log_w: Vec<f64> = xs.iter().map(|x| obs_log_likelihood(&(&y[0] - model.observe(theta, x, &u[0], 0)), &noise.sigma_v)).collect();
            normalize_log_weights(&log_w, 0)?
        } else {
            uniform.clone()
        };
        (xs, w)
    };
    ens.ess.push(effective_sample_size(&w0));
    ens.particles.push(x0);
    ens.weights.push(w0);
    ens.ancestors.push((0..np).collect());

    for t in 1..horizon {
        let prev = &ens.particles[t - 1];
        let prev_w = &ens.weights[t - 1];
        let mut preds = Vec::with_capacity(np);
        for x in prev {
            let f = model.step(theta, x, &u[t - 1], t - 1);
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "particle prediction", t: t - 1 });
            }
            preds.push(f);
        }
        let (next, weights, ancestors) = if np == 1 {
            let x = &preds[0] + standard_normal(n, rng).component_mul(&w_factor);
            (vec![x], uniform.clone(), vec![0])
        } else if adapted {
            let (c, d) = model
                .linear_observation(theta, &u[t], t)
                .ok_or_else(|| Error::Config(format!("observation map stopped being linear at step {t}")))?;
            let cond = Conditional::new(&sigma_w, &c, &r, t)?;
            let residuals: Vec<Vector> = preds.iter().map(|f| &y[t] - &c * f - &d).collect();
            let log_lambda: Vec<f64> = residuals
                .iter()
                .zip(prev_w)
                .map(|(res, w)| w.ln() + cond.log_predictive(res))
                .collect();
            let lambda = normalize_log_weights(&log_lambda, t)?;
            let (ancestors, weights) = if effective_sample_size(&lambda) < options.resample_threshold * np as f64 {
                (systematic_resample(&lambda, np, rng)?, uniform.clone())
            } else {
                ((0..np).collect(), lambda)
            };
            let next = ancestors
                .iter()
                .map(|&a| &preds[a] + &cond.gain * &residuals[a] + &cond.factor * standard_normal(n, rng))
                .collect();
            (next, weights, ancestors)
        } else {
            let (ancestors, carried) = if effective_sample_size(prev_w) < options.resample_threshold * np as f64 {
                (systematic_resample(prev_w, np, rng)?, uniform.clone())
            } else {
                ((0..np).collect(), prev_w.clone())
            };
            let next: Vec<Vector> = ancestors
                .iter()
                .map(|&a| &preds[a] + standard_normal(n, rng).component_mul(&w_factor))
                .collect();
            let log_w: Vec<f64> = next
                .iter()
                .zip(&carried)
                .map(|(x, w)| w.ln() + obs_log_likelihood(&(&y[t] - model.observe(theta, x, &u[t], t)), &noise.sigma_v))
                .collect();
            (next, normalize_log_weights(&log_w, t)?, ancestors)
        };
        ens.ess.push(effective_sample_size(&weights));
        ens.predictions.push(preds);
        ens.particles.push(next);
        ens.weights.push(weights);
        ens.ancestors.push(ancestors);
    }
    Ok(ens)
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect()
}

fn draw_index<R: Rng + ?Sized>(cum: &[f64], rng: &mut R) -> usize {
    let total = *cum.last().expect("nonempty");
    let target = rng.gen::<f64>() * total;
    cum.partition_point(|c| *c <= target).min(cum.len() - 1)
}

/// Draws `n_s` smoothed trajectories by backward simulation.
///
/// At each step the ancestor is proposed from the filter weights and accepted
/// with the transition density relative to its maximum; after a few
/// rejections the exact categorical draw is used instead.
pub fn ffbsi_sample<R: Rng + ?Sized>(ensemble: &ParticleEnsemble, noise: &GaussianNoiseSpec, n_s: usize, rng: &mut R) -> Result<Vec<Vec<Vector>>> {
    let horizon = ensemble.len();
    if horizon == 0 || n_s == 0 {
        return Err(Error::Config("backward simulation needs a nonempty ensemble and at least one sample".into()));
    }
    if horizon > 1 && noise.sigma_w.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config("backward simulation needs positive process noise".into()));
    }
    let cums: Vec<Vec<f64>> = ensemble.weights.iter().map(|w| cumulative(w)).collect();
    let log_transition = |t: usize, i: usize, next: &Vector| -> f64 {
        let f = &ensemble.predictions[t][i];
        -0.5 * next
            .iter()
            .zip(f.iter())
            .zip(&noise.sigma_w)
            .map(|((a, b), s)| ((a - b) / s).powi(2))
            .sum::<f64>()
    };

    let mut samples = Vec::with_capacity(n_s);
    for _ in 0..n_s {
        let mut path = vec![Vector::zeros(0); horizon];
        let mut j = draw_index(&cums[horizon - 1], rng);
        path[horizon - 1] = ensemble.particles[horizon - 1][j].clone();
        for t in (0..horizon - 1).rev() {
            let next = &path[t + 1];
            let mut chosen = None;
            for _ in 0..REJECTION_TRIES {
                let i = draw_index(&cums[t], rng);
                if rng.gen::<f64>() < log_transition(t, i, next).exp() {
                    chosen = Some(i);
                    break;
                }
            }
            j = match chosen {
                Some(i) => i,
                None => {
                    let log_w: Vec<f64> = ensemble.weights[t]
                        .iter()
                        .enumerate()
                        .map(|(i, w)| w.ln() + log_transition(t, i, next))
                        .collect();
                    let w = normalize_log_weights(&log_w, t)?;
                    draw_index(&cumulative(&w), rng)
                }
            };
            path[t] = ensemble.particles[t][j].clone();
        }
        samples.push(path);
    }
    Ok(samples)
}

/// SAEM step sizes: 1 for the first `burn_in` iterations, then `(k - burn_in)^-exponent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaemSchedule {
    pub burn_in: usize,
    pub exponent: f64,
}

impl Default for SaemSchedule {
    fn default() -> Self {
        Self { burn_in: 5, exponent: 0.7 }
    }
}

impl SaemSchedule {
    /// Step size at iteration `k >= 1`.
    pub fn gamma(&self, k: usize) -> f64 {
        if k <= self.burn_in {
            1.0
        } else {
            ((k - self.burn_in) as f64).powf(-self.exponent)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.exponent > 0.5 && self.exponent <= 1.0) {
            return Err(Error::Config("SAEM exponent must lie in (0.5, 1]".into()));
        }
        Ok(())
    }
}

/// Smoothed samples from one iteration, `samples[trajectory][draw][t]`, with
/// their stochastic-approximation weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBuffer {
    pub weight: f64,
    pub samples: Vec<Vec<Vec<Vector>>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SaemState {
    pub buffers: Vec<SampleBuffer>,
    pub iteration: usize,
}

impl SaemState {
    /// Scales retained buffers by `1 - γ`, appends the new samples with
    /// weight γ and drops buffers below [`SAEM_DROP_WEIGHT`].
    pub fn blend(mut self, new_samples: Vec<Vec<Vec<Vector>>>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("SAEM step size must lie in (0, 1], got {gamma}")));
        }
        for b in &mut self.buffers {
            b.weight *= 1.0 - gamma;
        }
        self.buffers.retain(|b| b.weight >= SAEM_DROP_WEIGHT);
        self.buffers.push(SampleBuffer { weight: gamma, samples: new_samples });
        self.iteration += 1;
        Ok(self)
    }

    /// One weighted batch per retained sample trajectory.
    pub fn batches<'a>(&'a self, data: &'a [Trajectory]) -> Result<Vec<StateBatch<'a>>> {
        let mut batches = Vec::new();
        for b in &self.buffers {
            check_dim("sampled trajectories", data.len(), b.samples.len())?;
            for (tr, draws) in data.iter().zip(&b.samples) {
                let w = b.weight / draws.len() as f64;
                batches.extend(draws.iter().map(|x| StateBatch::new(x, &tr.y, &tr.u).weighted(w)));
            }
        }
        Ok(batches)
    }
}

/// Blends `new_samples` into the SAEM state and maximizes the blended
/// Monte-Carlo objective.
#[allow(clippy::too_many_arguments)]
pub fn saem_update(
    state: SaemState,
    new_samples: Vec<Vec<Vec<Vector>>>,
    gamma: f64,
    model: &dyn SystemModel,
    noise: &GaussianNoiseSpec,
    data: &[Trajectory],
    theta_prev: &Vector,
    options: &LearnerOptions,
) -> Result<(LearnResult, SaemState)> {
    let state = state.blend(new_samples, gamma)?;
    let learned = learn(model, noise, &state.batches(data)?, theta_prev, options)?;
    Ok((learned, state))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PemConfig {
    pub filter: FilterOptions,
    /// Backward-simulated trajectories per data trajectory and epoch.
    pub backward_samples: usize,
    pub epochs: usize,
    pub schedule: SaemSchedule,
    pub learner: LearnerOptions,
    /// Distribution of the first state.
    pub initial: InitialConditionSpec,
    pub seed: u64,
}

impl PemConfig {
    /// 100 particles, 10 backward samples, 50 epochs and an unregularized
    /// M-step.
    pub fn new(initial: InitialConditionSpec) -> Self {
        Self {
            filter: FilterOptions::default(),
            backward_samples: 10,
            epochs: 50,
            schedule: SaemSchedule::default(),
            learner: LearnerOptions { rho_theta: 0.0, ..Default::default() },
            initial,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        if self.filter.particles < 2 {
            return Err(Error::Config("particle EM needs at least 2 particles".into()));
        }
        if self.backward_samples == 0 {
            return Err(Error::Config("backward_samples must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.learner.validate()
    }
}

/// Filters and backward-simulates every trajectory at θ.
fn sample_states(problem: &FitProblem<'_>, theta: &Vector, config: &PemConfig, epoch: usize) -> Result<Vec<Vec<Vec<Vector>>>> {
    problem
        .data
        .par_iter()
        .enumerate()
        .map(|(j, tr)| {
            let stream = ((epoch as u64) << 20) | j as u64;
            let mut rng = stream_rng(config.seed, purpose::FILTER, stream);
            let ens = particle_filter(problem.model, theta, problem.noise, &tr.y, &tr.u, &config.initial, &config.filter, &mut rng)?;
            let mut rng = stream_rng(config.seed, purpose::BACKWARD, stream);
            ffbsi_sample(&ens, problem.noise, config.backward_samples, &mut rng)
        })
        .collect()
}

/// Mean joint objective of the samples at θ, summed over trajectories.
fn sample_objective(problem: &FitProblem<'_>, theta: &Vector, samples: &[Vec<Vec<Vector>>]) -> Result<f64> {
    let mut total = 0.0;
    for (tr, draws) in problem.data.iter().zip(samples) {
        let mut sum = 0.0;
        for x in draws {
            sum += joint_objective(problem.model, theta, problem.noise, &tr.y, &tr.u, x, None)?.total;
        }
        total += sum / draws.len() as f64;
    }
    Ok(total)
}

fn sample_means(samples: &[Vec<Vec<Vector>>]) -> Vec<Vec<Vector>> {
    samples
        .iter()
        .map(|draws| {
            let scale = 1.0 / draws.len() as f64;
            (0..draws[0].len())
                .map(|t| draws.iter().fold(Vector::zeros(draws[0][t].len()), |acc, x| acc + &x[t]) * scale)
                .collect()
        })
        .collect()
}

/// Runs particle EM for `config.epochs` epochs.
///
/// Each epoch filters every trajectory, draws backward samples, blends them
/// into the SAEM objective and maximizes it. The recorded objective is the
/// mean joint log-likelihood of the new samples at the updated parameters.
pub fn pem_fit(problem: &FitProblem<'_>, theta_init: &Vector, config: &PemConfig) -> Result<FitReport> {
    config.validate()?;
    problem.validate(theta_init)?;
    let mut clock = FitClock::start();
    let initial_samples = sample_states(problem, theta_init, config, 0)?;
    let initial = EpochRecord {
        epoch: 0,
        objective: sample_objective(problem, theta_init, &initial_samples)?,
        dynamics_error: clock.score(problem, theta_init)?,
        wall_seconds: clock.seconds(),
        theta: theta_init.clone(),
    };

    let mut theta = theta_init.clone();
    let mut state = SaemState::default();
    let mut states = sample_means(&initial_samples);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut step = || -> Result<(Vector, f64, Vec<Vec<Vector>>)> {
            let samples = sample_states(problem, &theta, config, epoch)?;
            let means = sample_means(&samples);
            let gamma = config.schedule.gamma(epoch);
            let (learned, next) = saem_update(std::mem::take(&mut state), samples, gamma, problem.model, problem.noise, problem.data, &theta, &config.learner)?;
            state = next;
            let newest = &state.buffers.last().expect("just pushed").samples;
            let objective = sample_objective(problem, &learned.theta, newest)?;
            Ok((learned.theta, objective, means))
        };
        let (next_theta, objective, means) = step().map_err(|e| e.at_epoch(epoch))?;
        theta = next_theta;
        states = means;
        let record = EpochRecord {
            epoch,
            objective,
            dynamics_error: clock.score(problem, &theta).map_err(|e| e.at_epoch(epoch))?,
            wall_seconds: clock.seconds(),
            theta: theta.clone(),
        };
        log::info!(
            "pem epoch {epoch}: Q = {objective:.6e}{}",
            record.dynamics_error.map(|e| format!(", eps = {:.4e}", e.mean)).unwrap_or_default()
        );
        epochs.push(record);
    }

    Ok(FitReport {
        algorithm: "pem".into(),
        initial,
        epochs,
        theta,
        states,
        termination: Termination::MaxEpochs,
    })
}
