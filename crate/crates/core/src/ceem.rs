//! The CE-EM outer loop: alternate smoothing and learning until the joint
//! objective stops improving.

use std::time::{Duration, Instant};

use crate::error::{check_dim, Error, Result};
use crate::learner::{learn, LearnerOptions, StateBatch};
use crate::model::{GaussianNoiseSpec, SystemModel, Vector};
use crate::report::{EpochRecord, FitReport, Termination, TruthEvaluator};
use crate::simulate::Trajectory;
use crate::smoother::{initial_states, joint_objective, smooth_batch, SmootherOptions, SmoothingTask, StateInit};

/// A model, its noise model and the observed trajectories to fit.
#[derive(Clone, Copy)]
pub struct FitProblem<'a> {
    pub model: &'a dyn SystemModel,
    pub noise: &'a GaussianNoiseSpec,
    pub data: &'a [Trajectory],
    /// Scores each epoch's estimate with ε(θ) when the truth is known.
    pub truth: Option<&'a TruthEvaluator>,
}

impl<'a> FitProblem<'a> {
    pub fn new(model: &'a dyn SystemModel, noise: &'a GaussianNoiseSpec, data: &'a [Trajectory]) -> Self {
        Self { model, noise, data, truth: None }
    }

    pub fn with_truth(self, truth: &'a TruthEvaluator) -> Self {
        Self { truth: Some(truth), ..self }
    }

    pub fn observation_count(&self) -> usize {
        self.data.iter().map(|t| t.len() * self.model.obs_dim()).sum()
    }

    pub(crate) fn validate(&self, theta: &Vector) -> Result<()> {
        if self.data.is_empty() {
            return Err(Error::Config("no trajectories to fit".into()));
        }
        check_dim("parameters", self.model.param_layout().len(), theta.len())?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("initial parameters are not finite".into()));
        }
        self.noise.require_positive()?;
        for tr in self.data {
            tr.validate(self.model.state_dim(), self.model.obs_dim(), self.model.input_dim())?;
        }
        Ok(())
    }

    pub(crate) fn dynamics_error(&self, theta: &Vector) -> Result<Option<crate::eval::McEstimate>> {
        self.truth.map(|t| t.evaluate(self.model, theta)).transpose()
    }
}

/// Wall clock for a fit that leaves out time spent scoring against the truth.
pub(crate) struct FitClock {
    start: Instant,
    scoring: Duration,
}

impl FitClock {
    pub(crate) fn start() -> Self {
        Self { start: Instant::now(), scoring: Duration::ZERO }
    }

    pub(crate) fn score(&mut self, problem: &FitProblem<'_>, theta: &Vector) -> Result<Option<crate::eval::McEstimate>> {
        let t = Instant::now();
        let out = problem.dynamics_error(theta);
        self.scoring += t.elapsed();
        out
    }

    pub(crate) fn seconds(&self) -> f64 {
        self.start.elapsed().saturating_sub(self.scoring).as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeemConfig {
    /// Stop once an epoch improves `J` by at most this; `None` uses
    /// `1e-6` per scalar observation.
    pub tol: Option<f64>,
    pub max_epochs: usize,
    /// Smoothing settings, including ρ_x.
    pub smoother: SmootherOptions,
    /// Learning settings, including ρ_θ.
    pub learner: LearnerOptions,
    pub init: StateInit,
}

impl Default for CeemConfig {
    fn default() -> Self {
        Self {
            tol: None,
            max_epochs: 100,
            smoother: SmootherOptions::default(),
            learner: LearnerOptions::default(),
            init: StateInit::default(),
        }
    }
}

impl CeemConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(tol) = self.tol {
            if !(tol > 0.0) {
                return Err(Error::Config("tol must be positive".into()));
            }
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        self.smoother.validate()?;
        self.learner.validate()
    }

    pub fn tolerance(&self, observation_count: usize) -> f64 {
        self.tol.unwrap_or(1e-6 * observation_count as f64)
    }
}

/// Summed joint objective over all trajectories, in trajectory order.
pub fn batch_objective(problem: &FitProblem<'_>, theta: &Vector, states: &[Vec<Vector>], smoother: &SmootherOptions) -> Result<f64> {
    let mut total = 0.0;
    for (tr, x) in problem.data.iter().zip(states) {
        total += joint_objective(problem.model, theta, problem.noise, &tr.y, &tr.u, x, smoother.prior.as_ref())?.total;
    }
    Ok(total)
}

/// Runs CE-EM from `theta_init`, initializing the states per `config.init`.
pub fn ceem_fit(problem: &FitProblem<'_>, theta_init: &Vector, config: &CeemConfig) -> Result<FitReport> {
    problem.validate(theta_init)?;
    let states = problem
        .data
        .iter()
        .map(|tr| initial_states(problem.model, theta_init, problem.noise, &tr.y, &tr.u, config.init, config.smoother.prior.as_ref()))
        .collect::<Result<_>>()?;
    ceem_fit_from(problem, theta_init, states, config)
}

/// Runs CE-EM from given parameters and state estimates.
pub fn ceem_fit_from(problem: &FitProblem<'_>, theta_init: &Vector, states_init: Vec<Vec<Vector>>, config: &CeemConfig) -> Result<FitReport> {
    config.validate()?;
    problem.validate(theta_init)?;
    check_dim("initial state trajectories", problem.data.len(), states_init.len())?;
    let tol = config.tolerance(problem.observation_count());
    let mut clock = FitClock::start();

    let mut theta = theta_init.clone();
    let mut states = states_init;
    let mut objective = batch_objective(problem, &theta, &states, &config.smoother)?;
    let initial = EpochRecord {
        epoch: 0,
        objective,
        dynamics_error: clock.score(problem, &theta)?,
        wall_seconds: clock.seconds(),
        theta: theta.clone(),
    };

    let mut epochs = Vec::new();
    let mut termination = Termination::MaxEpochs;
    for epoch in 1..=config.max_epochs {
        let step = || -> Result<(Vec<Vec<Vector>>, Vector, f64)> {
            let tasks: Vec<_> = problem
                .data
                .iter()
                .zip(&states)
                .map(|(tr, x)| SmoothingTask { y: &tr.y, u: &tr.u, x_init: x })
                .collect();
            let smoothed: Vec<Vec<Vector>> = smooth_batch(problem.model, &theta, problem.noise, &tasks, &config.smoother)?
                .into_iter()
                .map(|r| r.states)
                .collect();
            let batches: Vec<_> = problem
                .data
                .iter()
                .zip(&smoothed)
                .map(|(tr, x)| StateBatch::new(x, &tr.y, &tr.u))
                .collect();
            let learned = learn(problem.model, problem.noise, &batches, &theta, &config.learner)?;
            let value = batch_objective(problem, &learned.theta, &smoothed, &config.smoother)?;
            Ok((smoothed, learned.theta, value))
        };
        let (next_states, next_theta, next_objective) = step().map_err(|e| e.at_epoch(epoch))?;
        states = next_states;
        theta = next_theta;
        let record = EpochRecord {
            epoch,
            objective: next_objective,
            dynamics_error: clock.score(problem, &theta).map_err(|e| e.at_epoch(epoch))?,
            wall_seconds: clock.seconds(),
            theta: theta.clone(),
        };
        log::info!(
            "ceem epoch {epoch}: J = {next_objective:.6e}{}",
            record.dynamics_error.map(|e| format!(", eps = {:.4e}", e.mean)).unwrap_or_default()
        );
        epochs.push(record);
        let improvement = next_objective - objective;
        objective = next_objective;
        if improvement <= tol {
            termination = Termination::Tolerance;
            break;
        }
    }

    Ok(FitReport {
        algorithm: "ceem".into(),
        initial,
        epochs,
        theta,
        states,
        termination,
    })
}
