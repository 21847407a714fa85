//! Certainty-equivalent smoothing: the maximum-likelihood state trajectory
//! for fixed parameters.
//!
//! The penalized objective `J(x, θ) - ρ_x ‖x - x_prev‖²` is a negated sum of
//! squares under Gaussian noise, so it is maximized with Levenberg-Marquardt
//! on the stacked weighted residuals. The normal matrix is block tridiagonal
//! in time (each dynamics residual couples only `x_t` and `x_{t+1}`), and the
//! damped system is solved with a block Cholesky factorization whose cost is
//! linear in the horizon.

use std::ops::Range;

use nalgebra::Cholesky;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::eval::{ekf_evaluate, EkfSettings};
use crate::model::{DiagonalGaussian, GaussianNoiseSpec, Matrix, NoiseChannel, SystemModel, Vector};

/// Decomposition of the joint log-likelihood `J`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointObjectiveTerms {
    /// Σ_t log p_v(y_t - g(x_t)).
    pub obs_loglik: f64,
    /// Σ_t log p_w(x_{t+1} - f(x_t)).
    pub dyn_loglik: f64,
    /// log p(x₁); zero under the default improper prior.
    pub prior_loglik: f64,
    pub total: f64,
}

fn check_sequences(model: &dyn SystemModel, noise: &GaussianNoiseSpec, y: &[Vector], u: &[Vector], x: &[Vector]) -> Result<()> {
    let horizon = y.len();
    if horizon < 1 {
        return Err(Error::Config("empty observation sequence".into()));
    }
    check_dim("input sequence length", horizon, u.len())?;
    check_dim("state sequence length", horizon, x.len())?;
    check_dim("process noise", model.state_dim(), noise.sigma_w.len())?;
    check_dim("observation noise", model.obs_dim(), noise.sigma_v.len())?;
    for t in 0..horizon {
        check_dim("observation", model.obs_dim(), y[t].len())?;
        check_dim("input", model.input_dim(), u[t].len())?;
        check_dim("state", model.state_dim(), x[t].len())?;
    }
    noise.require_positive()
}

/// Evaluates `J(x_{1:T}, θ)` for one trajectory.
pub fn joint_objective(
    model: &dyn SystemModel,
    theta: &Vector,
    noise: &GaussianNoiseSpec,
    y: &[Vector],
    u: &[Vector],
    x: &[Vector],
    prior: Option<&DiagonalGaussian>,
) -> Result<JointObjectiveTerms> {
    check_sequences(model, noise, y, u, x)?;
    let mut obs = 0.0;
    let mut dynamics = 0.0;
    for t in 0..y.len() {
        let r = &y[t] - model.observe(theta, &x[t], &u[t], t);
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "observation residual", t });
        }
        obs += noise.log_prob(r.as_slice(), NoiseChannel::Observation)?;
        if t + 1 < y.len() {
            let r = &x[t + 1] - model.step(theta, &x[t], &u[t], t);
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "dynamics residual", t });
            }
            dynamics += noise.log_prob(r.as_slice(), NoiseChannel::Process)?;
        }
    }
    let prior_loglik = match prior {
        Some(p) => {
            check_dim("initial-state prior", model.state_dim(), p.dim())?;
            p.log_prob(x[0].as_slice())
        }
        None => 0.0,
    };
    Ok(JointObjectiveTerms {
        obs_loglik: obs,
        dyn_loglik: dynamics,
        prior_loglik,
        total: obs + dynamics + prior_loglik,
    })
}

/// A group of consecutive residual rows and the state blocks it depends on.
#[derive(Debug, Clone)]
pub struct ResidualGroup {
    pub rows: Range<usize>,
    /// `(time index, ∂r/∂x_t)` for every state the group touches.
    pub blocks: Vec<(usize, Matrix)>,
}

/// Weighted residuals with their block-sparse Jacobian.
///
/// `-½ ‖residual‖² + constant` equals `J(x, θ) - ρ_x ‖x - x_prev‖²`.
#[derive(Debug, Clone)]
pub struct ResidualStack {
    pub residual: Vector,
    pub groups: Vec<ResidualGroup>,
    pub constant: f64,
    pub state_dim: usize,
    pub horizon: usize,
}

impl ResidualStack {
    pub fn half_squared_norm(&self) -> f64 {
        0.5 * self.residual.norm_squared()
    }

    /// `-½ ‖r‖² + constant`.
    pub fn penalized_objective(&self) -> f64 {
        self.constant - self.half_squared_norm()
    }

    /// Dense Jacobian, `rows × (T·n)`.
    pub fn dense_jacobian(&self) -> Matrix {
        let n = self.state_dim;
        let mut j = Matrix::zeros(self.residual.len(), self.horizon * n);
        for g in &self.groups {
            for (t, block) in &g.blocks {
                j.view_mut((g.rows.start, t * n), (g.rows.len(), n)).copy_from(block);
            }
        }
        j
    }

    /// `Jᵀ r`, the gradient of `½‖r‖²` with respect to the stacked states.
    pub fn gradient(&self) -> Vector {
        let n = self.state_dim;
        let mut g = Vector::zeros(self.horizon * n);
        for grp in &self.groups {
            let r = self.residual.rows(grp.rows.start, grp.rows.len());
            for (t, block) in &grp.blocks {
                let mut seg = g.rows_mut(t * n, n);
                seg += block.transpose() * r;
            }
        }
        g
    }

    fn normal_equations(&self) -> BlockTridiagonal {
        let n = self.state_dim;
        let mut sys = BlockTridiagonal::zeros(self.horizon, n);
        for grp in &self.groups {
            let r = self.residual.rows(grp.rows.start, grp.rows.len());
            for (a, (ta, ja)) in grp.blocks.iter().enumerate() {
                let jat = ja.transpose();
                sys.rhs[*ta] += &jat * r;
                for (tb, jb) in &grp.blocks[a..] {
                    let prod = &jat * jb;
                    match tb.cmp(ta) {
                        std::cmp::Ordering::Equal => sys.diag[*ta] += prod,
                        std::cmp::Ordering::Greater => {
                            debug_assert_eq!(*tb, ta + 1);
                            sys.lower[*ta] += prod.transpose();
                        }
                        std::cmp::Ordering::Less => {
                            debug_assert_eq!(*ta, tb + 1);
                            sys.lower[*tb] += prod;
                        }
                    }
                }
            }
        }
        sys
    }
}

/// Builds weighted residuals
/// `r_obs,t = (y_t - g(x_t)) / σ_v`, `r_dyn,t = (x_{t+1} - f(x_t)) / σ_w`,
/// `r_tr,t = √(2ρ_x) (x_t - x_prev,t)` and, with a prior,
/// `r_prior = (x_1 - μ) / s`.
#[allow(clippy::too_many_arguments)]
pub fn residual_stack(
    model: &dyn SystemModel,
    theta: &Vector,
    noise: &GaussianNoiseSpec,
    y: &[Vector],
    u: &[Vector],
    x: &[Vector],
    x_prev: &[Vector],
    rho_x: f64,
    prior: Option<&DiagonalGaussian>,
) -> Result<ResidualStack> {
    check_sequences(model, noise, y, u, x)?;
    check_dim("trust-region anchor length", x.len(), x_prev.len())?;
    if !(rho_x >= 0.0) {
        return Err(Error::Config("rho_x must be nonnegative".into()));
    }
    let horizon = y.len();
    let n = model.state_dim();
    let m = model.obs_dim();
    let inv_v = Vector::from_iterator(m, noise.sigma_v.iter().map(|s| 1.0 / s));
    let inv_w = Vector::from_iterator(n, noise.sigma_w.iter().map(|s| 1.0 / s));

    let mut values: Vec<f64> = Vec::new();
    let mut groups = Vec::new();
    let mut push = |values: &mut Vec<f64>, r: Vector, blocks: Vec<(usize, Matrix)>| {
        let start = values.len();
        values.extend(r.iter());
        groups.push(ResidualGroup {
            rows: start..values.len(),
            blocks,
        });
    };

    for t in 0..horizon {
        let r = (&y[t] - model.observe(theta, &x[t], &u[t], t)).component_mul(&inv_v);
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "observation residual", t });
        }
        let gx = model.observation_jacobians(theta, &x[t], &u[t], t).wrt_state;
        let block = -Matrix::from_diagonal(&inv_v) * gx;
        push(&mut values, r, vec![(t, block)]);
    }
    for t in 0..horizon.saturating_sub(1) {
        let r = (&x[t + 1] - model.step(theta, &x[t], &u[t], t)).component_mul(&inv_w);
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "dynamics residual", t });
        }
        let fx = model.dynamics_jacobians(theta, &x[t], &u[t], t).wrt_state;
        let w = Matrix::from_diagonal(&inv_w);
        push(&mut values, r, vec![(t, -&w * fx), (t + 1, w)]);
    }
    if rho_x > 0.0 {
        let s = (2.0 * rho_x).sqrt();
        for t in 0..horizon {
            check_dim("trust-region anchor", n, x_prev[t].len())?;
            push(&mut values, (&x[t] - &x_prev[t]) * s, vec![(t, Matrix::identity(n, n) * s)]);
        }
    }
    let mut constant = horizon as f64 * noise.log_normalizer(NoiseChannel::Observation)
        + horizon.saturating_sub(1) as f64 * noise.log_normalizer(NoiseChannel::Process);
    if let Some(p) = prior {
        check_dim("initial-state prior", n, p.dim())?;
        let inv = Vector::from_iterator(n, p.std.iter().map(|s| 1.0 / s));
        let mean = Vector::from_column_slice(&p.mean);
        constant += p.log_prob(&p.mean);
        push(&mut values, (&x[0] - mean).component_mul(&inv), vec![(0, Matrix::from_diagonal(&inv))]);
    }
    Ok(ResidualStack {
        residual: Vector::from_vec(values),
        groups,
        constant,
        state_dim: n,
        horizon,
    })
}

/// Symmetric block-tridiagonal system with right-hand side.
#[derive(Debug, Clone)]
struct BlockTridiagonal {
    diag: Vec<Matrix>,
    /// `lower[t]` is the block at (t+1, t).
    lower: Vec<Matrix>,
    rhs: Vec<Vector>,
}

impl BlockTridiagonal {
    fn zeros(horizon: usize, n: usize) -> Self {
        Self {
            diag: vec![Matrix::zeros(n, n); horizon],
            lower: vec![Matrix::zeros(n, n); horizon.saturating_sub(1)],
            rhs: vec![Vector::zeros(n); horizon],
        }
    }

    /// Solves `(M + λ I) δ = -rhs` by block Cholesky; `None` if a pivot
    /// block is not positive definite.
    fn solve_damped(&self, lambda: f64) -> Option<Vec<Vector>> {
        let horizon = self.diag.len();
        let n = self.diag.first().map_or(0, |d| d.nrows());
        let eye = Matrix::identity(n, n);
        let mut factors: Vec<Matrix> = Vec::with_capacity(horizon);
        let mut coupling: Vec<Matrix> = Vec::with_capacity(horizon.saturating_sub(1));
        for t in 0..horizon {
            let mut s = &self.diag[t] + &eye * lambda;
            if t > 0 {
                let w: &Matrix = &coupling[t - 1];
                s -= w * w.transpose();
            }
            let l = Cholesky::new(s)?.unpack();
            if t + 1 < horizon {
                // W_t = E_t L_t^{-T}  ⇔  W_tᵀ = L_t^{-1} E_tᵀ.
                let wt = l.solve_lower_triangular(&self.lower[t].transpose())?;
                coupling.push(wt.transpose());
            }
            factors.push(l);
        }
        let mut z: Vec<Vector> = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let mut b = -&self.rhs[t];
            if t > 0 {
                b -= &coupling[t - 1] * &z[t - 1];
            }
            z.push(factors[t].solve_lower_triangular(&b)?);
        }
        let mut delta = vec![Vector::zeros(n); horizon];
        for t in (0..horizon).rev() {
            let mut b = z[t].clone();
            if t + 1 < horizon {
                b -= coupling[t].transpose() * &delta[t + 1];
            }
            delta[t] = factors[t].transpose().solve_upper_triangular(&b)?;
        }
        Some(delta)
    }
}

/// Levenberg-Marquardt settings for the smoother.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherOptions {
    /// Trust-region weight ρ_x.
    pub rho_x: f64,
    pub max_iterations: usize,
    /// Stop when `‖Jᵀr‖∞` falls below this.
    pub gradient_tol: f64,
    /// Stop when the step max-norm falls below this.
    pub step_tol: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
    /// Optional Gaussian prior on x₁; `None` drops the term.
    pub prior: Option<DiagonalGaussian>,
}

impl Default for SmootherOptions {
    fn default() -> Self {
        Self {
            rho_x: 0.5,
            max_iterations: 100,
            gradient_tol: 1e-8,
            step_tol: 1e-8,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            lambda_max: 1e16,
            prior: None,
        }
    }
}

impl SmootherOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_x >= 0.0) {
            return Err(Error::Config("smoother rho_x must be nonnegative".into()));
        }
        if !(self.gradient_tol > 0.0 && self.step_tol > 0.0) {
            return Err(Error::Config("smoother tolerances must be positive".into()));
        }
        if !(self.lambda_up > 1.0 && self.lambda_down > 1.0) {
            return Err(Error::Config("damping factors must exceed 1".into()));
        }
        if !(self.lambda_init > 0.0 && self.lambda_max > self.lambda_init) {
            return Err(Error::Config("damping range is invalid".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("smoother needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// One damped Gauss-Newton attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmootherIteration {
    /// Penalized objective after the attempt.
    pub objective: f64,
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct SmoothResult {
    pub states: Vec<Vector>,
    /// `J(x, θ) - ρ_x ‖x - x_init‖²` at `states`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<SmootherIteration>,
}

fn max_norm<'a>(vs: impl IntoIterator<Item = &'a Vector>) -> f64 {
    vs.into_iter().map(|v| v.amax()).fold(0.0, f64::max)
}

/// Maximizes `J(x, θ) - ρ_x ‖x - x_init‖²` over the states of one trajectory,
/// starting from `x_init`.
pub fn smooth(
    model: &dyn SystemModel,
    theta: &Vector,
    noise: &GaussianNoiseSpec,
    y: &[Vector],
    u: &[Vector],
    x_init: &[Vector],
    options: &SmootherOptions,
) -> Result<SmoothResult> {
    options.validate()?;
    if x_init.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Config("smoother initialization is not finite".into()));
    }
    let prior = options.prior.as_ref();
    let stack_at = |x: &[Vector]| residual_stack(model, theta, noise, y, u, x, x_init, options.rho_x, prior);

    let mut x: Vec<Vector> = x_init.to_vec();
    let mut stack = stack_at(&x)?;
    let mut cost = stack.half_squared_norm();
    let mut system = stack.normal_equations();
    let mut lambda = options.lambda_init;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < options.max_iterations {
        if max_norm(&system.rhs) < options.gradient_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let Some(delta) = system.solve_damped(lambda) else {
            lambda *= options.lambda_up;
            history.push(SmootherIteration {
                objective: stack.constant - cost,
                lambda,
                accepted: false,
            });
            if lambda > options.lambda_max {
                return Err(Error::Numerical(format!(
                    "smoother normal equations stayed singular up to damping {lambda:e}"
                )));
            }
            continue;
        };
        let step = max_norm(&delta);
        let candidate: Vec<Vector> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let trial = stack_at(&candidate).ok();
        let new_cost = trial.as_ref().map_or(f64::INFINITY, |s| s.half_squared_norm());

        let g_dot_d: f64 = system.rhs.iter().zip(&delta).map(|(g, d)| g.dot(d)).sum();
        let d_sq: f64 = delta.iter().map(|d| d.norm_squared()).sum();
        let predicted = 0.5 * (lambda * d_sq - g_dot_d);

        if new_cost.is_finite() && new_cost < cost {
            x = candidate;
            stack = trial.expect("finite cost implies a residual stack");
            cost = new_cost;
            system = stack.normal_equations();
            lambda = (lambda / options.lambda_down).max(1e-300);
            history.push(SmootherIteration {
                objective: stack.constant - cost,
                lambda,
                accepted: true,
            });
            if step < options.step_tol {
                converged = true;
                break;
            }
        } else {
            history.push(SmootherIteration {
                objective: stack.constant - cost,
                lambda,
                accepted: false,
            });
            // No representable improvement left.
            if step < options.step_tol || predicted <= f64::EPSILON * cost.max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
            lambda *= options.lambda_up;
            if lambda > options.lambda_max {
                return Err(Error::Numerical(format!(
                    "smoother could not improve the objective below damping {lambda:e}"
                )));
            }
        }
    }
    Ok(SmoothResult {
        states: x,
        objective: stack.constant - cost,
        iterations,
        converged,
        history,
    })
}

/// Epoch-one state initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StateInit {
    /// Extended Kalman filter means under the initial parameters, started
    /// from the initial-state prior when one is configured and from the
    /// observation lift of `y_1` otherwise.
    #[default]
    Filter,
    /// `x_t = C⁺ (y_t - d_t)` when the observation is affine in the state,
    /// zeros otherwise.
    ObservationLift,
    Zeros,
}

fn lift(model: &dyn SystemModel, theta: &Vector, y: &Vector, u: &Vector, t: usize) -> Vector {
    let n = model.state_dim();
    match model.linear_observation(theta, u, t) {
        Some((c, d)) => c
            .pseudo_inverse(1e-12)
            .map(|pinv| pinv * (y - d))
            .unwrap_or_else(|_| Vector::zeros(n)),
        None => Vector::zeros(n),
    }
}

/// Initial state guess for one trajectory.
pub fn initial_states(
    model: &dyn SystemModel,
    theta: &Vector,
    noise: &GaussianNoiseSpec,
    y: &[Vector],
    u: &[Vector],
    mode: StateInit,
    prior: Option<&DiagonalGaussian>,
) -> Result<Vec<Vector>> {
    check_dim("input sequence length", y.len(), u.len())?;
    let n = model.state_dim();
    match mode {
        StateInit::Zeros => Ok(vec![Vector::zeros(n); y.len()]),
        StateInit::ObservationLift => Ok(y.iter().zip(u).enumerate().map(|(t, (yt, ut))| lift(model, theta, yt, ut, t)).collect()),
        StateInit::Filter => {
            if y.is_empty() {
                return Err(Error::Config("empty observation sequence".into()));
            }
            let (x0, var0) = match prior {
                Some(p) => {
                    check_dim("initial-state prior", n, p.dim())?;
                    (Vector::from_column_slice(&p.mean), Vector::from_iterator(n, p.std.iter().map(|s| s * s)))
                }
                None => (lift(model, theta, &y[0], &u[0], 0), Vector::from_element(n, 1.0)),
            };
            let settings = EkfSettings::from_noise(noise, x0, Matrix::from_diagonal(&var0));
            Ok(ekf_evaluate(model, theta, y, u, &settings)?.filtered_means)
        }
    }
}

/// Observations, inputs and a state guess for one trajectory.
#[derive(Debug, Clone, Copy)]
pub struct SmoothingTask<'a> {
    pub y: &'a [Vector],
    pub u: &'a [Vector],
    pub x_init: &'a [Vector],
}

/// Smooths independent trajectories in parallel; results keep input order.
pub fn smooth_batch(
    model: &dyn SystemModel,
    theta: &Vector,
    noise: &GaussianNoiseSpec,
    tasks: &[SmoothingTask<'_>],
    options: &SmootherOptions,
) -> Result<Vec<SmoothResult>> {
    tasks
        .par_iter()
        .map(|task| smooth(model, theta, noise, task.y, task.u, task.x_init, options))
        .collect()
}
