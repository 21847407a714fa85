//! Evaluation: dynamics error ε(θ), prediction RMSE, the extended Kalman
//! filter used to score models with hidden states, and exact Kalman
//! filter / Rauch-Tung-Striebel oracles for linear-Gaussian systems.

use nalgebra::Cholesky;
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::model::{GaussianNoiseSpec, Matrix, SystemModel, Vector};
use crate::simulate::InitialConditionSpec;
use crate::zoo::LtiModel;

/// Default number of Monte-Carlo draws for ε(θ).
pub const DEFAULT_DYNAMICS_ERROR_DRAWS: usize = 1024;

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// ε(θ) = E_{x∼p(x₀)} ‖f_θ(x) − f_θtrue(x)‖₂, estimated from `draws` samples.
pub fn dynamics_error<R: Rng + ?Sized>(
    model: &dyn SystemModel,
    theta: &Vector,
    theta_true: &Vector,
    initial: &InitialConditionSpec,
    draws: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    let q = model.param_layout().len();
    check_dim("theta", q, theta.len())?;
    check_dim("theta_true", q, theta_true.len())?;
    check_dim("initial-condition distribution", model.state_dim(), initial.dim())?;
    if draws == 0 {
        return Err(Error::Config("dynamics error needs at least one draw".into()));
    }
    let u = Vector::zeros(model.input_dim());
    let mut values = Vec::with_capacity(draws);
    for _ in 0..draws {
        let x = initial.sample(rng);
        let d = (model.step(theta, &x, &u, 0) - model.step(theta_true, &x, &u, 0)).norm();
        if !d.is_finite() {
            return Err(Error::NonFinite { what: "dynamics error sample", t: 0 });
        }
        values.push(d);
    }
    Ok(mean_and_stderr(&values))
}

pub(crate) fn mean_and_stderr(values: &[f64]) -> McEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std_error = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    McEstimate { mean, std_error }
}

/// Root mean squared prediction error over steps `drop_first..T`.
pub fn rmse(predicted: &[Vector], measured: &[Vector], drop_first: usize) -> Result<f64> {
    check_dim("prediction sequence length", measured.len(), predicted.len())?;
    if predicted.len() <= drop_first {
        return Err(Error::Config(format!(
            "cannot drop {drop_first} of {} predictions",
            predicted.len()
        )));
    }
    let mut total = 0.0;
    for (p, m) in predicted.iter().zip(measured).skip(drop_first) {
        check_dim("prediction", m.len(), p.len())?;
        total += (p - m).norm_squared();
    }
    Ok((total / (predicted.len() - drop_first) as f64).sqrt())
}

/// Filter settings shared by the EKF and the exact Kalman filter.
///
/// `x0, sigma0` describe the belief about the first state before its
/// observation is seen.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfSettings {
    pub q: Matrix,
    pub r: Matrix,
    pub sigma0: Matrix,
    pub x0: Vector,
    /// Initial predictions excluded from RMSE.
    pub drop_first: usize,
}

impl EkfSettings {
    /// `Q = R = Σ₀ = I`, `x₀ = 0`, first 25 predictions dropped.
    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            q: Matrix::identity(n, n),
            r: Matrix::identity(m, m),
            sigma0: Matrix::identity(n, n),
            x0: Vector::zeros(n),
            drop_first: 25,
        }
    }

    /// Covariances taken from a diagonal noise specification.
    pub fn from_noise(noise: &GaussianNoiseSpec, x0: Vector, sigma0: Matrix) -> Self {
        let sq = |s: &[f64]| Matrix::from_diagonal(&Vector::from_iterator(s.len(), s.iter().map(|v| v * v)));
        Self {
            q: sq(&noise.sigma_w),
            r: sq(&noise.sigma_v),
            sigma0,
            x0,
            drop_first: 0,
        }
    }

    fn validate(&self, n: usize, m: usize) -> Result<()> {
        check_dim("Q", n, self.q.nrows())?;
        check_dim("Q", n, self.q.ncols())?;
        check_dim("R", m, self.r.nrows())?;
        check_dim("R", m, self.r.ncols())?;
        check_dim("Sigma0", n, self.sigma0.nrows())?;
        check_dim("Sigma0", n, self.sigma0.ncols())?;
        check_dim("x0", n, self.x0.len())?;
        for (name, mat) in [("Q", &self.q), ("R", &self.r), ("Sigma0", &self.sigma0)] {
            if (mat - mat.transpose()).amax() > 1e-12 * mat.amax().max(1.0) || Cholesky::new(mat.clone()).is_none() {
                return Err(Error::Config(format!("{name} must be symmetric positive definite")));
            }
        }
        Ok(())
    }
}

fn symmetrize(p: &Matrix) -> Matrix {
    (p + p.transpose()) * 0.5
}

/// Joseph-form measurement update. Returns the corrected mean/covariance.
fn joseph_update(
    mean: &Vector,
    cov: &Matrix,
    c: &Matrix,
    r: &Matrix,
    innovation: &Vector,
    t: usize,
) -> Result<(Vector, Matrix)> {
    let s = c * cov * c.transpose() + r;
    let chol = Cholesky::new(symmetrize(&s))
        .ok_or_else(|| Error::Numerical(format!("innovation covariance not positive definite at step {t}")))?;
    // K = P Cᵀ S⁻¹ = (S⁻¹ C P)ᵀ, using symmetry of P and S.
    let gain = chol.solve(&(c * cov)).transpose();
    let n = mean.len();
    let i_kc = Matrix::identity(n, n) - &gain * c;
    let updated = mean + &gain * innovation;
    let cov = &i_kc * cov * i_kc.transpose() + &gain * r * gain.transpose();
    Ok((updated, symmetrize(&cov)))
}

/// Output of a forward filter.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// Belief about x_t before seeing y_t.
    pub predicted_means: Vec<Vector>,
    pub predicted_covs: Vec<Matrix>,
    /// Belief about x_t after seeing y_t.
    pub filtered_means: Vec<Vector>,
    pub filtered_covs: Vec<Matrix>,
    /// One-step observation predictions g(x̂_{t|t-1}).
    pub predicted_obs: Vec<Vector>,
}

/// Exact Kalman filter for an LTI model at parameters θ.
pub fn kalman_filter(model: &LtiModel, theta: &Vector, y: &[Vector], u: &[Vector], settings: &EkfSettings) -> Result<FilterOutput> {
    let (a, b, c, d) = model.matrices(theta);
    let n = a.nrows();
    settings.validate(n, c.nrows())?;
    check_dim("input sequence length", y.len(), u.len())?;
    let mut out = FilterOutput {
        predicted_means: Vec::with_capacity(y.len()),
        predicted_covs: Vec::with_capacity(y.len()),
        filtered_means: Vec::with_capacity(y.len()),
        filtered_covs: Vec::with_capacity(y.len()),
        predicted_obs: Vec::with_capacity(y.len()),
    };
    let mut mean = settings.x0.clone();
    let mut cov = settings.sigma0.clone();
    for t in 0..y.len() {
        check_dim("observation", c.nrows(), y[t].len())?;
        check_dim("input", b.ncols(), u[t].len())?;
        let y_hat = &c * &mean + &d * &u[t];
        out.predicted_means.push(mean.clone());
        out.predicted_covs.push(cov.clone());
        let (m_f, p_f) = joseph_update(&mean, &cov, &c, &settings.r, &(&y[t] - &y_hat), t)?;
        out.predicted_obs.push(y_hat);
        mean = &a * &m_f + &b * &u[t];
        cov = symmetrize(&(&a * &p_f * a.transpose() + &settings.q));
        out.filtered_means.push(m_f);
        out.filtered_covs.push(p_f);
    }
    Ok(out)
}

/// Fixed-interval smoothed moments.
#[derive(Debug, Clone)]
pub struct SmootherOutput {
    pub means: Vec<Vector>,
    pub covs: Vec<Matrix>,
}

/// Rauch-Tung-Striebel smoother on top of [`kalman_filter`].
pub fn rts_smoother(model: &LtiModel, theta: &Vector, y: &[Vector], u: &[Vector], settings: &EkfSettings) -> Result<SmootherOutput> {
    let filt = kalman_filter(model, theta, y, u, settings)?;
    let (a, _, _, _) = model.matrices(theta);
    let horizon = y.len();
    let mut means = filt.filtered_means.clone();
    let mut covs = filt.filtered_covs.clone();
    for t in (0..horizon.saturating_sub(1)).rev() {
        let p_pred = &filt.predicted_covs[t + 1];
        let chol = Cholesky::new(p_pred.clone())
            .ok_or_else(|| Error::Numerical(format!("predicted covariance not positive definite at step {}", t + 1)))?;
        // G = P_f Aᵀ P_pred⁻¹ = (P_pred⁻¹ A P_f)ᵀ.
        let gain = chol.solve(&(&a * &filt.filtered_covs[t])).transpose();
        let dm = &means[t + 1] - &filt.predicted_means[t + 1];
        means[t] = &filt.filtered_means[t] + &gain * dm;
        let dp = &covs[t + 1] - p_pred;
        covs[t] = symmetrize(&(&filt.filtered_covs[t] + &gain * dp * gain.transpose()));
    }
    Ok(SmootherOutput { means, covs })
}

/// Predicted observations of an EKF run and their RMSE.
#[derive(Debug, Clone)]
pub struct EkfEvaluation {
    pub predicted_obs: Vec<Vector>,
    pub filtered_means: Vec<Vector>,
    pub rmse: f64,
}

/// Runs an EKF over one trajectory. At each step the observation is first
/// predicted from the current state estimate (this prediction is scored),
/// then the estimate is corrected with the measurement and propagated.
pub fn ekf_evaluate(
    model: &dyn SystemModel,
    theta: &Vector,
    y: &[Vector],
    u: &[Vector],
    settings: &EkfSettings,
) -> Result<EkfEvaluation> {
    settings.validate(model.state_dim(), model.obs_dim())?;
    check_dim("input sequence length", y.len(), u.len())?;
    let mut mean = settings.x0.clone();
    let mut cov = settings.sigma0.clone();
    let mut predicted_obs = Vec::with_capacity(y.len());
    let mut filtered_means = Vec::with_capacity(y.len());
    for t in 0..y.len() {
        check_dim("observation", model.obs_dim(), y[t].len())?;
        check_dim("input", model.input_dim(), u[t].len())?;
        let y_hat = model.observe(theta, &mean, &u[t], t);
        let c = model.observation_jacobians(theta, &mean, &u[t], t).wrt_state;
        let (m_f, p_f) = joseph_update(&mean, &cov, &c, &settings.r, &(&y[t] - &y_hat), t)?;
        predicted_obs.push(y_hat);
        let f = model.dynamics_jacobians(theta, &m_f, &u[t], t).wrt_state;
        mean = model.step(theta, &m_f, &u[t], t);
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "EKF state", t });
        }
        cov = symmetrize(&(&f * &p_f * f.transpose() + &settings.q));
        filtered_means.push(m_f);
    }
    let rmse = rmse(&predicted_obs, y, settings.drop_first)?;
    Ok(EkfEvaluation {
        predicted_obs,
        filtered_means,
        rmse,
    })
}

/// Per-trajectory RMSE with aggregates and, when available, ε(θ).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_trajectory_rmse: Vec<f64>,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub dynamics_error: Option<McEstimate>,
}

impl MetricReport {
    pub fn new(per_trajectory_rmse: Vec<f64>, dynamics_error: Option<McEstimate>) -> Self {
        let n = per_trajectory_rmse.len().max(1) as f64;
        let mean = per_trajectory_rmse.iter().sum::<f64>() / n;
        let var = if per_trajectory_rmse.len() > 1 {
            per_trajectory_rmse.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            per_trajectory_rmse,
            mean_rmse: mean,
            std_rmse: var.sqrt(),
            dynamics_error,
        }
    }
}
