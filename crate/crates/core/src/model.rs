//! State-space model abstraction.
//!
//! A model is a pair of discrete-time maps
//!
//! ```text
//! x_{t+1} = f_θ(x_t, u_t, t) + w_t
//! y_t     = g_θ(x_t, u_t, t) + v_t
//! ```
//!
//! with additive diagonal Gaussian noise. Models are stateless with respect to
//! θ: every evaluator receives the flat parameter vector explicitly, so a
//! single model value can be shared across threads and evaluated at many
//! parameter values during learning.

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Named slices of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    slices: Vec<(String, Range<usize>)>,
}

impl ParamLayout {
    /// Builds a layout from `(name, len)` pairs laid out back to back.
    pub fn from_lengths<S: Into<String>>(parts: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut start = 0;
        let slices = parts
            .into_iter()
            .map(|(name, len)| {
                let r = start..start + len;
                start += len;
                (name.into(), r)
            })
            .collect();
        Self { slices }
    }

    pub fn len(&self) -> usize {
        self.slices.last().map_or(0, |(_, r)| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, name: &str) -> Option<Range<usize>> {
        self.slices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Range<usize>)> {
        self.slices.iter().map(|(n, r)| (n.as_str(), r.clone()))
    }
}

/// Flat parameter vector θ together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    values: Vector,
    layout: ParamLayout,
}

impl ParamVec {
    pub fn new(values: Vector, layout: ParamLayout) -> Result<Self> {
        check_dim("parameter vector", layout.len(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("parameter vector has non-finite entries".into()));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &Vector {
        &self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .slice(name)
            .map(|r| &self.values.as_slice()[r])
    }

    pub fn into_values(self) -> Vector {
        self.values
    }
}

/// Jacobians of one map (dynamics or observation) at a point.
#[derive(Debug, Clone)]
pub struct Linearization {
    /// Derivative with respect to the state.
    pub wrt_state: Matrix,
    /// Derivative with respect to θ.
    pub wrt_params: Matrix,
    /// Set when the Jacobians came from finite differences.
    pub approximate: bool,
}

/// All four model Jacobians at a point.
#[derive(Debug, Clone)]
pub struct Jacobians {
    pub df_dx: Matrix,
    pub df_dtheta: Matrix,
    pub dg_dx: Matrix,
    pub dg_dtheta: Matrix,
    pub approximate: bool,
}

/// A parametric discrete-time state-space model.
///
/// Implementations must be pure functions of their arguments.
pub trait SystemModel: Send + Sync {
    /// Zoo identifier, e.g. `"lorenz"`.
    fn id(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn param_layout(&self) -> ParamLayout;

    /// Sample period for models produced by integrating a continuous drift.
    fn dt(&self) -> Option<f64> {
        None
    }

    /// Noiseless next state f_θ(x, u, t).
    fn step(&self, theta: &Vector, x: &Vector, u: &Vector, t: usize) -> Vector;

    /// Noiseless observation g_θ(x, u, t).
    fn observe(&self, theta: &Vector, x: &Vector, u: &Vector, t: usize) -> Vector;

    fn dynamics_jacobians(&self, theta: &Vector, x: &Vector, u: &Vector, t: usize) -> Linearization {
        finite_difference(
            |th, xx| self.step(th, xx, u, t),
            theta,
            x,
        )
    }

    fn observation_jacobians(&self, theta: &Vector, x: &Vector, u: &Vector, t: usize) -> Linearization {
        finite_difference(
            |th, xx| self.observe(th, xx, u, t),
            theta,
            x,
        )
    }

    /// `Some((C, d))` when the observation is affine in the state,
    /// `g_θ(x, u, t) = C x + d`.
    fn linear_observation(&self, _theta: &Vector, _u: &Vector, _t: usize) -> Option<(Matrix, Vector)> {
        None
    }
}

/// Central finite-difference Jacobians of `map(θ, x)`.
pub fn finite_difference<F>(map: F, theta: &Vector, x: &Vector) -> Linearization
where
    F: Fn(&Vector, &Vector) -> Vector,
{
    let f0 = map(theta, x);
    let rows = f0.len();
    let column = |i: usize, base: &Vector, eval: &dyn Fn(&Vector) -> Vector| {
        let h = 1e-6 * base[i].abs().max(1.0);
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        (eval(&plus) - eval(&minus)) / (2.0 * h)
    };
    let mut wrt_state = Matrix::zeros(rows, x.len());
    for i in 0..x.len() {
        wrt_state.set_column(i, &column(i, x, &|xx| map(theta, xx)));
    }
    let mut wrt_params = Matrix::zeros(rows, theta.len());
    for i in 0..theta.len() {
        wrt_params.set_column(i, &column(i, theta, &|th| map(th, x)));
    }
    Linearization {
        wrt_state,
        wrt_params,
        approximate: true,
    }
}

fn check_point(model: &dyn SystemModel, theta: &Vector, x: &Vector, u: &Vector, t: usize) -> Result<()> {
    check_dim("state", model.state_dim(), x.len())?;
    check_dim("input", model.input_dim(), u.len())?;
    check_dim("parameters", model.param_layout().len(), theta.len())?;
    if x.iter().chain(u.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "state or input", t });
    }
    Ok(())
}

/// Checked evaluation of f_θ(x, u, t).
pub fn dynamics_step(model: &dyn SystemModel, theta: &Vector, x: &Vector, u: &Vector, t: usize) -> Result<Vector> {
    check_point(model, theta, x, u, t)?;
    Ok(model.step(theta, x, u, t))
}

/// Checked evaluation of g_θ(x, u, t).
pub fn observe(model: &dyn SystemModel, theta: &Vector, x: &Vector, u: &Vector, t: usize) -> Result<Vector> {
    check_point(model, theta, x, u, t)?;
    Ok(model.observe(theta, x, u, t))
}

/// Checked evaluation of all four Jacobians.
pub fn jacobians(model: &dyn SystemModel, theta: &Vector, x: &Vector, u: &Vector, t: usize) -> Result<Jacobians> {
    check_point(model, theta, x, u, t)?;
    let f = model.dynamics_jacobians(theta, x, u, t);
    let g = model.observation_jacobians(theta, x, u, t);
    Ok(Jacobians {
        approximate: f.approximate || g.approximate,
        df_dx: f.wrt_state,
        df_dtheta: f.wrt_params,
        dg_dx: g.wrt_state,
        dg_dtheta: g.wrt_params,
    })
}

/// Which noise channel a residual belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseChannel {
    Process,
    Observation,
}

/// Additive diagonal Gaussian process and observation noise.
///
/// Zero standard deviations are accepted so that noiseless data can be
/// simulated; evaluating a log-density requires strictly positive entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoiseSpec {
    pub sigma_w: Vec<f64>,
    pub sigma_v: Vec<f64>,
}

impl GaussianNoiseSpec {
    pub fn new(sigma_w: Vec<f64>, sigma_v: Vec<f64>) -> Result<Self> {
        if sigma_w.iter().chain(&sigma_v).any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("noise standard deviations must be finite and nonnegative".into()));
        }
        Ok(Self { sigma_w, sigma_v })
    }

    /// Isotropic noise, σ_w on each of `n` states and σ_v on each of `m` outputs.
    pub fn isotropic(n: usize, sigma_w: f64, m: usize, sigma_v: f64) -> Result<Self> {
        Self::new(vec![sigma_w; n], vec![sigma_v; m])
    }

    pub fn sigmas(&self, which: NoiseChannel) -> &[f64] {
        match which {
            NoiseChannel::Process => &self.sigma_w,
            NoiseChannel::Observation => &self.sigma_v,
        }
    }

    /// Fails unless every standard deviation is strictly positive.
    pub fn require_positive(&self) -> Result<()> {
        if self.sigma_w.iter().chain(&self.sigma_v).all(|s| *s > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("noise standard deviations must be strictly positive".into()))
        }
    }

    /// Σ_i -½ log(2π σ_i²) for one channel.
    pub fn log_normalizer(&self, which: NoiseChannel) -> f64 {
        self.sigmas(which)
            .iter()
            .map(|s| -0.5 * (2.0 * PI * s * s).ln())
            .sum()
    }

    /// Diagonal Gaussian log-density of `residual` in one channel.
    pub fn log_prob(&self, residual: &[f64], which: NoiseChannel) -> Result<f64> {
        let sigmas = self.sigmas(which);
        check_dim("noise residual", sigmas.len(), residual.len())?;
        if sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("noise standard deviations must be strictly positive".into()));
        }
        Ok(residual
            .iter()
            .zip(sigmas)
            .map(|(r, s)| -0.5 * (2.0 * PI * s * s).ln() - r * r / (2.0 * s * s))
            .sum())
    }
}

/// Diagonal Gaussian log-density; standalone form of [`GaussianNoiseSpec::log_prob`].
pub fn log_prob_noise(spec: &GaussianNoiseSpec, residual: &[f64], which: NoiseChannel) -> Result<f64> {
    spec.log_prob(residual, which)
}

/// Diagonal Gaussian prior used for x₁ in the smoother and for θ in the learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_dim("gaussian prior", mean.len(), std.len())?;
        if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("prior standard deviations must be strictly positive".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| {
                let z = (x - m) / s;
                -0.5 * (2.0 * PI * s * s).ln() - 0.5 * z * z
            })
            .sum()
    }

    /// Gradient of [`Self::log_prob`].
    pub fn grad_log_prob(&self, x: &[f64]) -> Vector {
        Vector::from_iterator(
            x.len(),
            x.iter()
                .zip(&self.mean)
                .zip(&self.std)
                .map(|((x, m), s)| -(x - m) / (s * s)),
        )
    }
}
