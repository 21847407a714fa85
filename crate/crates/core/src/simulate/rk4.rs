//! Fixed-step classical Runge-Kutta integration and discretized models.

use crate::error::{Error, Result};
use crate::model::{finite_difference, Linearization, Matrix, ParamLayout, SystemModel, Vector};

/// A continuous-time drift ẋ = F_θ(x, u, t).
pub trait ContinuousDrift: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn param_layout(&self) -> ParamLayout;

    fn drift(&self, theta: &Vector, x: &Vector, u: &Vector, t: f64) -> Vector;

    fn drift_jacobians(&self, theta: &Vector, x: &Vector, u: &Vector, t: f64) -> Linearization {
        finite_difference(|th, xx| self.drift(th, xx, u, t), theta, x)
    }
}

/// One classical RK4 step of `drift(x, u, t)` with `u` held over the step.
pub fn rk4_step<F>(drift: F, x: &Vector, u: &Vector, t: f64, dt: f64) -> Result<Vector>
where
    F: Fn(&Vector, &Vector, f64) -> Vector,
{
    if !(dt > 0.0) {
        return Err(Error::Config(format!("integration step must be positive, got {dt}")));
    }
    let eval = |x: &Vector, tt: f64| -> Result<Vector> {
        let k = drift(x, u, tt);
        if k.iter().all(|v| v.is_finite()) {
            Ok(k)
        } else {
            Err(Error::Integration { t: tt })
        }
    };
    let half = 0.5 * dt;
    let k1 = eval(x, t)?;
    let k2 = eval(&(x + &k1 * half), t + half)?;
    let k3 = eval(&(x + &k2 * half), t + half)?;
    let k4 = eval(&(x + &k3 * dt), t + dt)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// RK4 step that also returns the exact derivatives of the discrete map with
/// respect to the starting state and the parameters.
pub(crate) fn rk4_step_linearized<D: ContinuousDrift + ?Sized>(
    drift: &D,
    theta: &Vector,
    x: &Vector,
    u: &Vector,
    t: f64,
    dt: f64,
) -> (Vector, Linearization) {
    let n = x.len();
    let q = theta.len();
    let half = 0.5 * dt;
    let mut approximate = false;

    // Stage k_i = F(s_i); ds_i/dx and ds_i/dθ follow from s_i = x + c_i·dt·k_{i-1}.
    let mut stage = |s: &Vector, ds_dx: &Matrix, ds_dth: &Matrix, tt: f64| {
        let k = drift.drift(theta, s, u, tt);
        let lin = drift.drift_jacobians(theta, s, u, tt);
        approximate |= lin.approximate;
        let dk_dx = &lin.wrt_state * ds_dx;
        let dk_dth = &lin.wrt_params + &lin.wrt_state * ds_dth;
        (k, dk_dx, dk_dth)
    };

    let eye = Matrix::identity(n, n);
    let zero = Matrix::zeros(n, q);
    let (k1, k1x, k1p) = stage(x, &eye, &zero, t);
    let (k2, k2x, k2p) = stage(&(x + &k1 * half), &(&eye + &k1x * half), &(&k1p * half), t + half);
    let (k3, k3x, k3p) = stage(&(x + &k2 * half), &(&eye + &k2x * half), &(&k2p * half), t + half);
    let (k4, k4x, k4p) = stage(&(x + &k3 * dt), &(&eye + &k3x * dt), &(&k3p * dt), t + dt);

    let w = dt / 6.0;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * w;
    let wrt_state = eye + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * w;
    let wrt_params = (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * w;
    (
        next,
        Linearization {
            wrt_state,
            wrt_params,
            approximate,
        },
    )
}

/// Discrete-time model obtained by one RK4 step per sample of a continuous
/// drift, observed through a known matrix `C` (y = C x).
#[derive(Debug, Clone)]
pub struct Rk4Model<D> {
    id: String,
    drift: D,
    dt: f64,
    observation: Matrix,
}

impl<D: ContinuousDrift> Rk4Model<D> {
    pub fn new(id: impl Into<String>, drift: D, dt: f64, observation: Matrix) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("sample period must be positive, got {dt}")));
        }
        if observation.ncols() != drift.state_dim() {
            return Err(Error::Dimension {
                context: "observation matrix columns",
                expected: drift.state_dim(),
                got: observation.ncols(),
            });
        }
        Ok(Self {
            id: id.into(),
            drift,
            dt,
            observation,
        })
    }

    pub fn drift(&self) -> &D {
        &self.drift
    }

    pub fn observation_matrix(&self) -> &Matrix {
        &self.observation
    }
}

impl<D: ContinuousDrift> SystemModel for Rk4Model<D> {
    fn id(&self) -> &str {
        &self.id
    }

    fn state_dim(&self) -> usize {
        self.drift.state_dim()
    }

    fn obs_dim(&self) -> usize {
        self.observation.nrows()
    }

    fn input_dim(&self) -> usize {
        self.drift.input_dim()
    }

    fn param_layout(&self) -> ParamLayout {
        self.drift.param_layout()
    }

    fn dt(&self) -> Option<f64> {
        Some(self.dt)
    }

    fn step(&self, theta: &Vector, x: &Vector, u: &Vector, t: usize) -> Vector {
        let tt = t as f64 * self.dt;
        // Non-finite drifts propagate as non-finite states; callers check.
        rk4_step(|x, u, s| self.drift.drift(theta, x, u, s), x, u, tt, self.dt)
            .unwrap_or_else(|_| Vector::from_element(x.len(), f64::NAN))
    }

    fn observe(&self, _theta: &Vector, x: &Vector, _u: &Vector, _t: usize) -> Vector {
        &self.observation * x
    }

    fn dynamics_jacobians(&self, theta: &Vector, x: &Vector, u: &Vector, t: usize) -> Linearization {
        rk4_step_linearized(&self.drift, theta, x, u, t as f64 * self.dt, self.dt).1
    }

    fn observation_jacobians(&self, theta: &Vector, _x: &Vector, _u: &Vector, _t: usize) -> Linearization {
        Linearization {
            wrt_state: self.observation.clone(),
            wrt_params: Matrix::zeros(self.observation.nrows(), theta.len()),
            approximate: false,
        }
    }

    fn linear_observation(&self, _theta: &Vector, _u: &Vector, _t: usize) -> Option<(Matrix, Vector)> {
        Some((self.observation.clone(), Vector::zeros(self.observation.nrows())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn decay(x: &Vector, _u: &Vector, _t: f64) -> Vector {
        -x
    }

    #[test]
    fn zero_drift_is_identity() {
        let x = Vector::from_vec(vec![1.5, -2.0]);
        let out = rk4_step(|x, _, _| Vector::zeros(x.len()), &x, &Vector::zeros(0), 0.0, 0.1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn exponential_decay_matches_truncated_taylor() {
        // One RK4 step on ẋ = -x reproduces the 4th-order Taylor polynomial of e^{-h}.
        let h: f64 = 0.04;
        let taylor = 1.0 - h + h.powi(2) / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        let out = rk4_step(decay, &Vector::from_element(1, 1.0), &Vector::zeros(0), 0.0, h).unwrap();
        assert_relative_eq!(out[0], taylor, epsilon = 1e-15);
        assert_relative_eq!(out[0], 0.960_789_44, epsilon = 5e-9);
    }

    #[test]
    fn local_error_order_five() {
        let one_step_err = |h: f64| {
            let out = rk4_step(decay, &Vector::from_element(1, 1.0), &Vector::zeros(0), 0.0, h).unwrap();
            (out[0] - (-h).exp()).abs()
        };
        let ratio = one_step_err(0.2) / one_step_err(0.1);
        assert!((28.0..36.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rejects_nonpositive_step_and_nonfinite_drift() {
        let x = Vector::from_element(1, 1.0);
        let u = Vector::zeros(0);
        assert!(rk4_step(decay, &x, &u, 0.0, 0.0).is_err());
        let err = rk4_step(|x, _, _| x * f64::NAN, &x, &u, 2.5, 0.1).unwrap_err();
        assert!(matches!(err, Error::Integration { t } if t == 2.5));
    }
}
