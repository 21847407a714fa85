//! Trajectory simulation, initial-condition sampling and datasets.

pub mod dataset;
pub mod rk4;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::model::{GaussianNoiseSpec, SystemModel, Vector};
use crate::rng::{purpose, stream_rng};

pub use dataset::{read_dataset, write_dataset, Manifest, TrajectoryDataset};
pub use rk4::{rk4_step, ContinuousDrift, Rk4Model};

/// One observed (and possibly fully known) trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub y: Vec<Vector>,
    pub u: Vec<Vector>,
    /// True states, present for synthetic data.
    pub x: Option<Vec<Vector>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Checks lengths and per-step dimensions against `(n, m, p)`.
    pub fn validate(&self, n: usize, m: usize, p: usize) -> Result<()> {
        let t = self.len();
        if t < 2 {
            return Err(Error::Dataset(format!("trajectory length must be at least 2, got {t}")));
        }
        check_dim("input sequence length", t, self.u.len())?;
        for (yt, ut) in self.y.iter().zip(&self.u) {
            check_dim("observation", m, yt.len())?;
            check_dim("input", p, ut.len())?;
        }
        if let Some(x) = &self.x {
            check_dim("state sequence length", t, x.len())?;
            for xt in x {
                check_dim("state", n, xt.len())?;
            }
        }
        Ok(())
    }
}

/// Independent Gaussian initial-state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialConditionSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InitialConditionSpec {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_dim("initial-condition std", mean.len(), std.len())?;
        if std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("initial-condition std-devs must be nonnegative".into()));
        }
        Ok(Self { mean, std })
    }

    /// `x1 ~ N(-6, 2.5²)`, `x2 ~ N(-6, 2.5²)`, `x3 ~ N(24, 2.5²)` for each of `k` attractors.
    pub fn lorenz(k: usize) -> Self {
        let mean = (0..k).flat_map(|_| [-6.0, -6.0, 24.0]).collect();
        Self {
            mean,
            std: vec![2.5; 3 * k],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// The same distribution as a prior on the first state; fails when any
    /// std-dev is zero.
    pub fn as_prior(&self) -> Result<crate::model::DiagonalGaussian> {
        crate::model::DiagonalGaussian::new(self.mean.clone(), self.std.clone())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.mean.iter().zip(&self.std).map(|(m, s)| {
                let z: f64 = rng.sample(StandardNormal);
                m + s * z
            }),
        )
    }
}

pub fn sample_initial_condition<R: Rng + ?Sized>(spec: &InitialConditionSpec, rng: &mut R) -> Vector {
    spec.sample(rng)
}

/// Zero input sequence of length `t` for a model with `p` inputs.
pub fn zero_inputs(t: usize, p: usize) -> Vec<Vector> {
    vec![Vector::zeros(p); t]
}

fn gaussian_draw<R: Rng + ?Sized>(sigmas: &[f64], rng: &mut R) -> Vector {
    Vector::from_iterator(
        sigmas.len(),
        sigmas.iter().map(|s| {
            let z: f64 = rng.sample(StandardNormal);
            s * z
        }),
    )
}

/// Rolls the model forward from `x0`, adding process and observation noise
/// drawn from stream `(seed, trajectory, stream)`.
///
/// `y_t = g(x_t) + v_t` for every `t`, and `x_{t+1} = f(x_t) + w_t`.
#[allow(clippy::too_many_arguments)]
pub fn generate_trajectory(
    model: &dyn SystemModel,
    theta: &Vector,
    x0: &Vector,
    inputs: &[Vector],
    horizon: usize,
    noise: &GaussianNoiseSpec,
    seed: u64,
    stream: u64,
) -> Result<Trajectory> {
    if horizon < 2 {
        return Err(Error::Config(format!("trajectory length must be at least 2, got {horizon}")));
    }
    check_dim("initial state", model.state_dim(), x0.len())?;
    check_dim("input sequence length", horizon, inputs.len())?;
    check_dim("process noise", model.state_dim(), noise.sigma_w.len())?;
    check_dim("observation noise", model.obs_dim(), noise.sigma_v.len())?;
    check_dim("parameters", model.param_layout().len(), theta.len())?;
    let mut rng = stream_rng(seed, purpose::TRAJECTORY, stream);

    let mut xs = Vec::with_capacity(horizon);
    let mut ys = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    for (t, u) in inputs.iter().enumerate() {
        check_dim("input", model.input_dim(), u.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { t });
        }
        let y = model.observe(theta, &x, u, t) + gaussian_draw(&noise.sigma_v, &mut rng);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { t });
        }
        ys.push(y);
        let next = if t + 1 < horizon {
            Some(model.step(theta, &x, u, t) + gaussian_draw(&noise.sigma_w, &mut rng))
        } else {
            None
        };
        xs.push(std::mem::replace(&mut x, next.unwrap_or_else(|| Vector::zeros(0))));
    }
    Ok(Trajectory {
        y: ys,
        u: inputs.to_vec(),
        x: Some(xs),
        seed,
    })
}

/// Simulates `count` autonomous trajectories with initial states drawn from
/// `initial`. Trajectory `i` uses streams indexed by `i`, so the result is
/// independent of scheduling.
#[allow(clippy::too_many_arguments)]
pub fn generate_batch(
    model: &dyn SystemModel,
    theta: &Vector,
    initial: &InitialConditionSpec,
    horizon: usize,
    noise: &GaussianNoiseSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let x0 = initial.sample(&mut stream_rng(seed, purpose::INITIAL_CONDITION, i));
            let u = zero_inputs(horizon, model.input_dim());
            generate_trajectory(model, theta, &x0, &u, horizon, noise, seed, i)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Matrix;
    use crate::zoo::{LorenzParams, LtiModel};

    fn lorenz() -> (crate::zoo::LorenzModel, Vector) {
        let p = LorenzParams::new(
            vec![10.0],
            vec![28.0],
            vec![8.0 / 3.0],
            Matrix::zeros(3, 3),
            Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        )
        .unwrap();
        (p.model(0.04).unwrap(), p.theta())
    }

    #[test]
    fn noiseless_rollout_is_exact() {
        let (m, th) = lorenz();
        let noise = GaussianNoiseSpec::isotropic(3, 0.0, 2, 0.0).unwrap();
        let x0 = Vector::from_vec(vec![-6.0, -6.0, 24.0]);
        let tr = generate_trajectory(&m, &th, &x0, &zero_inputs(50, 0), 50, &noise, 1, 0).unwrap();
        let xs = tr.x.as_ref().unwrap();
        let u = Vector::zeros(0);
        for t in 0..49 {
            assert_eq!(xs[t + 1], m.step(&th, &xs[t], &u, t));
        }
        for t in 0..50 {
            assert_eq!(tr.y[t], m.observe(&th, &xs[t], &u, t));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (m, th) = lorenz();
        let noise = GaussianNoiseSpec::isotropic(3, 0.1, 2, 0.5).unwrap();
        let ic = InitialConditionSpec::lorenz(1);
        let a = generate_batch(&m, &th, &ic, 64, &noise, 3, 9).unwrap();
        let b = generate_batch(&m, &th, &ic, 64, &noise, 3, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_batch(&m, &th, &ic, 64, &noise, 3, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn observation_noise_variance_matches() {
        let m = LtiModel::autonomous(Matrix::from_element(1, 1, 0.5), Matrix::identity(1, 1)).unwrap();
        let noise = GaussianNoiseSpec::isotropic(1, 0.0, 1, 0.3).unwrap();
        let horizon = 10_000;
        let tr = generate_trajectory(&m, &m.theta(), &Vector::from_element(1, 1.0), &zero_inputs(horizon, 0), horizon, &noise, 4, 0)
            .unwrap();
        let xs = tr.x.unwrap();
        let res: Vec<f64> = tr.y.iter().zip(&xs).map(|(y, x)| y[0] - x[0]).collect();
        let mean = res.iter().sum::<f64>() / horizon as f64;
        let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (horizon - 1) as f64;
        assert!((var / 0.09 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn initial_condition_moments() {
        let spec = InitialConditionSpec::lorenz(1);
        let mut rng = stream_rng(0, purpose::INITIAL_CONDITION, 0);
        let draws = 100_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..draws {
            let x = spec.sample(&mut rng);
            for i in 0..3 {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        let se = 2.5 / (draws as f64).sqrt();
        for i in 0..3 {
            let mean = sum[i] / draws as f64;
            let std = (sq[i] / draws as f64 - mean * mean).sqrt();
            assert!((mean - spec.mean[i]).abs() < 3.0 * se, "mean {mean}");
            assert!((std / 2.5 - 1.0).abs() < 0.03, "std {std}");
        }
    }

    #[test]
    fn zero_std_returns_mean() {
        let spec = InitialConditionSpec::new(vec![1.0, -2.0], vec![0.0, 0.0]).unwrap();
        let mut rng = stream_rng(0, 0, 0);
        assert_eq!(spec.sample(&mut rng), Vector::from_vec(vec![1.0, -2.0]));
        assert!(InitialConditionSpec::new(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn rejects_short_horizon_and_reports_divergence() {
        let (m, th) = lorenz();
        let noise = GaussianNoiseSpec::isotropic(3, 0.0, 2, 0.0).unwrap();
        let x0 = Vector::from_vec(vec![1.0, 1.0, 1.0]);
        assert!(generate_trajectory(&m, &th, &x0, &zero_inputs(1, 0), 1, &noise, 0, 0).is_err());
        let unstable = LtiModel::autonomous(Matrix::from_element(1, 1, 1e200), Matrix::identity(1, 1)).unwrap();
        let noise = GaussianNoiseSpec::isotropic(1, 0.0, 1, 0.0).unwrap();
        let err = generate_trajectory(&unstable, &unstable.theta(), &Vector::from_element(1, 1e200), &zero_inputs(5, 0), 5, &noise, 0, 0)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { t: 1 }));
    }
}
