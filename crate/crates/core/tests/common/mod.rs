#![allow(dead_code)]

use ceem::eval::EkfSettings;
use ceem::particle::{particle_filter, FilterOptions, ParticleEnsemble};
use ceem::rng::{stream_rng, StreamRng};
use ceem::simulate::{generate_trajectory, zero_inputs, InitialConditionSpec};
use ceem::zoo::LtiModel;
use ceem::{DiagonalGaussian, GaussianNoiseSpec, Matrix, Trajectory, Vector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal_matrix(rng: &mut StreamRng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// A random LTI system with spectral norm of A equal to `radius`.
pub struct RandomLti {
    pub model: LtiModel,
    pub noise: GaussianNoiseSpec,
    pub prior: DiagonalGaussian,
    pub trajectory: Trajectory,
}

impl RandomLti {
    pub fn settings(&self) -> EkfSettings {
        let p0 = Vector::from_iterator(self.prior.dim(), self.prior.std.iter().map(|s| s * s));
        EkfSettings::from_noise(&self.noise, Vector::from_column_slice(&self.prior.mean), Matrix::from_diagonal(&p0))
    }
}

pub fn random_lti(rng: &mut StreamRng, n: usize, m: usize, horizon: usize, seed: u64) -> RandomLti {
    let raw = normal_matrix(rng, n, n);
    let norm = raw.clone().svd(false, false).singular_values[0];
    let a = raw * (0.95 / norm);
    let c = normal_matrix(rng, m, n);
    let model = LtiModel::autonomous(a, c).unwrap();
    let sigma_w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let sigma_v: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
    let noise = GaussianNoiseSpec::new(sigma_w, sigma_v).unwrap();
    let prior = DiagonalGaussian::new(
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
    )
    .unwrap();
    let x0 = Vector::from_iterator(n, prior.mean.iter().zip(&prior.std).map(|(mu, s)| mu + s * rng.sample::<f64, _>(StandardNormal)));
    let trajectory = generate_trajectory(&model, &model.theta(), &x0, &zero_inputs(horizon, 0), horizon, &noise, seed, 0).unwrap();
    RandomLti {
        model,
        noise,
        prior,
        trajectory,
    }
}

pub mod criteria;

pub struct Lti {
    pub model: LtiModel,
    pub noise: GaussianNoiseSpec,
    pub initial: InitialConditionSpec,
    pub data: Trajectory,
}

impl Lti {
    pub fn settings(&self) -> EkfSettings {
        let p0 = Vector::from_iterator(self.initial.dim(), self.initial.std.iter().map(|s| s * s));
        EkfSettings::from_noise(&self.noise, Vector::from_column_slice(&self.initial.mean), Matrix::from_diagonal(&p0))
    }
}

/// Two-state, one-output stable system.
pub fn planar(horizon: usize, seed: u64) -> Lti {
    let a = Matrix::from_row_slice(2, 2, &[0.9, 0.2, -0.15, 0.85]);
    let c = Matrix::from_row_slice(1, 2, &[1.0, 0.5]);
    let model = LtiModel::autonomous(a, c).unwrap();
    let noise = GaussianNoiseSpec::new(vec![0.3, 0.2], vec![0.4]).unwrap();
    let initial = InitialConditionSpec::new(vec![1.0, -0.5], vec![0.8, 0.6]).unwrap();
    let x0 = initial.sample(&mut stream_rng(seed, 50, 0));
    let data = generate_trajectory(&model, &model.theta(), &x0, &zero_inputs(horizon, 0), horizon, &noise, seed, 0).unwrap();
    Lti { model, noise, initial, data }
}

/// `x' = a x + w`, `y = x + v` with unit-scale noise.
pub fn scalar(a: f64, horizon: usize, seed: u64) -> Lti {
    let model = LtiModel::autonomous(Matrix::from_element(1, 1, a), Matrix::identity(1, 1)).unwrap();
    let noise = GaussianNoiseSpec::isotropic(1, 0.5, 1, 0.5).unwrap();
    let initial = InitialConditionSpec::new(vec![0.0], vec![1.0]).unwrap();
    let x0 = initial.sample(&mut stream_rng(seed, 50, 0));
    let data = generate_trajectory(&model, &model.theta(), &x0, &zero_inputs(horizon, 0), horizon, &noise, seed, 0).unwrap();
    Lti { model, noise, initial, data }
}

pub fn filter(sys: &Lti, particles: usize, seed: u64, index: u64) -> ParticleEnsemble {
    let options = FilterOptions { particles, ..Default::default() };
    let mut rng = stream_rng(seed, 5, index);
    particle_filter(&sys.model, &sys.model.theta(), &sys.noise, &sys.data.y, &sys.data.u, &sys.initial, &options, &mut rng).unwrap()
}
