//! Fixtures shared by the benchmarks.

use ceem::experiments::{lorenz_system, LORENZ_DT, SYSTEM_SEED};
use ceem::simulate::generate_batch;
use ceem::zoo::LorenzModel;
use ceem::{GaussianNoiseSpec, InitialConditionSpec, Trajectory, Vector};

/// A coupled Lorenz system with simulated data.
pub struct Fixture {
    pub model: LorenzModel,
    pub truth: Vector,
    pub initial: InitialConditionSpec,
    pub noise: GaussianNoiseSpec,
    pub data: Vec<Trajectory>,
}

impl Fixture {
    pub fn lorenz(attractors: usize, horizon: usize, trajectories: usize, sigma_w: f64, sigma_v: f64) -> Self {
        let params = lorenz_system(attractors, SYSTEM_SEED).expect("system");
        let model = params.model(LORENZ_DT).expect("model");
        let truth = params.theta();
        let initial = InitialConditionSpec::lorenz(attractors);
        let n = 3 * attractors;
        let m = params.observation.nrows();
        let noise = GaussianNoiseSpec::new(vec![sigma_w; n], vec![sigma_v; m]).expect("noise");
        let data = generate_batch(&model, &truth, &initial, horizon, &noise, trajectories, 0).expect("data");
        Self { model, truth, initial, noise, data }
    }
}
