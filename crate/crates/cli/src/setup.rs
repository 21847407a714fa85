//! Builds the model, noise levels and data described by a configuration.

use ceem::experiments::{lorenz_system_scaled, perturb_relative};
use ceem::simulate::dataset::Manifest;
use ceem::simulate::generate_batch;
use ceem::zoo::{LtiEntry, LtiModel, ModelId};
use ceem::{DiagonalGaussian, GaussianNoiseSpec, InitialConditionSpec, Matrix, SystemModel, TrajectoryDataset, Vector};

use crate::config::{ExperimentConfig, LtiSection};
use crate::error::CliError;

pub struct Setup {
    pub model_id: ModelId,
    pub model: Box<dyn SystemModel>,
    /// Nominal or configured true parameters used for simulation.
    pub truth: Vector,
    pub initial: InitialConditionSpec,
    pub data_noise: GaussianNoiseSpec,
    pub fit_noise: GaussianNoiseSpec,
}

fn matrix(rows: &[Vec<f64>], key: &str, shape: Option<(usize, usize)>) -> Result<Matrix, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config(format!("{key}: rows have different lengths")));
    }
    if let Some((er, ec)) = shape {
        if (r, c) != (er, ec) {
            return Err(CliError::Config(format!("{key}: expected {er}x{ec}, got {r}x{c}")));
        }
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn lti_model(section: &LtiSection) -> Result<(LtiModel, InitialConditionSpec), CliError> {
    let a = matrix(&section.a, "model.lti.a", None)?;
    let n = a.nrows();
    if a.ncols() != n || n == 0 {
        return Err(CliError::Config("model.lti.a must be square and nonempty".into()));
    }
    let c = matrix(&section.c, "model.lti.c", None)?;
    if c.ncols() != n || c.nrows() == 0 {
        return Err(CliError::Config(format!("model.lti.c must have {n} columns")));
    }
    let m = c.nrows();
    let b = match &section.b {
        Some(rows) => matrix(rows, "model.lti.b", None)?,
        None => Matrix::zeros(n, 0),
    };
    let p = b.ncols();
    if b.nrows() != n {
        return Err(CliError::Config(format!("model.lti.b must have {n} rows")));
    }
    let d = match &section.d {
        Some(rows) => matrix(rows, "model.lti.d", Some((m, p)))?,
        None => Matrix::zeros(m, p),
    };
    let free = section
        .free
        .iter()
        .map(|s| s.parse::<LtiEntry>().map_err(|e| CliError::Config(format!("model.lti.free: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let model = LtiModel::new(a, b, c, d, free).map_err(|e| CliError::Config(format!("model.lti: {e}")))?;
    let mean = section.x0_mean.clone().unwrap_or_else(|| vec![0.0; n]);
    let std = section.x0_std.clone().unwrap_or_else(|| vec![1.0; n]);
    let initial = InitialConditionSpec::new(mean, std).map_err(|e| CliError::Config(format!("model.lti.x0: {e}")))?;
    Ok((model, initial))
}

fn check_len(key: &str, expected: usize, got: usize) -> Result<(), CliError> {
    if expected == got {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key} has {got} entries, expected {expected}")))
    }
}

impl Setup {
    pub fn build(config: &ExperimentConfig) -> Result<Self, CliError> {
        let model_id = config.model_id()?;
        let (model, nominal, initial): (Box<dyn SystemModel>, Vector, InitialConditionSpec) = match model_id {
            ModelId::Lorenz | ModelId::CoupledLorenz => {
                let k = config.model.attractors;
                let params = lorenz_system_scaled(k, config.model.h_scale, config.model.system_seed)
                    .map_err(|e| CliError::Config(format!("model: {e}")))?;
                let model = params.model(config.data.dt).map_err(|e| CliError::Config(format!("model: {e}")))?;
                (Box::new(model), params.theta(), InitialConditionSpec::lorenz(k))
            }
            ModelId::Lti => {
                let (model, initial) = lti_model(config.model.lti.as_ref().expect("validated"))?;
                let theta = model.theta();
                (Box::new(model), theta, initial)
            }
        };
        let q = model.param_layout().len();
        let truth = match &config.model.theta_true {
            Some(v) => {
                check_len("model.theta_true", q, v.len())?;
                Vector::from_column_slice(v)
            }
            None => nominal,
        };
        if let Some(v) = &config.model.theta_init {
            check_len("model.theta_init", q, v.len())?;
        }
        let n = model.state_dim();
        let m = model.obs_dim();
        let noise = |w: Vec<f64>, v: Vec<f64>| GaussianNoiseSpec::new(w, v).map_err(|e| CliError::Config(format!("data: {e}")));
        let sigma_v = config.data.sigma_v.expand(m, "data.sigma_v")?;
        let data_noise = noise(config.data.sigma_w.expand(n, "data.sigma_w")?, sigma_v.clone())?;
        let fit_w = match &config.ceem.fit_sigma_w {
            Some(s) => s.expand(n, "ceem.fit_sigma_w")?,
            None => data_noise.sigma_w.clone(),
        };
        let fit_noise = noise(fit_w, sigma_v)?;
        Ok(Self { model_id, model, truth, initial, data_noise, fit_noise })
    }

    pub fn prior(&self) -> Option<DiagonalGaussian> {
        self.initial.as_prior().ok()
    }

    pub fn simulate(&self, config: &ExperimentConfig, count: usize, seed: u64) -> Result<TrajectoryDataset, CliError> {
        let horizon = config.data.horizon;
        let trajectories = generate_batch(self.model.as_ref(), &self.truth, &self.initial, horizon, &self.data_noise, count, seed)?;
        let u0 = Vector::zeros(self.model.input_dim());
        let observation_matrix = self
            .model
            .linear_observation(&self.truth, &u0, 0)
            .map(|(c, _)| c.transpose().iter().copied().collect());
        let manifest = Manifest {
            model_id: self.model_id.as_str().to_string(),
            n: self.model.state_dim(),
            m: self.model.obs_dim(),
            p: self.model.input_dim(),
            horizon,
            dt: config.data.dt,
            num_trajectories: count,
            seed,
            theta_true: Some(self.truth.iter().copied().collect()),
            sigma_w: self.data_noise.sigma_w.clone(),
            sigma_v: self.data_noise.sigma_v.clone(),
            observation_matrix,
        };
        Ok(TrajectoryDataset::new(manifest, trajectories)?)
    }

    /// Reads `data.dataset` when configured, otherwise simulates it.
    pub fn training_data(&self, config: &ExperimentConfig, seed: u64) -> Result<TrajectoryDataset, CliError> {
        let Some(dir) = &config.data.dataset else {
            return self.simulate(config, config.data.trajectories, seed);
        };
        let ds = ceem::simulate::read_dataset(dir)?;
        let m = &ds.manifest;
        if m.model_id != self.model_id.as_str() {
            return Err(CliError::Config(format!(
                "dataset {} was generated by model {:?}, config uses {:?}",
                dir.display(),
                m.model_id,
                self.model_id.as_str()
            )));
        }
        let dims = (self.model.state_dim(), self.model.obs_dim(), self.model.input_dim());
        if (m.n, m.m, m.p) != dims {
            return Err(CliError::Config(format!(
                "dataset {} has (n, m, p) = ({}, {}, {}), model expects {dims:?}",
                dir.display(),
                m.n,
                m.m,
                m.p
            )));
        }
        if let Some(theta) = &m.theta_true {
            check_len("dataset theta_true", self.truth.len(), theta.len())?;
        }
        Ok(ds)
    }

    /// True parameters for scoring: the manifest's when present, the
    /// configured ones for simulated data.
    pub fn known_truth(&self, config: &ExperimentConfig, data: &TrajectoryDataset) -> Option<Vector> {
        match &data.manifest.theta_true {
            Some(v) => Some(Vector::from_column_slice(v)),
            None if config.data.dataset.is_none() => Some(self.truth.clone()),
            None => None,
        }
    }

    pub fn theta_init(&self, config: &ExperimentConfig, seed: u64) -> Vector {
        match &config.model.theta_init {
            Some(v) => Vector::from_column_slice(v),
            None => perturb_relative(&self.truth, config.model.init_scale, seed),
        }
    }
}
