//! Lorenz benchmark experiments behind `ceem reproduce` and the acceptance
//! suite.

use rand::Rng;
use rayon::prelude::*;

use crate::ceem::{ceem_fit, CeemConfig, FitProblem};
use crate::error::{Error, Result};
use crate::learner::LearnerOptions;
use crate::model::{GaussianNoiseSpec, Vector};
use crate::particle::{pem_fit, PemConfig};
use crate::report::{FitReport, TruthEvaluator};
use crate::rng::{purpose, stream_rng};
use crate::simulate::{generate_batch, InitialConditionSpec, Trajectory};
use crate::smoother::SmootherOptions;
use crate::zoo::lorenz::DEFAULT_H_SCALE;
use crate::zoo::{LorenzModel, LorenzParams};

pub const LORENZ_DT: f64 = 0.04;
pub const LORENZ_HORIZON: usize = 128;

/// Seed of the stream that draws the benchmark systems (H and C).
pub const SYSTEM_SEED: u64 = 2020;

/// Lorenz system with `k` attractors: nominal `(σ, ρ, β)`, coupling entries
/// `N(0, 0.1²)` off the diagonal blocks and a standard-normal
/// `(3k - 2) × 3k` observation matrix, drawn from `system_seed`.
pub fn lorenz_system(k: usize, system_seed: u64) -> Result<LorenzParams> {
    lorenz_system_scaled(k, DEFAULT_H_SCALE, system_seed)
}

/// [`lorenz_system`] with coupling entries `N(0, h_scale²)`.
pub fn lorenz_system_scaled(k: usize, h_scale: f64, system_seed: u64) -> Result<LorenzParams> {
    if k == 0 {
        return Err(Error::Config("at least one attractor is required".into()));
    }
    let mut rng = stream_rng(system_seed, purpose::SYSTEM, k as u64);
    LorenzParams::sample(k, h_scale, 3 * k - 2, &mut rng)
}

/// θ-init with independent multiplicative `Uniform(0.9, 1.1)` factors.
pub fn perturb_within_ten_percent(theta: &Vector, seed: u64) -> Vector {
    perturb_relative(theta, 0.1, seed)
}

/// Multiplies each coordinate by an independent `Uniform(1 - scale, 1 + scale)`
/// factor; `scale = 0` returns `theta`.
pub fn perturb_relative(theta: &Vector, scale: f64, seed: u64) -> Vector {
    if scale == 0.0 {
        return theta.clone();
    }
    let mut rng = stream_rng(seed, purpose::PARAM_INIT, 0);
    theta.map(|v| v * rng.gen_range(1.0 - scale..1.0 + scale))
}

/// Largest relative deviation of any parameter from the truth.
pub fn max_relative_error(theta: &Vector, truth: &Vector) -> f64 {
    theta
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| ((a - b) / b).abs())
        .fold(0.0, f64::max)
}

/// First epoch (0 is the initialization) whose estimate is within `tol`
/// relative error of the truth in every coordinate.
pub fn epochs_to_reach(report: &FitReport, truth: &Vector, tol: f64) -> Option<usize> {
    report
        .records()
        .find(|r| max_relative_error(&r.theta, truth) <= tol)
        .map(|r| r.epoch)
}

/// Whether the objective never drops by more than `slack` between epochs.
pub fn is_monotone(report: &FitReport, slack: f64) -> bool {
    let objectives: Vec<f64> = report.records().map(|r| r.objective).collect();
    objectives.windows(2).all(|w| w[1] >= w[0] - slack)
}

/// CE-EM settings for the Lorenz benchmarks: the initial-condition
/// distribution is the prior on the first state.
pub fn lorenz_ceem_config(k: usize, max_epochs: usize) -> CeemConfig {
    CeemConfig {
        max_epochs,
        smoother: SmootherOptions {
            prior: Some(InitialConditionSpec::lorenz(k).as_prior().expect("positive std")),
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Mean and standard error of each coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean: Vector,
    pub std_error: Vector,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[Vector]) -> Option<Self> {
        let n = values.len();
        let first = values.first()?;
        let mean = values.iter().fold(Vector::zeros(first.len()), |acc, v| acc + v) / n as f64;
        let std_error = if n > 1 {
            let var = values
                .iter()
                .fold(Vector::zeros(first.len()), |acc, v| acc + (v - &mean).map(|d| d * d))
                / (n - 1) as f64;
            var.map(|s| (s / n as f64).sqrt())
        } else {
            Vector::zeros(first.len())
        };
        Some(Self { mean, std_error, count: n })
    }
}

/// A failed seed, kept so summaries can report coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedFailure {
    pub seed: u64,
    pub message: String,
}

struct Benchmark {
    params: LorenzParams,
    model: LorenzModel,
    truth: Vector,
    initial: InitialConditionSpec,
}

impl Benchmark {
    fn new(k: usize, system_seed: u64) -> Result<Self> {
        let params = lorenz_system(k, system_seed)?;
        let model = params.model(LORENZ_DT)?;
        let truth = params.theta();
        Ok(Self { params, model, truth, initial: InitialConditionSpec::lorenz(k) })
    }

    fn noise(&self, sigma_w: f64, sigma_v: f64) -> Result<GaussianNoiseSpec> {
        GaussianNoiseSpec::isotropic(3 * self.params.attractors(), sigma_w, self.params.observation.nrows(), sigma_v)
    }

    fn data(&self, noise: &GaussianNoiseSpec, count: usize, seed: u64) -> Result<Vec<Trajectory>> {
        generate_batch(&self.model, &self.truth, &self.initial, LORENZ_HORIZON, noise, count, seed)
    }
}

fn split<T>(results: Vec<(u64, Result<T>)>) -> (Vec<(u64, T)>, Vec<SeedFailure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(v) => ok.push((seed, v)),
            Err(e) => failed.push(SeedFailure { seed, message: e.to_string() }),
        }
    }
    (ok, failed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Config {
    /// `(σ_w, σ_v)` used to simulate each row.
    pub rows: Vec<(f64, f64)>,
    pub seeds: usize,
    /// CE-EM assumes process noise `max(σ_w, fit_sigma_w_floor)`.
    pub fit_sigma_w_floor: f64,
    pub max_epochs: usize,
    pub system_seed: u64,
}

impl Default for Table1Config {
    fn default() -> Self {
        Self {
            rows: vec![(0.001, 0.01), (0.01, 0.01), (0.1, 0.01), (0.001, 0.05), (0.001, 0.1)],
            seeds: 10,
            fit_sigma_w_floor: 0.01,
            max_epochs: 1000,
            system_seed: SYSTEM_SEED,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Table1Row {
    pub sigma_w: f64,
    pub sigma_v: f64,
    /// One report per successful seed.
    pub runs: Vec<(u64, FitReport)>,
    pub failures: Vec<SeedFailure>,
    /// Summary of the final `(σ, ρ, β)` over successful seeds.
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone)]
pub struct Table1Result {
    pub truth: Vector,
    pub rows: Vec<Table1Row>,
}

/// Single Lorenz, one trajectory per seed, CE-EM from a θ-init within 10%.
pub fn run_table1(config: &Table1Config) -> Result<Table1Result> {
    if config.rows.is_empty() || config.seeds == 0 {
        return Err(Error::Config("table1 needs at least one row and one seed".into()));
    }
    let bench = Benchmark::new(1, config.system_seed)?;
    let ceem = lorenz_ceem_config(1, config.max_epochs);
    let mut rows = Vec::with_capacity(config.rows.len());
    for &(sigma_w, sigma_v) in &config.rows {
        let data_noise = bench.noise(sigma_w, sigma_v)?;
        let fit_noise = bench.noise(sigma_w.max(config.fit_sigma_w_floor), sigma_v)?;
        let results: Vec<(u64, Result<FitReport>)> = (0..config.seeds as u64)
            .into_par_iter()
            .map(|seed| {
                let run = || {
                    let data = bench.data(&data_noise, 1, seed)?;
                    let problem = FitProblem::new(&bench.model, &fit_noise, &data);
                    ceem_fit(&problem, &perturb_within_ten_percent(&bench.truth, seed), &ceem)
                };
                (seed, run())
            })
            .collect();
        let (runs, failures) = split(results);
        let finals: Vec<Vector> = runs.iter().map(|(_, r)| r.theta.clone()).collect();
        rows.push(Table1Row { sigma_w, sigma_v, summary: Summary::of(&finals), runs, failures });
    }
    Ok(Table1Result { truth: bench.truth, rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig2Config {
    pub seeds: usize,
    pub trajectories: usize,
    pub sigma_w: f64,
    pub sigma_v: f64,
    /// Process-noise level assumed by CE-EM; `None` uses `sigma_w`.
    pub fit_sigma_w: Option<f64>,
    pub ceem_epochs: usize,
    pub pem_epochs: usize,
    pub particles: usize,
    pub backward_samples: usize,
    pub system_seed: u64,
}

impl Default for Fig2Config {
    fn default() -> Self {
        Self {
            seeds: 10,
            trajectories: 4,
            sigma_w: 0.1,
            sigma_v: 0.5,
            fit_sigma_w: None,
            ceem_epochs: 50,
            pem_epochs: 50,
            particles: 100,
            backward_samples: 10,
            system_seed: SYSTEM_SEED,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fig2Run {
    pub seed: u64,
    pub ceem: FitReport,
    pub pem: Option<FitReport>,
}

#[derive(Debug, Clone)]
pub struct Fig2Result {
    pub truth: Vector,
    pub runs: Vec<Fig2Run>,
    pub failures: Vec<SeedFailure>,
}

/// CE-EM and particle EM on the same four-trajectory datasets. Setting
/// `pem_epochs` to zero skips particle EM.
pub fn run_fig2(config: &Fig2Config) -> Result<Fig2Result> {
    if config.seeds == 0 || config.trajectories == 0 {
        return Err(Error::Config("fig2 needs at least one seed and one trajectory".into()));
    }
    let bench = Benchmark::new(1, config.system_seed)?;
    let noise = bench.noise(config.sigma_w, config.sigma_v)?;
    let fit_noise = bench.noise(config.fit_sigma_w.unwrap_or(config.sigma_w), config.sigma_v)?;
    let evaluator = TruthEvaluator::new(bench.truth.clone(), bench.initial.clone(), config.system_seed);
    let ceem = lorenz_ceem_config(1, config.ceem_epochs);
    let results: Vec<(u64, Result<Fig2Run>)> = (0..config.seeds as u64)
        .into_par_iter()
        .map(|seed| {
            let run = || {
                let data = bench.data(&noise, config.trajectories, seed)?;
                let problem = FitProblem::new(&bench.model, &noise, &data).with_truth(&evaluator);
                let theta0 = perturb_within_ten_percent(&bench.truth, seed);
                let ceem_problem = FitProblem::new(&bench.model, &fit_noise, &data).with_truth(&evaluator);
                let ceem_report = ceem_fit(&ceem_problem, &theta0, &ceem)?;
                let pem = if config.pem_epochs > 0 {
                    let mut pem_config = PemConfig::new(bench.initial.clone());
                    pem_config.epochs = config.pem_epochs;
                    pem_config.filter.particles = config.particles;
                    pem_config.backward_samples = config.backward_samples;
                    pem_config.seed = seed;
                    Some(pem_fit(&problem, &theta0, &pem_config)?)
                } else {
                    None
                };
                Ok(Fig2Run { seed, ceem: ceem_report, pem })
            };
            (seed, run())
        })
        .collect();
    let (runs, failures) = split(results);
    Ok(Fig2Result { truth: bench.truth, runs: runs.into_iter().map(|(_, r)| r).collect(), failures })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig3Config {
    pub attractors: usize,
    pub batch_sizes: Vec<usize>,
    pub seeds: usize,
    pub sigma_v: f64,
    /// Process-noise level assumed by CE-EM; the data are noise free.
    pub fit_sigma_w: f64,
    pub max_epochs: usize,
    pub system_seed: u64,
}

impl Default for Fig3Config {
    fn default() -> Self {
        Self {
            attractors: 3,
            batch_sizes: vec![2, 4, 8],
            seeds: 2,
            sigma_v: 0.01,
            fit_sigma_w: 0.01,
            max_epochs: 50,
            system_seed: SYSTEM_SEED,
        }
    }
}

impl Fig3Config {
    /// Six coupled attractors, four seeds.
    pub fn full() -> Self {
        Self { attractors: 6, seeds: 4, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct Fig3Run {
    pub batch_size: usize,
    pub seed: u64,
    pub report: FitReport,
}

impl Fig3Run {
    pub fn initial_error(&self) -> f64 {
        self.report.initial.dynamics_error.map_or(f64::NAN, |e| e.mean)
    }

    pub fn final_error(&self) -> f64 {
        self.report.final_record().dynamics_error.map_or(f64::NAN, |e| e.mean)
    }
}

#[derive(Debug, Clone)]
pub struct Fig3Result {
    pub truth: Vector,
    pub runs: Vec<Fig3Run>,
    pub failures: Vec<(usize, SeedFailure)>,
}

impl Fig3Result {
    /// Median final ε(θ) per batch size, in the configured order.
    pub fn median_final_errors(&self, batch_sizes: &[usize]) -> Vec<f64> {
        batch_sizes
            .iter()
            .map(|&b| {
                let mut v: Vec<f64> = self.runs.iter().filter(|r| r.batch_size == b).map(Fig3Run::final_error).collect();
                median(&mut v)
            })
            .collect()
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// CE-EM on noise-free coupled-Lorenz batches of increasing size. Batches
/// of one seed are nested, and the θ-init depends only on the seed.
pub fn run_fig3(config: &Fig3Config) -> Result<Fig3Result> {
    if config.batch_sizes.is_empty() || config.seeds == 0 || config.attractors == 0 {
        return Err(Error::Config("fig3 needs batch sizes, seeds and attractors".into()));
    }
    let bench = Benchmark::new(config.attractors, config.system_seed)?;
    let data_noise = bench.noise(0.0, config.sigma_v)?;
    let fit_noise = bench.noise(config.fit_sigma_w, config.sigma_v)?;
    let evaluator = TruthEvaluator::new(bench.truth.clone(), bench.initial.clone(), config.system_seed);
    let ceem = CeemConfig {
        learner: LearnerOptions { rho_theta: 0.0, ..Default::default() },
        ..lorenz_ceem_config(config.attractors, config.max_epochs)
    };
    let largest = config.batch_sizes.iter().copied().max().unwrap_or(0);
    let jobs: Vec<(usize, u64)> = config
        .batch_sizes
        .iter()
        .flat_map(|&b| (0..config.seeds as u64).map(move |s| (b, s)))
        .collect();
    let results: Vec<((usize, u64), Result<FitReport>)> = jobs
        .into_par_iter()
        .map(|(b, seed)| {
            let run = || {
                let mut data = bench.data(&data_noise, largest, seed)?;
                data.truncate(b);
                let problem = FitProblem::new(&bench.model, &fit_noise, &data).with_truth(&evaluator);
                ceem_fit(&problem, &perturb_within_ten_percent(&bench.truth, seed), &ceem)
            };
            ((b, seed), run())
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for ((batch_size, seed), r) in results {
        match r {
            Ok(report) => runs.push(Fig3Run { batch_size, seed, report }),
            Err(e) => failures.push((batch_size, SeedFailure { seed, message: e.to_string() })),
        }
    }
    Ok(Fig3Result { truth: bench.truth, runs, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_summary() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0]), 2.5);
        let s = Summary::of(&[Vector::from_vec(vec![1.0]), Vector::from_vec(vec![3.0])]).unwrap();
        assert_eq!(s.mean[0], 2.0);
        assert!((s.std_error[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn systems_are_reproducible() {
        let a = lorenz_system(3, 7).unwrap();
        assert_eq!(a, lorenz_system(3, 7).unwrap());
        assert_eq!(a.observation.shape(), (7, 9));
        assert_eq!(lorenz_system(1, 7).unwrap().observation.shape(), (1, 3));
    }

    #[test]
    fn perturbation_stays_within_ten_percent() {
        let theta = Vector::from_vec(vec![10.0, -28.0, 0.5]);
        let p = perturb_within_ten_percent(&theta, 3);
        assert!(max_relative_error(&p, &theta) <= 0.1);
        assert_ne!(p, theta);
    }
}
