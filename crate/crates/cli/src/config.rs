//! TOML experiment configuration.
//!
//! ```toml
//! [model]
//! id = "lorenz"
//!
//! [data]
//! sigma_w = 0.001
//! sigma_v = 0.01
//! ```
//!
//! Every section rejects unknown keys.

use std::fs;
use std::path::{Path, PathBuf};

use ceem::experiments::{LORENZ_DT, LORENZ_HORIZON, SYSTEM_SEED};
use ceem::learner::{LearnerOptions, LearnerStrategy};
use ceem::particle::{FilterOptions, SaemSchedule};
use ceem::smoother::{SmootherOptions, StateInit};
use ceem::zoo::ModelId;
use ceem::{CeemConfig, PemConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub ceem: CeemSection,
    #[serde(default)]
    pub pem: PemSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `lorenz`, `coupled_lorenz` or `lti`.
    pub id: String,
    /// Number of coupled attractors (Lorenz models).
    #[serde(default = "one")]
    pub attractors: usize,
    /// Seed of the draw of the coupling and observation matrices.
    #[serde(default = "system_seed")]
    pub system_seed: u64,
    #[serde(default = "h_scale")]
    pub h_scale: f64,
    /// Overrides the nominal true parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_true: Option<Vec<f64>>,
    /// Explicit starting parameters; otherwise the truth is perturbed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_init: Option<Vec<f64>>,
    /// Relative half-width of the multiplicative θ-init perturbation.
    #[serde(default = "init_scale")]
    pub init_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lti: Option<LtiSection>,
}

/// Row-major LTI matrices; `theta_true` defaults to the listed values of
/// the free entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtiSection {
    pub a: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<Vec<f64>>>,
    /// Free entries such as `"A[0,1]"`.
    pub free: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_std: Option<Vec<f64>>,
}

/// A scalar applied to every component, or one value per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Scalar(f64),
    PerComponent(Vec<f64>),
}

impl Sigma {
    pub fn expand(&self, dim: usize, key: &str) -> Result<Vec<f64>, CliError> {
        match self {
            Sigma::Scalar(v) => Ok(vec![*v; dim]),
            Sigma::PerComponent(v) if v.len() == dim => Ok(v.clone()),
            Sigma::PerComponent(v) => Err(CliError::Config(format!("{key} has {} entries, expected {dim}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "horizon")]
    pub horizon: usize,
    #[serde(default = "dt")]
    pub dt: f64,
    #[serde(default = "one")]
    pub trajectories: usize,
    pub sigma_w: Sigma,
    pub sigma_v: Sigma,
    #[serde(default)]
    pub seed: u64,
    /// Existing dataset directory; data are simulated in-run when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Fresh trajectories for held-out evaluation.
    #[serde(default = "test_trajectories")]
    pub test_trajectories: usize,
    #[serde(default = "test_seed")]
    pub test_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeemSection {
    #[serde(default = "ceem_epochs")]
    pub max_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default = "half")]
    pub rho_x: f64,
    #[serde(default = "half")]
    pub rho_theta: f64,
    /// `nelder-mead`, `lbfgs` or `adam`; chosen by parameter count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    /// `filter`, `lift` or `zeros`.
    #[serde(default = "state_init")]
    pub init: String,
    /// Process-noise level assumed while fitting; defaults to `data.sigma_w`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_sigma_w: Option<Sigma>,
    /// Use the initial-condition distribution as a prior on the first state.
    #[serde(default = "yes")]
    pub initial_state_prior: bool,
}

impl Default for CeemSection {
    fn default() -> Self {
        Self {
            max_epochs: ceem_epochs(),
            tol: None,
            rho_x: half(),
            rho_theta: half(),
            strategy: None,
            init: state_init(),
            fit_sigma_w: None,
            initial_state_prior: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PemSection {
    #[serde(default = "particles")]
    pub particles: usize,
    #[serde(default = "backward_samples")]
    pub backward_samples: usize,
    #[serde(default = "pem_epochs")]
    pub epochs: usize,
    #[serde(default = "half")]
    pub resample_threshold: f64,
    #[serde(default = "burn_in")]
    pub burn_in: usize,
    #[serde(default = "exponent")]
    pub exponent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
}

impl Default for PemSection {
    fn default() -> Self {
        Self {
            particles: particles(),
            backward_samples: backward_samples(),
            epochs: pem_epochs(),
            resample_threshold: half(),
            burn_in: burn_in(),
            exponent: exponent(),
            strategy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "history_name")]
    pub history: String,
    #[serde(default = "params_name")]
    pub params: String,
    /// Prefix of the metric files (`<prefix>_train.csv`, `<prefix>_test.csv`).
    #[serde(default = "metrics_name")]
    pub metrics: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: None, history: history_name(), params: params_name(), metrics: metrics_name() }
    }
}

fn one() -> usize {
    1
}
fn system_seed() -> u64 {
    SYSTEM_SEED
}
fn h_scale() -> f64 {
    ceem::zoo::lorenz::DEFAULT_H_SCALE
}
fn init_scale() -> f64 {
    0.1
}
fn horizon() -> usize {
    LORENZ_HORIZON
}
fn dt() -> f64 {
    LORENZ_DT
}
fn test_trajectories() -> usize {
    4
}
fn test_seed() -> u64 {
    1_000_000
}
fn ceem_epochs() -> usize {
    100
}
fn half() -> f64 {
    0.5
}
fn state_init() -> String {
    "filter".into()
}
fn yes() -> bool {
    true
}
fn particles() -> usize {
    100
}
fn backward_samples() -> usize {
    10
}
fn pem_epochs() -> usize {
    50
}
fn burn_in() -> usize {
    5
}
fn exponent() -> f64 {
    0.7
}
fn history_name() -> String {
    "history.csv".into()
}
fn params_name() -> String {
    "params.toml".into()
}
fn metrics_name() -> String {
    "metrics".into()
}

fn strategy(name: &Option<String>, key: &str) -> Result<Option<LearnerStrategy>, CliError> {
    name.as_deref()
        .map(|s| s.parse().map_err(|e| CliError::Config(format!("{key}: {e}"))))
        .transpose()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        // Relative dataset paths are taken relative to the config file.
        if let (Some(ds), Some(base)) = (&config.data.dataset, path.parent()) {
            if ds.is_relative() {
                config.data.dataset = Some(base.join(ds));
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn model_id(&self) -> Result<ModelId, CliError> {
        self.model.id.parse().map_err(|e: ceem::Error| CliError::Config(format!("model.id: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        match self.model_id()? {
            ModelId::Lorenz if self.model.attractors != 1 => return bad("model.attractors must be 1 for lorenz".into()),
            ModelId::CoupledLorenz if self.model.attractors < 2 => return bad("model.attractors must be at least 2 for coupled_lorenz".into()),
            ModelId::Lti if self.model.lti.is_none() => return bad("model.lti section is required for lti".into()),
            ModelId::Lorenz | ModelId::CoupledLorenz if self.model.lti.is_some() => {
                return bad("model.lti is only valid for the lti model".into())
            }
            _ => {}
        }
        if !(self.model.init_scale >= 0.0 && self.model.init_scale < 1.0) {
            return bad("model.init_scale must lie in [0, 1)".into());
        }
        if !(self.model.h_scale >= 0.0) {
            return bad("model.h_scale must be nonnegative".into());
        }
        if self.data.horizon < 2 {
            return bad("data.horizon must be at least 2".into());
        }
        if !(self.data.dt > 0.0) {
            return bad("data.dt must be positive".into());
        }
        if self.data.trajectories == 0 {
            return bad("data.trajectories must be at least 1".into());
        }
        if let Some(s) = &self.ceem.strategy {
            strategy(&Some(s.clone()), "ceem.strategy")?;
        }
        if let Some(s) = &self.pem.strategy {
            strategy(&Some(s.clone()), "pem.strategy")?;
        }
        self.state_init()?;
        Ok(())
    }

    fn state_init(&self) -> Result<StateInit, CliError> {
        match self.ceem.init.as_str() {
            "filter" => Ok(StateInit::Filter),
            "lift" => Ok(StateInit::ObservationLift),
            "zeros" => Ok(StateInit::Zeros),
            other => Err(CliError::Config(format!("ceem.init: unknown value {other:?} (expected filter, lift or zeros)"))),
        }
    }

    /// CE-EM settings; `prior` is the first-state prior when enabled.
    pub fn ceem_config(&self, prior: Option<ceem::DiagonalGaussian>) -> Result<CeemConfig, CliError> {
        let c = &self.ceem;
        let config = CeemConfig {
            tol: c.tol,
            max_epochs: c.max_epochs,
            smoother: SmootherOptions {
                rho_x: c.rho_x,
                prior: if c.initial_state_prior { prior } else { None },
                ..Default::default()
            },
            learner: LearnerOptions {
                rho_theta: c.rho_theta,
                strategy: strategy(&c.strategy, "ceem.strategy")?,
                ..Default::default()
            },
            init: self.state_init()?,
        };
        config.validate().map_err(|e| CliError::Config(format!("[ceem] {e}")))?;
        Ok(config)
    }

    pub fn pem_config(&self, initial: ceem::InitialConditionSpec, seed: u64) -> Result<PemConfig, CliError> {
        let p = &self.pem;
        let mut config = PemConfig::new(initial);
        config.filter = FilterOptions { particles: p.particles, resample_threshold: p.resample_threshold };
        config.backward_samples = p.backward_samples;
        config.epochs = p.epochs;
        config.schedule = SaemSchedule { burn_in: p.burn_in, exponent: p.exponent };
        config.learner.strategy = strategy(&p.strategy, "pem.strategy")?;
        config.seed = seed;
        config.validate().map_err(|e| CliError::Config(format!("[pem] {e}")))?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nid = \"lorenz\"\n[data]\nsigma_w = 0.001\nsigma_v = 0.01\n";

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.data.horizon, 128);
        assert_eq!(c.data.dt, 0.04);
        assert_eq!(c.ceem.rho_x, 0.5);
        assert_eq!(c.pem.particles, 100);
        assert_eq!(c.model.init_scale, 0.1);
    }

    #[test]
    fn round_trip_is_identical() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_missing_keys_are_named() {
        let err = ExperimentConfig::parse(&format!("{MINIMAL}bogus = 1\n")).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let err = ExperimentConfig::parse("[model]\n[data]\nsigma_w = 0.1\nsigma_v = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("id"), "{err}");
    }

    #[test]
    fn semantic_checks() {
        let coupled = MINIMAL.replace("\"lorenz\"", "\"coupled_lorenz\"");
        assert!(ExperimentConfig::parse(&coupled).is_err());
        let unknown = MINIMAL.replace("\"lorenz\"", "\"pendulum\"");
        assert!(ExperimentConfig::parse(&unknown).unwrap_err().to_string().contains("pendulum"));
        let init = format!("{MINIMAL}[ceem]\ninit = \"random\"\n");
        assert!(ExperimentConfig::parse(&init).is_err());
    }

    #[test]
    fn sigma_expands() {
        assert_eq!(Sigma::Scalar(0.5).expand(3, "k").unwrap(), vec![0.5; 3]);
        assert!(Sigma::PerComponent(vec![1.0]).expand(2, "k").is_err());
    }
}
