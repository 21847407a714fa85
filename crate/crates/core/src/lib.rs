//! Gray-box identification of partially observed nonlinear state-space models.
//!
//! The crate implements certainty-equivalent expectation-maximization
//! (CE-EM): block coordinate ascent on the joint log-likelihood
//! `J(x_{1:T}, θ)`, alternating a batch nonlinear least-squares smoother over
//! the hidden states with a parameter update. A particle-EM baseline
//! (fully adapted particle filter, backward simulation and stochastic
//! approximation EM), Kalman oracles, and a coupled-Lorenz benchmark harness
//! are included for comparison and validation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ceem;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod learner;
pub mod model;
pub mod optim;
pub mod particle;
pub mod report;
pub mod rng;
pub mod simulate;
pub mod smoother;
pub mod zoo;

pub use ceem::{ceem_fit, ceem_fit_from, CeemConfig, FitProblem};
pub use error::{Error, Result};
pub use model::{
    dynamics_step, jacobians, log_prob_noise, observe, DiagonalGaussian, GaussianNoiseSpec, Jacobians, Linearization,
    Matrix, NoiseChannel, ParamLayout, ParamVec, SystemModel, Vector,
};
pub use particle::{pem_fit, PemConfig};
pub use simulate::{InitialConditionSpec, Trajectory, TrajectoryDataset};
pub use report::{EpochRecord, FitReport, Termination, TruthEvaluator};
