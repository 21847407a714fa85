//! Single and coupled Lorenz attractors.
//!
//! The state of K coupled attractors stacks `(x1, x2, x3)` per attractor.
//! Each attractor follows the classical Lorenz drift with its own
//! `(σ, ρ, β)`, and a coupling matrix `H` with zero 3×3 diagonal blocks adds
//! `H x` to the stacked drift. Observations are `y = C x` with a known,
//! full-row-rank `C`.
//!
//! θ layout: `[σ_1..σ_K, ρ_1..ρ_K, β_1..β_K, H_offdiag]`, where
//! `H_offdiag` lists the entries of `H` outside the diagonal blocks in
//! row-major order.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::model::{Linearization, Matrix, ParamLayout, Vector};
use crate::simulate::rk4::{ContinuousDrift, Rk4Model};

pub const NOMINAL_SIGMA: f64 = 10.0;
pub const NOMINAL_RHO: f64 = 28.0;
pub const NOMINAL_BETA: f64 = 8.0 / 3.0;

/// Default standard deviation of sampled coupling entries.
pub const DEFAULT_H_SCALE: f64 = 0.1;

/// Parameters of K coupled Lorenz attractors plus their observation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LorenzParams {
    pub sigma: Vec<f64>,
    pub rho: Vec<f64>,
    pub beta: Vec<f64>,
    pub coupling: Matrix,
    pub observation: Matrix,
}

fn same_attractor(i: usize, j: usize) -> bool {
    i / 3 == j / 3
}

/// Row-major positions of the off-diagonal-block entries of a 3K×3K matrix.
fn offdiag_positions(k: usize) -> impl Iterator<Item = (usize, usize)> {
    let dim = 3 * k;
    (0..dim).flat_map(move |i| (0..dim).filter(move |&j| !same_attractor(i, j)).map(move |j| (i, j)))
}

fn coupling_len(k: usize) -> usize {
    9 * k * k - 9 * k
}

impl LorenzParams {
    pub fn new(sigma: Vec<f64>, rho: Vec<f64>, beta: Vec<f64>, coupling: Matrix, observation: Matrix) -> Result<Self> {
        let k = sigma.len();
        if k == 0 {
            return Err(Error::Config("at least one attractor is required".into()));
        }
        check_dim("rho", k, rho.len())?;
        check_dim("beta", k, beta.len())?;
        check_dim("coupling rows", 3 * k, coupling.nrows())?;
        check_dim("coupling columns", 3 * k, coupling.ncols())?;
        check_dim("observation columns", 3 * k, observation.ncols())?;
        for i in 0..3 * k {
            for j in 0..3 * k {
                if same_attractor(i, j) && coupling[(i, j)] != 0.0 {
                    return Err(Error::Config(format!(
                        "coupling matrix has self-coupling entry H[{i},{j}] = {}",
                        coupling[(i, j)]
                    )));
                }
            }
        }
        let m = observation.nrows();
        if m == 0 || m > 3 * k || observation.clone().svd(false, false).rank(1e-10) < m {
            return Err(Error::Config("observation matrix must have full row rank".into()));
        }
        let all = sigma.iter().chain(&rho).chain(&beta).chain(coupling.iter()).chain(observation.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("Lorenz parameters must be finite".into()));
        }
        Ok(Self {
            sigma,
            rho,
            beta,
            coupling,
            observation,
        })
    }

    /// Nominal `(10, 28, 8/3)` attractors with coupling entries drawn from
    /// `N(0, h_scale²)` and a standard-normal observation matrix with
    /// `obs_rows` rows, redrawn until it has full row rank.
    pub fn sample<R: Rng + ?Sized>(k: usize, h_scale: f64, obs_rows: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || obs_rows == 0 || obs_rows > 3 * k {
            return Err(Error::Config(format!(
                "invalid Lorenz system size: {k} attractors, {obs_rows} observed rows"
            )));
        }
        if !(h_scale >= 0.0) {
            return Err(Error::Config("h_scale must be nonnegative".into()));
        }
        let dim = 3 * k;
        let mut coupling = Matrix::zeros(dim, dim);
        for (i, j) in offdiag_positions(k) {
            let z: f64 = rng.sample(StandardNormal);
            coupling[(i, j)] = h_scale * z;
        }
        loop {
            let observation = DMatrix::from_fn(obs_rows, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            match Self::new(
                vec![NOMINAL_SIGMA; k],
                vec![NOMINAL_RHO; k],
                vec![NOMINAL_BETA; k],
                coupling.clone(),
                observation,
            ) {
                Ok(p) => return Ok(p),
                Err(Error::Config(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    pub fn attractors(&self) -> usize {
        self.sigma.len()
    }

    pub fn theta(&self) -> Vector {
        let k = self.attractors();
        let mut v = Vec::with_capacity(3 * k + coupling_len(k));
        v.extend(&self.sigma);
        v.extend(&self.rho);
        v.extend(&self.beta);
        v.extend(offdiag_positions(k).map(|(i, j)| self.coupling[(i, j)]));
        Vector::from_vec(v)
    }

    /// Rebuilds parameters from θ, keeping the observation matrix.
    pub fn with_theta(&self, theta: &Vector) -> Result<Self> {
        let drift = LorenzDrift::new(self.attractors());
        check_dim("Lorenz theta", drift.param_len(), theta.len())?;
        let k = self.attractors();
        Self::new(
            theta.as_slice()[..k].to_vec(),
            theta.as_slice()[k..2 * k].to_vec(),
            theta.as_slice()[2 * k..3 * k].to_vec(),
            drift.coupling(theta),
            self.observation.clone(),
        )
    }

    /// Discrete model (one RK4 step per sample) for these attractors.
    pub fn model(&self, dt: f64) -> Result<LorenzModel> {
        let k = self.attractors();
        let id = if k == 1 { "lorenz" } else { "coupled_lorenz" };
        Rk4Model::new(id, LorenzDrift::new(k), dt, self.observation.clone())
    }
}

/// Continuous drift of K coupled attractors, parameterized by θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LorenzDrift {
    k: usize,
}

pub type LorenzModel = Rk4Model<LorenzDrift>;

impl LorenzDrift {
    pub fn new(k: usize) -> Self {
        Self { k }
    }

    pub fn attractors(&self) -> usize {
        self.k
    }

    pub fn param_len(&self) -> usize {
        3 * self.k + coupling_len(self.k)
    }

    /// Coupling matrix encoded in θ.
    pub fn coupling(&self, theta: &Vector) -> Matrix {
        let dim = 3 * self.k;
        let mut h = Matrix::zeros(dim, dim);
        for (e, (i, j)) in offdiag_positions(self.k).enumerate() {
            h[(i, j)] = theta[3 * self.k + e];
        }
        h
    }
}

impl ContinuousDrift for LorenzDrift {
    fn state_dim(&self) -> usize {
        3 * self.k
    }

    fn input_dim(&self) -> usize {
        0
    }

    fn param_layout(&self) -> ParamLayout {
        ParamLayout::from_lengths([
            ("sigma", self.k),
            ("rho", self.k),
            ("beta", self.k),
            ("coupling", coupling_len(self.k)),
        ])
    }

    fn drift(&self, theta: &Vector, x: &Vector, _u: &Vector, _t: f64) -> Vector {
        let k = self.k;
        let mut out = Vector::zeros(3 * k);
        for a in 0..k {
            let (x1, x2, x3) = (x[3 * a], x[3 * a + 1], x[3 * a + 2]);
            let (s, r, b) = (theta[a], theta[k + a], theta[2 * k + a]);
            out[3 * a] = s * (x2 - x1);
            out[3 * a + 1] = x1 * (r - x3) - x2;
            out[3 * a + 2] = x1 * x2 - b * x3;
        }
        if k > 1 {
            for (e, (i, j)) in offdiag_positions(k).enumerate() {
                out[i] += theta[3 * k + e] * x[j];
            }
        }
        out
    }

    fn drift_jacobians(&self, theta: &Vector, x: &Vector, _u: &Vector, _t: f64) -> Linearization {
        let k = self.k;
        let dim = 3 * k;
        let mut wrt_state = Matrix::zeros(dim, dim);
        let mut wrt_params = Matrix::zeros(dim, self.param_len());
        for a in 0..k {
            let i = 3 * a;
            let (x1, x2, x3) = (x[i], x[i + 1], x[i + 2]);
            let (s, r, b) = (theta[a], theta[k + a], theta[2 * k + a]);
            wrt_state[(i, i)] = -s;
            wrt_state[(i, i + 1)] = s;
            wrt_state[(i + 1, i)] = r - x3;
            wrt_state[(i + 1, i + 1)] = -1.0;
            wrt_state[(i + 1, i + 2)] = -x1;
            wrt_state[(i + 2, i)] = x2;
            wrt_state[(i + 2, i + 1)] = x1;
            wrt_state[(i + 2, i + 2)] = -b;

            wrt_params[(i, a)] = x2 - x1;
            wrt_params[(i + 1, k + a)] = x1;
            wrt_params[(i + 2, 2 * k + a)] = -x3;
        }
        for (e, (i, j)) in offdiag_positions(k).enumerate() {
            wrt_state[(i, j)] += theta[3 * k + e];
            wrt_params[(i, 3 * k + e)] = x[j];
        }
        Linearization {
            wrt_state,
            wrt_params,
            approximate: false,
        }
    }
}

/// Evaluates the stacked drift `ẋ̃ + H x` for explicit parameters.
pub fn lorenz_drift(params: &LorenzParams, x: &Vector) -> Result<Vector> {
    let drift = LorenzDrift::new(params.attractors());
    check_dim("Lorenz state", drift.state_dim(), x.len())?;
    Ok(drift.drift(&params.theta(), x, &Vector::zeros(0), 0.0))
}
