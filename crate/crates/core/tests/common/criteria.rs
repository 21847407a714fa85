//! Measurements behind the oracle and hygiene acceptance checks. Each
//! function returns the measured quantity; callers apply the tolerance.

use ceem::eval::{ekf_evaluate, kalman_filter, rts_smoother, EkfSettings};
use ceem::model::{finite_difference, jacobians};
use ceem::particle::ffbsi_sample;
use ceem::rng::stream_rng;
use ceem::simulate::{generate_trajectory, rk4_step, zero_inputs};
use ceem::smoother::{joint_objective, residual_stack, smooth, SmootherOptions};
use ceem::zoo::{lorenz_drift, LorenzParams, LtiEntry, LtiMatrix, LtiModel};
use ceem::{DiagonalGaussian, GaussianNoiseSpec, Matrix, SystemModel, Vector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{filter, normal_matrix, planar, random_lti, Lti};

fn normal_vector(rng: &mut ceem::rng::StreamRng, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Largest max-abs gap between smooth(ρ_x = 0) and RTS means over 20 random
/// stable LTI systems with n ≤ 4, m ≤ 3, T ≤ 64.
pub fn smoother_rts_gap() -> f64 {
    let mut rng = stream_rng(2024, 0, 0);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=3);
        let horizon = rng.gen_range(2..=64);
        let sys = random_lti(&mut rng, n, m, horizon, case);
        let tr = &sys.trajectory;
        let oracle = rts_smoother(&sys.model, &sys.model.theta(), &tr.y, &tr.u, &sys.settings()).unwrap();
        let opts = SmootherOptions {
            rho_x: 0.0,
            prior: Some(sys.prior.clone()),
            ..Default::default()
        };
        let x0 = vec![Vector::zeros(n); horizon];
        let res = smooth(&sys.model, &sys.model.theta(), &sys.noise, &tr.y, &tr.u, &x0, &opts).unwrap();
        if !res.converged {
            return f64::INFINITY;
        }
        let err = res.states.iter().zip(&oracle.means).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    worst
}

/// Largest relative gap between the residual-stack objective and the
/// penalized joint objective at 100 random coupled-Lorenz points.
pub fn residual_identity_gap() -> f64 {
    let mut rng = stream_rng(7, 0, 0);
    let params = LorenzParams::sample(2, 0.1, 4, &mut rng).unwrap();
    let model = params.model(0.04).unwrap();
    let theta = params.theta();
    let noise = GaussianNoiseSpec::new((0..6).map(|i| 0.05 + 0.01 * i as f64).collect(), vec![0.2, 0.3, 0.1, 0.4]).unwrap();
    let prior = DiagonalGaussian::new(vec![-6.0, -6.0, 24.0, -6.0, -6.0, 24.0], vec![2.5; 6]).unwrap();
    let horizon = 12;
    let y: Vec<Vector> = (0..horizon).map(|_| normal_vector(&mut rng, 4, 5.0)).collect();
    let u = zero_inputs(horizon, 0);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let x: Vec<Vector> = (0..horizon).map(|_| normal_vector(&mut rng, 6, 8.0)).collect();
        let anchor: Vec<Vector> = x.iter().map(|v| v + normal_vector(&mut rng, 6, 1.0)).collect();
        let rho = if i % 2 == 0 { 0.0 } else { rng.gen_range(0.01..3.0) };
        let p = (i % 3 == 0).then_some(&prior);
        let stack = residual_stack(&model, &theta, &noise, &y, &u, &x, &anchor, rho, p).unwrap();
        let j = joint_objective(&model, &theta, &noise, &y, &u, &x, p).unwrap().total;
        let penalty: f64 = x.iter().zip(&anchor).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() * rho;
        let rhs = j - penalty;
        worst = worst.max((stack.penalized_objective() - rhs).abs() / rhs.abs().max(1.0));
    }
    worst
}

fn filter_rms_error(sys: &Lti, particles: usize, reps: u64) -> f64 {
    let kf = kalman_filter(&sys.model, &sys.model.theta(), &sys.data.y, &sys.data.u, &sys.settings()).unwrap();
    let mut sq = 0.0;
    let mut count = 0.0;
    for rep in 0..reps {
        let ens = filter(sys, particles, 3, rep);
        for (t, m) in ens.filtered_means().iter().enumerate() {
            sq += (m - &kf.filtered_means[t]).norm_squared();
            count += 1.0;
        }
    }
    (sq / count).sqrt()
}

/// Log-log slope of the particle-filter RMS error against the Kalman filter
/// over N_p ∈ {100, 400, 1600}, with the errors themselves.
pub fn filter_pf_slope() -> (f64, Vec<f64>) {
    let sys = planar(30, 3);
    let sizes = [100.0f64, 400.0, 1600.0];
    let errors: Vec<f64> = sizes.iter().map(|&n| filter_rms_error(&sys, n as usize, 24)).collect();
    let lx: Vec<f64> = sizes.iter().map(|n| n.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = lx.iter().sum::<f64>() / 3.0;
    let my = ly.iter().sum::<f64>() / 3.0;
    let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    (slope, errors)
}

fn ffbsi_means(sys: &Lti, seed: u64, n_s: usize) -> Vec<Vector> {
    let ens = filter(sys, 1000, seed, 0);
    let samples = ffbsi_sample(&ens, &sys.noise, n_s, &mut stream_rng(seed, 6, 0)).unwrap();
    assert_eq!(samples.len(), n_s);
    (0..ens.len()).map(|t| samples.iter().fold(Vector::zeros(2), |acc, x| acc + &x[t]) / n_s as f64).collect()
}

/// Runs at N_p = 1000, N_s = 500 with the Monte-Carlo standard error of one
/// run estimated from 40 independent replicates.
pub fn ffbsi_errors_and_se(sys: &Lti, runs: &[u64]) -> (Vec<Vec<Vector>>, Vec<Vector>) {
    let rts = rts_smoother(&sys.model, &sys.model.theta(), &sys.data.y, &sys.data.u, &sys.settings()).unwrap();
    let reps: Vec<Vec<Vector>> = (100..140).map(|seed| ffbsi_means(sys, seed, 500)).collect();
    let se = (0..rts.means.len())
        .map(|t| {
            Vector::from_fn(2, |k, _| {
                let vals: Vec<f64> = reps.iter().map(|r| r[t][k]).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
            })
        })
        .collect();
    let errors = runs
        .iter()
        .map(|&seed| ffbsi_means(sys, seed, 500).iter().zip(&rts.means).map(|(m, r)| m - r).collect())
        .collect();
    (errors, se)
}

/// Largest |FFBSi mean - RTS mean| in standard errors for one run.
pub fn ffbsi_max_z() -> f64 {
    let sys = planar(30, 4);
    let (errors, se) = ffbsi_errors_and_se(&sys, &[1]);
    errors[0].iter().zip(&se).map(|(e, s)| e.component_div(s).amax()).fold(0.0, f64::max)
}

fn relative_gap(exact: &Matrix, approx: &Matrix) -> f64 {
    (exact - approx).amax() / approx.amax().max(1.0)
}

/// Largest relative gap between analytic and central-difference Jacobians
/// (state and parameter, dynamics and observation) at `points` random points.
pub fn jacobian_gap(model: &dyn SystemModel, theta: &Vector, points: usize, state_scale: f64, state_offset: &Vector, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let th = theta.map(|v| v * rng.gen_range(0.8..1.2));
        let x = state_offset + normal_vector(&mut rng, model.state_dim(), state_scale);
        let u = normal_vector(&mut rng, model.input_dim(), 1.0);
        let t = rng.gen_range(0..100);
        let exact = jacobians(model, &th, &x, &u, t).unwrap();
        let f = finite_difference(|a, b| model.step(a, b, &u, t), &th, &x);
        let g = finite_difference(|a, b| model.observe(a, b, &u, t), &th, &x);
        for (a, b) in [
            (&exact.df_dx, &f.wrt_state),
            (&exact.df_dtheta, &f.wrt_params),
            (&exact.dg_dx, &g.wrt_state),
            (&exact.dg_dtheta, &g.wrt_params),
        ] {
            worst = worst.max(relative_gap(a, b));
        }
    }
    worst
}

/// Jacobian gaps for single Lorenz, three coupled Lorenz attractors and a
/// forced LTI model with every entry free, 100 points each.
pub fn zoo_jacobian_gaps() -> Vec<(&'static str, f64)> {
    let mut rng = stream_rng(31, 0, 0);
    let single = LorenzParams::sample(1, 0.1, 1, &mut rng).unwrap();
    let coupled = LorenzParams::sample(3, 0.1, 7, &mut rng).unwrap();
    let lorenz_offset = |k: usize| Vector::from_fn(3 * k, |i, _| if i % 3 == 2 { 25.0 } else { 0.0 });
    let (n, m, p) = (3, 2, 2);
    let mut free = Vec::new();
    for (matrix, rows, cols) in [(LtiMatrix::A, n, n), (LtiMatrix::B, n, p), (LtiMatrix::C, m, n), (LtiMatrix::D, m, p)] {
        for row in 0..rows {
            for col in 0..cols {
                free.push(LtiEntry { matrix, row, col });
            }
        }
    }
    let lti = LtiModel::new(
        normal_matrix(&mut rng, n, n) * 0.4,
        normal_matrix(&mut rng, n, p),
        normal_matrix(&mut rng, m, n),
        normal_matrix(&mut rng, m, p),
        free,
    )
    .unwrap();
    let single_model = single.model(0.04).unwrap();
    let coupled_model = coupled.model(0.04).unwrap();
    vec![
        ("lorenz", jacobian_gap(&single_model, &single.theta(), 100, 8.0, &lorenz_offset(1), 1)),
        ("coupled_lorenz", jacobian_gap(&coupled_model, &coupled.theta(), 100, 8.0, &lorenz_offset(3), 2)),
        ("lti", jacobian_gap(&lti, &lti.theta(), 100, 2.0, &Vector::zeros(n), 3)),
    ]
}

fn rk4_endpoint(params: &LorenzParams, x0: &Vector, span: f64, dt: f64) -> Vector {
    let steps = (span / dt).round() as usize;
    let u = Vector::zeros(0);
    let mut x = x0.clone();
    for i in 0..steps {
        x = rk4_step(|xx, _, _| lorenz_drift(params, xx).unwrap(), &x, &u, i as f64 * dt, dt).unwrap();
    }
    x
}

/// Ratio of RK4 global errors at step sizes h and h/2 on single Lorenz over
/// one time unit, against a reference at h/64.
pub fn rk4_convergence_ratio() -> f64 {
    let params = LorenzParams::new(vec![10.0], vec![28.0], vec![8.0 / 3.0], Matrix::zeros(3, 3), Matrix::identity(3, 3)).unwrap();
    let x0 = Vector::from_vec(vec![-6.0, -6.0, 24.0]);
    let h = 0.01;
    let reference = rk4_endpoint(&params, &x0, 1.0, h / 64.0);
    let coarse = (rk4_endpoint(&params, &x0, 1.0, h) - &reference).norm();
    let fine = (rk4_endpoint(&params, &x0, 1.0, h / 2.0) - &reference).norm();
    coarse / fine
}

/// Largest gap between EKF and exact Kalman filter observation predictions
/// and filtered means on linear models, with default settings and with
/// noise-derived settings, plus the RMSE gap.
pub fn ekf_kalman_gap() -> f64 {
    let mut rng = stream_rng(77, 0, 0);
    let mut worst = 0.0f64;
    for case in 0..10 {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=3);
        let p = rng.gen_range(0..=2);
        let model = LtiModel::new(
            normal_matrix(&mut rng, n, n) * (0.9 / n as f64),
            normal_matrix(&mut rng, n, p),
            normal_matrix(&mut rng, m, n),
            normal_matrix(&mut rng, m, p),
            Vec::new(),
        )
        .unwrap();
        let horizon = 64;
        let noise = GaussianNoiseSpec::isotropic(n, 0.3, m, 0.2).unwrap();
        let u: Vec<Vector> = (0..horizon).map(|_| normal_vector(&mut rng, p, 1.0)).collect();
        let x0 = normal_vector(&mut rng, n, 1.0);
        let tr = generate_trajectory(&model, &model.theta(), &x0, &u, horizon, &noise, case, 0).unwrap();
        let custom = EkfSettings::from_noise(&noise, Vector::zeros(n), Matrix::identity(n, n) * 2.0);
        for settings in [EkfSettings::identity(n, m), custom] {
            let ekf = ekf_evaluate(&model, &model.theta(), &tr.y, &tr.u, &settings).unwrap();
            let kf = kalman_filter(&model, &model.theta(), &tr.y, &tr.u, &settings).unwrap();
            for t in 0..horizon {
                worst = worst.max((&ekf.predicted_obs[t] - &kf.predicted_obs[t]).amax());
                worst = worst.max((&ekf.filtered_means[t] - &kf.filtered_means[t]).amax());
            }
            let sq: f64 = kf.predicted_obs[settings.drop_first..]
                .iter()
                .zip(&tr.y[settings.drop_first..])
                .map(|(a, b)| (a - b).norm_squared())
                .sum();
            let rmse = (sq / (horizon - settings.drop_first) as f64).sqrt();
            worst = worst.max((ekf.rmse - rmse).abs());
        }
    }
    worst
}

/// Whether `EkfSettings::identity` has Q = R = Σ₀ = I, x₀ = 0, drop_first = 25.
pub fn ekf_defaults_hold() -> bool {
    let s = EkfSettings::identity(4, 2);
    s.q == Matrix::identity(4, 4) && s.r == Matrix::identity(2, 2) && s.sigma0 == Matrix::identity(4, 4) && s.x0 == Vector::zeros(4) && s.drop_first == 25
}
