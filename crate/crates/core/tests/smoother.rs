mod common;

use ceem::rng::stream_rng;
use ceem::simulate::{generate_trajectory, zero_inputs};
use ceem::smoother::{joint_objective, residual_stack, smooth, SmootherOptions, StateInit};
use ceem::zoo::{LorenzParams, LtiModel};
use ceem::{GaussianNoiseSpec, Matrix, SystemModel, Vector};
use common::criteria::{residual_identity_gap, smoother_rts_gap};
use rand::Rng;
use rand_distr::StandardNormal;

fn perturbed(rng: &mut ceem::rng::StreamRng, xs: &[Vector], scale: f64) -> Vec<Vector> {
    xs.iter()
        .map(|x| x.map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

#[test]
fn matches_rts_on_random_lti_systems() {
    let gap = smoother_rts_gap();
    assert!(gap < 1e-6, "max error {gap:e}");
}

#[test]
fn residual_identity_at_random_points() {
    let gap = residual_identity_gap();
    assert!(gap <= 1e-10, "relative gap {gap:e}");
}

#[test]
fn jacobian_is_block_bidiagonal() {
    let mut rng = stream_rng(8, 0, 0);
    let params = LorenzParams::sample(1, 0.0, 2, &mut rng).unwrap();
    let model = params.model(0.04).unwrap();
    let noise = GaussianNoiseSpec::isotropic(3, 0.1, 2, 0.2).unwrap();
    let horizon = 6;
    let x: Vec<Vector> = (0..horizon).map(|t| Vector::from_vec(vec![t as f64, 1.0, 20.0])).collect();
    let y: Vec<Vector> = x.iter().map(|xt| model.observe(&params.theta(), xt, &Vector::zeros(0), 0)).collect();
    let u = zero_inputs(horizon, 0);
    let stack = residual_stack(&model, &params.theta(), &noise, &y, &u, &x, &x, 0.3, None).unwrap();
    let dense = stack.dense_jacobian();
    let (n, m) = (3, 2);
    for row in 0..dense.nrows() {
        let allowed: Vec<usize> = if row < horizon * m {
            vec![row / m]
        } else if row < horizon * m + (horizon - 1) * n {
            let t = (row - horizon * m) / n;
            vec![t, t + 1]
        } else {
            vec![(row - horizon * m - (horizon - 1) * n) / n]
        };
        for col in 0..dense.ncols() {
            if !allowed.contains(&(col / n)) {
                assert_eq!(dense[(row, col)], 0.0, "unexpected nonzero at ({row}, {col})");
            }
        }
    }
}

#[test]
fn gauss_newton_gradient_matches_finite_differences() {
    let mut rng = stream_rng(9, 0, 0);
    let params = LorenzParams::sample(1, 0.0, 2, &mut rng).unwrap();
    let model = params.model(0.04).unwrap();
    let theta = params.theta();
    let noise = GaussianNoiseSpec::isotropic(3, 0.5, 2, 0.5).unwrap();
    let horizon = 8;
    let u = zero_inputs(horizon, 0);
    let x: Vec<Vector> = (0..horizon).map(|t| Vector::from_vec(vec![-6.0 + t as f64, -5.0, 24.0 - t as f64])).collect();
    let y: Vec<Vector> = x.iter().map(|xt| model.observe(&theta, xt, &u[0], 0).add_scalar(0.3)).collect();
    let anchor = perturbed(&mut rng, &x, 0.5);
    let rho = 0.7;
    let penalized = |xs: &[Vector]| {
        joint_objective(&model, &theta, &noise, &y, &u, xs, None).unwrap().total
            - rho * xs.iter().zip(&anchor).map(|(a, b)| (a - b).norm_squared()).sum::<f64>()
    };
    let stack = residual_stack(&model, &theta, &noise, &y, &u, &x, &anchor, rho, None).unwrap();
    // ∇(½‖r‖²) = Jᵀr = -∇(penalized objective).
    let grad = stack.gradient();
    for t in 0..horizon {
        for i in 0..3 {
            let h = 1e-5;
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[t][i] += h;
            minus[t][i] -= h;
            let fd = -(penalized(&plus) - penalized(&minus)) / (2.0 * h);
            let exact = grad[3 * t + i];
            let rel = (fd - exact).abs() / exact.abs().max(1.0);
            assert!(rel < 1e-5, "t={t} i={i}: fd {fd} vs {exact}");
        }
    }
}

#[test]
fn ascent_from_arbitrary_start() {
    let mut rng = stream_rng(10, 0, 0);
    let params = LorenzParams::sample(1, 0.0, 2, &mut rng).unwrap();
    let model = params.model(0.04).unwrap();
    let theta = params.theta();
    let noise = GaussianNoiseSpec::isotropic(3, 0.1, 2, 0.1).unwrap();
    let x0 = Vector::from_vec(vec![-6.0, -6.0, 24.0]);
    let tr = generate_trajectory(&model, &theta, &x0, &zero_inputs(64, 0), 64, &noise, 3, 0).unwrap();
    for rho in [0.0, 0.5, 10.0] {
        let start = perturbed(&mut rng, tr.x.as_ref().unwrap(), 2.0);
        let before = joint_objective(&model, &theta, &noise, &tr.y, &tr.u, &start, None).unwrap().total;
        let opts = SmootherOptions { rho_x: rho, ..Default::default() };
        let res = smooth(&model, &theta, &noise, &tr.y, &tr.u, &start, &opts).unwrap();
        let after = joint_objective(&model, &theta, &noise, &tr.y, &tr.u, &res.states, None).unwrap().total;
        let penalty: f64 = res.states.iter().zip(&start).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() * rho;
        assert!(after - penalty >= before - 1e-9, "rho {rho}: {after} - {penalty} < {before}");
        assert!((res.objective - (after - penalty)).abs() < 1e-8 * after.abs().max(1.0));
    }
}

#[test]
fn recovers_states_of_noiseless_fully_observed_system() {
    let mut rng = stream_rng(11, 0, 0);
    let params = LorenzParams::sample(1, 0.0, 3, &mut rng).unwrap();
    let model = params.model(0.04).unwrap();
    let theta = params.theta();
    let sim_noise = GaussianNoiseSpec::isotropic(3, 0.0, 3, 0.0).unwrap();
    let x0 = Vector::from_vec(vec![-5.0, -7.0, 22.0]);
    let tr = generate_trajectory(&model, &theta, &x0, &zero_inputs(128, 0), 128, &sim_noise, 0, 0).unwrap();
    let fit_noise = GaussianNoiseSpec::isotropic(3, 1e-3, 3, 1e-2).unwrap();
    let start = ceem::smoother::initial_states(&model, &theta, &fit_noise, &tr.y, &tr.u, StateInit::ObservationLift, None).unwrap();
    let opts = SmootherOptions { rho_x: 0.0, ..Default::default() };
    let res = smooth(&model, &theta, &fit_noise, &tr.y, &tr.u, &start, &opts).unwrap();
    let err = res.states.iter().zip(tr.x.as_ref().unwrap()).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    assert!(err < 1e-4, "max error {err:e}");
}

#[test]
fn penalized_objective_reported_for_linear_model() {
    let m = LtiModel::autonomous(Matrix::from_element(1, 1, 0.5), Matrix::identity(1, 1)).unwrap();
    let noise = GaussianNoiseSpec::isotropic(1, 1.0, 1, 1.0).unwrap();
    let y: Vec<Vector> = [1.0, 2.0, 0.5].iter().map(|v| Vector::from_element(1, *v)).collect();
    let u = zero_inputs(3, 0);
    let res = smooth(&m, &m.theta(), &noise, &y, &u, &y, &SmootherOptions { rho_x: 0.0, ..Default::default() }).unwrap();
    let j = joint_objective(&m, &m.theta(), &noise, &y, &u, &res.states, None).unwrap().total;
    assert!((res.objective - j).abs() < 1e-12);
}
