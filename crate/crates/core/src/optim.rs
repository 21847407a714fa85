//! Unconstrained minimizers used by the learning step.
//!
//! All routines minimize; non-finite objective values are treated as `+∞`
//! so that a candidate leaving the model's domain is simply rejected.

use std::collections::VecDeque;

use crate::model::Vector;

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vector,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOptions {
    pub max_iterations: usize,
    /// Relative initial offset per coordinate.
    pub simplex_scale: f64,
    /// Smallest initial offset per coordinate.
    pub simplex_min_step: f64,
    /// Stop when the spread of simplex values is below `f_tol·(1 + |f_best|)`
    pub f_tol: f64,
    /// and every vertex is within `x_tol·(1 + ‖x_best‖∞)` of the best one.
    pub x_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            simplex_scale: 0.05,
            simplex_min_step: 1e-4,
            f_tol: 1e-14,
            x_tol: 1e-10,
        }
    }
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Nelder-Mead downhill simplex.
pub fn nelder_mead<F: FnMut(&Vector) -> f64>(mut f: F, x0: &Vector, opts: &NelderMeadOptions) -> OptimOutcome {
    let dim = x0.len();
    let mut eval = |x: &Vector| sanitize(f(x));
    if dim == 0 {
        let value = eval(x0);
        return OptimOutcome { x: x0.clone(), value, iterations: 0, converged: true };
    }
    let mut simplex: Vec<(Vector, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.clone(), eval(x0)));
    for i in 0..dim {
        let mut v = x0.clone();
        v[i] += (opts.simplex_scale * x0[i].abs()).max(opts.simplex_min_step);
        let fv = eval(&v);
        simplex.push((v, fv));
    }

    let mut iterations = 0;
    let mut converged = false;
    loop {
        // Stable sort keeps lower indices first among ties.
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        let spread_ok = (worst - best).abs() <= opts.f_tol * (1.0 + best.abs());
        let scale = 1.0 + simplex[0].0.amax();
        let size_ok = simplex[1..].iter().all(|(v, _)| (v - &simplex[0].0).amax() <= opts.x_tol * scale);
        if best.is_finite() && spread_ok && size_ok {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;

        let centroid = simplex[..dim].iter().fold(Vector::zeros(dim), |acc, (v, _)| acc + v) / dim as f64;
        let x_worst = simplex[dim].0.clone();
        let xr = &centroid + (&centroid - &x_worst) * REFLECT;
        let fr = eval(&xr);
        if fr < best {
            let xe = &centroid + (&xr - &centroid) * EXPAND;
            let fe = eval(&xe);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
            continue;
        }
        let (xc, fc, accept) = if fr < worst {
            let xc = &centroid + (&xr - &centroid) * CONTRACT;
            let fc = eval(&xc);
            let ok = fc <= fr;
            (xc, fc, ok)
        } else {
            let xc = &centroid + (&x_worst - &centroid) * CONTRACT;
            let fc = eval(&xc);
            let ok = fc < worst;
            (xc, fc, ok)
        };
        if accept {
            simplex[dim] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let v = &x_best + (&vertex.0 - &x_best) * SHRINK;
            let fv = eval(&v);
            *vertex = (v, fv);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    OptimOutcome { x, value, iterations, converged }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    pub history: usize,
    pub gradient_tol: f64,
    /// Stop when an accepted step changes f by less than `f_tol·(1 + |f|)`.
    pub f_tol: f64,
    /// Sufficient-decrease constant of the backtracking line search.
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            history: 10,
            gradient_tol: 1e-8,
            f_tol: 1e-13,
            armijo: 1e-4,
            max_backtracks: 60,
        }
    }
}

/// Limited-memory BFGS with a backtracking line search.
pub fn lbfgs<F: FnMut(&Vector) -> (f64, Vector)>(mut fg: F, x0: &Vector, opts: &LbfgsOptions) -> OptimOutcome {
    let mut x = x0.clone();
    let (f0, mut g) = fg(&x);
    let mut f = sanitize(f0);
    let mut memory: VecDeque<(Vector, Vector, f64)> = VecDeque::with_capacity(opts.history);
    let mut iterations = 0;
    let mut converged = false;
    if !f.is_finite() {
        return OptimOutcome { x, value: f, iterations, converged };
    }
    while iterations < opts.max_iterations {
        if g.amax() <= opts.gradient_tol {
            converged = true;
            break;
        }
        iterations += 1;

        // Two-loop recursion for d = -H g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * s.dot(&q);
            q -= y * a;
            alphas.push(a);
        }
        let gamma = memory.back().map_or(1.0 / g.norm().max(1.0), |(s, y, _)| s.dot(y) / y.norm_squared());
        let mut d = q * gamma;
        for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&d);
            d += s * (a - b);
        }
        d = -d;
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            memory.clear();
            d = -&g / g.norm().max(1.0);
            slope = g.dot(&d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial = &x + &d * step;
            let (ft, gt) = fg(&trial);
            let ft = sanitize(ft);
            if ft <= f + opts.armijo * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // No decrease along the search direction: treat as stationary.
            converged = g.amax() <= opts.gradient_tol.sqrt();
            break;
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if memory.len() == opts.history {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let change = f - f_new;
        x = x_new;
        f = f_new;
        g = g_new;
        if change <= opts.f_tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
    }
    OptimOutcome { x, value: f, iterations, converged }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamOptions {
    pub max_iterations: usize,
    pub step_size: f64,
    /// Harmonic decay: step `k` uses `step_size / (1 + decay·k)`.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub gradient_tol: f64,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_size: 1e-3,
            decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            gradient_tol: 1e-8,
        }
    }
}

/// Full-batch adaptive-moment descent; returns the best iterate visited.
pub fn adam<F: FnMut(&Vector) -> (f64, Vector)>(mut fg: F, x0: &Vector, opts: &AdamOptions) -> OptimOutcome {
    let dim = x0.len();
    let mut x = x0.clone();
    let mut m = Vector::zeros(dim);
    let mut v = Vector::zeros(dim);
    let (f0, mut g) = fg(&x);
    let mut best = (x.clone(), sanitize(f0));
    let mut iterations = 0;
    let mut converged = false;
    if !best.1.is_finite() {
        return OptimOutcome { x, value: best.1, iterations, converged };
    }
    while iterations < opts.max_iterations {
        if g.amax() <= opts.gradient_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let k = iterations as f64;
        m = &m * opts.beta1 + &g * (1.0 - opts.beta1);
        v = &v * opts.beta2 + g.component_mul(&g) * (1.0 - opts.beta2);
        let m_hat = &m / (1.0 - opts.beta1.powf(k));
        let v_hat = &v / (1.0 - opts.beta2.powf(k));
        let lr = opts.step_size / (1.0 + opts.decay * (k - 1.0));
        let step = m_hat.zip_map(&v_hat, |a, b| a / (b.sqrt() + opts.epsilon)) * lr;
        let trial = &x - step;
        let (ft, gt) = fg(&trial);
        let ft = sanitize(ft);
        if !ft.is_finite() {
            // Rejected step: shrink the moments and retry from the same point.
            m *= 0.5;
            continue;
        }
        x = trial;
        g = gt;
        if ft < best.1 {
            best = (x.clone(), ft);
        }
    }
    OptimOutcome { x: best.0, value: best.1, iterations, converged }
}
