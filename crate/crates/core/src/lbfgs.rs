//! Limited-memory BFGS with the two-loop recursion and a strong Wolfe line
//! search (bracketing followed by safeguarded cubic zoom).

use std::collections::VecDeque;

use nalgebra::DVector;

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Curvature constant of the strong Wolfe condition.
    pub wolfe: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { memory: 10, max_iters: 500, grad_tol: 1e-8, armijo: 1e-4, wolfe: 0.9, max_backtracks: 60 }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after every accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

/// Minimizes `f`, which returns the value and gradient at a point.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut history = vec![fx];
    let mut mem: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;

    while iterations < opts.max_iters {
        let gnorm = g.norm();
        if gnorm <= opts.grad_tol || !fx.is_finite() {
            break;
        }
        let mut dir = two_loop(&g, &mem);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            mem.clear();
            dir = -&g;
            slope = -gnorm * gnorm;
        }
        let step0 = if mem.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let Some((xn, fn_, gn)) = wolfe_search(&mut f, &x, fx, &dir, slope, step0, opts) else {
            if mem.is_empty() {
                break;
            }
            mem.clear();
            continue;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fn_;
        g = gn;
        history.push(fx);
        iterations += 1;
    }
    let grad_norm = g.norm();
    LbfgsResult { x, value: fx, grad_norm, iterations, converged: grad_norm <= opts.grad_tol, history }
}

type Point = (DVector<f64>, f64, DVector<f64>);

/// Returns a point satisfying the strong Wolfe conditions along `dir`, or the
/// best sufficient-decrease point found, or `None`.
fn wolfe_search<F>(
    f: &mut F,
    x: &DVector<f64>,
    fx: f64,
    dir: &DVector<f64>,
    slope: f64,
    step0: f64,
    opts: &LbfgsOptions,
) -> Option<Point>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let (c1, c2) = (opts.armijo, opts.wolfe);
    let mut eval = |t: f64| {
        let xn = x + dir * t;
        let (v, g) = f(&xn);
        let d = g.dot(dir);
        (xn, v, g, d)
    };
    let armijo_ok = |t: f64, v: f64| v.is_finite() && v <= fx + c1 * t * slope;
    // (step, value, directional derivative, point)
    let mut lo: (f64, f64, f64, Option<Point>) = (0.0, fx, slope, None);
    let mut hi: Option<(f64, f64, f64)> = None;
    let mut t = step0;
    let mut evals = 0;
    while evals < opts.max_backtracks {
        evals += 1;
        let (xn, v, g, d) = eval(t);
        if !armijo_ok(t, v) || v >= lo.1 {
            hi = Some((t, if v.is_finite() { v } else { f64::INFINITY }, d));
            break;
        }
        if d.abs() <= -c2 * slope {
            return Some((xn, v, g));
        }
        if d >= 0.0 {
            hi = Some((lo.0, lo.1, lo.2));
            lo = (t, v, d, Some((xn, v, g)));
            break;
        }
        lo = (t, v, d, Some((xn, v, g)));
        t *= 2.0;
    }
    let Some(mut hi) = hi else {
        return lo.3;
    };
    while evals < opts.max_backtracks {
        evals += 1;
        let (a, b) = (lo.0.min(hi.0), lo.0.max(hi.0));
        let width = b - a;
        if width <= 1e-16 * b.max(1.0) {
            break;
        }
        let mut trial = cubic_min(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2).unwrap_or(0.5 * (a + b));
        if !(trial > a + 0.1 * width && trial < b - 0.1 * width) {
            trial = 0.5 * (a + b);
        }
        let (xn, v, g, d) = eval(trial);
        if !armijo_ok(trial, v) || v >= lo.1 {
            hi = (trial, if v.is_finite() { v } else { f64::INFINITY }, d);
        } else {
            if d.abs() <= -c2 * slope {
                return Some((xn, v, g));
            }
            if d * (hi.0 - lo.0) >= 0.0 {
                hi = (lo.0, lo.1, lo.2);
            }
            lo = (trial, v, d, Some((xn, v, g)));
        }
    }
    lo.3
}

/// Minimizer of the cubic interpolating values and slopes at two steps.
fn cubic_min(t0: f64, f0: f64, d0: f64, t1: f64, f1: f64, d1: f64) -> Option<f64> {
    if !f1.is_finite() {
        return None;
    }
    let d_1 = d0 + d1 - 3.0 * (f0 - f1) / (t0 - t1);
    let disc = d_1 * d_1 - d0 * d1;
    if disc < 0.0 {
        return None;
    }
    let d_2 = (t1 - t0).signum() * disc.sqrt();
    let t = t1 - (t1 - t0) * (d1 + d_2 - d_1) / (d1 - d0 + 2.0 * d_2);
    t.is_finite().then_some(t)
}

fn two_loop(g: &DVector<f64>, mem: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}
