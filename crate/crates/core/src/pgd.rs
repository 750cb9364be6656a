//! Fixed-step projected gradient descent for objectives that are
//! approximately linear in their parameters.
//!
//! With step `η = R / (√T · √(L² + β²R²))` the best of the `T + 1` iterates is
//! within `βR² + R·√((L² + β²R²)/T)` of every feasible comparator, where `β`
//! bounds the averaged squared Hessian norm of the model, `L` the averaged
//! squared gradient norm at the origin and `R` the radius of the feasible set.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::linalg::unit_vector;
use crate::rng::{rng_from, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct PgdConfig {
    pub iterations: usize,
    /// Norm bound of the feasible set.
    pub radius: f64,
    /// Curvature constant of the model.
    pub beta_curv: f64,
    /// Gradient-scale constant of the model at the origin.
    pub l_grad: f64,
    /// Overrides the certified step size.
    pub eta: Option<f64>,
    /// Keep every iterate in the trace (otherwise only the best one).
    pub keep_iterates: bool,
}

impl PgdConfig {
    pub fn new(iterations: usize, radius: f64, beta_curv: f64, l_grad: f64) -> Self {
        PgdConfig { iterations, radius, beta_curv, l_grad, eta: None, keep_iterates: true }
    }

    pub fn step_size(&self) -> f64 {
        self.eta.unwrap_or_else(|| certified_step(self.iterations, self.radius, self.beta_curv, self.l_grad))
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("PGD needs at least one iteration"));
        }
        if !(self.radius > 0.0) || self.beta_curv < 0.0 || self.l_grad < 0.0 {
            return Err(invalid("PGD constants must be non-negative with a positive radius"));
        }
        let eta = self.step_size();
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(invalid(format!("step size {eta} is not a positive number")));
        }
        Ok(())
    }
}

pub fn certified_step(iterations: usize, radius: f64, beta_curv: f64, l_grad: f64) -> f64 {
    let t = iterations as f64;
    radius / (t.sqrt() * (l_grad * l_grad + beta_curv * beta_curv * radius * radius).sqrt())
}

/// Suboptimality certificate `βR² + R·√((L² + β²R²)/T)`.
pub fn certificate(iterations: usize, radius: f64, beta_curv: f64, l_grad: f64) -> f64 {
    let t = iterations as f64;
    let r2 = radius * radius;
    beta_curv * r2 + radius * ((l_grad * l_grad + beta_curv * beta_curv * r2) / t).sqrt()
}

#[derive(Clone, Debug)]
pub struct PgdTrace {
    /// `x_0 … x_T` when iterates are kept, otherwise empty.
    pub iterates: Vec<DVector<f64>>,
    pub losses: Vec<f64>,
    pub best_index: usize,
    pub best: DVector<f64>,
    pub eta: f64,
}

impl PgdTrace {
    pub fn best_loss(&self) -> f64 {
        self.losses[self.best_index]
    }
}

pub trait Objective {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn value_and_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        (self.value(x), self.gradient(x))
    }
}

/// Objective assembled from a pair of closures.
pub struct FnObjective<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(x)
    }
}

/// Runs `x_{t+1} = Π(x_t − η ∇f(x_t))` for the configured number of steps.
pub fn run_pgd<O, P>(objective: &O, projector: P, x0: DVector<f64>, config: &PgdConfig) -> Result<PgdTrace>
where
    O: Objective + ?Sized,
    P: Fn(&DVector<f64>) -> DVector<f64>,
{
    config.validate()?;
    let eta = config.step_size();
    let mut x = x0;
    let mut iterates = Vec::new();
    let mut losses = Vec::with_capacity(config.iterations + 1);
    let mut best = x.clone();
    let mut best_index = 0;
    for it in 0..=config.iterations {
        let (loss, grad) = objective.value_and_gradient(&x);
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss", iteration: it });
        }
        if losses.is_empty() || loss < losses[best_index] {
            best_index = it;
            best.copy_from(&x);
        }
        losses.push(loss);
        if config.keep_iterates {
            iterates.push(x.clone());
        }
        if it == config.iterations {
            break;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { what: "gradient", iteration: it });
        }
        x.axpy(-eta, &grad, 1.0);
        x = projector(&x);
    }
    Ok(PgdTrace { iterates, losses, best_index, best, eta })
}

/// Radial projection onto the Euclidean ball of the given radius.
pub fn project_ball(x: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = x.norm();
    if n <= radius {
        x.clone()
    } else if radius == 0.0 {
        DVector::zeros(x.len())
    } else {
        x * (radius / n)
    }
}

/// Exact Euclidean projection onto `{‖Delta‖_F ≤ c1} × {‖w‖₂ ≤ c2}`.
pub fn project_product_ball(delta: &DMatrix<f64>, w: &DVector<f64>, c1: f64, c2: f64) -> (DMatrix<f64>, DVector<f64>) {
    let scale = |n: f64, r: f64| {
        if n <= r {
            1.0
        } else if r == 0.0 {
            0.0
        } else {
            r / n
        }
    };
    let sd = scale(delta.norm(), c1);
    let sw = scale(w.norm(), c2);
    (delta * sd, w * sw)
}

/// Product-ball projector on a packed `[vec(Delta); w]` parameter vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProductBall {
    pub split: usize,
    pub r1: f64,
    pub r2: f64,
}

impl ProductBall {
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        for (range, r) in [(0..self.split, self.r1), (self.split..x.len(), self.r2)] {
            let n = x.rows(range.start, range.len()).norm();
            if n > r {
                let s = if r == 0.0 { 0.0 } else { r / n };
                out.rows_mut(range.start, range.len()).scale_mut(s);
            }
        }
        out
    }

    pub fn radius(&self) -> f64 {
        (self.r1 * self.r1 + self.r2 * self.r2).sqrt()
    }
}

/// A scalar model `g_θ(x)` with parameter derivatives.
pub trait ParamModel {
    fn n_params(&self) -> usize;
    fn value(&self, theta: &DVector<f64>, x: &DVector<f64>) -> f64;
    fn gradient(&self, theta: &DVector<f64>, x: &DVector<f64>) -> DVector<f64>;
    /// Hessian-vector product; central differences of the gradient by default.
    fn hvp(&self, theta: &DVector<f64>, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let h = 1e-5;
        let gp = self.gradient(&(theta + v * h), x);
        let gm = self.gradient(&(theta - v * h), x);
        (gp - gm) / (2.0 * h)
    }
}

const POWER_STEPS: usize = 100;

fn hessian_spectral_norm<M: ParamModel + ?Sized>(
    model: &M,
    theta: &DVector<f64>,
    x: &DVector<f64>,
    rng: &mut Rng,
) -> Result<f64> {
    let mut v = unit_vector(rng, model.n_params());
    let mut prev = f64::NAN;
    for _ in 0..POWER_STEPS {
        let hv = model.hvp(theta, x, &v);
        let norm = hv.norm();
        if norm < 1e-12 {
            return Ok(0.0);
        }
        if (norm - prev).abs() <= 1e-9 * norm {
            return Ok(norm);
        }
        prev = norm;
        v = hv / norm;
    }
    Err(Error::PowerIteration(POWER_STEPS))
}

/// Empirical `(β, L)`: `β² = max_probe mean_i ‖∇²g(x_i)‖²` over `n_probe`
/// sampled feasible points and `L² = mean_i ‖∇g_0(x_i)‖²` at the origin.
pub fn estimate_approx_linearity<M, S>(
    model: &M,
    inputs: &DMatrix<f64>,
    mut feasible_sampler: S,
    n_probe: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    M: ParamModel + ?Sized,
    S: FnMut(&mut Rng) -> DVector<f64>,
{
    if n_probe == 0 {
        return Err(invalid("need at least one probe"));
    }
    let mut rng = rng_from(seed);
    let n = inputs.nrows();
    let rows: Vec<DVector<f64>> = (0..n).map(|i| inputs.row(i).transpose()).collect();
    let origin = DVector::zeros(model.n_params());
    let l2 = rows.iter().map(|x| model.gradient(&origin, x).norm_squared()).sum::<f64>() / n as f64;
    let mut beta2: f64 = 0.0;
    for _ in 0..n_probe {
        let theta = feasible_sampler(&mut rng);
        let mut acc = 0.0;
        for x in &rows {
            acc += hessian_spectral_norm(model, &theta, x, &mut rng)?.powi(2);
        }
        beta2 = beta2.max(acc / n as f64);
    }
    Ok((beta2.sqrt(), l2.sqrt()))
}
