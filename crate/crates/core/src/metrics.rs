//! Excess risk, Monte-Carlo population losses and subspace alignment.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env_gen::{nn_predict, Activation, Family, NnParams, TargetTask, TaskEnvironment};
use crate::error::{invalid, Result};
use crate::linalg::{is_symmetric, orthonormalize};
use crate::rng::{rng_from, stream, sub_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub excess_risk: f64,
    pub sine_dist: f64,
    pub population_loss: f64,
    pub population_loss_stderr: f64,
    pub n_mc: usize,
}

/// `(θ̂ − θ*)ᵀ Σ (θ̂ − θ*)`, the excess squared prediction error under
/// zero-mean inputs with covariance `Σ`.
pub fn excess_risk_quadratic(theta_hat: &DVector<f64>, theta_star: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let d = theta_star.len();
    if theta_hat.len() != d || sigma.shape() != (d, d) {
        return Err(invalid("dimension mismatch in excess risk"));
    }
    if !is_symmetric(sigma, 1e-10) {
        return Err(invalid("covariance is not symmetric"));
    }
    let diff = theta_hat - theta_star;
    Ok((sigma * &diff).dot(&diff).max(0.0))
}

/// Sines of all principal angles between `col(a)` and `col(b)`, ascending.
pub fn principal_angle_sines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(invalid("subspaces live in different ambient dimensions"));
    }
    let (small, large) = if a.ncols() <= b.ncols() { (a, b) } else { (b, a) };
    let qs = orthonormalize(small);
    let ql = orthonormalize(large);
    // sines are the singular values of the part of col(small) outside col(large);
    // this stays accurate for tiny angles where √(1 − cos²) would not
    let resid = &qs - &ql * ql.tr_mul(&qs);
    let mut sines: Vec<f64> = resid.singular_values().iter().map(|s| s.min(1.0)).collect();
    let extra = a.ncols().abs_diff(b.ncols());
    sines.extend(std::iter::repeat_n(1.0, extra));
    sines.sort_by(f64::total_cmp);
    Ok(sines)
}

/// Sine of the largest principal angle between the column spans: zero for
/// identical spans, one when some direction of one span is orthogonal to the
/// other. Both inputs are orthonormalized first.
pub fn sine_principal_angle(b_hat: &DMatrix<f64>, b_star: &DMatrix<f64>) -> Result<f64> {
    let sines = principal_angle_sines(b_hat, b_star)?;
    Ok(sines.last().copied().unwrap_or(0.0))
}

/// A fitted predictor evaluated by [`population_loss_mc`].
#[derive(Clone, Debug, PartialEq)]
pub enum Predictor {
    Zero,
    Linear(DVector<f64>),
    Network { params: NnParams, scale: f64, activation: Activation },
}

impl Predictor {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        match self {
            Predictor::Zero => DVector::zeros(x.nrows()),
            Predictor::Linear(theta) => x * theta,
            Predictor::Network { params, scale, activation } => {
                nn_predict(*activation, *scale, &params.b, &params.w, x)
            }
        }
    }
}

/// Monte-Carlo estimate of the family loss (squared loss with a 1/2 factor;
/// plain logistic loss) at fresh draws from the task. Returns `(mean, stderr)`.
pub fn population_loss_mc(
    predictor: &Predictor,
    env: &TaskEnvironment,
    task: &TargetTask,
    n_mc: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_mc < 100 {
        return Err(invalid("population loss needs at least 100 probes"));
    }
    let mut rng = rng_from(sub_seed(seed, stream::MONTE_CARLO, 0));
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let chunk = 4096;
    let mut done = 0;
    while done < n_mc {
        let m = chunk.min(n_mc - done);
        let x = env.sample_inputs(&mut rng, m);
        let y = env.target_labels(&mut rng, &x, task);
        let f = predictor.predict(&x);
        for i in 0..m {
            let l = match env.family {
                Family::Logistic => logistic_loss(f[i], y[i]),
                _ => 0.5 * (y[i] - f[i]).powi(2),
            };
            sum += l;
            sumsq += l * l;
        }
        done += m;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// `log(1 + e^z) − y z`, computed stably.
pub fn logistic_loss(z: f64, y: f64) -> f64 {
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - y * z
}
