//! Adversarial task families on which a frozen representation learns the
//! wrong subspace.
//!
//! Inputs are `N(0, Σ)` with `Σ = blockdiag(ε I_{d−k}, I_k)`. Tasks are
//! `θ = A* v / √(2ε) + δ` with `v` uniform on `S^{k−1}`, `A*` supported on the
//! first `d − k` coordinates (`E*`) and `δ` uniform on the unit sphere of the
//! last `k` coordinates (`E_k`). The signal along `A*` has variance `1/2`
//! while the nuisance along `E_k` has variance `1`, so a representation fit
//! without per-task adaptation locks onto `E_k`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env_gen::{sample_target_dataset, Dataset, Family, SigmaSpec, TargetTask, TaskEnvironment, TaskParams};
use crate::error::{invalid, Result};
use crate::lbfgs::{minimize, LbfgsOptions};
use crate::linalg::{gaussian_matrix, orthonormalize, unit_vector};
use crate::par::map_indexed;
use crate::rng::{rng_from, stream, sub_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardFamily {
    Linear,
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardCaseSpec {
    pub d: usize,
    pub k: usize,
    pub eps: f64,
    /// Orthonormal `d × k`, supported on the first `d − k` coordinates.
    pub a_star: DMatrix<f64>,
    pub family: HardFamily,
}

impl HardCaseSpec {
    /// `A*` is the first `k` coordinate directions.
    pub fn new(d: usize, k: usize, eps: f64, family: HardFamily) -> Result<Self> {
        if k == 0 || d < 2 * k {
            return Err(invalid(format!("hard case needs d >= 2k (d = {d}, k = {k})")));
        }
        if family == HardFamily::Relu && 2 * k >= d {
            return Err(invalid("ReLU hard case needs 2k < d"));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(invalid(format!("eps = {eps} must lie in (0, 1)")));
        }
        let a_star = DMatrix::from_fn(d, k, |i, j| if i == j { 1.0 } else { 0.0 });
        Ok(HardCaseSpec { d, k, eps, a_star, family })
    }

    /// `ε = k/d`.
    pub fn with_default_eps(d: usize, k: usize, family: HardFamily) -> Result<Self> {
        Self::new(d, k, k as f64 / d as f64, family)
    }

    pub fn covariance_diag(&self) -> Vec<f64> {
        (0..self.d).map(|i| if i < self.d - self.k { self.eps } else { 1.0 }).collect()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(self.covariance_diag()))
    }

    /// Orthonormal basis of `E_k`, the last `k` coordinates.
    pub fn e_k_basis(&self) -> DMatrix<f64> {
        let off = self.d - self.k;
        DMatrix::from_fn(self.d, self.k, |i, j| if i == off + j { 1.0 } else { 0.0 })
    }

    pub fn env_family(&self) -> Family {
        match self.family {
            HardFamily::Linear => Family::HardcaseLinear,
            HardFamily::Relu => Family::HardcaseRelu,
        }
    }

    /// Environment with `num_tasks` source tasks drawn from the hard family.
    /// Each task is stored as `w_t = v/√(2ε)`, `Delta_t = δ w_tᵀ/‖w_t‖²`.
    pub fn environment(&self, num_tasks: usize, noise_sigma: f64, seed: u64) -> Result<TaskEnvironment> {
        if num_tasks == 0 {
            return Err(invalid("need at least one source task"));
        }
        if !(noise_sigma >= 0.0) {
            return Err(invalid("noise sigma must be non-negative"));
        }
        let mut rng = rng_from(sub_seed(seed, stream::ENV, 0));
        let tasks = (0..num_tasks)
            .map(|_| {
                let t = draw_hard_task(&self.a_star, self.eps, self.d, self.k, &mut rng);
                let w = t.w_star;
                let delta = &t.delta_star * w.transpose() / w.norm_squared();
                TaskParams { delta, w }
            })
            .collect();
        let diag = self.covariance_diag();
        Ok(TaskEnvironment {
            family: self.env_family(),
            d: self.d,
            k: self.k,
            sigma: self.covariance(),
            sigma_spec: SigmaSpec::Diagonal { diag },
            bstar: self.a_star.clone(),
            delta0: 1.0,
            noise_sigma,
            tasks,
            target_radius: 1.0,
            eps: Some(self.eps),
            nn: None,
            seed,
        })
    }
}

/// `θ = A v/√(2ε) + δ`, `v ∈ S^{k−1}`, `δ` on the unit sphere of the last `k`
/// coordinates.
pub fn draw_hard_task(a: &DMatrix<f64>, eps: f64, d: usize, k: usize, rng: &mut Rng) -> TargetTask {
    let v = unit_vector(rng, k);
    let u = unit_vector(rng, k);
    let mut delta = DVector::zeros(d);
    delta.rows_mut(d - k, k).copy_from(&u);
    let w_star = v / (2.0 * eps).sqrt();
    let theta_star = a * &w_star + &delta;
    TargetTask { theta_star, w_star, delta_star: delta, nn: None }
}

pub fn sample_hard_task(spec: &HardCaseSpec, seed: u64) -> TargetTask {
    let mut rng = rng_from(sub_seed(seed, stream::TARGET_TASK, 0));
    draw_hard_task(&spec.a_star, spec.eps, spec.d, spec.k, &mut rng)
}

/// ReLU parameters realizing `x ↦ xᵀ(A v/√(2ε) + δ)`: first layer
/// `[A, −A]`, head `[v, −v]/√(2ε)` and perturbation `d × 2k` whose every
/// column is `δ/k`. No validation.
pub fn relu_lift_params(
    a: &DMatrix<f64>,
    eps: f64,
    v: &DVector<f64>,
    delta: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (d, k) = a.shape();
    let b = DMatrix::from_fn(d, 2 * k, |i, j| if j < k { a[(i, j)] } else { -a[(i, j - k)] });
    let s = 1.0 / (2.0 * eps).sqrt();
    let head = DVector::from_fn(2 * k, |j, _| if j < k { s * v[j] } else { -s * v[j - k] });
    let lift = DMatrix::from_fn(d, 2 * k, |i, _| delta[i] / k as f64);
    (b, head, lift)
}

fn relu_step(t: f64) -> f64 {
    // σ'(t) + σ'(−t) = 1 everywhere, including t = 0
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        0.0
    } else {
        0.5
    }
}

/// Fine-tuned ReLU predictor `headᵀσ(Bᵀx) + Σ_j σ'(b_jᵀx)·lift_jᵀx` per row of `x`.
pub fn relu_lifted_predict(
    b: &DMatrix<f64>,
    head: &DVector<f64>,
    lift: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> DVector<f64> {
    let pre = x * b;
    let lx = x * lift;
    DVector::from_fn(x.nrows(), |i, _| {
        (0..b.ncols()).map(|j| head[j] * pre[(i, j)].max(0.0) + relu_step(pre[(i, j)]) * lx[(i, j)]).sum()
    })
}

/// Checked form of [`relu_lift_params`].
pub fn lift_to_relu(
    spec: &HardCaseSpec,
    v: &DVector<f64>,
    delta: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    if spec.family != HardFamily::Relu {
        return Err(invalid("lift requires the ReLU family"));
    }
    if 2 * spec.k >= spec.d {
        return Err(invalid("ReLU lift needs 2k < d"));
    }
    if v.len() != spec.k || delta.len() != spec.d {
        return Err(invalid("lift dimensions do not match the spec"));
    }
    if (v.norm() - 1.0).abs() > 1e-10 || (delta.norm() - 1.0).abs() > 1e-10 {
        return Err(invalid("lift expects unit v and delta"));
    }
    Ok(relu_lift_params(&spec.a_star, spec.eps, v, delta))
}

#[derive(Clone, Debug)]
pub struct PopulationLimit {
    /// Orthonormalized limit representation.
    pub representation: DMatrix<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Infinite-data FrozenRep limit. With `M` the Monte-Carlo second moment of
/// `n_mc` task vectors, minimizes over `B` the population loss after the
/// exact per-task head solve,
/// `J(B) = ½ tr(ΣM) − ½ tr((BᵀΣB)⁻¹ BᵀΣMΣB)`, over `C = Σ^{1/2}B`.
pub fn frozenrep_population_limit(spec: &HardCaseSpec, n_mc: usize, seed: u64) -> Result<PopulationLimit> {
    if n_mc < 1000 {
        return Err(invalid("population limit needs at least 1000 Monte-Carlo tasks"));
    }
    let (d, k) = (spec.d, spec.k);
    let mut rng = rng_from(sub_seed(seed, stream::MONTE_CARLO, 0));
    let mut m = DMatrix::zeros(d, d);
    // antithetic pairs (v, δ), (v, −δ): the signal/nuisance cross moments
    // vanish exactly instead of at the Monte-Carlo rate
    let mut prev: Option<TargetTask> = None;
    for _ in 0..n_mc {
        let theta = match prev.take() {
            None => {
                let t = draw_hard_task(&spec.a_star, spec.eps, d, k, &mut rng);
                let th = t.theta_star.clone();
                prev = Some(t);
                th
            }
            Some(t) => &t.theta_star - &t.delta_star * 2.0,
        };
        m.ger(1.0, &theta, &theta, 1.0);
    }
    m /= n_mc as f64;
    // whitened coordinates C = Σ^{1/2} B keep the problem well conditioned
    let sq: Vec<f64> = spec.covariance_diag().iter().map(|v| v.sqrt()).collect();
    let w = DMatrix::from_fn(d, d, |i, j| sq[i] * m[(i, j)] * sq[j]);
    let base = 0.5 * w.trace();
    // J is invariant under C ↦ CR; a mild pull towards CᵀC = I fixes the scale
    let mu = 0.1;
    let eval = |x: &DVector<f64>| -> (f64, DVector<f64>) {
        let c = DMatrix::from_column_slice(d, k, x.as_slice());
        let g = c.transpose() * &c;
        let Some(ginv) = g.clone().try_inverse() else {
            return (f64::INFINITY, DVector::zeros(d * k));
        };
        let wc = &w * &c;
        let h = c.transpose() * &wc;
        let gh = &ginv * &h;
        let e = &g - DMatrix::identity(k, k);
        let value = base - 0.5 * gh.trace() + mu * e.norm_squared();
        let grad = -(&wc * &ginv - &c * &gh * &ginv) + &c * &e * (4.0 * mu);
        (value, DVector::from_column_slice(grad.as_slice()))
    };
    let mut init_rng = rng_from(sub_seed(seed, stream::RESTART, 0));
    let c0 = orthonormalize(&gaussian_matrix(&mut init_rng, d, k, 1.0));
    let opts = LbfgsOptions { max_iters: 2000, ..LbfgsOptions::default() };
    let res = minimize(eval, DVector::from_column_slice(c0.as_slice()), &opts);
    let c = DMatrix::from_column_slice(d, k, res.x.as_slice());
    let b = DMatrix::from_fn(d, k, |i, j| c[(i, j)] / sq[i]);
    Ok(PopulationLimit {
        representation: orthonormalize(&b),
        objective: res.value,
        converged: res.converged,
        iterations: res.iterations,
    })
}

/// Draws `m` candidate target tasks from `env`'s target law, scores each by
/// the mean of `runner` over `inner_reps` independent datasets of size `n_t`
/// and returns the highest-scoring task with its score. Ties go to the
/// earliest candidate.
pub fn worst_case_target<F>(
    representation: &DMatrix<f64>,
    env: &TaskEnvironment,
    runner: F,
    m: usize,
    n_t: usize,
    inner_reps: usize,
    seed: u64,
) -> Result<(TargetTask, f64)>
where
    F: Fn(&DMatrix<f64>, &TargetTask, &Dataset) -> Result<f64> + Sync + Send,
{
    if m == 0 || inner_reps == 0 || n_t == 0 {
        return Err(invalid("worst-case search needs m, inner_reps, n_t >= 1"));
    }
    let scored = map_indexed(m, |i| -> Result<(TargetTask, f64)> {
        let cseed = sub_seed(seed, stream::CANDIDATE, i as u64);
        let task = crate::env_gen::sample_target_task(env, cseed);
        let mut total = 0.0;
        for j in 0..inner_reps {
            let ds = sample_target_dataset(env, &task, n_t, sub_seed(cseed, stream::REPLICATION, j as u64));
            total += runner(representation, &task, &ds)?;
        }
        Ok((task, total / inner_reps as f64))
    });
    let mut best: Option<(TargetTask, f64)> = None;
    for r in scored {
        let (task, risk) = r?;
        if best.as_ref().is_none_or(|b| risk > b.1) {
            best = Some((task, risk));
        }
    }
    Ok(best.expect("m >= 1"))
}
