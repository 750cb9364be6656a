//! Ground-truth task environments and finite-sample datasets.
//!
//! Linear-type families (linear, logistic and the two hard-case families)
//! share the parameterization `theta_t = (B* + Delta_t) w_t`, normalized so
//! that `B*ᵀ Σ Delta_t w_t = 0`. The two-layer network family stores
//! antisymmetric base parameters and per-task perturbations of size `1/scale`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky_lower, complement_basis, gaussian_matrix, orthonormalize, unit_vector, MatrixData};
use crate::rng::{normal, rng_from, stream, sub_seed, Rng};

/// Lower and upper bounds on `‖w_t*‖₂` accepted for linear-type families.
pub const HEAD_NORM_BOUNDS: (f64, f64) = (0.5, 2.0);
pub const DEFAULT_DIVERSITY_C: f64 = 0.1;
pub const DEFAULT_RETRIES: usize = 20;
pub const DEFAULT_NN_NOISE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Linear,
    Logistic,
    Nn,
    HardcaseLinear,
    HardcaseRelu,
}

impl Family {
    pub fn is_hardcase(self) -> bool {
        matches!(self, Family::HardcaseLinear | Family::HardcaseRelu)
    }

    pub fn is_linear_type(self) -> bool {
        !matches!(self, Family::Nn)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SigmaSpec {
    Identity,
    Diagonal { diag: Vec<f64> },
    Explicit { matrix: MatrixData },
}

impl SigmaSpec {
    pub fn build(&self, d: usize) -> Result<DMatrix<f64>> {
        let sigma = match self {
            SigmaSpec::Identity => DMatrix::identity(d, d),
            SigmaSpec::Diagonal { diag } => {
                if diag.len() != d {
                    return Err(invalid(format!("diagonal has {} entries, d = {d}", diag.len())));
                }
                if diag.iter().any(|&v| !(v > 0.0)) {
                    return Err(invalid("diagonal covariance entries must be positive"));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(diag))
            }
            SigmaSpec::Explicit { matrix } => {
                let m = matrix.to_matrix()?;
                if m.shape() != (d, d) {
                    return Err(invalid("explicit covariance has wrong shape"));
                }
                if !crate::linalg::is_symmetric(&m, 1e-10) {
                    return Err(invalid("explicit covariance is not symmetric"));
                }
                cholesky_lower(&m)?;
                m
            }
        };
        Ok(sigma)
    }

    fn diagonal_sqrt(&self, d: usize) -> Option<Vec<f64>> {
        match self {
            SigmaSpec::Identity => Some(vec![1.0; d]),
            SigmaSpec::Diagonal { diag } => Some(diag.iter().map(|v| v.sqrt()).collect()),
            SigmaSpec::Explicit { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn value(self, t: f64) -> f64 {
        match self {
            Activation::Tanh => t.tanh(),
            Activation::Relu => t.max(0.0),
        }
    }

    pub fn deriv(self, t: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - t.tanh().powi(2),
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn second_deriv(self, t: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let th = t.tanh();
                -2.0 * th * (1.0 - th * th)
            }
            Activation::Relu => 0.0,
        }
    }

    /// `(L, mu)`: bounds on `|σ'|` and `|σ''|` over `[-2, 2]`.
    pub fn smoothness(self) -> (f64, f64) {
        match self {
            Activation::Tanh => (1.0, 4.0 / (3.0 * 3f64.sqrt())),
            Activation::Relu => (1.0, 0.0),
        }
    }
}

/// Per-task fine-tuning parameters `(Delta_t*, w_t*)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskParams {
    pub delta: DMatrix<f64>,
    pub w: DVector<f64>,
}

/// Extra structure of the two-layer network family.
#[derive(Clone, Debug, PartialEq)]
pub struct NnStructure {
    pub activation: Activation,
    /// Predictor scale used for the ground truth (`f^β`).
    pub scale: f64,
    /// Antisymmetric output layer `[s, -s]`.
    pub w0: DVector<f64>,
    /// Frobenius-orthonormal fine-tuning directions `Delta_i*` (d × 2k each).
    pub directions: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEnvironment {
    pub family: Family,
    pub d: usize,
    pub k: usize,
    pub sigma_spec: SigmaSpec,
    pub sigma: DMatrix<f64>,
    /// `d × k` orthonormal for linear-type families; `d × 2k` antisymmetric `[A, A]` for nn.
    pub bstar: DMatrix<f64>,
    pub delta0: f64,
    pub noise_sigma: f64,
    pub tasks: Vec<TaskParams>,
    /// Radius of the target head `w*` for linear-type families.
    pub target_radius: f64,
    /// Small eigenvalue of the hard-case covariance.
    pub eps: Option<f64>,
    pub nn: Option<NnStructure>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    Source(usize),
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub task_id: TaskId,
    pub seed: u64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }
}

/// Two-layer network parameters `(B, w)` with `f(x) = wᵀσ(Bᵀx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NnParams {
    pub b: DMatrix<f64>,
    pub w: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetTask {
    /// `B* w* + delta*` for linear-type families; empty for nn.
    pub theta_star: DVector<f64>,
    pub w_star: DVector<f64>,
    pub delta_star: DVector<f64>,
    pub nn: Option<NnParams>,
}

impl TaskEnvironment {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Task predictor `(B* + Delta_t) w_t` (linear-type families).
    pub fn task_theta(&self, t: usize) -> DVector<f64> {
        let p = &self.tasks[t];
        (&self.bstar + &p.delta) * &p.w
    }

    /// `k × T` matrix of task heads.
    pub fn heads(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self.tasks.iter().map(|p| p.w.clone()).collect();
        DMatrix::from_columns(&cols)
    }

    pub fn nn_task_params(&self, t: usize) -> Option<NnParams> {
        let nn = self.nn.as_ref()?;
        let p = &self.tasks[t];
        Some(NnParams { b: &self.bstar + &p.delta, w: &nn.w0 + &p.w })
    }

    pub fn sample_inputs(&self, rng: &mut Rng, n: usize) -> DMatrix<f64> {
        let d = self.d;
        if self.family == Family::Nn {
            // uniform on the unit ball
            let mut x = DMatrix::zeros(n, d);
            for i in 0..n {
                let dir = unit_vector(rng, d);
                let r: f64 = rng.random::<f64>().powf(1.0 / d as f64);
                x.row_mut(i).copy_from(&(dir * r).transpose());
            }
            return x;
        }
        let z = gaussian_matrix_rows(rng, n, d);
        match self.sigma_spec.diagonal_sqrt(d) {
            Some(sd) => {
                let mut x = z;
                for (j, s) in sd.iter().enumerate() {
                    if *s != 1.0 {
                        x.column_mut(j).scale_mut(*s);
                    }
                }
                x
            }
            None => {
                let l = cholesky_lower(&self.sigma).expect("validated at construction");
                z * l.transpose()
            }
        }
    }

    /// Noiseless regression function of a linear-type predictor or network.
    fn mean_labels(&self, x: &DMatrix<f64>, theta: &DVector<f64>, nn: Option<&NnParams>) -> DVector<f64> {
        match (self.family, nn) {
            (Family::Nn, Some(p)) => {
                let scale = self.nn.as_ref().map(|s| s.scale).unwrap_or(1.0);
                let act = self.nn.as_ref().map(|s| s.activation).unwrap_or(Activation::Tanh);
                nn_predict(act, scale, &p.b, &p.w, x)
            }
            _ => x * theta,
        }
    }

    fn draw_labels(&self, rng: &mut Rng, x: &DMatrix<f64>, mean: DVector<f64>) -> DVector<f64> {
        let _ = x;
        match self.family {
            Family::Linear | Family::HardcaseLinear | Family::HardcaseRelu => {
                let s = self.noise_sigma;
                mean.map(|m| m + s * normal(rng))
            }
            Family::Logistic => mean.map(|z| {
                let u: f64 = rng.random();
                if u < sigmoid(z) {
                    1.0
                } else {
                    0.0
                }
            }),
            Family::Nn => {
                let s = self.noise_sigma;
                mean.map(|m| m + s * (2.0 * rng.random::<f64>() - 1.0))
            }
        }
    }

    /// Labels for a target task on given inputs.
    pub fn target_labels(&self, rng: &mut Rng, x: &DMatrix<f64>, task: &TargetTask) -> DVector<f64> {
        let mean = match self.family {
            Family::HardcaseRelu => relu_mean_from_theta(self, x, &task.w_star, &task.delta_star),
            _ => self.mean_labels(x, &task.theta_star, task.nn.as_ref()),
        };
        self.draw_labels(rng, x, mean)
    }

    /// Checks the structural invariants of the environment.
    pub fn check_invariants(&self, diversity_c: f64) -> Result<()> {
        if self.family == Family::Nn {
            return Ok(());
        }
        let k = self.k;
        let gram = self.bstar.transpose() * &self.bstar;
        if (gram - DMatrix::identity(k, k)).norm() > 1e-10 {
            return Err(invalid("B* is not orthonormal"));
        }
        let sb = &self.sigma * &self.bstar;
        for (t, p) in self.tasks.iter().enumerate() {
            if p.delta.norm() > self.delta0 * (1.0 + 1e-10) + 1e-12 {
                return Err(invalid(format!("task {t}: ‖Delta‖_F exceeds delta0")));
            }
            let delta_t = &p.delta * &p.w;
            let conv = sb.transpose() * delta_t;
            if conv.norm() > 1e-10 {
                return Err(invalid(format!("task {t}: convention B*ᵀΣδ = 0 violated")));
            }
            if !self.family.is_hardcase() {
                let wn = p.w.norm();
                if wn < HEAD_NORM_BOUNDS.0 || wn > HEAD_NORM_BOUNDS.1 {
                    return Err(invalid(format!("task {t}: head norm {wn} out of bounds")));
                }
            }
        }
        if !self.family.is_hardcase() {
            let smin = kth_singular_value(&self.heads(), k);
            let t = self.num_tasks() as f64;
            if smin * smin < diversity_c * t / k as f64 {
                return Err(Error::DegenerateTaskDraw { retries: 0 });
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `scale · wᵀσ(Bᵀx)` for every row of `x`.
pub fn nn_predict(act: Activation, scale: f64, b: &DMatrix<f64>, w: &DVector<f64>, x: &DMatrix<f64>) -> DVector<f64> {
    let pre = x * b;
    let mut out = DVector::zeros(x.nrows());
    for i in 0..x.nrows() {
        let mut s = 0.0;
        for j in 0..b.ncols() {
            s += w[j] * act.value(pre[(i, j)]);
        }
        out[i] = scale * s;
    }
    out
}

fn relu_mean_from_theta(
    env: &TaskEnvironment,
    x: &DMatrix<f64>,
    w: &DVector<f64>,
    delta: &DVector<f64>,
) -> DVector<f64> {
    let eps = env.eps.expect("hard-case env carries eps");
    let v = w * (2.0 * eps).sqrt();
    let (b, head, lift) = crate::hardcase::relu_lift_params(&env.bstar, eps, &v, delta);
    crate::hardcase::relu_lifted_predict(&b, &head, &lift, x)
}

// row-major fill keeps sample i independent of n
fn gaussian_matrix_rows(rng: &mut Rng, n: usize, d: usize) -> DMatrix<f64> {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(normal(rng));
    }
    DMatrix::from_row_slice(n, d, &data)
}

/// `k`-th largest singular value (1-based), zero if the rank is smaller.
pub fn kth_singular_value(m: &DMatrix<f64>, k: usize) -> f64 {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.get(k - 1).copied().unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearEnvConfig {
    pub d: usize,
    pub k: usize,
    pub num_tasks: usize,
    pub delta0: f64,
    pub noise_sigma: f64,
    pub sigma: SigmaSpec,
    pub seed: u64,
    #[serde(default = "default_diversity_c")]
    pub diversity_c: f64,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default = "default_radius")]
    pub target_radius: f64,
}

fn default_diversity_c() -> f64 {
    DEFAULT_DIVERSITY_C
}
fn default_retries() -> usize {
    DEFAULT_RETRIES
}
fn default_radius() -> f64 {
    1.0
}

impl LinearEnvConfig {
    pub fn new(d: usize, k: usize, num_tasks: usize, delta0: f64, noise_sigma: f64, seed: u64) -> Self {
        LinearEnvConfig {
            d,
            k,
            num_tasks,
            delta0,
            noise_sigma,
            sigma: SigmaSpec::Identity,
            seed,
            diversity_c: DEFAULT_DIVERSITY_C,
            retries: DEFAULT_RETRIES,
            target_radius: 1.0,
        }
    }
}

pub fn make_linear_env(cfg: &LinearEnvConfig) -> Result<TaskEnvironment> {
    make_linear_type_env(cfg, Family::Linear)
}

/// Same ground truth as [`make_linear_env`] with Bernoulli-logistic labels.
pub fn make_logistic_env(cfg: &LinearEnvConfig) -> Result<TaskEnvironment> {
    make_linear_type_env(cfg, Family::Logistic)
}

fn make_linear_type_env(cfg: &LinearEnvConfig, family: Family) -> Result<TaskEnvironment> {
    let (d, k) = (cfg.d, cfg.k);
    if k < 1 || d <= k {
        return Err(invalid(format!("need d > k >= 1, got d = {d}, k = {k}")));
    }
    if cfg.num_tasks < 1 {
        return Err(invalid("need at least one source task"));
    }
    if !(cfg.delta0 >= 0.0) || !(cfg.noise_sigma >= 0.0) {
        return Err(invalid("delta0 and noise_sigma must be non-negative"));
    }
    let sigma = cfg.sigma.build(d)?;
    for attempt in 0..=cfg.retries {
        let mut rng = rng_from(sub_seed(cfg.seed, stream::ENV, attempt as u64));
        let bstar = orthonormalize(&gaussian_matrix(&mut rng, d, k, 1.0));
        let tasks = (0..cfg.num_tasks)
            .map(|_| {
                let w = unit_vector(&mut rng, k);
                let mut delta = gaussian_matrix(&mut rng, d, k, 1.0);
                let n = delta.norm();
                if cfg.delta0 == 0.0 || n == 0.0 {
                    delta.fill(0.0);
                } else {
                    delta *= cfg.delta0 / n;
                }
                TaskParams { delta, w }
            })
            .collect();
        let env = TaskEnvironment {
            family,
            d,
            k,
            sigma_spec: cfg.sigma.clone(),
            sigma: sigma.clone(),
            bstar,
            delta0: cfg.delta0,
            noise_sigma: if family == Family::Logistic { 0.0 } else { cfg.noise_sigma },
            tasks,
            target_radius: cfg.target_radius,
            eps: None,
            nn: None,
            seed: cfg.seed,
        };
        let mut env = normalize_convention(&env);
        for p in env.tasks.iter_mut() {
            let n = p.delta.norm();
            if n > cfg.delta0 {
                p.delta *= cfg.delta0 / n;
            }
        }
        if env.check_invariants(cfg.diversity_c).is_ok() {
            return Ok(env);
        }
    }
    Err(Error::DegenerateTaskDraw { retries: cfg.retries })
}

/// Re-expresses every task so that `B*ᵀ Σ Delta_t w_t = 0` while keeping
/// `theta_t = (B* + Delta_t) w_t` fixed. The head absorbs the Σ-projection of
/// the perturbation onto `col(B*)`; `Delta_t` receives the smallest rank-one
/// correction that keeps `Delta_t w_t` equal to the new residual.
pub fn normalize_convention(env: &TaskEnvironment) -> TaskEnvironment {
    let mut out = env.clone();
    if !env.family.is_linear_type() {
        return out;
    }
    let sb = &env.sigma * &env.bstar;
    let gram = env.bstar.transpose() * &sb;
    let chol = gram.cholesky().expect("BᵀΣB is positive definite for full-rank Σ");
    for p in out.tasks.iter_mut() {
        let delta_t = &p.delta * &p.w;
        let c = sb.transpose() * &delta_t;
        let shift = chol.solve(&c);
        let w_new = &p.w + &shift;
        let resid = &delta_t - &env.bstar * &shift;
        let wn2 = w_new.norm_squared();
        if wn2 > 0.0 {
            let fix = (&resid - &p.delta * &w_new) * w_new.transpose() / wn2;
            p.delta += fix;
        }
        p.w = w_new;
    }
    out
}

pub fn sample_source_datasets(env: &TaskEnvironment, n_s: usize, seed: u64) -> Result<Vec<Dataset>> {
    if n_s < 1 {
        return Err(invalid("n_S must be at least 1"));
    }
    Ok((0..env.num_tasks())
        .map(|t| {
            let s = sub_seed(seed, stream::SOURCE_DATA, t as u64);
            let mut rng = rng_from(s);
            let x = env.sample_inputs(&mut rng, n_s);
            let mean = match env.family {
                Family::Nn => {
                    let p = env.nn_task_params(t).expect("nn env");
                    env.mean_labels(&x, &DVector::zeros(0), Some(&p))
                }
                Family::HardcaseRelu => {
                    let p = &env.tasks[t];
                    let delta = &p.delta * &p.w;
                    relu_mean_from_theta(env, &x, &p.w, &delta)
                }
                _ => &x * env.task_theta(t),
            };
            let y = env.draw_labels(&mut rng, &x, mean);
            Dataset { x, y, task_id: TaskId::Source(t), seed: s }
        })
        .collect())
}

/// Draws a target task from the environment's target law.
pub fn sample_target_task(env: &TaskEnvironment, seed: u64) -> TargetTask {
    let mut rng = rng_from(sub_seed(seed, stream::TARGET_TASK, 0));
    match env.family {
        Family::HardcaseLinear | Family::HardcaseRelu => {
            let eps = env.eps.expect("hard-case env carries eps");
            crate::hardcase::draw_hard_task(&env.bstar, eps, env.d, env.k, &mut rng)
        }
        Family::Nn => {
            let nn = env.nn.as_ref().expect("nn env");
            let u = unit_vector(&mut rng, 2 * env.k);
            let v = unit_vector(&mut rng, env.k);
            let mut delta = DMatrix::zeros(env.d, 2 * env.k);
            for (i, dir) in nn.directions.iter().enumerate() {
                delta += dir * v[i];
            }
            let params = NnParams { b: &env.bstar + delta / nn.scale, w: &nn.w0 + &u / nn.scale };
            TargetTask { theta_star: DVector::zeros(0), w_star: u, delta_star: v, nn: Some(params) }
        }
        Family::Linear | Family::Logistic => {
            let w_star = unit_vector(&mut rng, env.k) * env.target_radius;
            // uniform on the delta0-sphere of {δ : B*ᵀΣδ = 0}
            let basis = complement_basis(&(&env.sigma * &env.bstar));
            let coef = unit_vector(&mut rng, basis.ncols());
            let delta_star = basis * coef * env.delta0;
            let theta_star = &env.bstar * &w_star + &delta_star;
            TargetTask { theta_star, w_star, delta_star, nn: None }
        }
    }
}

pub fn sample_target_dataset(env: &TaskEnvironment, task: &TargetTask, n: usize, seed: u64) -> Dataset {
    let s = sub_seed(seed, stream::TARGET_DATA, 0);
    let mut rng = rng_from(s);
    let x = env.sample_inputs(&mut rng, n);
    let y = env.target_labels(&mut rng, &x, task);
    Dataset { x, y, task_id: TaskId::Target, seed: s }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnEnvConfig {
    pub d: usize,
    pub k: usize,
    pub num_tasks: usize,
    pub scale: f64,
    pub noise_bound: f64,
    pub activation: Activation,
    pub seed: u64,
}

impl NnEnvConfig {
    pub fn new(d: usize, k: usize, num_tasks: usize, scale: f64, seed: u64) -> Self {
        NnEnvConfig { d, k, num_tasks, scale, noise_bound: DEFAULT_NN_NOISE, activation: Activation::Tanh, seed }
    }
}

/// Two-layer network family: antisymmetric `([A, A], [s, -s])` base with
/// per-task perturbations `(Σ_i δ_{t,i} Delta_i / scale, w_t / scale)`.
pub fn make_nn_env(cfg: &NnEnvConfig) -> Result<TaskEnvironment> {
    let (d, k) = (cfg.d, cfg.k);
    if k < 1 || d < 2 * k {
        return Err(invalid("nn family needs d >= 2k"));
    }
    if !(cfg.scale > 0.0) {
        return Err(invalid("nn scale must be positive"));
    }
    let mut rng = rng_from(sub_seed(cfg.seed, stream::ENV, 0));
    let a = orthonormalize(&gaussian_matrix(&mut rng, d, k, 1.0));
    let bstar = DMatrix::from_fn(d, 2 * k, |i, j| a[(i, j % k)]);
    let signs: Vec<f64> = (0..k).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let w0 = DVector::from_fn(2 * k, |j, _| if j < k { signs[j] } else { -signs[j - k] });
    let flat = orthonormalize(&gaussian_matrix(&mut rng, d * 2 * k, k, 1.0));
    let directions: Vec<DMatrix<f64>> =
        (0..k).map(|i| DMatrix::from_column_slice(d, 2 * k, flat.column(i).as_slice())).collect();
    let tasks = (0..cfg.num_tasks)
        .map(|_| {
            let w = unit_vector(&mut rng, 2 * k);
            let dv = unit_vector(&mut rng, k);
            let mut delta = DMatrix::zeros(d, 2 * k);
            for (i, dir) in directions.iter().enumerate() {
                delta += dir * dv[i];
            }
            TaskParams { delta: delta / cfg.scale, w: w / cfg.scale }
        })
        .collect();
    Ok(TaskEnvironment {
        family: Family::Nn,
        d,
        k,
        sigma_spec: SigmaSpec::Diagonal { diag: vec![1.0 / (d as f64 + 2.0); d] },
        sigma: DMatrix::identity(d, d) / (d as f64 + 2.0),
        bstar,
        delta0: 1.0 / cfg.scale,
        noise_sigma: cfg.noise_bound,
        tasks,
        target_radius: 1.0,
        eps: None,
        nn: Some(NnStructure { activation: cfg.activation, scale: cfg.scale, w0, directions }),
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_budget_tasks_lie_in_span() {
        let cfg = LinearEnvConfig::new(4, 2, 8, 0.0, 0.0, 1);
        let env = make_linear_env(&cfg).unwrap();
        let proj = &env.bstar * env.bstar.transpose();
        for t in 0..8 {
            assert_eq!(env.tasks[t].delta.norm(), 0.0);
            let th = env.task_theta(t);
            assert!((&proj * &th - &th).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_d_not_above_k() {
        let cfg = LinearEnvConfig::new(2, 2, 8, 0.0, 0.0, 1);
        assert!(matches!(make_linear_env(&cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fewer_tasks_than_k_is_degenerate() {
        let cfg = LinearEnvConfig::new(5, 3, 2, 0.1, 0.0, 1);
        assert!(matches!(make_linear_env(&cfg), Err(Error::DegenerateTaskDraw { retries: 20 })));
    }

    #[test]
    fn simulation_scale_environment() {
        let cfg = LinearEnvConfig::new(16, 2, 1000, 0.1, 2.0, 5);
        let env = make_linear_env(&cfg).unwrap();
        assert_eq!(env.num_tasks(), 1000);
        assert_eq!(env.noise_sigma, 2.0);
        env.check_invariants(0.1).unwrap();
    }

    #[test]
    fn diversity_by_svd() {
        let cfg = LinearEnvConfig::new(6, 2, 50, 0.2, 0.5, 11);
        let env = make_linear_env(&cfg).unwrap();
        // oracle: smallest eigenvalue of W Wᵀ (k × k) equals σ_k(W)²
        let w = env.heads();
        let wwt = &w * w.transpose();
        let lmin = wwt.symmetric_eigenvalues().min();
        assert!(lmin > 0.1 * 50.0 / 2.0, "σ_k² = {lmin}");
    }

    #[test]
    fn noiseless_labels_are_exact() {
        let cfg = LinearEnvConfig::new(5, 2, 4, 0.3, 0.0, 2);
        let env = make_linear_env(&cfg).unwrap();
        let data = sample_source_datasets(&env, 30, 9).unwrap();
        for (t, ds) in data.iter().enumerate() {
            let r = &ds.y - &ds.x * env.task_theta(t);
            assert!(r.amax() <= 1e-12);
        }
    }

    #[test]
    fn source_datasets_have_requested_size() {
        let cfg = LinearEnvConfig::new(8, 2, 3, 0.1, 1.0, 2);
        let env = make_linear_env(&cfg).unwrap();
        let data = sample_source_datasets(&env, 80, 1).unwrap();
        assert_eq!(data.len(), 3);
        assert!(data.iter().all(|ds| ds.n() == 80 && ds.d() == 8));
    }

    #[test]
    fn empirical_covariance_concentrates() {
        let d = 6;
        let mut diag = vec![0.05; d];
        diag[4] = 1.0;
        diag[5] = 1.0;
        let mut cfg = LinearEnvConfig::new(d, 2, 4, 0.1, 1.0, 3);
        cfg.sigma = SigmaSpec::Diagonal { diag };
        let env = make_linear_env(&cfg).unwrap();
        let mut rng = rng_from(77);
        let n = 100_000;
        let x = env.sample_inputs(&mut rng, n);
        let emp = x.transpose() * &x / n as f64;
        let gap = (emp - &env.sigma).symmetric_eigenvalues().amax();
        assert!(gap <= 0.05, "operator gap {gap}");
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let cfg = LinearEnvConfig::new(4, 2, 2, 0.1, 1.5, 3);
        let env = make_linear_env(&cfg).unwrap();
        let data = sample_source_datasets(&env, 100_000, 4).unwrap();
        let r = &data[0].y - &data[0].x * env.task_theta(0);
        let var = r.norm_squared() / r.len() as f64;
        assert!((var / 2.25 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn convention_holds_and_predictors_unchanged() {
        let cfg = LinearEnvConfig::new(5, 2, 3, 0.5, 0.0, 21);
        let env = make_linear_env(&cfg).unwrap();
        // scramble the convention by moving mass between head and perturbation
        let mut raw = env.clone();
        for p in raw.tasks.iter_mut() {
            let shift = DVector::from_vec(vec![0.3, -0.2]);
            let theta = (&env.bstar + &p.delta) * &p.w;
            p.w += &shift;
            let delta_t = &theta - &env.bstar * &p.w;
            p.delta = &delta_t * p.w.transpose() / p.w.norm_squared();
        }
        let fixed = normalize_convention(&raw);
        for t in 0..3 {
            let before = raw.task_theta(t);
            let after = fixed.task_theta(t);
            assert!((before - after).norm() <= 1e-10);
            let conv = fixed.bstar.transpose() * &fixed.sigma * (&fixed.tasks[t].delta * &fixed.tasks[t].w);
            assert!(conv.norm() <= 1e-10);
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let cfg = LinearEnvConfig::new(6, 2, 5, 0.4, 0.0, 8);
        let env = make_linear_env(&cfg).unwrap();
        let again = normalize_convention(&env);
        for (a, b) in env.tasks.iter().zip(&again.tasks) {
            assert!((&a.delta - &b.delta).amax() <= 1e-12);
            assert!((&a.w - &b.w).amax() <= 1e-12);
        }
    }

    #[test]
    fn orthogonal_perturbation_is_unchanged() {
        let cfg = LinearEnvConfig::new(5, 2, 3, 0.0, 0.0, 8);
        let mut env = make_linear_env(&cfg).unwrap();
        let comp = complement_basis(&env.bstar);
        for p in env.tasks.iter_mut() {
            let delta_t = comp.column(0) * 0.2;
            p.delta = &delta_t * p.w.transpose() / p.w.norm_squared();
        }
        let again = normalize_convention(&env);
        for (a, b) in env.tasks.iter().zip(&again.tasks) {
            assert!((&a.delta - &b.delta).amax() <= 1e-12);
            assert!((&a.w - &b.w).amax() <= 1e-12);
        }
    }

    #[test]
    fn target_without_budget_is_in_span() {
        let cfg = LinearEnvConfig::new(6, 2, 10, 0.0, 0.0, 8);
        let env = make_linear_env(&cfg).unwrap();
        let task = sample_target_task(&env, 3);
        let proj = &env.bstar * env.bstar.transpose();
        assert!((&proj * &task.theta_star - &task.theta_star).norm() < 1e-12);
    }

    #[test]
    fn target_mean_is_zero() {
        let cfg = LinearEnvConfig::new(5, 2, 10, 0.5, 0.0, 8);
        let env = make_linear_env(&cfg).unwrap();
        let mut mean = DVector::zeros(5);
        let n = 10_000;
        for s in 0..n {
            mean += sample_target_task(&env, s).theta_star;
        }
        mean /= n as f64;
        assert!(mean.amax() < 0.05, "mean {mean}");
    }

    #[test]
    fn target_structure() {
        let cfg = LinearEnvConfig::new(7, 2, 10, 0.3, 0.0, 8);
        let env = make_linear_env(&cfg).unwrap();
        let task = sample_target_task(&env, 5);
        assert!((task.w_star.norm() - 1.0).abs() < 1e-12);
        assert!((task.delta_star.norm() - 0.3).abs() < 1e-12);
        let conv = env.bstar.transpose() * &env.sigma * &task.delta_star;
        assert!(conv.norm() < 1e-10);
        let recon = &env.bstar * &task.w_star + &task.delta_star;
        assert_eq!(recon, task.theta_star);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = LinearEnvConfig::new(6, 2, 12, 0.2, 1.0, 99);
        let a = make_linear_env(&cfg).unwrap();
        let b = make_linear_env(&cfg).unwrap();
        assert_eq!(a, b);
        let da = sample_source_datasets(&a, 20, 5).unwrap();
        let db = sample_source_datasets(&b, 20, 5).unwrap();
        assert_eq!(da, db);
    }

    #[test]
    fn logistic_labels_are_binary() {
        let cfg = LinearEnvConfig::new(5, 2, 4, 0.1, 0.0, 1);
        let env = make_logistic_env(&cfg).unwrap();
        let data = sample_source_datasets(&env, 200, 3).unwrap();
        assert!(data[0].y.iter().all(|&v| v == 0.0 || v == 1.0));
        let ones = data[0].y.sum();
        assert!(ones > 20.0 && ones < 180.0);
    }

    #[test]
    fn nn_env_noise_is_bounded_and_inputs_in_ball() {
        let mut cfg = NnEnvConfig::new(8, 2, 5, 4.0, 3);
        cfg.noise_bound = 0.1;
        let env = make_nn_env(&cfg).unwrap();
        let data = sample_source_datasets(&env, 500, 2).unwrap();
        let nn = env.nn.as_ref().unwrap();
        for (t, ds) in data.iter().enumerate() {
            assert!(ds.x.row_iter().all(|r| r.norm() <= 1.0));
            let p = env.nn_task_params(t).unwrap();
            let mean = nn_predict(nn.activation, nn.scale, &p.b, &p.w, &ds.x);
            assert!((&ds.y - mean).amax() <= 0.1);
        }
        // antisymmetric base predicts zero
        let mut rng = rng_from(1);
        let x = env.sample_inputs(&mut rng, 50);
        let f0 = nn_predict(nn.activation, nn.scale, &env.bstar, &nn.w0, &x);
        assert!(f0.amax() <= 1e-12);
    }
}
