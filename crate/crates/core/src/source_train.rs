//! Source training: AdaptRep (shared initialization plus per-task
//! perturbations) and FrozenRep (one shared representation), both solved by
//! L-BFGS on the joint variables with a factor-balance penalty, from several
//! random restarts.
//!
//! Per-task squared losses are evaluated through sufficient statistics
//! `(XᵀX/n, Xᵀy/n, yᵀy/n)`, so one objective evaluation costs `O(T d²)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env_gen::{Dataset, TaskParams};
use crate::error::{invalid, Result};
use crate::lbfgs::{minimize, LbfgsOptions};
use crate::linalg::{gaussian_matrix, orthonormalize};
use crate::par::map_indexed as map_tasks;
use crate::rng::{rng_from, stream, sub_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceObjective {
    Adaptrep,
    Frozenrep,
}

#[derive(Clone, Debug)]
pub struct SourceOptions {
    pub restarts: usize,
    pub lbfgs: LbfgsOptions,
    /// Weight of `‖BᵀB − (1/T) Σ_t w_t w_tᵀ‖_F²`.
    pub balance: f64,
    pub seed: u64,
    /// Starting point `(B, heads)` used instead of random restarts.
    pub warm_start: Option<(DMatrix<f64>, Vec<DVector<f64>>)>,
}

impl Default for SourceOptions {
    fn default() -> Self {
        SourceOptions { restarts: 10, lbfgs: LbfgsOptions::default(), balance: 0.5, seed: 0, warm_start: None }
    }
}

#[derive(Clone, Debug)]
pub struct SourceSolution {
    pub objective: SourceObjective,
    /// Orthonormalized representation.
    pub b0: DMatrix<f64>,
    /// Representation before orthonormalization.
    pub b_raw: DMatrix<f64>,
    /// Per-task `(Delta_t, w_t)`; `Delta_t = 0` for FrozenRep.
    pub per_task: Vec<TaskParams>,
    /// Final value of the full objective.
    pub train_loss: f64,
    /// Squared-error term alone, `(1/2 n T) Σ_t ‖y_t − X_t θ_t‖²`.
    pub data_loss: f64,
    pub restarts_used: usize,
    /// Final objective of every restart, in restart order.
    pub restart_losses: Vec<f64>,
    pub restart_index: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Objective value after each accepted L-BFGS step of this restart.
    pub history: Vec<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
}

/// Sufficient statistics of one task's squared loss.
#[derive(Clone, Debug)]
pub struct TaskStats {
    pub s: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

impl TaskStats {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let n = ds.n() as f64;
        TaskStats { s: ds.x.tr_mul(&ds.x) / n, b: ds.x.tr_mul(&ds.y) / n, c: ds.y.norm_squared() / n }
    }

    /// `(1/2n)‖y − Xθ‖²` and its gradient `Sθ − b`.
    pub fn loss_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let st = &self.s * theta;
        let loss = 0.5 * (self.c - 2.0 * self.b.dot(theta) + st.dot(theta));
        (loss, st - &self.b)
    }
}

/// `σ √(tr Σ / n_S)`, the default for both `λ` and `γ`.
pub fn default_regularization(noise_sigma: f64, trace_sigma: f64, n_s: usize) -> f64 {
    noise_sigma * (trace_sigma / n_s as f64).sqrt()
}

struct Problem<'a> {
    stats: &'a [TaskStats],
    d: usize,
    k: usize,
    lambda: f64,
    gamma: f64,
    balance: f64,
    adapt: bool,
}

impl Problem<'_> {
    fn t(&self) -> usize {
        self.stats.len()
    }

    fn per_task_len(&self) -> usize {
        if self.adapt {
            self.d * self.k + self.k
        } else {
            self.k
        }
    }

    fn len(&self) -> usize {
        self.d * self.k + self.t() * self.per_task_len()
    }

    /// Per-task variables are stored divided by `√T`, which equalizes their
    /// curvature with that of `B`.
    fn task_scale(&self) -> f64 {
        (self.t() as f64).sqrt()
    }

    fn pack(&self, b: &DMatrix<f64>, tasks: &[TaskParams]) -> DVector<f64> {
        let mut p = DVector::zeros(self.len());
        let dk = self.d * self.k;
        p.rows_mut(0, dk).copy_from_slice(b.as_slice());
        let sc = self.task_scale();
        for (t, tp) in tasks.iter().enumerate() {
            let off = dk + t * self.per_task_len();
            if self.adapt {
                p.rows_mut(off, dk).copy_from_slice(tp.delta.as_slice());
                p.rows_mut(off + dk, self.k).copy_from_slice(tp.w.as_slice());
            } else {
                p.rows_mut(off, self.k).copy_from_slice(tp.w.as_slice());
            }
            p.rows_mut(off, self.per_task_len()).unscale_mut(sc);
        }
        p
    }

    fn unpack(&self, p: &DVector<f64>) -> (DMatrix<f64>, Vec<TaskParams>) {
        let (d, k) = (self.d, self.k);
        let dk = d * k;
        let b = DMatrix::from_column_slice(d, k, &p.as_slice()[..dk]);
        let sc = self.task_scale();
        let tasks = (0..self.t())
            .map(|t| {
                let off = dk + t * self.per_task_len();
                let sl = &p.as_slice()[off..off + self.per_task_len()];
                if self.adapt {
                    TaskParams {
                        delta: DMatrix::from_column_slice(d, k, &sl[..dk]) * sc,
                        w: DVector::from_column_slice(&sl[dk..]) * sc,
                    }
                } else {
                    TaskParams { delta: DMatrix::zeros(d, k), w: DVector::from_column_slice(sl) * sc }
                }
            })
            .collect();
        (b, tasks)
    }

    /// Returns `(objective, data term, scaled gradient)`.
    fn eval(&self, p: &DVector<f64>) -> (f64, f64, DVector<f64>) {
        let (d, k) = (self.d, self.k);
        let dk = d * k;
        let (b, tasks) = self.unpack(p);
        let tf = self.t() as f64;
        let per_task = |t: usize| task_terms(self, &b, &tasks[t], &self.stats[t]);
        let parts: Vec<TaskTerms> = map_tasks(self.t(), per_task);

        let mut grad = DVector::zeros(self.len());
        let mut gb = DMatrix::zeros(d, k);
        let mut data = 0.0;
        let mut reg = 0.0;
        let mut wwt = DMatrix::zeros(k, k);
        for (t, part) in parts.iter().enumerate() {
            data += part.data;
            reg += part.reg;
            gb += &part.gb;
            let off = dk + t * self.per_task_len();
            grad.rows_mut(off, self.per_task_len()).copy_from(&part.g_task);
            wwt += &tasks[t].w * tasks[t].w.transpose();
        }
        data /= tf;
        reg /= tf;
        gb /= tf;
        wwt /= tf;
        let sc = self.task_scale();
        grad.rows_mut(dk, self.len() - dk).scale_mut(sc / tf);

        let e = b.transpose() * &b - &wwt;
        let bal = self.balance * e.norm_squared();
        gb += &b * &e * (4.0 * self.balance);
        grad.rows_mut(0, dk).copy_from_slice(gb.as_slice());
        if self.balance > 0.0 {
            for (t, tp) in tasks.iter().enumerate() {
                let off = dk + t * self.per_task_len() + if self.adapt { dk } else { 0 };
                let gw = &e * &tp.w * (-4.0 * self.balance / tf * sc);
                let mut seg = grad.rows_mut(off, k);
                seg += gw;
            }
        }
        (data + reg + bal, data, grad)
    }
}

struct TaskTerms {
    data: f64,
    reg: f64,
    gb: DMatrix<f64>,
    g_task: DVector<f64>,
}

fn task_terms(pr: &Problem<'_>, b: &DMatrix<f64>, tp: &TaskParams, st: &TaskStats) -> TaskTerms {
    let (d, k) = (pr.d, pr.k);
    let dk = d * k;
    let rep = if pr.adapt { b + &tp.delta } else { b.clone() };
    let theta = &rep * &tp.w;
    let (data, g) = st.loss_grad(&theta);
    let gb = &g * tp.w.transpose();
    let mut g_task = DVector::zeros(pr.per_task_len());
    let gw = rep.tr_mul(&g);
    let mut reg = 0.0;
    if pr.adapt {
        let gd = &gb + &tp.delta * pr.lambda;
        g_task.rows_mut(0, dk).copy_from_slice(gd.as_slice());
        g_task.rows_mut(dk, k).copy_from(&(gw + &tp.w * pr.gamma));
        reg = 0.5 * pr.lambda * tp.delta.norm_squared() + 0.5 * pr.gamma * tp.w.norm_squared();
    } else {
        g_task.copy_from(&gw);
    }
    TaskTerms { data, reg, gb, g_task }
}

fn check_datasets(datasets: &[Dataset], k: usize) -> Result<usize> {
    let first = datasets.first().ok_or_else(|| invalid("no source datasets"))?;
    let d = first.d();
    if datasets.iter().any(|ds| ds.d() != d || ds.n() == 0) {
        return Err(invalid("source datasets must be nonempty and share the input dimension"));
    }
    if k == 0 || k > d {
        return Err(invalid(format!("latent dimension k = {k} incompatible with d = {d}")));
    }
    Ok(d)
}

/// Trains every restart and returns them in restart order.
pub fn train_restarts(
    objective: SourceObjective,
    datasets: &[Dataset],
    k: usize,
    lambda: f64,
    gamma: f64,
    opts: &SourceOptions,
) -> Result<Vec<SourceSolution>> {
    let stats: Vec<TaskStats> = map_tasks(datasets.len(), |t| TaskStats::from_dataset(&datasets[t]));
    train_restarts_from_stats(objective, &stats, k, lambda, gamma, opts)
}

pub fn train_restarts_from_stats(
    objective: SourceObjective,
    stats: &[TaskStats],
    k: usize,
    lambda: f64,
    gamma: f64,
    opts: &SourceOptions,
) -> Result<Vec<SourceSolution>> {
    let d = stats.first().ok_or_else(|| invalid("no source tasks"))?.b.len();
    if k == 0 || k > d {
        return Err(invalid(format!("latent dimension k = {k} incompatible with d = {d}")));
    }
    let adapt = objective == SourceObjective::Adaptrep;
    if adapt && !(lambda > 0.0 && gamma > 0.0) {
        return Err(invalid("AdaptRep needs positive lambda and gamma"));
    }
    let restarts = if opts.warm_start.is_some() { 1 } else { opts.restarts.max(1) };
    let problem = Problem {
        stats,
        d,
        k,
        lambda: if adapt { lambda } else { 0.0 },
        gamma: if adapt { gamma } else { 0.0 },
        balance: opts.balance,
        adapt,
    };
    let t_count = stats.len();
    let mut sols = Vec::with_capacity(restarts);
    for r in 0..restarts {
        let seed = sub_seed(opts.seed, stream::RESTART, r as u64);
        let (b_init, tasks_init) = match &opts.warm_start {
            Some((b, heads)) => {
                if b.shape() != (d, k) || heads.len() != t_count {
                    return Err(invalid("warm start has wrong shape"));
                }
                let tasks =
                    heads.iter().map(|w| TaskParams { delta: DMatrix::zeros(d, k), w: w.clone() }).collect::<Vec<_>>();
                (b.clone(), tasks)
            }
            None => {
                let mut rng = rng_from(seed);
                let b = gaussian_matrix(&mut rng, d, k, 1.0 / (d as f64).sqrt());
                let tasks = (0..t_count)
                    .map(|_| TaskParams {
                        delta: DMatrix::zeros(d, k),
                        w: DVector::from_column_slice(
                            gaussian_matrix(&mut rng, k, 1, 1.0 / (k as f64).sqrt()).as_slice(),
                        ),
                    })
                    .collect::<Vec<_>>();
                (b, tasks)
            }
        };
        let p0 = problem.pack(&b_init, &tasks_init);
        let res = minimize(
            |p| {
                let (v, _, g) = problem.eval(p);
                (v, g)
            },
            p0,
            &opts.lbfgs,
        );
        let (_, data_loss, _) = problem.eval(&res.x);
        let (b_raw, per_task) = problem.unpack(&res.x);
        sols.push(SourceSolution {
            objective,
            b0: orthonormalize(&b_raw),
            b_raw,
            per_task,
            train_loss: res.value,
            data_loss,
            restarts_used: restarts,
            restart_losses: Vec::new(),
            restart_index: r,
            converged: res.converged,
            grad_norm: res.grad_norm,
            history: res.history,
            lambda: problem.lambda,
            gamma: problem.gamma,
            seed,
        });
    }
    let losses: Vec<f64> = sols.iter().map(|s| s.train_loss).collect();
    for s in sols.iter_mut() {
        s.restart_losses = losses.clone();
    }
    Ok(sols)
}

/// Restart with the smallest final objective.
pub fn best_by_train_loss(mut sols: Vec<SourceSolution>) -> SourceSolution {
    let idx = sols
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.train_loss.total_cmp(&b.1.train_loss))
        .map(|(i, _)| i)
        .expect("at least one restart");
    sols.swap_remove(idx)
}

/// Minimizes `(1/2nT) Σ_t ‖y_t − X_t(B + Delta_t)w_t‖² + (λ/2)‖Delta_t‖_F² + (γ/2)‖w_t‖²`
/// (regularizers averaged over tasks) plus the balance penalty.
pub fn adaptrep_source(
    datasets: &[Dataset],
    k: usize,
    lambda: f64,
    gamma: f64,
    opts: &SourceOptions,
) -> Result<SourceSolution> {
    check_datasets(datasets, k)?;
    Ok(best_by_train_loss(train_restarts(SourceObjective::Adaptrep, datasets, k, lambda, gamma, opts)?))
}

/// Minimizes `(1/2nT) Σ_t ‖y_t − X_t B w_t‖²` plus the balance penalty.
pub fn frozenrep_source(datasets: &[Dataset], k: usize, opts: &SourceOptions) -> Result<SourceSolution> {
    check_datasets(datasets, k)?;
    Ok(best_by_train_loss(train_restarts(SourceObjective::Frozenrep, datasets, k, 0.0, 0.0, opts)?))
}

/// Compares the numerical minimum of `(λ/2)‖A‖_F² + (γ/2)‖x‖²` subject to
/// `Ax = y` with `√(λγ)‖y‖₂`. The numerical route restricts to rank-one
/// `A = y xᵀ/‖x‖²` and runs a golden-section search over `ln ‖x‖`.
pub fn regularizer_equivalence_check(y: &DVector<f64>, lambda: f64, gamma: f64) -> Result<(f64, f64)> {
    if !(lambda > 0.0 && gamma > 0.0) {
        return Err(invalid("lambda and gamma must be positive"));
    }
    let ynorm = y.norm();
    let analytic = (lambda * gamma).sqrt() * ynorm;
    if ynorm == 0.0 {
        return Ok((0.0, analytic));
    }
    let m = y.len();
    let objective = |log_s: f64| {
        let s = log_s.exp();
        let mut x = DVector::zeros(m.max(1));
        x[0] = s;
        let a = y * x.transpose() / x.norm_squared();
        debug_assert!((&a * &x - y).norm() <= 1e-9 * ynorm);
        0.5 * lambda * a.norm_squared() + 0.5 * gamma * x.norm_squared()
    };
    let center = 0.5 * (ynorm.ln() + 0.5 * (lambda / gamma).ln());
    let (mut lo, mut hi) = (center - 40.0, center + 40.0);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (objective(x1), objective(x2));
    for _ in 0..200 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = objective(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = objective(x2);
        }
    }
    Ok((f1.min(f2), analytic))
}
