//! Target-time fine-tuning around an antisymmetric initialization.
//!
//! Linear and logistic families use the predictor
//! `x ↦ β xᵀ(A + Delta)(w0 + w)` with `A = [B0 B0]` and `w0 = [u, −u]`, so the
//! initial predictor is identically zero and, inside the feasible set
//! `‖Delta‖_F ≤ c1/β`, `‖w‖ ≤ c2/β`, the cross term `Delta w` is a small
//! perturbation. The network family uses `x ↦ γ (w0 + w)ᵀσ((B0 + Delta)ᵀx)`
//! with a single ball `‖(Delta, w)‖ ≤ c1/γ`.
//!
//! Parameters are packed as `[vec(Delta); w]` with `vec` column-major.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env_gen::{sigmoid, Activation, Dataset, NnParams};
use crate::error::{invalid, Result};
use crate::linalg::min_norm_lstsq;
use crate::metrics::logistic_loss;
use crate::pgd::{certificate, project_ball, run_pgd, FnObjective, ParamModel, PgdConfig, PgdTrace, ProductBall};
use crate::source_train::TaskStats;

pub const DEFAULT_PGD_ITERATIONS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    DeltaOnly,
    FullAdapt,
    IgnoreRep,
    Logistic,
    Nn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptSpec {
    pub mode: AdaptMode,
    /// Predictor scale `β` (`γ` for networks).
    pub beta_scale: f64,
    /// Radii before division by the scale. Networks use `c1` as the radius of
    /// the joint ball and ignore `c2`.
    pub c1: f64,
    pub c2: f64,
    /// Unit direction `u` of the antisymmetric head `[u, −u]`.
    pub w0_dir: Vec<f64>,
    pub iterations: usize,
    /// Overrides the certified step size.
    pub eta: Option<f64>,
    pub activation: Activation,
    pub keep_iterates: bool,
}

impl AdaptSpec {
    /// Linear or logistic defaults: `β = √n_T`, `c1 = δ0`, `c2 = r√κ`, `u = e1`.
    pub fn linear(mode: AdaptMode, k: usize, n_t: usize, delta0: f64, r: f64, kappa: f64) -> Self {
        let mut u = vec![0.0; k];
        if k > 0 {
            u[0] = 1.0;
        }
        AdaptSpec {
            mode,
            beta_scale: (n_t as f64).sqrt(),
            c1: delta0,
            c2: r * kappa.sqrt(),
            w0_dir: u,
            iterations: DEFAULT_PGD_ITERATIONS,
            eta: None,
            activation: Activation::Tanh,
            keep_iterates: false,
        }
    }

    /// Network defaults: `γ = √n_T` and joint radius `√κ`.
    pub fn nn(k: usize, n_t: usize, kappa: f64, activation: Activation) -> Self {
        let mut s = Self::linear(AdaptMode::Nn, k, n_t, kappa.sqrt(), kappa.sqrt(), 1.0);
        s.c1 = kappa.sqrt();
        s.activation = activation;
        s
    }

    /// Feasible radii `(c1/β, c2/β)`; the head radius is zero in delta-only mode.
    pub fn radii(&self) -> (f64, f64) {
        let r2 = if self.mode == AdaptMode::DeltaOnly { 0.0 } else { self.c2 / self.beta_scale };
        (self.c1 / self.beta_scale, r2)
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta_scale > 0.0) {
            return Err(invalid("predictor scale must be positive"));
        }
        if !(self.c1 >= 0.0 && self.c2 >= 0.0) {
            return Err(invalid("feasible radii must be non-negative"));
        }
        let n: f64 = self.w0_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("w0 direction must be a unit vector (norm {n})")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FineTuneResult {
    /// Recovered linear predictor (empty for networks).
    pub theta_hat: DVector<f64>,
    pub delta: DMatrix<f64>,
    pub w: DVector<f64>,
    /// Fine-tuned network parameters `(B0 + Delta, w0 + w)`.
    pub nn: Option<NnParams>,
    pub trace: PgdTrace,
    pub spec: AdaptSpec,
    pub beta_curv: f64,
    pub l_grad: f64,
    pub radius: f64,
    /// `βR² + R√((L² + β²R²)/T)` for the constants above.
    pub certificate: f64,
}

/// `A = [B0 B0]`, `w0 = [u, −u]`, so that `A w0 = 0`.
pub fn build_antisymmetric_init(b0: &DMatrix<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let k = b0.ncols();
    if u.len() != k {
        return Err(invalid("u must have one entry per representation column"));
    }
    if (u.norm() - 1.0).abs() > 1e-12 {
        return Err(invalid("u must be a unit vector"));
    }
    let a = DMatrix::from_fn(b0.nrows(), 2 * k, |i, j| b0[(i, j % k)]);
    let w0 = DVector::from_fn(2 * k, |j, _| if j < k { u[j] } else { -u[j - k] });
    Ok((a, w0))
}

fn unpack(p: &DVector<f64>, d: usize, m: usize) -> (DMatrix<f64>, DVector<f64>) {
    let delta = DMatrix::from_column_slice(d, m, &p.as_slice()[..d * m]);
    let w = DVector::from_column_slice(&p.as_slice()[d * m..]);
    (delta, w)
}

fn pack(delta: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    let mut p = DVector::zeros(delta.len() + w.len());
    p.rows_mut(0, delta.len()).copy_from_slice(delta.as_slice());
    p.rows_mut(delta.len(), w.len()).copy_from(w);
    p
}

/// `g(x) = β xᵀ(A + Delta)(w0 + w)` as a function of `(Delta, w)`.
#[derive(Clone, Debug)]
pub struct LinearTargetModel {
    pub a: DMatrix<f64>,
    pub w0: DVector<f64>,
    pub beta: f64,
}

impl LinearTargetModel {
    pub fn theta(&self, p: &DVector<f64>) -> DVector<f64> {
        let (delta, w) = unpack(p, self.a.nrows(), self.a.ncols());
        (&self.a + delta) * (&self.w0 + w) * self.beta
    }

    /// Chain rule from `∂/∂θ` to `∂/∂(Delta, w)`.
    fn pullback(&self, p: &DVector<f64>, g_theta: &DVector<f64>) -> DVector<f64> {
        let (delta, w) = unpack(p, self.a.nrows(), self.a.ncols());
        let head = &self.w0 + w;
        let gd = g_theta * head.transpose() * self.beta;
        let gw = (&self.a + delta).tr_mul(g_theta) * self.beta;
        pack(&gd, &gw)
    }

    /// Analytic `(β_curv, L)`: the Hessian is the bilinear cross term with
    /// spectral norm `β‖x‖`, and `‖∇g_0(x)‖² = β²(‖Aᵀx‖² + ‖w0‖²‖x‖²)`.
    pub fn constants(&self, x: &DMatrix<f64>, head_frozen: bool) -> (f64, f64) {
        let n = x.nrows() as f64;
        let xn2 = x.row_iter().map(|r| r.norm_squared()).sum::<f64>() / n;
        let ax = x * &self.a;
        let ax2 = ax.norm_squared() / n;
        let b = self.beta;
        let curv = if head_frozen { 0.0 } else { b * xn2.sqrt() };
        let l2 = if head_frozen { self.w0.norm_squared() * xn2 } else { ax2 + self.w0.norm_squared() * xn2 };
        (curv, b * l2.sqrt())
    }
}

impl ParamModel for LinearTargetModel {
    fn n_params(&self) -> usize {
        self.a.len() + self.a.ncols()
    }

    fn value(&self, p: &DVector<f64>, x: &DVector<f64>) -> f64 {
        self.theta(p).dot(x)
    }

    fn gradient(&self, p: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        self.pullback(p, x)
    }

    fn hvp(&self, _p: &DVector<f64>, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (vd, vw) = unpack(v, self.a.nrows(), self.a.ncols());
        let hd = x * vw.transpose() * self.beta;
        let hw = vd.tr_mul(x) * self.beta;
        pack(&hd, &hw)
    }
}

/// `g(x) = γ (w0 + w)ᵀσ((B0 + Delta)ᵀx)` as a function of `(Delta, w)`.
#[derive(Clone, Debug)]
pub struct NnTargetModel {
    pub b0: DMatrix<f64>,
    pub w0: DVector<f64>,
    pub gamma: f64,
    pub activation: Activation,
}

impl NnTargetModel {
    fn grad_with_value(&self, p: &DVector<f64>, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (d, m) = self.b0.shape();
        let (delta, w) = unpack(p, d, m);
        let b = &self.b0 + delta;
        let pre = b.tr_mul(x);
        let head = &self.w0 + w;
        let act = self.activation;
        let mut g = DVector::zeros(d * m + m);
        let mut f = 0.0;
        for j in 0..m {
            let s = act.value(pre[j]);
            f += head[j] * s;
            g[d * m + j] = self.gamma * s;
            let c = self.gamma * head[j] * act.deriv(pre[j]);
            g.rows_mut(j * d, d).axpy(c, x, 0.0);
        }
        (self.gamma * f, g)
    }

    /// Upper bounds `(β_curv, L)` over the ball of the given radius: the
    /// Hessian splits into `γσ'(·)x` cross blocks and `γ h_j σ''(·) xxᵀ`
    /// diagonal blocks, so `‖∇²g‖ ≤ γ(L_σ‖x‖ + μ_σ max_j|h_j| ‖x‖²)`.
    pub fn constants(&self, x: &DMatrix<f64>, radius: f64) -> (f64, f64) {
        let n = x.nrows();
        let (lsig, mu) = self.activation.smoothness();
        let hmax = self.w0.amax() + radius;
        let origin = DVector::zeros(self.n_params());
        let mut curv2 = 0.0;
        let mut l2 = 0.0;
        for i in 0..n {
            let xi = x.row(i).transpose();
            let xn = xi.norm();
            curv2 += (lsig * xn + mu * hmax * xn * xn).powi(2);
            l2 += self.gradient(&origin, &xi).norm_squared();
        }
        (self.gamma * (curv2 / n as f64).sqrt(), (l2 / n as f64).sqrt())
    }
}

impl ParamModel for NnTargetModel {
    fn n_params(&self) -> usize {
        self.b0.len() + self.b0.ncols()
    }

    fn value(&self, p: &DVector<f64>, x: &DVector<f64>) -> f64 {
        self.grad_with_value(p, x).0
    }

    fn gradient(&self, p: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        self.grad_with_value(p, x).1
    }
}

fn check_dataset(b0: &DMatrix<f64>, ds: &Dataset) -> Result<()> {
    if ds.n() == 0 {
        return Err(invalid("target dataset is empty"));
    }
    if ds.d() != b0.nrows() {
        return Err(invalid("target inputs do not match the representation dimension"));
    }
    Ok(())
}

fn ignore_rep(b0: &DMatrix<f64>, ds: &Dataset, spec: &AdaptSpec) -> FineTuneResult {
    let theta = min_norm_lstsq(&ds.x, &ds.y);
    let resid = &ds.x * &theta - &ds.y;
    let loss = 0.5 * resid.norm_squared() / ds.n() as f64;
    let k = b0.ncols();
    FineTuneResult {
        theta_hat: theta.clone(),
        delta: DMatrix::zeros(b0.nrows(), 2 * k),
        w: DVector::zeros(2 * k),
        nn: None,
        trace: PgdTrace { iterates: vec![], losses: vec![loss], best_index: 0, best: theta, eta: 0.0 },
        spec: spec.clone(),
        beta_curv: 0.0,
        l_grad: 0.0,
        radius: 0.0,
        certificate: 0.0,
    }
}

fn pgd_config(spec: &AdaptSpec, radius: f64, beta_curv: f64, l_grad: f64) -> PgdConfig {
    PgdConfig {
        iterations: spec.iterations,
        radius: radius.max(f64::MIN_POSITIVE),
        beta_curv,
        l_grad,
        eta: spec.eta,
        keep_iterates: spec.keep_iterates,
    }
}

/// Fine-tunes a linear predictor on the target data. `delta_only` and
/// `full_adapt` run PGD on `(1/2n)‖y − β X(A + Delta)(w0 + w)‖²`;
/// `ignore_rep` returns the minimum-norm least-squares fit.
pub fn finetune_linear(b0: &DMatrix<f64>, ds: &Dataset, spec: &AdaptSpec) -> Result<FineTuneResult> {
    check_dataset(b0, ds)?;
    spec.validate()?;
    match spec.mode {
        AdaptMode::IgnoreRep => return Ok(ignore_rep(b0, ds, spec)),
        AdaptMode::DeltaOnly | AdaptMode::FullAdapt => {}
        other => return Err(invalid(format!("{other:?} is not a linear fine-tuning mode"))),
    }
    let stats = TaskStats::from_dataset(ds);
    let model = linear_model(b0, spec)?;
    let obj = FnObjective {
        value: |p: &DVector<f64>| stats.loss_grad(&model.theta(p)).0,
        gradient: |p: &DVector<f64>| model.pullback(p, &stats.loss_grad(&model.theta(p)).1),
    };
    run_bilinear(b0, ds, spec, &model, &obj)
}

fn linear_model(b0: &DMatrix<f64>, spec: &AdaptSpec) -> Result<LinearTargetModel> {
    let u = DVector::from_column_slice(&spec.w0_dir);
    let (a, w0) = build_antisymmetric_init(b0, &u)?;
    Ok(LinearTargetModel { a, w0, beta: spec.beta_scale })
}

fn run_bilinear<O: crate::pgd::Objective>(
    b0: &DMatrix<f64>,
    ds: &Dataset,
    spec: &AdaptSpec,
    model: &LinearTargetModel,
    obj: &O,
) -> Result<FineTuneResult> {
    let (d, m) = model.a.shape();
    let (r1, r2) = spec.radii();
    let ball = ProductBall { split: d * m, r1, r2 };
    let (beta_curv, l_grad) = model.constants(&ds.x, spec.mode == AdaptMode::DeltaOnly);
    let radius = ball.radius();
    let cfg = pgd_config(spec, radius, beta_curv, l_grad);
    let trace = run_pgd(obj, |p| ball.project(p), DVector::zeros(d * m + m), &cfg)?;
    let (delta, w) = unpack(&trace.best, d, m);
    let _ = b0;
    Ok(FineTuneResult {
        theta_hat: model.theta(&trace.best),
        delta,
        w,
        nn: None,
        certificate: certificate(spec.iterations, radius, beta_curv, l_grad),
        trace,
        spec: spec.clone(),
        beta_curv,
        l_grad,
        radius,
    })
}

/// PGD on the mean logistic loss `log(1 + e^z) − yz` of the scaled bilinear
/// predictor, labels in `{0, 1}`.
pub fn finetune_logistic(b0: &DMatrix<f64>, ds: &Dataset, spec: &AdaptSpec) -> Result<FineTuneResult> {
    check_dataset(b0, ds)?;
    spec.validate()?;
    if ds.y.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(invalid("logistic labels must be 0 or 1"));
    }
    let model = linear_model(b0, spec)?;
    let n = ds.n() as f64;
    let obj = FnObjective {
        value: |p: &DVector<f64>| {
            let z = &ds.x * model.theta(p);
            z.iter().zip(ds.y.iter()).map(|(&z, &y)| logistic_loss(z, y)).sum::<f64>() / n
        },
        gradient: |p: &DVector<f64>| {
            let z = &ds.x * model.theta(p);
            let r = DVector::from_fn(z.len(), |i, _| sigmoid(z[i]) - ds.y[i]);
            model.pullback(p, &(ds.x.tr_mul(&r) / n))
        },
    };
    run_bilinear(b0, ds, spec, &model, &obj)
}

/// PGD on `(1/2n)Σ(y − γ(w0 + w)ᵀσ((B0 + Delta)ᵀx))²` over the ball
/// `‖(Delta, w)‖ ≤ c1/γ`.
pub fn finetune_nn(b0: &DMatrix<f64>, w0: &DVector<f64>, ds: &Dataset, spec: &AdaptSpec) -> Result<FineTuneResult> {
    check_dataset(b0, ds)?;
    if !(spec.beta_scale > 0.0 && spec.c1 >= 0.0) {
        return Err(invalid("network fine-tuning needs a positive scale and radius"));
    }
    if w0.len() != b0.ncols() {
        return Err(invalid("w0 must have one entry per hidden unit"));
    }
    let model = NnTargetModel { b0: b0.clone(), w0: w0.clone(), gamma: spec.beta_scale, activation: spec.activation };
    let (d, m) = b0.shape();
    let n = ds.n();
    let rows: Vec<DVector<f64>> = (0..n).map(|i| ds.x.row(i).transpose()).collect();
    let eval = |p: &DVector<f64>| -> (f64, DVector<f64>) {
        let mut loss = 0.0;
        let mut g = DVector::zeros(d * m + m);
        for (xi, &yi) in rows.iter().zip(ds.y.iter()) {
            let (f, gi) = model.grad_with_value(p, xi);
            let r = f - yi;
            loss += 0.5 * r * r;
            g.axpy(r, &gi, 1.0);
        }
        (loss / n as f64, g / n as f64)
    };
    let obj = FnObjective { value: |p: &DVector<f64>| eval(p).0, gradient: |p: &DVector<f64>| eval(p).1 };
    let radius = spec.c1 / spec.beta_scale;
    let (beta_curv, l_grad) = model.constants(&ds.x, radius);
    let cfg = pgd_config(spec, radius, beta_curv, l_grad);
    let trace = run_pgd(&obj, |p| project_ball(p, radius), DVector::zeros(d * m + m), &cfg)?;
    let (delta, w) = unpack(&trace.best, d, m);
    let params = NnParams { b: b0 + &delta, w: w0 + &w };
    Ok(FineTuneResult {
        theta_hat: DVector::zeros(0),
        delta,
        w,
        nn: Some(params),
        certificate: certificate(spec.iterations, radius, beta_curv, l_grad),
        trace,
        spec: spec.clone(),
        beta_curv,
        l_grad,
        radius,
    })
}

/// `φ = σ(B0ᵀx)` and `ψ` (`d × m`) with column `j` equal to `w0_j σ'(b_jᵀx) x`,
/// so that the first-order change of the unscaled network is
/// `wᵀφ + ⟨ψ, Delta⟩_F`.
pub fn nn_features(
    b0: &DMatrix<f64>,
    w0: &DVector<f64>,
    x: &DVector<f64>,
    activation: Activation,
) -> (DVector<f64>, DMatrix<f64>) {
    let pre = b0.tr_mul(x);
    let phi = pre.map(|t| activation.value(t));
    let psi = DMatrix::from_fn(b0.nrows(), b0.ncols(), |i, j| w0[j] * activation.deriv(pre[j]) * x[i]);
    (phi, psi)
}

/// `ζ = f_{θ0 + (Delta, w)}(x) − wᵀφ − ⟨ψ, Delta⟩` for the unscaled network.
pub fn nn_remainder(
    b0: &DMatrix<f64>,
    w0: &DVector<f64>,
    delta: &DMatrix<f64>,
    w: &DVector<f64>,
    x: &DVector<f64>,
    activation: Activation,
) -> f64 {
    let pre = (b0 + delta).tr_mul(x);
    let f: f64 = (0..pre.len()).map(|j| (w0[j] + w[j]) * activation.value(pre[j])).sum();
    let (phi, psi) = nn_features(b0, w0, x, activation);
    f - w.dot(&phi) - psi.dot(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_gen::{make_linear_env, sample_target_dataset, sample_target_task, LinearEnvConfig, TaskId};
    use crate::linalg::{gaussian_matrix, gaussian_vector, orthonormalize, unit_vector};
    use crate::metrics::excess_risk_quadratic;
    use crate::pgd::estimate_approx_linearity;
    use crate::rng::{normal, rng_from};

    fn dataset(x: DMatrix<f64>, y: DVector<f64>) -> Dataset {
        Dataset { x, y, task_id: TaskId::Target, seed: 0 }
    }

    #[test]
    fn antisymmetric_init_cancels() {
        let mut rng = rng_from(1);
        for k in 1..5 {
            let b0 = orthonormalize(&gaussian_matrix(&mut rng, 9, k, 1.0));
            let mut e1 = DVector::zeros(k);
            e1[0] = 1.0;
            for u in [e1, unit_vector(&mut rng, k)] {
                let (a, w0) = build_antisymmetric_init(&b0, &u).unwrap();
                assert!((a * w0).norm() <= 1e-14);
            }
        }
        let b0 = orthonormalize(&gaussian_matrix(&mut rng, 4, 2, 1.0));
        assert!(build_antisymmetric_init(&b0, &DVector::from_vec(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn nn_antisymmetric_init_is_zero() {
        let mut rng = rng_from(2);
        let a = orthonormalize(&gaussian_matrix(&mut rng, 7, 3, 1.0));
        let b0 = DMatrix::from_fn(7, 6, |i, j| a[(i, j % 3)]);
        let s = gaussian_vector(&mut rng, 3);
        let w0 = DVector::from_fn(6, |j, _| if j < 3 { s[j] } else { -s[j - 3] });
        let model = NnTargetModel { b0, w0, gamma: 5.0, activation: Activation::Tanh };
        let origin = DVector::zeros(model.n_params());
        for _ in 0..1000 {
            let x = gaussian_vector(&mut rng, 7);
            assert!(model.value(&origin, &x).abs() <= 1e-12);
        }
    }

    #[test]
    fn ignore_rep_recovers_noiseless_target() {
        let cfg = LinearEnvConfig::new(6, 2, 10, 0.3, 0.0, 3);
        let env = make_linear_env(&cfg).unwrap();
        let task = sample_target_task(&env, 1);
        let ds = sample_target_dataset(&env, &task, 20, 2);
        let spec = AdaptSpec::linear(AdaptMode::IgnoreRep, 2, 20, 0.3, 1.0, 1.0);
        let res = finetune_linear(&env.bstar, &ds, &spec).unwrap();
        assert!((res.theta_hat - &task.theta_star).norm() <= 1e-8);
    }

    #[test]
    fn ignore_rep_matches_pseudoinverse() {
        let mut rng = rng_from(4);
        let x = gaussian_matrix(&mut rng, 5, 8, 1.0);
        let y = gaussian_vector(&mut rng, 5);
        let ds = dataset(x.clone(), y.clone());
        let b0 = orthonormalize(&gaussian_matrix(&mut rng, 8, 2, 1.0));
        let spec = AdaptSpec::linear(AdaptMode::IgnoreRep, 2, 5, 0.3, 1.0, 1.0);
        let res = finetune_linear(&b0, &ds, &spec).unwrap();
        let pinv = x.clone().pseudo_inverse(1e-12).unwrap() * y;
        assert!((res.theta_hat - pinv).norm() <= 1e-8);
    }

    #[test]
    fn full_adapt_realizable_instance() {
        let cfg = LinearEnvConfig::new(6, 2, 10, 0.5, 0.0, 5);
        let env = make_linear_env(&cfg).unwrap();
        let task = sample_target_task(&env, 3);
        let ds = sample_target_dataset(&env, &task, 400, 4);
        let mut spec = AdaptSpec::linear(AdaptMode::FullAdapt, 2, 400, 1.0, 2.0, 1.0);
        spec.beta_scale = 200.0;
        spec.iterations = 20_000;
        let res = finetune_linear(&env.bstar, &ds, &spec).unwrap();
        let risk = excess_risk_quadratic(&res.theta_hat, &task.theta_star, &env.sigma).unwrap();
        assert!(risk <= 1e-4, "risk {risk}");
        let (r1, r2) = spec.radii();
        assert!(res.delta.norm() <= r1 * (1.0 + 1e-12));
        assert!(res.w.norm() <= r2 * (1.0 + 1e-12));
    }

    #[test]
    fn delta_only_keeps_head_at_zero() {
        let cfg = LinearEnvConfig::new(6, 2, 10, 0.5, 0.5, 6);
        let env = make_linear_env(&cfg).unwrap();
        let task = sample_target_task(&env, 3);
        let ds = sample_target_dataset(&env, &task, 50, 4);
        let mut spec = AdaptSpec::linear(AdaptMode::DeltaOnly, 2, 50, 0.5, 1.0, 1.0);
        spec.iterations = 500;
        let res = finetune_linear(&env.bstar, &ds, &spec).unwrap();
        assert_eq!(res.w.norm(), 0.0);
        assert_eq!(res.beta_curv, 0.0);
        assert!(res.trace.best_loss() <= res.trace.losses[0]);
    }

    #[test]
    fn linear_model_constants_match_estimates() {
        let mut rng = rng_from(7);
        let b0 = orthonormalize(&gaussian_matrix(&mut rng, 5, 2, 1.0));
        let (a, w0) = build_antisymmetric_init(&b0, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let model = LinearTargetModel { a, w0, beta: 3.0 };
        let x = gaussian_matrix(&mut rng, 40, 5, 1.0);
        let (curv, l) = model.constants(&x, false);
        let ball = ProductBall { split: 20, r1: 0.2, r2: 0.3 };
        let (bh, lh) =
            estimate_approx_linearity(&model, &x, |rng| ball.project(&(gaussian_vector(rng, 24) * 0.1)), 3, 1).unwrap();
        assert!(bh >= 0.5 * curv && bh <= 2.0 * curv, "{bh} vs {curv}");
        assert!((lh - l).abs() <= 1e-9 * l);
    }

    #[test]
    fn logistic_loss_at_init_is_log_two() {
        let mut rng = rng_from(8);
        let x = gaussian_matrix(&mut rng, 30, 4, 1.0);
        let ds = dataset(x, DVector::zeros(30));
        let b0 = orthonormalize(&gaussian_matrix(&mut rng, 4, 2, 1.0));
        let mut spec = AdaptSpec::linear(AdaptMode::Logistic, 2, 30, 1.0, 1.0, 1.0);
        spec.iterations = 1;
        spec.keep_iterates = true;
        let res = finetune_logistic(&b0, &ds, &spec).unwrap();
        assert!((res.trace.losses[0] - 2f64.ln()).abs() < 1e-15);
        let spec = AdaptSpec::linear(AdaptMode::Logistic, 2, 30, 1.0, 1.0, 1.0);
        assert!((spec.radii().1 - 1.0 / 30f64.sqrt()).abs() < 1e-15);
        let bad = dataset(DMatrix::zeros(2, 4), DVector::from_vec(vec![0.0, 0.5]));
        assert!(finetune_logistic(&b0, &bad, &spec).is_err());
    }

    #[test]
    fn relu_dead_neurons_have_zero_features() {
        let b0 = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let w0 = DVector::from_vec(vec![1.0, -1.0]);
        let x = DVector::from_vec(vec![-1.0, -2.0, 0.5]);
        let (phi, psi) = nn_features(&b0, &w0, &x, Activation::Relu);
        assert_eq!(phi.norm(), 0.0);
        assert_eq!(psi.norm(), 0.0);
    }

    #[test]
    fn features_are_directional_derivatives() {
        let mut rng = rng_from(9);
        let b0 = gaussian_matrix(&mut rng, 5, 4, 0.5);
        let w0 = gaussian_vector(&mut rng, 4);
        let model = NnTargetModel { b0: b0.clone(), w0: w0.clone(), gamma: 1.0, activation: Activation::Tanh };
        for _ in 0..50 {
            let x = gaussian_vector(&mut rng, 5);
            let dir = gaussian_vector(&mut rng, 24);
            let h = 1e-6;
            let fd = (model.value(&(&dir * h), &x) - model.value(&(&dir * -h), &x)) / (2.0 * h);
            let (phi, psi) = nn_features(&b0, &w0, &x, Activation::Tanh);
            let (dd, dw) = unpack(&dir, 5, 4);
            let lin = dw.dot(&phi) + psi.dot(&dd);
            assert!((fd - lin).abs() <= 1e-5, "{fd} vs {lin}");
        }
    }

    #[test]
    fn remainder_is_second_order() {
        let mut rng = rng_from(10);
        let a = gaussian_matrix(&mut rng, 5, 2, 0.5);
        let b0 = DMatrix::from_fn(5, 4, |i, j| a[(i, j % 2)]);
        let w0 = DVector::from_vec(vec![1.0, -0.5, -1.0, 0.5]);
        for _ in 0..30 {
            let x = gaussian_vector(&mut rng, 5);
            let dd = gaussian_matrix(&mut rng, 5, 4, 0.01);
            let dw = gaussian_vector(&mut rng, 4) * 0.01;
            let z1 = nn_remainder(&b0, &w0, &dd, &dw, &x, Activation::Tanh).abs();
            let z2 = nn_remainder(&b0, &w0, &(&dd * 0.5), &(&dw * 0.5), &x, Activation::Tanh).abs();
            if z1 > 1e-12 {
                assert!(z1 / z2 >= 3.5, "ratio {}", z1 / z2);
            }
        }
    }

    #[test]
    fn nn_zero_finetune_predicts_zero() {
        let mut rng = rng_from(11);
        let a = orthonormalize(&gaussian_matrix(&mut rng, 6, 2, 1.0));
        let b0 = DMatrix::from_fn(6, 4, |i, j| a[(i, j % 2)]);
        let w0 = DVector::from_vec(vec![1.0, -1.0, -1.0, 1.0]);
        let x = gaussian_matrix(&mut rng, 25, 6, 0.3);
        let y = DVector::from_fn(25, |_, _| normal(&mut rng));
        let ds = dataset(x, y.clone());
        let mut spec = AdaptSpec::nn(2, 25, 1.0, Activation::Tanh);
        spec.iterations = 1;
        spec.keep_iterates = true;
        let res = finetune_nn(&b0, &w0, &ds, &spec).unwrap();
        assert!((res.trace.losses[0] - 0.5 * y.norm_squared() / 25.0).abs() < 1e-14);
        for it in &res.trace.iterates {
            assert!(it.norm() <= res.radius * (1.0 + 1e-12));
        }
    }
}
