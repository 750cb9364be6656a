//! Invariant battery behind the `validate` subcommand. Every check reports
//! the worst observed value, its threshold and the margin between them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env_gen::{nn_predict, Activation, Dataset, TaskId};
use crate::error::Result;
use crate::hardcase::{lift_to_relu, relu_lifted_predict, HardCaseSpec, HardFamily};
use crate::linalg::{gaussian_matrix, gaussian_vector, orthonormalize, unit_vector};
use crate::pgd::ProductBall;
use crate::rng::{rng_from, stream, sub_seed, Rng};
use crate::source_train::{regularizer_equivalence_check, TaskStats};
use crate::target_adapt::{
    build_antisymmetric_init, finetune_linear, nn_features, nn_remainder, AdaptMode, AdaptSpec, LinearTargetModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Passes when `value ≤ threshold`.
    AtMost,
    /// Passes when `value ≥ threshold`.
    AtLeast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub direction: Direction,
    /// Distance to the threshold in the passing direction; negative on failure.
    pub margin: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, value: f64, threshold: f64, direction: Direction, detail: String) -> Self {
        let margin = match direction {
            Direction::AtMost => threshold - value,
            Direction::AtLeast => value - threshold,
        };
        CheckResult {
            name: name.into(),
            passed: value.is_finite() && margin >= 0.0,
            value,
            threshold,
            direction,
            margin,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidateOptions {
    pub seed: u64,
    /// Multiplies the certified PGD step size; values above 1 inject a fault.
    pub perturb_eta: f64,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions { seed: 0, perturb_eta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidateReport {
    pub seed: u64,
    pub perturb_eta: f64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl ValidateReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<28} {:>6} {:>13} {:>13} {:>13}\n", "check", "status", "value", "threshold", "margin");
        for c in &self.checks {
            let op = if c.direction == Direction::AtMost { "<=" } else { ">=" };
            out.push_str(&format!(
                "{:<28} {:>6} {:>13.4e} {:>2}{:>11.4e} {:>13.4e}\n",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.value,
                op,
                c.threshold,
                c.margin
            ));
        }
        out.push_str(if self.passed { "all checks passed\n" } else { "some checks FAILED\n" });
        out
    }
}

fn seeded(seed: u64, check: u64) -> Rng {
    rng_from(sub_seed(seed, stream::PROBE, check))
}

pub fn run_all(opts: &ValidateOptions) -> Result<ValidateReport> {
    let checks = vec![
        pgd_certificate(opts.seed, 20, 100, opts.perturb_eta)?,
        regularizer_equivalence(opts.seed, 100)?,
        relu_lift_identity(opts.seed, 1000)?,
        linear_cancellation(opts.seed)?,
        nn_cancellation(opts.seed, 1000),
        feature_gradients(opts.seed, 200),
        remainder_halving(opts.seed, 200),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(ValidateReport { seed: opts.seed, perturb_eta: opts.perturb_eta, passed, checks })
}

fn unit_e1(k: usize) -> DVector<f64> {
    let mut u = DVector::zeros(k);
    u[0] = 1.0;
    u
}

/// Packs `(Delta, w)` in the fine-tuning parameter layout.
fn pack(delta: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    let mut p = DVector::zeros(delta.len() + w.len());
    p.rows_mut(0, delta.len()).copy_from_slice(delta.as_slice());
    p.rows_mut(delta.len(), w.len()).copy_from(w);
    p
}

/// Comparator that reproduces `θ*` exactly when it fits in the feasible set:
/// `Delta = [δ uᵀ, −δ uᵀ]/(2β)`, `w1 = w2 = B0ᵀθ*/(2β)`, then projected.
fn oracle_comparator(
    b0: &DMatrix<f64>,
    theta: &DVector<f64>,
    beta: f64,
    mode: AdaptMode,
) -> (DMatrix<f64>, DVector<f64>) {
    let (d, k) = b0.shape();
    let u = unit_e1(k);
    let (delta_vec, head) = if mode == AdaptMode::DeltaOnly {
        (theta.clone(), DVector::zeros(k))
    } else {
        let h = b0.tr_mul(theta);
        (theta - b0 * &h, h)
    };
    let half = &delta_vec * u.transpose() / (2.0 * beta);
    let mut delta = DMatrix::zeros(d, 2 * k);
    delta.columns_mut(0, k).copy_from(&half);
    delta.columns_mut(k, k).copy_from(&(-half));
    let mut w = DVector::zeros(2 * k);
    if mode != AdaptMode::DeltaOnly {
        let hw = &head / (2.0 * beta);
        w.rows_mut(0, k).copy_from(&hw);
        w.rows_mut(k, k).copy_from(&hw);
    }
    (delta, w)
}

/// Best-iterate suboptimality of fixed-step PGD against feasible comparators,
/// compared with `βR² + R√((L² + β²R²)/T)` for the analytic `(β, L)` of each
/// instance. Even instances adapt `(Delta, w)`; odd ones are delta-only.
pub fn pgd_certificate(seed: u64, instances: usize, comparators: usize, perturb_eta: f64) -> Result<CheckResult> {
    let mut worst_margin = f64::INFINITY;
    let mut worst = (0.0, 0.0);
    for i in 0..instances {
        let mut rng = rng_from(sub_seed(seed, stream::PROBE, 100 + i as u64));
        let (d, k, n) = (6, 2, 49);
        let mode = if i % 2 == 0 { AdaptMode::FullAdapt } else { AdaptMode::DeltaOnly };
        let b0 = orthonormalize(&gaussian_matrix(&mut rng, d, k, 1.0));
        let theta = unit_vector(&mut rng, d) * 3.0;
        let x = gaussian_matrix(&mut rng, n, d, 1.0);
        let noise = gaussian_vector(&mut rng, n) * 0.1;
        let y = &x * &theta + noise;
        let ds = Dataset { x, y, task_id: TaskId::Target, seed: 0 };
        let mut spec = AdaptSpec::linear(mode, k, n, 3.0, 2.0, 1.0);
        spec.iterations = 49;
        let res = finetune_linear(&b0, &ds, &spec)?;
        if perturb_eta != 1.0 {
            spec.eta = Some(res.trace.eta * perturb_eta);
        }
        let res = finetune_linear(&b0, &ds, &spec)?;
        let stats = TaskStats::from_dataset(&ds);
        let (a, w0) = build_antisymmetric_init(&b0, &unit_e1(k))?;
        let model = LinearTargetModel { a, w0, beta: spec.beta_scale };
        let (r1, r2) = spec.radii();
        let ball = ProductBall { split: d * 2 * k, r1, r2 };
        let loss = |p: &DVector<f64>| stats.loss_grad(&model.theta(p)).0;
        let (od, ow) = oracle_comparator(&b0, &theta, spec.beta_scale, mode);
        let mut best_cmp = loss(&ball.project(&pack(&od, &ow)));
        for _ in 0..comparators {
            let dd = gaussian_matrix(&mut rng, d, 2 * k, 1.0);
            let dd = dd.normalize() * r1 * rand::Rng::random::<f64>(&mut rng).sqrt();
            let ww = if r2 > 0.0 {
                unit_vector(&mut rng, 2 * k) * r2 * rand::Rng::random::<f64>(&mut rng).sqrt()
            } else {
                DVector::zeros(2 * k)
            };
            best_cmp = best_cmp.min(loss(&pack(&dd, &ww)));
        }
        let subopt = res.trace.best_loss() - best_cmp;
        let bound = res.certificate + 1e-9;
        if bound - subopt < worst_margin {
            worst_margin = bound - subopt;
            worst = (subopt, bound);
        }
    }
    Ok(CheckResult::new(
        "pgd_certificate",
        worst.0,
        worst.1,
        Direction::AtMost,
        format!("{instances} instances x {comparators} comparators, eta factor {perturb_eta}"),
    ))
}

pub fn regularizer_equivalence(seed: u64, trials: usize) -> Result<CheckResult> {
    let mut rng = seeded(seed, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let m = 1 + (rand::Rng::random::<u32>(&mut rng) % 8) as usize;
        let y = gaussian_vector(&mut rng, m) * 10f64.powf(rand::Rng::random_range(&mut rng, -1.0..1.0));
        let lambda = 10f64.powf(rand::Rng::random_range(&mut rng, -3.0..2.0));
        let gamma = 10f64.powf(rand::Rng::random_range(&mut rng, -3.0..2.0));
        let (num, ana) = regularizer_equivalence_check(&y, lambda, gamma)?;
        worst = worst.max((num - ana).abs() / ana.max(1e-300));
    }
    Ok(CheckResult::new(
        "regularizer_equivalence",
        worst,
        1e-5,
        Direction::AtMost,
        format!("max relative gap over {trials} random (y, lambda, gamma)"),
    ))
}

pub fn relu_lift_identity(seed: u64, probes: usize) -> Result<CheckResult> {
    let mut rng = seeded(seed, 3);
    let spec = HardCaseSpec::with_default_eps(12, 2, HardFamily::Relu)?;
    let v = unit_vector(&mut rng, 2);
    let mut delta = DVector::zeros(12);
    let u = unit_vector(&mut rng, 2);
    delta.rows_mut(10, 2).copy_from(&u);
    let (b, head, lift) = lift_to_relu(&spec, &v, &delta)?;
    let theta = &spec.a_star * &v / (2.0 * spec.eps).sqrt() + &delta;
    let x = gaussian_matrix(&mut rng, probes, 12, 1.0);
    let f = relu_lifted_predict(&b, &head, &lift, &x);
    let worst = (f - &x * theta).amax();
    Ok(CheckResult::new(
        "relu_lift_identity",
        worst,
        1e-10,
        Direction::AtMost,
        format!("max |f - x'theta| over {probes} probes"),
    ))
}

pub fn linear_cancellation(seed: u64) -> Result<CheckResult> {
    let mut rng = seeded(seed, 4);
    let mut worst: f64 = 0.0;
    for k in 1..=4 {
        for _ in 0..25 {
            let b0 = orthonormalize(&gaussian_matrix(&mut rng, 10, k, 1.0));
            let u = unit_vector(&mut rng, k);
            let (a, w0) = build_antisymmetric_init(&b0, &u)?;
            worst = worst.max((a * w0).norm());
        }
    }
    Ok(CheckResult::new("linear_cancellation", worst, 1e-14, Direction::AtMost, "max ||A w0|| over 100 draws".into()))
}

pub fn nn_cancellation(seed: u64, probes: usize) -> CheckResult {
    let mut rng = seeded(seed, 5);
    let (d, k) = (8, 3);
    let a = gaussian_matrix(&mut rng, d, k, 1.0);
    let b0 = DMatrix::from_fn(d, 2 * k, |i, j| a[(i, j % k)]);
    let s = gaussian_vector(&mut rng, k);
    let w0 = DVector::from_fn(2 * k, |j, _| if j < k { s[j] } else { -s[j - k] });
    let x = gaussian_matrix(&mut rng, probes, d, 1.0);
    let worst = [Activation::Tanh, Activation::Relu]
        .iter()
        .map(|&act| nn_predict(act, 7.0, &b0, &w0, &x).amax())
        .fold(0.0, f64::max);
    CheckResult::new("nn_cancellation", worst, 1e-12, Direction::AtMost, format!("max |f| over {probes} probes"))
}

fn tanh_probe(rng: &mut Rng, d: usize, m: usize) -> (DMatrix<f64>, DVector<f64>) {
    let a = gaussian_matrix(rng, d, m / 2, 0.5);
    let b0 = DMatrix::from_fn(d, m, |i, j| a[(i, j % (m / 2))]);
    let s = gaussian_vector(rng, m / 2);
    let w0 = DVector::from_fn(m, |j, _| if j < m / 2 { s[j] } else { -s[j - m / 2] });
    (b0, w0)
}

/// Central differences of `t ↦ f(B0 + tDelta, w0 + tw)(x)` at `t = 0` against
/// `wᵀφ + ⟨ψ, Delta⟩`.
pub fn feature_gradients(seed: u64, probes: usize) -> CheckResult {
    let mut rng = seeded(seed, 6);
    let (d, m) = (6, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let (b0, w0) = tanh_probe(&mut rng, d, m);
        let x = gaussian_vector(&mut rng, d);
        let dd = gaussian_matrix(&mut rng, d, m, 1.0);
        let dw = gaussian_vector(&mut rng, m);
        let xr = DMatrix::from_row_slice(1, d, x.as_slice());
        let f = |t: f64| nn_predict(Activation::Tanh, 1.0, &(&b0 + &dd * t), &(&w0 + &dw * t), &xr)[0];
        let h = 1e-6;
        let fd = (f(h) - f(-h)) / (2.0 * h);
        let (phi, psi) = nn_features(&b0, &w0, &x, Activation::Tanh);
        worst = worst.max((fd - dw.dot(&phi) - psi.dot(&dd)).abs());
    }
    CheckResult::new(
        "feature_gradients",
        worst,
        1e-5,
        Direction::AtMost,
        format!("max directional-derivative gap over {probes} probes"),
    )
}

/// `Σ|ζ(Δ)| / Σ|ζ(Δ/2)|` over probes: the remainder's L1 norm on the probe
/// set. Summing keeps probes whose quadratic and cubic terms nearly cancel
/// from dominating.
pub fn remainder_halving(seed: u64, probes: usize) -> CheckResult {
    let mut rng = seeded(seed, 7);
    let (d, m) = (6, 4);
    let (mut full, mut half) = (0.0, 0.0);
    for _ in 0..probes {
        let (b0, w0) = tanh_probe(&mut rng, d, m);
        let x = gaussian_vector(&mut rng, d);
        let dd = gaussian_matrix(&mut rng, d, m, 0.01);
        let dw = gaussian_vector(&mut rng, m) * 0.01;
        full += nn_remainder(&b0, &w0, &dd, &dw, &x, Activation::Tanh).abs();
        half += nn_remainder(&b0, &w0, &(&dd * 0.5), &(&dw * 0.5), &x, Activation::Tanh).abs();
    }
    let ratio = if half > 0.0 { full / half } else { 0.0 };
    CheckResult::new(
        "remainder_halving",
        ratio,
        3.5,
        Direction::AtLeast,
        format!("aggregate remainder ratio over {probes} probes"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_battery_passes() {
        let r = run_all(&ValidateOptions::default()).unwrap();
        assert!(r.passed, "{}", r.table());
        assert_eq!(r.checks.len(), 7);
    }

    #[test]
    fn inflated_step_breaks_certificate() {
        let c = pgd_certificate(0, 20, 100, 10.0).unwrap();
        assert!(!c.passed, "{c:?}");
    }

    #[test]
    fn json_has_one_entry_per_check() {
        let r = run_all(&ValidateOptions { seed: 3, perturb_eta: 1.0 }).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["checks"].as_array().unwrap().len(), r.checks.len());
        assert!(r.table().contains("pgd_certificate"));
    }
}
