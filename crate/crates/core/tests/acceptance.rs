//! Runs every acceptance criterion once and prints one PASS/FAIL line per
//! criterion. Exits non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use adaptrep::env_gen::*;
use adaptrep::experiment::{median, reproduce, ExperimentConfig, Method, ReproduceOutput};
use adaptrep::hardcase::{frozenrep_population_limit, HardCaseSpec, HardFamily};
use adaptrep::metrics::{excess_risk_quadratic, sine_principal_angle};
use adaptrep::rng::{stream, sub_seed};
use adaptrep::source_train::{adaptrep_source, default_regularization, SourceOptions};
use adaptrep::target_adapt::{finetune_linear, AdaptMode, AdaptSpec};
use adaptrep::validate::{self, CheckResult};

const SEED: u64 = 0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn checks_outcome(checks: &[CheckResult]) -> Outcome {
    let detail = checks
        .iter()
        .map(|c| format!("{}={:.3e} (limit {:.1e})", c.name, c.value, c.threshold))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { passed: checks.iter().all(|c| c.passed), detail }
}

fn algebraic_identities() -> Outcome {
    let checks = [
        validate::linear_cancellation(SEED).expect("linear cancellation"),
        validate::nn_cancellation(SEED, 1000),
        validate::relu_lift_identity(SEED, 1000).expect("relu lift"),
    ];
    checks_outcome(&checks)
}

fn regularizer_equivalence() -> Outcome {
    checks_outcome(&[validate::regularizer_equivalence(SEED, 100).expect("regularizer check")])
}

fn pgd_certificate() -> Outcome {
    checks_outcome(&[validate::pgd_certificate(SEED, 20, 100, 1.0).expect("pgd certificate")])
}

fn gradient_fidelity() -> Outcome {
    checks_outcome(&[validate::feature_gradients(SEED, 200), validate::remainder_halving(SEED, 200)])
}

fn frozenrep_limit() -> Outcome {
    let spec = HardCaseSpec::new(20, 2, 0.01, HardFamily::Linear).expect("hard case");
    let lim = frozenrep_population_limit(&spec, 10_000, SEED).expect("population limit");
    let to_ek = sine_principal_angle(&lim.representation, &spec.e_k_basis()).unwrap();
    let to_astar = sine_principal_angle(&lim.representation, &spec.a_star).unwrap();
    Outcome {
        passed: to_ek <= 0.1 && to_astar >= 0.9,
        detail: format!("sine to E_k {to_ek:.4} (<= 0.1), sine to A* {to_astar:.4} (>= 0.9)"),
    }
}

fn separation_config() -> ExperimentConfig {
    ExperimentConfig {
        grid: vec![32, 64, 128],
        num_tasks: 200,
        n_s_multiplier: 10.0,
        replications: 100,
        restarts: 5,
        candidates: 16,
        inner_reps: 5,
        pgd_iterations: 2000,
        seed: SEED,
        ..ExperimentConfig::default()
    }
}

fn separation(out: &ReproduceOutput, grid: &[usize]) -> Outcome {
    let mut passed = true;
    let mut parts = vec![];
    let mut ratios = vec![];
    for &n in grid {
        let get = |m: Method| out.cell(m, n).expect("cell present");
        let (a, f, o) = (get(Method::Adaptrep), get(Method::Frozenrep), get(Method::OlsBaseline));
        let sa = a.sine_dist.unwrap_or(f64::NAN);
        let sf = f.sine_dist.unwrap_or(f64::NAN);
        let ra = a.median_risk.unwrap_or(f64::NAN);
        let rf = f.median_risk.unwrap_or(f64::NAN);
        let ro = o.median_risk.unwrap_or(f64::NAN);
        let ok = sa <= 0.2 && sf >= 0.8 && ra < rf.min(ro);
        passed &= ok;
        ratios.push(ra / rf);
        parts.push(format!("n_T={n}: sine {sa:.3}/{sf:.3}, median risk adapt {ra:.4} frozen {rf:.4} ols {ro:.3e}"));
    }
    let last = *grid.last().unwrap();
    let rf = out.cell(Method::Frozenrep, last).and_then(|c| c.median_risk).unwrap_or(f64::NAN);
    let ro = out.cell(Method::OlsBaseline, last).and_then(|c| c.median_risk).unwrap_or(f64::NAN);
    let ra = out.cell(Method::Adaptrep, last).and_then(|c| c.median_risk).unwrap_or(f64::NAN);
    let gap = rf.min(ro) / ra;
    passed &= gap >= 2.0;
    let monotone = ratios.windows(2).all(|w| w[1] <= w[0]);
    passed &= monotone;
    parts.push(format!("ratio at n_T={last}: {gap:.2} (>= 2)"));
    parts.push(format!(
        "adapt/frozen ratios {:?} non-increasing: {monotone}",
        ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
    ));
    Outcome { passed, detail: parts.join("; ") }
}

fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    cov / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>()
}

/// Shared-representation linear env with no per-task perturbation. AdaptRep is
/// trained on `T = 50` tasks with `n_S` samples each, then the head is fitted
/// on a large target sample so the source error dominates the excess risk.
fn rate_scaling() -> Outcome {
    let (d, k, t, n_t) = (20, 2, 50, 5000);
    let sizes = [40usize, 80, 160, 320];
    let mut meds = vec![];
    for &n_s in &sizes {
        let mut risks = vec![];
        for seed in 0..5u64 {
            let env = make_linear_env(&LinearEnvConfig::new(d, k, t, 0.0, 1.0, seed)).expect("env");
            let ds = sample_source_datasets(&env, n_s, sub_seed(seed, stream::SOURCE_DATA, n_s as u64)).unwrap();
            let lam = default_regularization(1.0, env.sigma.trace(), n_s);
            let opts = SourceOptions { restarts: 3, seed, ..SourceOptions::default() };
            let sol = adaptrep_source(&ds, k, lam, lam, &opts).expect("source fit");
            let r = sol.per_task.iter().map(|p| p.w.norm()).fold(0.0, f64::max);
            for j in 0..9u64 {
                let task = sample_target_task(&env, sub_seed(seed, stream::TARGET_TASK, j));
                let tds = sample_target_dataset(&env, &task, n_t, sub_seed(seed, stream::TARGET_DATA, j));
                let mut spec = AdaptSpec::linear(AdaptMode::FullAdapt, k, n_t, 0.0, r, 1.0);
                spec.iterations = 2000;
                let res = finetune_linear(&sol.b0, &tds, &spec).expect("fine-tune");
                risks.push(excess_risk_quadratic(&res.theta_hat, &task.theta_star, &env.sigma).unwrap());
            }
        }
        meds.push(median(&risks).unwrap());
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| (n * t) as f64).collect();
    let slope = loglog_slope(&xs, &meds);
    Outcome {
        passed: slope <= -0.5,
        detail: format!(
            "median risks {:?} over n_S*T {:?}, slope {slope:.3} (<= -0.5)",
            meds.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>(),
            xs
        ),
    }
}

fn records_without_timing(path: &Path) -> Vec<String> {
    let mut rdr = csv::Reader::from_path(path).expect("records.csv");
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "wall_time_ms").expect("timing column");
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            r.iter().enumerate().filter(|(i, _)| *i != col).map(|(_, v)| v).collect::<Vec<_>>().join(",")
        })
        .collect()
}

fn report(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let passed = out.passed && in_time;
    println!(
        "criterion {id} {name}: {} [{:.1}s of {:.0}s] {}",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64(),
        out.detail
    );
    passed
}

fn main() {
    let secs = Duration::from_secs;
    let mut all = true;
    all &= report(1, "algebraic identities", secs(5), algebraic_identities);
    all &= report(2, "regularizer equivalence", secs(5), regularizer_equivalence);
    all &= report(3, "pgd certificate", secs(120), pgd_certificate);
    all &= report(4, "gradient and feature fidelity", secs(60), gradient_fidelity);
    all &= report(5, "frozenrep population limit", secs(300), frozenrep_limit);

    let cfg = separation_config();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let mut first_out = None;
    all &= report(6, "separation reproduction", secs(1800), || match reproduce(&cfg, first.path()) {
        Ok(out) => {
            let o = separation(&out, &cfg.grid);
            first_out = Some(out);
            o
        }
        Err(e) => Outcome { passed: false, detail: format!("run failed: {e}") },
    });
    all &= report(7, "rate scaling", secs(600), rate_scaling);
    all &= report(8, "determinism", secs(1800), || {
        if first_out.is_none() {
            return Outcome { passed: false, detail: "first run did not complete".into() };
        }
        if let Err(e) = reproduce(&cfg, second.path()) {
            return Outcome { passed: false, detail: format!("second run failed: {e}") };
        }
        let a = records_without_timing(&first.path().join("records.csv"));
        let b = records_without_timing(&second.path().join("records.csv"));
        let same = a == b;
        Outcome {
            passed: same && !a.is_empty(),
            detail: format!("{} records, identical modulo timing: {same}", a.len()),
        }
    });

    println!("acceptance: {}", if all { "all criteria passed" } else { "some criteria FAILED" });
    if !all {
        std::process::exit(1);
    }
}
