use adaptrep::env_gen::*;
use adaptrep::experiment::{reproduce, ExperimentConfig, Method};
use adaptrep::io::{env_to_json, read_env, write_env};
use adaptrep::linalg::*;
use adaptrep::metrics::{excess_risk_quadratic, principal_angle_sines, sine_principal_angle};
use adaptrep::pgd::*;
use adaptrep::rng::rng_from;
use adaptrep::source_train::TaskStats;
use adaptrep::target_adapt::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn random_orthogonal(seed: u64, d: usize) -> DMatrix<f64> {
    orthonormalize(&gaussian_matrix(&mut rng_from(seed), d, d, 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sine_is_symmetric_and_bounded(seed in 0u64..10_000, d in 3usize..12, k in 1usize..3) {
        let mut rng = rng_from(seed);
        let a = gaussian_matrix(&mut rng, d, k, 1.0);
        let b = gaussian_matrix(&mut rng, d, k, 1.0);
        let ab = sine_principal_angle(&a, &b).unwrap();
        let ba = sine_principal_angle(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-10);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(sine_principal_angle(&a, &a).unwrap() < 1e-7);
    }

    #[test]
    fn sine_is_orthogonally_invariant(seed in 0u64..10_000, d in 3usize..10) {
        let mut rng = rng_from(seed);
        let a = gaussian_matrix(&mut rng, d, 2, 1.0);
        let b = gaussian_matrix(&mut rng, d, 2, 1.0);
        let q = random_orthogonal(seed ^ 0x5eed, d);
        let before = principal_angle_sines(&a, &b).unwrap();
        let after = principal_angle_sines(&(&q * &a), &(&q * &b)).unwrap();
        for (x, y) in before.iter().zip(&after) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn sine_ignores_column_mixing(seed in 0u64..10_000, d in 3usize..10) {
        let mut rng = rng_from(seed);
        let a = gaussian_matrix(&mut rng, d, 2, 1.0);
        let b = gaussian_matrix(&mut rng, d, 2, 1.0);
        let mix = gaussian_matrix(&mut rng, 2, 2, 1.0) + DMatrix::identity(2, 2) * 3.0;
        let s1 = sine_principal_angle(&a, &b).unwrap();
        let s2 = sine_principal_angle(&(&a * mix), &b).unwrap();
        prop_assert!((s1 - s2).abs() < 1e-8);
    }

    #[test]
    fn excess_risk_is_nonnegative_and_zero_at_truth(seed in 0u64..10_000, d in 1usize..10) {
        let mut rng = rng_from(seed);
        let g = gaussian_matrix(&mut rng, d, d, 1.0);
        let sigma = &g * g.transpose();
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let t = gaussian_vector(&mut rng, d);
        let h = gaussian_vector(&mut rng, d);
        prop_assert!(excess_risk_quadratic(&h, &t, &sigma).unwrap() >= 0.0);
        prop_assert!(excess_risk_quadratic(&t, &t, &sigma).unwrap() == 0.0);
    }

    #[test]
    fn config_round_trips_and_hash_tracks_content(seed in 0u64..1_000_000, kappa in 0.1f64..10.0) {
        let cfg = ExperimentConfig { seed, kappa, ..ExperimentConfig::default() };
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
        let moved = ExperimentConfig { output_dir: Some("elsewhere".into()), ..cfg.clone() };
        prop_assert_eq!(moved.hash(), cfg.hash());
        let other = ExperimentConfig { seed: seed + 1, ..cfg.clone() };
        prop_assert_ne!(other.hash(), cfg.hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn linear_env_round_trips_through_json(seed in 0u64..100_000) {
        let env = make_linear_env(&LinearEnvConfig::new(8, 2, 12, 0.3, 0.5, seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("env.json");
        write_env(&path, &env).unwrap();
        let back = read_env(&path).unwrap();
        prop_assert_eq!(env_to_json(&back).unwrap(), env_to_json(&env).unwrap());
        prop_assert_eq!(&back.sigma, &env.sigma);
    }
}

fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

#[test]
fn pgd_on_convex_lipschitz_objective_decays_like_inverse_sqrt() {
    let d = 40;
    for seed in 0..3u64 {
        let mut rng = rng_from(seed);
        let c = unit_vector(&mut rng, d) * 0.7;
        let obj = FnObjective {
            value: |x: &DVector<f64>| (x - &c).abs().sum(),
            gradient: |x: &DVector<f64>| (x - &c).map(f64::signum),
        };
        let ts = [100.0, 400.0, 1600.0, 6400.0];
        let mut losses = vec![];
        for &t in &ts {
            let mut cfg = PgdConfig::new(t as usize, 1.0, 0.0, (d as f64).sqrt());
            cfg.keep_iterates = false;
            let tr = run_pgd(&obj, |x| project_ball(x, 1.0), DVector::zeros(d), &cfg).unwrap();
            assert!(tr.best_loss() <= tr.losses[0]);
            assert!(tr.losses.last().unwrap() <= &tr.losses[0]);
            losses.push(tr.best_loss());
        }
        let slope = loglog_slope(&ts, &losses);
        assert!((slope + 0.5).abs() <= 0.2, "seed {seed}: slope {slope}");
    }
}

/// With `D = βΔ` and `a = βw` the linearized fine-tuning model `A a + D w0`
/// does not depend on β, while the exact model adds `D a / β`. The PGD loss
/// should approach the linearized optimum as β grows.
#[test]
fn fine_tuning_gap_to_linearized_optimum_shrinks_with_scale() {
    let (d, k, n) = (6, 2, 50);
    let (c1, c2) = (0.5, 1.0);
    let m = 2 * k;
    for seed in 0..3u64 {
        let mut rng = rng_from(seed + 1);
        let b0 = orthonormalize(&gaussian_matrix(&mut rng, d, k, 1.0));
        let theta = &b0 * gaussian_vector(&mut rng, k) + gaussian_vector(&mut rng, d) * 0.3;
        let x = gaussian_matrix(&mut rng, n, d, 1.0);
        let y = &x * &theta + gaussian_vector(&mut rng, n) * 0.3;
        let ds = Dataset { x, y, task_id: TaskId::Target, seed: 0 };
        let stats = TaskStats::from_dataset(&ds);
        let mut u = DVector::zeros(k);
        u[0] = 1.0;
        let (a, w0) = build_antisymmetric_init(&b0, &u).unwrap();

        let lin_theta = |p: &DVector<f64>| {
            let dm = DMatrix::from_column_slice(d, m, &p.as_slice()[..d * m]);
            &a * p.rows(d * m, m) + dm * &w0
        };
        let obj = FnObjective {
            value: |p: &DVector<f64>| stats.loss_grad(&lin_theta(p)).0,
            gradient: |p: &DVector<f64>| {
                let g = stats.loss_grad(&lin_theta(p)).1;
                let mut out = DVector::zeros(d * m + m);
                out.rows_mut(0, d * m).copy_from_slice((&g * w0.transpose()).as_slice());
                out.rows_mut(d * m, m).copy_from(&a.tr_mul(&g));
                out
            },
        };
        let lam = stats.s.symmetric_eigenvalues().max();
        let ball = ProductBall { split: d * m, r1: c1, r2: c2 };
        let mut cfg = PgdConfig::new(20_000, ball.radius(), 0.0, 1.0);
        cfg.eta = Some(1.0 / (4.0 * lam));
        cfg.keep_iterates = false;
        let lin = run_pgd(&obj, |p| ball.project(p), DVector::zeros(d * m + m), &cfg).unwrap().best_loss();

        let gaps: Vec<f64> = (0..=10)
            .map(|e| {
                let mut spec = AdaptSpec::linear(AdaptMode::FullAdapt, k, n, c1, c2, 1.0);
                spec.beta_scale = 2f64.powi(e);
                spec.iterations = 5000;
                let r = finetune_linear(&b0, &ds, &spec).unwrap();
                (r.trace.best_loss() - lin).abs()
            })
            .collect();
        for w in gaps.windows(2) {
            assert!(w[1] <= 1.1 * w[0] + 1e-12, "seed {seed}: gaps {gaps:?}");
        }
        assert!(gaps[10] <= 1e-5, "seed {seed}: gaps {gaps:?}");
    }
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        grid: vec![16],
        num_tasks: 40,
        n_s_multiplier: 4.0,
        restarts: 2,
        replications: 6,
        candidates: 3,
        inner_reps: 2,
        pgd_iterations: 200,
        lbfgs_max_iters: 60,
        methods: vec![Method::Adaptrep, Method::Frozenrep],
        seed: 11,
        ..ExperimentConfig::default()
    }
}

fn strip_wall_time(path: &std::path::Path) -> Vec<String> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "wall_time_ms").unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            r.iter().enumerate().filter(|(i, _)| *i != col).map(|(_, v)| v).collect::<Vec<_>>().join(",")
        })
        .collect()
}

#[test]
fn reproduce_is_deterministic_for_a_fixed_seed() {
    let cfg = tiny_config();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    reproduce(&cfg, d1.path()).unwrap();
    reproduce(&cfg, d2.path()).unwrap();
    assert_eq!(strip_wall_time(&d1.path().join("records.csv")), strip_wall_time(&d2.path().join("records.csv")));
    for f in ["sine.csv", "risk.csv", "sine.svg", "risk.svg"] {
        assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f} differs");
    }
}
