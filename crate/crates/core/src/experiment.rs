//! Experiment harness: the hard-case separation study and the individual
//! pipeline stages behind the `run` subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env_gen::{
    make_linear_env, make_logistic_env, make_nn_env, sample_source_datasets, sample_target_dataset, sample_target_task,
    Dataset, Family, LinearEnvConfig, NnEnvConfig, TargetTask, TaskEnvironment,
};
use crate::error::{invalid, Error, Result};
use crate::hardcase::{frozenrep_population_limit, worst_case_target, HardCaseSpec, HardFamily};
use crate::io::{self, FineTuneDoc, SourceDoc, SCHEMA_VERSION};
use crate::lbfgs::LbfgsOptions;
use crate::linalg::MatrixData;
use crate::metrics::{excess_risk_quadratic, population_loss_mc, sine_principal_angle, MetricsReport, Predictor};
use crate::par::map_indexed;
use crate::plot::{Chart, Series};
use crate::rng::{stream, sub_seed};
use crate::source_train::{
    best_by_train_loss, default_regularization, train_restarts, train_restarts_from_stats, SourceObjective,
    SourceOptions, SourceSolution, TaskStats,
};
use crate::target_adapt::{finetune_linear, finetune_logistic, finetune_nn, AdaptMode, AdaptSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Adaptrep,
    Frozenrep,
    OlsBaseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Adaptrep => "adaptrep",
            Method::Frozenrep => "frozenrep",
            Method::OlsBaseline => "ols-baseline",
        }
    }

    fn objective(self) -> Option<SourceObjective> {
        match self {
            Method::Adaptrep => Some(SourceObjective::Adaptrep),
            Method::Frozenrep => Some(SourceObjective::Frozenrep),
            Method::OlsBaseline => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestartSelection {
    /// Lowest worst-case target excess risk among the restarts.
    WorstCaseTarget,
    TrainLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Target sample sizes `n_T`.
    pub grid: Vec<usize>,
    /// `d = round(d_multiplier · n_T)`.
    pub d_multiplier: f64,
    pub k: usize,
    pub noise_sigma: f64,
    /// Number of source tasks `T`.
    pub num_tasks: usize,
    /// `n_S = round(n_s_multiplier · d)`.
    pub n_s_multiplier: f64,
    pub restarts: usize,
    /// Target datasets drawn for the final evaluation of each method.
    pub replications: usize,
    /// Candidate target tasks `M` in the worst-case search.
    pub candidates: usize,
    /// Datasets per candidate in the worst-case search.
    pub inner_reps: usize,
    pub pgd_iterations: usize,
    pub target_mode: AdaptMode,
    /// `κ` in the head radius `c2 = r√κ`, with `r` the largest source head norm.
    pub kappa: f64,
    pub balance: f64,
    pub lbfgs_max_iters: usize,
    pub restart_selection: RestartSelection,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Not part of the config hash.
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grid: vec![32, 64, 128, 256],
            d_multiplier: 1.0,
            k: 2,
            noise_sigma: 2.0,
            num_tasks: 1000,
            n_s_multiplier: 10.0,
            restarts: 10,
            replications: 1000,
            candidates: 16,
            inner_reps: 5,
            pgd_iterations: crate::target_adapt::DEFAULT_PGD_ITERATIONS,
            target_mode: AdaptMode::FullAdapt,
            kappa: 1.0,
            balance: 0.5,
            lbfgs_max_iters: 500,
            restart_selection: RestartSelection::WorstCaseTarget,
            methods: vec![Method::Adaptrep, Method::Frozenrep, Method::OlsBaseline],
            seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.contains(&0) {
            return Err(invalid("grid must be nonempty with positive n_T values"));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods must be nonempty"));
        }
        let positive = [
            ("k", self.k),
            ("num_tasks", self.num_tasks),
            ("restarts", self.restarts),
            ("replications", self.replications),
            ("candidates", self.candidates),
            ("inner_reps", self.inner_reps),
            ("pgd_iterations", self.pgd_iterations),
            ("lbfgs_max_iters", self.lbfgs_max_iters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.d_multiplier > 0.0 && self.n_s_multiplier > 0.0 && self.kappa > 0.0) {
            return Err(invalid("multipliers and kappa must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.balance >= 0.0) {
            return Err(invalid("noise_sigma and balance must be non-negative"));
        }
        if !matches!(self.target_mode, AdaptMode::DeltaOnly | AdaptMode::FullAdapt) {
            return Err(invalid("target_mode must be delta-only or full-adapt"));
        }
        for &n in &self.grid {
            let d = self.dim(n);
            if d <= 2 * self.k {
                return Err(invalid(format!("n_T = {n} gives d = {d}, need d > 2k")));
            }
        }
        Ok(())
    }

    pub fn dim(&self, n_t: usize) -> usize {
        ((self.d_multiplier * n_t as f64).round() as usize).max(1)
    }

    pub fn n_s(&self, d: usize) -> usize {
        ((self.n_s_multiplier * d as f64).round() as usize).max(1)
    }

    /// Multiplies `num_tasks`, `replications` and `candidates` by `factor`,
    /// flooring each at 10.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(invalid("scale must be a positive number"));
        }
        let f = |v: usize| ((v as f64 * factor).round() as usize).max(10);
        let mut c = self.clone();
        c.num_tasks = f(c.num_tasks);
        c.replications = f(c.replications);
        c.candidates = f(c.candidates);
        Ok(c)
    }

    /// SHA-256 of the canonical JSON with `output_dir` removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub method: String,
    pub d: usize,
    #[serde(rename = "n_T")]
    pub n_t: usize,
    pub replication: usize,
    pub excess_risk: Option<f64>,
    pub sine_dist: Option<f64>,
    pub wall_time_ms: f64,
    pub seed: u64,
    pub config_hash: String,
    pub error: Option<String>,
}

/// Per-method outcome of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub d: usize,
    #[serde(rename = "n_T")]
    pub n_t: usize,
    pub sine_dist: Option<f64>,
    pub restart_index: Option<usize>,
    pub selection_score: Option<f64>,
    pub count: usize,
    pub failures: usize,
    pub mean_risk: Option<f64>,
    pub median_risk: Option<f64>,
    pub stderr_risk: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ReproduceOutput {
    pub records: Vec<ExperimentRecord>,
    pub cells: Vec<CellSummary>,
    pub config_hash: String,
    pub files: Vec<PathBuf>,
}

impl ReproduceOutput {
    pub fn cell(&self, method: Method, n_t: usize) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.method == method.name() && c.n_t == n_t)
    }
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

fn mean_stderr(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

/// Everything shared by the methods at one grid point.
struct GridCell<'a> {
    cfg: &'a ExperimentConfig,
    hash: &'a str,
    env: TaskEnvironment,
    n_t: usize,
    seed: u64,
    adapt: AdaptSpec,
}

impl GridCell<'_> {
    fn risk(&self, method: Method, b0: &DMatrix<f64>, task: &TargetTask, ds: &Dataset) -> Result<f64> {
        let res = match method {
            Method::OlsBaseline => {
                let mut spec = self.adapt.clone();
                spec.mode = AdaptMode::IgnoreRep;
                finetune_linear(b0, ds, &spec)?
            }
            _ => finetune_linear(b0, ds, &self.adapt)?,
        };
        excess_risk_quadratic(&res.theta_hat, &task.theta_star, &self.env.sigma)
    }

    fn search(&self, method: Method, b0: &DMatrix<f64>) -> Result<(TargetTask, f64)> {
        worst_case_target(
            b0,
            &self.env,
            |b, task, ds| self.risk(method, b, task, ds),
            self.cfg.candidates,
            self.n_t,
            self.cfg.inner_reps,
            sub_seed(self.seed, stream::CANDIDATE, 0),
        )
    }

    fn error_records(&self, method: Method, err: &Error) -> Vec<ExperimentRecord> {
        (0..self.cfg.replications)
            .map(|r| ExperimentRecord {
                method: method.name().into(),
                d: self.env.d,
                n_t: self.n_t,
                replication: r,
                excess_risk: None,
                sine_dist: None,
                wall_time_ms: 0.0,
                seed: sub_seed(self.seed, stream::REPLICATION, r as u64),
                config_hash: self.hash.into(),
                error: Some(err.to_string()),
            })
            .collect()
    }

    /// Chooses the representation for `method` and the task it is evaluated on.
    fn select(
        &self,
        method: Method,
        stats: &[TaskStats],
        lambda: f64,
    ) -> Result<(DMatrix<f64>, TargetTask, Option<usize>, f64)> {
        let Some(objective) = method.objective() else {
            let (task, score) = self.search(method, &self.env.bstar)?;
            return Ok((self.env.bstar.clone(), task, None, score));
        };
        let opts = SourceOptions {
            restarts: self.cfg.restarts,
            lbfgs: LbfgsOptions { max_iters: self.cfg.lbfgs_max_iters, ..LbfgsOptions::default() },
            balance: self.cfg.balance,
            seed: sub_seed(self.seed, stream::RESTART, objective as u64),
            warm_start: None,
        };
        let sols = train_restarts_from_stats(objective, stats, self.cfg.k, lambda, lambda, &opts)?;
        let chosen: SourceSolution = match self.cfg.restart_selection {
            RestartSelection::TrainLoss => best_by_train_loss(sols),
            RestartSelection::WorstCaseTarget => {
                let mut best: Option<(SourceSolution, TargetTask, f64)> = None;
                for s in sols {
                    let (task, score) = self.search(method, &s.b0)?;
                    if best.as_ref().is_none_or(|b| score < b.2) {
                        best = Some((s, task, score));
                    }
                }
                let (s, task, score) = best.expect("at least one restart");
                return Ok((s.b0, task, Some(s.restart_index), score));
            }
        };
        let (task, score) = self.search(method, &chosen.b0)?;
        Ok((chosen.b0, task, Some(chosen.restart_index), score))
    }

    fn run_method(&self, method: Method, stats: &[TaskStats], lambda: f64) -> (Vec<ExperimentRecord>, CellSummary) {
        let mut summary = CellSummary {
            method: method.name().into(),
            d: self.env.d,
            n_t: self.n_t,
            sine_dist: None,
            restart_index: None,
            selection_score: None,
            count: 0,
            failures: 0,
            mean_risk: None,
            median_risk: None,
            stderr_risk: None,
        };
        let (b0, task, restart, score) = match self.select(method, stats, lambda) {
            Ok(v) => v,
            Err(e) => {
                summary.failures = self.cfg.replications;
                return (self.error_records(method, &e), summary);
            }
        };
        let sine = match method {
            Method::OlsBaseline => None,
            _ => sine_principal_angle(&b0, &self.env.bstar).ok(),
        };
        summary.sine_dist = sine;
        summary.restart_index = restart;
        summary.selection_score = Some(score);
        let records = map_indexed(self.cfg.replications, |r| {
            let seed = sub_seed(self.seed, stream::REPLICATION, r as u64);
            let (out, wall_time_ms) = timed(|| {
                let ds = sample_target_dataset(&self.env, &task, self.n_t, seed);
                self.risk(method, &b0, &task, &ds)
            });
            let (excess_risk, error) = match out {
                Ok(v) if v.is_finite() => (Some(v), None),
                Ok(v) => (None, Some(format!("non-finite excess risk {v}"))),
                Err(e) => (None, Some(e.to_string())),
            };
            ExperimentRecord {
                method: method.name().into(),
                d: self.env.d,
                n_t: self.n_t,
                replication: r,
                excess_risk,
                sine_dist: sine,
                wall_time_ms,
                seed,
                config_hash: self.hash.into(),
                error,
            }
        });
        let risks: Vec<f64> = records.iter().filter_map(|r| r.excess_risk).collect();
        summary.count = risks.len();
        summary.failures = records.len() - risks.len();
        if let Some((m, se)) = mean_stderr(&risks) {
            summary.mean_risk = Some(m);
            summary.stderr_risk = Some(se);
        }
        summary.median_risk = median(&risks);
        (records, summary)
    }
}

/// Runs `f` and reports its wall time in milliseconds; always zero on wasm,
/// where no monotonic clock is available.
fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    #[cfg(target_arch = "wasm32")]
    {
        (f(), 0.0)
    }
    #[cfg(not(target_arch = "wasm32"))]
    {
        let start = std::time::Instant::now();
        let v = f();
        (v, start.elapsed().as_secs_f64() * 1e3)
    }
}

fn run_grid_point(
    cfg: &ExperimentConfig,
    hash: &str,
    gi: usize,
    n_t: usize,
) -> Result<(Vec<ExperimentRecord>, Vec<CellSummary>)> {
    let seed = sub_seed(cfg.seed, stream::GRID, gi as u64);
    let d = cfg.dim(n_t);
    let spec = HardCaseSpec::with_default_eps(d, cfg.k, HardFamily::Linear)?;
    let env = spec.environment(cfg.num_tasks, cfg.noise_sigma, sub_seed(seed, stream::ENV, 0))?;
    let n_s = cfg.n_s(d);
    let stats: Vec<TaskStats> = {
        let datasets = sample_source_datasets(&env, n_s, seed)?;
        map_indexed(datasets.len(), |t| TaskStats::from_dataset(&datasets[t]))
    };
    let lambda = default_regularization(cfg.noise_sigma, env.sigma.trace(), n_s);
    let r = env.tasks.iter().map(|t| t.w.norm()).fold(0.0, f64::max);
    let mut adapt = AdaptSpec::linear(cfg.target_mode, cfg.k, n_t, env.delta0, r, cfg.kappa);
    adapt.iterations = cfg.pgd_iterations;
    let cell = GridCell { cfg, hash, env, n_t, seed, adapt };
    let mut records = Vec::new();
    let mut cells = Vec::new();
    for &m in &cfg.methods {
        let (rec, summary) = cell.run_method(m, &stats, lambda);
        records.extend(rec);
        cells.push(summary);
    }
    Ok((records, cells))
}

/// Runs the separation study and writes `records.csv`, `sine.csv`,
/// `risk.csv`, `sine.svg` and `risk.svg` into `out_dir`. A grid point whose
/// environment cannot be built produces error records and the run continues.
pub fn reproduce(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ReproduceOutput> {
    fs::create_dir_all(out_dir)?;
    let (records, cells) = run_study(cfg)?;
    let files = write_outputs(out_dir, &records, &cells)?;
    Ok(ReproduceOutput { records, cells, config_hash: cfg.hash(), files })
}

/// The separation study without any file output: per-replication records and
/// per-cell summaries in grid order.
pub fn run_study(cfg: &ExperimentConfig) -> Result<(Vec<ExperimentRecord>, Vec<CellSummary>)> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut records = Vec::new();
    let mut cells = Vec::new();
    for (gi, &n_t) in cfg.grid.iter().enumerate() {
        match run_grid_point(cfg, &hash, gi, n_t) {
            Ok((r, c)) => {
                records.extend(r);
                cells.extend(c);
            }
            Err(e) => {
                for &m in &cfg.methods {
                    records.push(ExperimentRecord {
                        method: m.name().into(),
                        d: cfg.dim(n_t),
                        n_t,
                        replication: 0,
                        excess_risk: None,
                        sine_dist: None,
                        wall_time_ms: 0.0,
                        seed: sub_seed(cfg.seed, stream::GRID, gi as u64),
                        config_hash: hash.clone(),
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    Ok((records, cells))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

pub fn write_records_csv(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    if records.is_empty() {
        w.write_record([
            "method",
            "d",
            "n_T",
            "replication",
            "excess_risk",
            "sine_dist",
            "wall_time_ms",
            "seed",
            "config_hash",
            "error",
        ])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_outputs(dir: &Path, records: &[ExperimentRecord], cells: &[CellSummary]) -> Result<Vec<PathBuf>> {
    let records_path = dir.join("records.csv");
    write_records_csv(&records_path, records)?;

    let sine_path = dir.join("sine.csv");
    let mut w = csv_writer(&sine_path)?;
    w.write_record(["method", "d", "n_T", "sine_dist", "restart_index", "selection_score"])?;
    for c in cells {
        w.write_record([
            c.method.clone(),
            c.d.to_string(),
            c.n_t.to_string(),
            opt(c.sine_dist),
            c.restart_index.map(|i| i.to_string()).unwrap_or_default(),
            opt(c.selection_score),
        ])?;
    }
    w.flush()?;

    let risk_path = dir.join("risk.csv");
    let mut w = csv_writer(&risk_path)?;
    w.write_record(["method", "d", "n_T", "count", "failures", "mean", "median", "stderr"])?;
    for c in cells {
        w.write_record([
            c.method.clone(),
            c.d.to_string(),
            c.n_t.to_string(),
            c.count.to_string(),
            c.failures.to_string(),
            opt(c.mean_risk),
            opt(c.median_risk),
            opt(c.stderr_risk),
        ])?;
    }
    w.flush()?;

    let mut methods: Vec<&str> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method.as_str()) {
            methods.push(&c.method);
        }
    }
    let series = |f: &dyn Fn(&CellSummary) -> Option<f64>| -> Vec<Series> {
        methods
            .iter()
            .map(|m| Series {
                label: m.to_string(),
                points: cells
                    .iter()
                    .filter(|c| c.method == *m)
                    .filter_map(|c| f(c).map(|v| (c.n_t as f64, v)))
                    .collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect()
    };
    let sine_svg = dir.join("sine.svg");
    let chart = Chart {
        title: "Sine distance to the true representation".into(),
        x_label: "n_T".into(),
        y_label: "sin of largest principal angle".into(),
        log_x: true,
        log_y: false,
        series: series(&|c| c.sine_dist),
    };
    fs::write(&sine_svg, chart.to_svg())?;
    let risk_svg = dir.join("risk.svg");
    let chart = Chart {
        title: "Average worst-case excess risk".into(),
        x_label: "n_T".into(),
        y_label: "excess risk (log scale)".into(),
        log_x: true,
        log_y: true,
        series: series(&|c| c.mean_risk),
    };
    fs::write(&risk_svg, chart.to_svg())?;
    Ok(vec![records_path, sine_path, risk_path, sine_svg, risk_svg])
}

/// Pipeline stage names accepted by [`run_stage`].
pub const STAGES: [&str; 5] = ["gen-env", "train-source", "finetune", "hardcase-limit", "eval"];

/// Arguments for a single stage. Input paths default to the artifact names
/// the previous stage writes into `out`.
#[derive(Clone, Debug)]
pub struct StageArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub family: Family,
    pub d: usize,
    pub k: usize,
    pub num_tasks: usize,
    pub delta0: f64,
    pub noise_sigma: f64,
    pub eps: Option<f64>,
    pub nn_scale: f64,
    pub env: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub finetune: Option<PathBuf>,
    pub objective: SourceObjective,
    pub n_s: usize,
    pub restarts: usize,
    pub mode: AdaptMode,
    pub n_t: usize,
    pub iterations: usize,
    pub r: f64,
    pub kappa: f64,
    pub n_mc: usize,
}

impl StageArgs {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        StageArgs {
            out: out.into(),
            seed: 0,
            family: Family::Linear,
            d: 20,
            k: 2,
            num_tasks: 100,
            delta0: 0.5,
            noise_sigma: 1.0,
            eps: None,
            nn_scale: 10.0,
            env: None,
            source: None,
            finetune: None,
            objective: SourceObjective::Adaptrep,
            n_s: 200,
            restarts: 3,
            mode: AdaptMode::FullAdapt,
            n_t: 100,
            iterations: crate::target_adapt::DEFAULT_PGD_ITERATIONS,
            r: 1.0,
            kappa: 1.0,
            n_mc: 10_000,
        }
    }

    fn input(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(name))
    }
}

/// `limit.json`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitDoc {
    pub schema_version: u32,
    pub d: usize,
    pub k: usize,
    pub eps: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub representation: MatrixData,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub sine_to_e_k: f64,
    pub sine_to_a_star: f64,
}

/// `metrics.json`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub schema_version: u32,
    pub report: MetricsReport,
    /// Sine distance of the source representation, when one was supplied.
    pub source_sine: Option<f64>,
    pub seed: u64,
}

/// Runs one pipeline stage and returns the artifact paths it wrote.
pub fn run_stage(stage: &str, a: &StageArgs) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&a.out)?;
    match stage {
        "gen-env" => {
            let env = generate_env(a)?;
            let p = a.out.join("env.json");
            io::write_env(&p, &env)?;
            Ok(vec![p])
        }
        "train-source" => {
            let env = io::read_env(&a.input(&a.env, "env.json"))?;
            let sol = train_source_stage(&env, a)?;
            let p = a.out.join("source.json");
            io::write_json(&p, &SourceDoc::from(&sol))?;
            Ok(vec![p])
        }
        "finetune" => finetune_stage(a),
        "hardcase-limit" => {
            let eps = a.eps.unwrap_or(a.k as f64 / a.d as f64);
            let spec = HardCaseSpec::new(a.d, a.k, eps, HardFamily::Linear)?;
            let lim = frozenrep_population_limit(&spec, a.n_mc, a.seed)?;
            let doc = LimitDoc {
                schema_version: SCHEMA_VERSION,
                d: a.d,
                k: a.k,
                eps,
                n_mc: a.n_mc,
                seed: a.seed,
                sine_to_e_k: sine_principal_angle(&lim.representation, &spec.e_k_basis())?,
                sine_to_a_star: sine_principal_angle(&lim.representation, &spec.a_star)?,
                representation: (&lim.representation).into(),
                objective: lim.objective,
                converged: lim.converged,
                iterations: lim.iterations,
            };
            let p = a.out.join("limit.json");
            io::write_json(&p, &doc)?;
            Ok(vec![p])
        }
        "eval" => {
            let doc = eval_stage(a)?;
            let p = a.out.join("metrics.json");
            io::write_json(&p, &doc)?;
            Ok(vec![p])
        }
        other => Err(invalid(format!("unknown stage {other:?}; expected one of {}", STAGES.join(", ")))),
    }
}

fn generate_env(a: &StageArgs) -> Result<TaskEnvironment> {
    match a.family {
        Family::Linear | Family::Logistic => {
            let cfg = LinearEnvConfig::new(a.d, a.k, a.num_tasks, a.delta0, a.noise_sigma, a.seed);
            if a.family == Family::Linear {
                make_linear_env(&cfg)
            } else {
                make_logistic_env(&cfg)
            }
        }
        Family::Nn => make_nn_env(&NnEnvConfig::new(a.d, a.k, a.num_tasks, a.nn_scale, a.seed)),
        Family::HardcaseLinear | Family::HardcaseRelu => {
            let fam = if a.family == Family::HardcaseLinear { HardFamily::Linear } else { HardFamily::Relu };
            let eps = a.eps.unwrap_or(a.k as f64 / a.d as f64);
            HardCaseSpec::new(a.d, a.k, eps, fam)?.environment(a.num_tasks, a.noise_sigma, a.seed)
        }
    }
}

fn train_source_stage(env: &TaskEnvironment, a: &StageArgs) -> Result<SourceSolution> {
    if !env.family.is_linear_type() {
        return Err(invalid("source training needs a linear-type environment; network families fine-tune the environment's base network"));
    }
    let datasets = sample_source_datasets(env, a.n_s, a.seed)?;
    let lambda = default_regularization(env.noise_sigma.max(1e-3), env.sigma.trace(), a.n_s);
    let opts = SourceOptions { restarts: a.restarts, seed: a.seed, ..SourceOptions::default() };
    let sols = train_restarts(a.objective, &datasets, env.k, lambda, lambda, &opts)?;
    Ok(best_by_train_loss(sols))
}

fn finetune_stage(a: &StageArgs) -> Result<Vec<PathBuf>> {
    let env = io::read_env(&a.input(&a.env, "env.json"))?;
    let task_seed = sub_seed(a.seed, stream::TARGET_TASK, 1);
    let task = sample_target_task(&env, task_seed);
    let ds = sample_target_dataset(&env, &task, a.n_t, sub_seed(a.seed, stream::TARGET_DATA, 1));
    let res = match env.family {
        Family::Nn => {
            let nn = env.nn.as_ref().ok_or_else(|| invalid("network environment lacks its base"))?;
            let mut spec = AdaptSpec::nn(env.k, a.n_t, a.kappa, nn.activation);
            spec.iterations = a.iterations;
            finetune_nn(&env.bstar, &nn.w0, &ds, &spec)?
        }
        _ => {
            let source: SourceDoc = io::read_json(&a.input(&a.source, "source.json"))?;
            let b0 = source.b0.to_matrix()?;
            let mode = if env.family == Family::Logistic { AdaptMode::Logistic } else { a.mode };
            let mut spec = AdaptSpec::linear(mode, env.k, a.n_t, env.delta0, a.r, a.kappa);
            spec.iterations = a.iterations;
            if mode == AdaptMode::Logistic {
                finetune_logistic(&b0, &ds, &spec)?
            } else {
                finetune_linear(&b0, &ds, &spec)?
            }
        }
    };
    let ft = a.out.join("finetune.json");
    io::write_json(&ft, &FineTuneDoc::new(&res, &task, task_seed))?;
    let target = a.out.join("target.csv");
    io::write_dataset_csv(&target, &ds)?;
    let trace = a.out.join("trace.csv");
    io::write_trace_csv(&trace, &res.trace)?;
    Ok(vec![ft, target, trace])
}

fn eval_stage(a: &StageArgs) -> Result<MetricsDoc> {
    let env = io::read_env(&a.input(&a.env, "env.json"))?;
    let ft: FineTuneDoc = io::read_json(&a.input(&a.finetune, "finetune.json"))?;
    let task = ft.target.to_task()?;
    let mc_seed = sub_seed(a.seed, stream::MONTE_CARLO, 1);
    let (predictor, truth) = match ft.nn_params()? {
        Some(params) => {
            let truth = task.nn.clone().ok_or_else(|| invalid("network fine-tune without a network target"))?;
            let nn = env.nn.as_ref().ok_or_else(|| invalid("network fine-tune on a non-network environment"))?;
            (
                Predictor::Network { params, scale: ft.spec.beta_scale, activation: ft.spec.activation },
                Predictor::Network { params: truth, scale: nn.scale, activation: nn.activation },
            )
        }
        None => {
            (Predictor::Linear(DVector::from_vec(ft.theta_hat.clone())), Predictor::Linear(task.theta_star.clone()))
        }
    };
    let (pop, se) = population_loss_mc(&predictor, &env, &task, a.n_mc, mc_seed)?;
    let excess_risk = match (&predictor, &truth) {
        (Predictor::Linear(th), Predictor::Linear(ts)) => excess_risk_quadratic(th, ts, &env.sigma)?,
        _ => mc_prediction_gap(&predictor, &truth, &env, a.n_mc, mc_seed),
    };
    let source_path = a.input(&a.source, "source.json");
    let source_sine = if source_path.exists() && env.family.is_linear_type() {
        let s: SourceDoc = io::read_json(&source_path)?;
        Some(sine_principal_angle(&s.b0.to_matrix()?, &env.bstar)?)
    } else {
        None
    };
    Ok(MetricsDoc {
        schema_version: SCHEMA_VERSION,
        report: MetricsReport {
            excess_risk,
            sine_dist: source_sine.unwrap_or(0.0),
            population_loss: pop,
            population_loss_stderr: se,
            n_mc: a.n_mc,
        },
        source_sine,
        seed: a.seed,
    })
}

/// `E[(f̂(x) − f*(x))²]` over fresh inputs.
fn mc_prediction_gap(a: &Predictor, b: &Predictor, env: &TaskEnvironment, n: usize, seed: u64) -> f64 {
    let mut rng = crate::rng::rng_from(seed);
    let x = env.sample_inputs(&mut rng, n);
    let diff = a.predict(&x) - b.predict(&x);
    diff.norm_squared() / n as f64
}

/// Ordinary least-squares excess risk computed directly from a dataset, used
/// as an oracle for the `finetune` → `eval` path.
pub fn closed_form_ols_risk(ds: &Dataset, theta_star: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let svd = ds.x.clone().svd(true, true);
    let pinv = svd.pseudo_inverse(1e-12).map_err(|e| invalid(e.to_string()))?;
    let theta = pinv * &ds.y;
    excess_risk_quadratic(&theta, theta_star, sigma)
}
