//! Browser demo. Each exported function runs a small simulation and returns
//! its result as a JSON string for the page to plot.

use adaptrep::env_gen::{Dataset, TaskId};
use adaptrep::experiment::{run_study, ExperimentConfig, Method};
use adaptrep::hardcase::{frozenrep_population_limit, HardCaseSpec, HardFamily};
use adaptrep::linalg::{gaussian_matrix, gaussian_vector, orthonormalize};
use adaptrep::metrics::sine_principal_angle;
use adaptrep::rng::rng_from;
use adaptrep::target_adapt::{finetune_linear, AdaptMode, AdaptSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
pub struct TraceCurve {
    pub beta: f64,
    /// `(iteration, loss)`, thinned to at most a few hundred points.
    pub points: Vec<(usize, f64)>,
    pub best_loss: f64,
    pub certificate: f64,
}

/// Fine-tunes one random linear target instance at several predictor scales
/// `β` and returns the loss trace of each run.
pub fn pgd_traces(seed: u64, iterations: usize, betas: &[f64]) -> Result<Vec<TraceCurve>, String> {
    let (d, k, n) = (6, 2, 50);
    let mut rng = rng_from(seed);
    let b0 = orthonormalize(&gaussian_matrix(&mut rng, d, k, 1.0));
    let theta = &b0 * gaussian_vector(&mut rng, k) + gaussian_vector(&mut rng, d) * 0.3;
    let x = gaussian_matrix(&mut rng, n, d, 1.0);
    let y = &x * &theta + gaussian_vector(&mut rng, n) * 0.3;
    let ds = Dataset { x, y, task_id: TaskId::Target, seed };
    betas
        .iter()
        .map(|&beta| {
            let mut spec = AdaptSpec::linear(AdaptMode::FullAdapt, k, n, 0.5, 1.0, 1.0);
            spec.beta_scale = beta;
            spec.iterations = iterations.max(1);
            let res = finetune_linear(&b0, &ds, &spec).map_err(|e| e.to_string())?;
            let losses = &res.trace.losses;
            let stride = (losses.len() / 300).max(1);
            let mut points: Vec<(usize, f64)> = losses.iter().copied().enumerate().step_by(stride).collect();
            if points.last().map(|p| p.0) != Some(losses.len() - 1) {
                points.push((losses.len() - 1, losses[losses.len() - 1]));
            }
            Ok(TraceCurve { beta, points, best_loss: res.trace.best_loss(), certificate: res.certificate })
        })
        .collect()
}

#[derive(Serialize)]
pub struct LimitPoint {
    pub eps: f64,
    pub sine_to_ek: f64,
    pub sine_to_astar: f64,
}

/// Population-limit FrozenRep representation of the hard case across `ε`,
/// reported as sines to the nuisance block `E_k` and to `A*`.
pub fn hardcase_sines(d: usize, k: usize, eps: &[f64], seed: u64) -> Result<Vec<LimitPoint>, String> {
    eps.iter()
        .map(|&e| {
            let spec = HardCaseSpec::new(d, k, e, HardFamily::Linear).map_err(|e| e.to_string())?;
            let lim = frozenrep_population_limit(&spec, 2000, seed).map_err(|e| e.to_string())?;
            let rep = &lim.representation;
            Ok(LimitPoint {
                eps: e,
                sine_to_ek: sine_principal_angle(rep, &spec.e_k_basis()).map_err(|e| e.to_string())?,
                sine_to_astar: sine_principal_angle(rep, &spec.a_star).map_err(|e| e.to_string())?,
            })
        })
        .collect()
}

#[derive(Serialize)]
pub struct RiskPoint {
    pub method: String,
    pub n_t: usize,
    pub sine_dist: Option<f64>,
    pub median_risk: Option<f64>,
}

/// A small version of the separation study on the hard case with `d = n_T`.
pub fn risk_vs_nt(grid: &[usize], seed: u64) -> Result<Vec<RiskPoint>, String> {
    let cfg = ExperimentConfig {
        grid: grid.to_vec(),
        num_tasks: 200,
        restarts: 2,
        replications: 20,
        candidates: 4,
        inner_reps: 2,
        pgd_iterations: 500,
        lbfgs_max_iters: 300,
        methods: vec![Method::Adaptrep, Method::Frozenrep],
        seed,
        ..ExperimentConfig::default()
    };
    let (_, cells) = run_study(&cfg).map_err(|e| e.to_string())?;
    Ok(cells
        .into_iter()
        .map(|c| RiskPoint { method: c.method, n_t: c.n_t, sine_dist: c.sine_dist, median_risk: c.median_risk })
        .collect())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = pgdTraces)]
pub fn pgd_traces_js(seed: u32, iterations: u32, betas: Vec<f64>) -> Result<String, JsValue> {
    to_js(pgd_traces(seed as u64, iterations as usize, &betas))
}

#[wasm_bindgen(js_name = hardcaseSines)]
pub fn hardcase_sines_js(d: u32, k: u32, eps: Vec<f64>, seed: u32) -> Result<String, JsValue> {
    to_js(hardcase_sines(d as usize, k as usize, &eps, seed as u64))
}

#[wasm_bindgen(js_name = riskVsNt)]
pub fn risk_vs_nt_js(grid: Vec<u32>, seed: u32) -> Result<String, JsValue> {
    let grid: Vec<usize> = grid.into_iter().map(|g| g as usize).collect();
    to_js(risk_vs_nt(&grid, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traces_cover_every_scale() {
        let t = pgd_traces(1, 400, &[1.0, 8.0, 64.0]).unwrap();
        assert_eq!(t.len(), 3);
        for c in &t {
            assert_eq!(c.points.last().unwrap().0, 400);
            assert!(c.best_loss <= c.points[0].1);
        }
    }

    #[test]
    fn small_eps_limit_aligns_with_nuisance_block() {
        let pts = hardcase_sines(20, 2, &[0.01], 0).unwrap();
        assert!(pts[0].sine_to_ek < 0.1);
        assert!(pts[0].sine_to_astar > 0.9);
    }

    #[test]
    fn risk_study_reports_both_methods() {
        let pts = risk_vs_nt(&[8, 16], 0).unwrap();
        assert_eq!(pts.len(), 4);
        assert!(pts.iter().all(|p| p.median_risk.is_some()));
        let js = serde_json::to_string(&pts).unwrap();
        assert!(js.contains("\"method\":\"adaptrep\""));
    }
}
