//! On-disk artifacts: JSON documents for environments, source solutions,
//! fine-tuning results and target tasks (matrices row-major, every document
//! tagged with a schema version), and CSV for datasets and PGD traces.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::env_gen::{
    Activation, Dataset, Family, NnParams, NnStructure, SigmaSpec, TargetTask, TaskEnvironment, TaskId, TaskParams,
};
use crate::error::{invalid, Error, Result};
use crate::linalg::MatrixData;
use crate::pgd::PgdTrace;
use crate::source_train::{SourceObjective, SourceSolution};
use crate::target_adapt::{AdaptSpec, FineTuneResult};

pub const SCHEMA_VERSION: u32 = 1;

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

/// Reads a versioned JSON document, rejecting other schema versions.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let probe: VersionProbe = serde_json::from_str(&text)?;
    if probe.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion { expected: SCHEMA_VERSION, found: probe.schema_version });
    }
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParamsDoc {
    pub delta: MatrixData,
    pub w: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnStructureDoc {
    pub activation: Activation,
    pub scale: f64,
    pub w0: Vec<f64>,
    pub directions: Vec<MatrixData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvDoc {
    pub schema_version: u32,
    pub family: Family,
    pub d: usize,
    pub k: usize,
    pub num_tasks: usize,
    pub sigma_spec: SigmaSpec,
    pub bstar: MatrixData,
    pub delta0: f64,
    pub noise_sigma: f64,
    pub target_radius: f64,
    pub eps: Option<f64>,
    pub tasks: Vec<TaskParamsDoc>,
    pub nn: Option<NnStructureDoc>,
    pub seed: u64,
}

impl From<&TaskEnvironment> for EnvDoc {
    fn from(env: &TaskEnvironment) -> Self {
        EnvDoc {
            schema_version: SCHEMA_VERSION,
            family: env.family,
            d: env.d,
            k: env.k,
            num_tasks: env.tasks.len(),
            sigma_spec: env.sigma_spec.clone(),
            bstar: (&env.bstar).into(),
            delta0: env.delta0,
            noise_sigma: env.noise_sigma,
            target_radius: env.target_radius,
            eps: env.eps,
            tasks: env.tasks.iter().map(|t| TaskParamsDoc { delta: (&t.delta).into(), w: vec_of(&t.w) }).collect(),
            nn: env.nn.as_ref().map(|nn| NnStructureDoc {
                activation: nn.activation,
                scale: nn.scale,
                w0: vec_of(&nn.w0),
                directions: nn.directions.iter().map(MatrixData::from).collect(),
            }),
            seed: env.seed,
        }
    }
}

impl EnvDoc {
    pub fn to_env(&self) -> Result<TaskEnvironment> {
        if self.tasks.len() != self.num_tasks {
            return Err(invalid("task count does not match num_tasks"));
        }
        let tasks = self
            .tasks
            .iter()
            .map(|t| Ok(TaskParams { delta: t.delta.to_matrix()?, w: DVector::from_vec(t.w.clone()) }))
            .collect::<Result<Vec<_>>>()?;
        let nn = match &self.nn {
            Some(doc) => Some(NnStructure {
                activation: doc.activation,
                scale: doc.scale,
                w0: DVector::from_vec(doc.w0.clone()),
                directions: doc.directions.iter().map(|m| m.to_matrix()).collect::<Result<Vec<_>>>()?,
            }),
            None => None,
        };
        Ok(TaskEnvironment {
            family: self.family,
            d: self.d,
            k: self.k,
            sigma: self.sigma_spec.build(self.d)?,
            sigma_spec: self.sigma_spec.clone(),
            bstar: self.bstar.to_matrix()?,
            delta0: self.delta0,
            noise_sigma: self.noise_sigma,
            tasks,
            target_radius: self.target_radius,
            eps: self.eps,
            nn,
            seed: self.seed,
        })
    }
}

pub fn env_to_json(env: &TaskEnvironment) -> Result<String> {
    to_json_string(&EnvDoc::from(env))
}

pub fn write_env(path: &Path, env: &TaskEnvironment) -> Result<()> {
    write_json(path, &EnvDoc::from(env))
}

pub fn read_env(path: &Path) -> Result<TaskEnvironment> {
    read_json::<EnvDoc>(path)?.to_env()
}

/// Header `x0,…,x{d−1},y`, one sample per line.
pub fn write_dataset_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    let d = ds.d();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut row: Vec<String> = (0..d).map(|j| ds.x[(i, j)].to_string()).collect();
        row.push(ds.y[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path, task_id: TaskId, seed: u64) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    if cols < 2 {
        return Err(invalid("dataset CSV needs at least one input column and a label"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(invalid("ragged dataset CSV"));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| invalid(format!("bad number {field:?}")))?;
            if j + 1 == cols {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let n = ys.len();
    Ok(Dataset { x: DMatrix::from_row_slice(n, cols - 1, &xs), y: DVector::from_vec(ys), task_id, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDoc {
    pub schema_version: u32,
    pub objective: SourceObjective,
    pub b0: MatrixData,
    pub b_raw: MatrixData,
    pub per_task: Vec<TaskParamsDoc>,
    pub train_loss: f64,
    pub data_loss: f64,
    pub restarts_used: usize,
    pub restart_losses: Vec<f64>,
    pub restart_index: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
    pub history: Vec<f64>,
}

impl From<&SourceSolution> for SourceDoc {
    fn from(s: &SourceSolution) -> Self {
        SourceDoc {
            schema_version: SCHEMA_VERSION,
            objective: s.objective,
            b0: (&s.b0).into(),
            b_raw: (&s.b_raw).into(),
            per_task: s.per_task.iter().map(|t| TaskParamsDoc { delta: (&t.delta).into(), w: vec_of(&t.w) }).collect(),
            train_loss: s.train_loss,
            data_loss: s.data_loss,
            restarts_used: s.restarts_used,
            restart_losses: s.restart_losses.clone(),
            restart_index: s.restart_index,
            converged: s.converged,
            grad_norm: s.grad_norm,
            lambda: s.lambda,
            gamma: s.gamma,
            seed: s.seed,
            history: s.history.clone(),
        }
    }
}

impl SourceDoc {
    pub fn to_solution(&self) -> Result<SourceSolution> {
        Ok(SourceSolution {
            objective: self.objective,
            b0: self.b0.to_matrix()?,
            b_raw: self.b_raw.to_matrix()?,
            per_task: self
                .per_task
                .iter()
                .map(|t| Ok(TaskParams { delta: t.delta.to_matrix()?, w: DVector::from_vec(t.w.clone()) }))
                .collect::<Result<Vec<_>>>()?,
            train_loss: self.train_loss,
            data_loss: self.data_loss,
            restarts_used: self.restarts_used,
            restart_losses: self.restart_losses.clone(),
            restart_index: self.restart_index,
            converged: self.converged,
            grad_norm: self.grad_norm,
            history: self.history.clone(),
            lambda: self.lambda,
            gamma: self.gamma,
            seed: self.seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnParamsDoc {
    pub b: MatrixData,
    pub w: Vec<f64>,
}

impl NnParamsDoc {
    fn from_params(p: &NnParams) -> Self {
        NnParamsDoc { b: (&p.b).into(), w: vec_of(&p.w) }
    }

    fn to_params(&self) -> Result<NnParams> {
        Ok(NnParams { b: self.b.to_matrix()?, w: DVector::from_vec(self.w.clone()) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTaskDoc {
    pub theta_star: Vec<f64>,
    pub w_star: Vec<f64>,
    pub delta_star: Vec<f64>,
    pub nn: Option<NnParamsDoc>,
}

impl From<&TargetTask> for TargetTaskDoc {
    fn from(t: &TargetTask) -> Self {
        TargetTaskDoc {
            theta_star: vec_of(&t.theta_star),
            w_star: vec_of(&t.w_star),
            delta_star: vec_of(&t.delta_star),
            nn: t.nn.as_ref().map(NnParamsDoc::from_params),
        }
    }
}

impl TargetTaskDoc {
    pub fn to_task(&self) -> Result<TargetTask> {
        Ok(TargetTask {
            theta_star: DVector::from_vec(self.theta_star.clone()),
            w_star: DVector::from_vec(self.w_star.clone()),
            delta_star: DVector::from_vec(self.delta_star.clone()),
            nn: self.nn.as_ref().map(|p| p.to_params()).transpose()?,
        })
    }
}

/// Fine-tuning result together with the target task it was fit to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneDoc {
    pub schema_version: u32,
    pub spec: AdaptSpec,
    pub theta_hat: Vec<f64>,
    pub delta: MatrixData,
    pub w: Vec<f64>,
    pub nn: Option<NnParamsDoc>,
    pub best_index: usize,
    pub best_loss: f64,
    pub eta: f64,
    pub beta_curv: f64,
    pub l_grad: f64,
    pub radius: f64,
    pub certificate: f64,
    pub losses: Vec<f64>,
    pub target: TargetTaskDoc,
    pub target_seed: u64,
}

impl FineTuneDoc {
    pub fn new(res: &FineTuneResult, target: &TargetTask, target_seed: u64) -> Self {
        FineTuneDoc {
            schema_version: SCHEMA_VERSION,
            spec: res.spec.clone(),
            theta_hat: vec_of(&res.theta_hat),
            delta: (&res.delta).into(),
            w: vec_of(&res.w),
            nn: res.nn.as_ref().map(NnParamsDoc::from_params),
            best_index: res.trace.best_index,
            best_loss: res.trace.best_loss(),
            eta: res.trace.eta,
            beta_curv: res.beta_curv,
            l_grad: res.l_grad,
            radius: res.radius,
            certificate: res.certificate,
            losses: res.trace.losses.clone(),
            target: target.into(),
            target_seed,
        }
    }

    pub fn nn_params(&self) -> Result<Option<NnParams>> {
        self.nn.as_ref().map(|p| p.to_params()).transpose()
    }
}

/// `iteration,loss,param_norm`; the norm column is empty when iterates were
/// not kept.
pub fn write_trace_csv(path: &Path, trace: &PgdTrace) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["iteration", "loss", "param_norm"])?;
    for (i, loss) in trace.losses.iter().enumerate() {
        let norm = trace.iterates.get(i).map(|x| x.norm().to_string()).unwrap_or_default();
        w.write_record([i.to_string(), loss.to_string(), norm])?;
    }
    w.flush()?;
    Ok(())
}
