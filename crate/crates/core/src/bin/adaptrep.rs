use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adaptrep::env_gen::Family;
use adaptrep::experiment::{reproduce, run_stage, ExperimentConfig, StageArgs, STAGES};
use adaptrep::source_train::SourceObjective;
use adaptrep::target_adapt::AdaptMode;
use adaptrep::validate::{run_all, ValidateOptions};

#[derive(Parser)]
#[command(
    name = "adaptrep",
    version,
    about = "Representation fine-tuning vs frozen representations: experiments and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the hard-case separation study and write CSV tables and SVG plots.
    Reproduce {
        /// JSON experiment config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Multiplies source tasks, replications and candidate tasks (floor 10).
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Print the per-cell summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run one pipeline stage: gen-env, train-source, finetune, hardcase-limit or eval.
    Run {
        stage: String,
        #[command(flatten)]
        args: StageFlags,
    },
    /// Run the invariant battery and print a table of margins.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Multiply the certified PGD step size (fault injection).
        #[arg(long, default_value_t = 1.0)]
        perturb_eta: f64,
        #[arg(long)]
        json: bool,
        /// Also write the report to DIR/validate.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct StageFlags {
    /// Directory holding the stage artifacts.
    #[arg(long, default_value = "artifacts")]
    out: PathBuf,
    /// JSON file of stage defaults (same keys as the flags, snake_case).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
    #[arg(long, value_parser = parse_family)]
    family: Option<Family>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    delta0: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    nn_scale: Option<f64>,
    #[arg(long)]
    env: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    finetune: Option<PathBuf>,
    #[arg(long, value_parser = parse_objective)]
    objective: Option<SourceObjective>,
    #[arg(long)]
    n_s: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AdaptMode>,
    #[arg(long)]
    n_t: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    n_mc: Option<usize>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    let norm = s.replace('_', "-");
    serde_json::from_value(serde_json::Value::String(norm)).map_err(|e| e.to_string())
}

fn parse_family(s: &str) -> Result<Family, String> {
    parse_enum(s)
}

fn parse_objective(s: &str) -> Result<SourceObjective, String> {
    parse_enum(s)
}

fn parse_mode(s: &str) -> Result<AdaptMode, String> {
    parse_enum(s)
}

#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct StageFile {
    family: Option<Family>,
    d: Option<usize>,
    k: Option<usize>,
    tasks: Option<usize>,
    delta0: Option<f64>,
    noise: Option<f64>,
    eps: Option<f64>,
    nn_scale: Option<f64>,
    objective: Option<SourceObjective>,
    n_s: Option<usize>,
    restarts: Option<usize>,
    mode: Option<AdaptMode>,
    n_t: Option<usize>,
    iterations: Option<usize>,
    r: Option<f64>,
    kappa: Option<f64>,
    n_mc: Option<usize>,
}

impl StageFlags {
    fn build(&self) -> adaptrep::Result<StageArgs> {
        let file: StageFile = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => StageFile::default(),
        };
        let mut a = StageArgs::new(&self.out);
        a.seed = self.seed;
        macro_rules! pick {
            ($field:ident, $flag:ident) => {
                if let Some(v) = self.$flag.or(file.$flag) {
                    a.$field = v;
                }
            };
        }
        pick!(family, family);
        pick!(d, d);
        pick!(k, k);
        pick!(num_tasks, tasks);
        pick!(delta0, delta0);
        pick!(noise_sigma, noise);
        pick!(nn_scale, nn_scale);
        pick!(objective, objective);
        pick!(n_s, n_s);
        pick!(restarts, restarts);
        pick!(mode, mode);
        pick!(n_t, n_t);
        pick!(iterations, iterations);
        pick!(r, r);
        pick!(kappa, kappa);
        pick!(n_mc, n_mc);
        a.eps = self.eps.or(file.eps);
        a.env = self.env.clone();
        a.source = self.source.clone();
        a.finetune = self.finetune.clone();
        Ok(a)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> adaptrep::Result<ExitCode> {
    match cli.command {
        Command::Reproduce { config, scale, seed, out, json } => {
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::from_json_file(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(f) = scale {
                cfg = cfg.scaled(f)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.output_dir = Some(out.display().to_string());
            let res = reproduce(&cfg, &out)?;
            adaptrep::io::write_json(&out.join("config.json"), &cfg)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&res.cells)?);
            } else {
                println!("config hash {}", res.config_hash);
                println!(
                    "{:<13} {:>5} {:>5} {:>10} {:>12} {:>12}",
                    "method", "d", "n_T", "sine", "median risk", "mean risk"
                );
                for c in &res.cells {
                    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
                    println!(
                        "{:<13} {:>5} {:>5} {:>10} {:>12} {:>12}",
                        c.method,
                        c.d,
                        c.n_t,
                        f(c.sine_dist),
                        f(c.median_risk),
                        f(c.mean_risk)
                    );
                }
                for p in &res.files {
                    println!("wrote {}", p.display());
                }
            }
            let failures = res.records.iter().filter(|r| r.error.is_some()).count();
            if failures > 0 {
                eprintln!("{failures} cells recorded errors");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { stage, args } => {
            if !STAGES.contains(&stage.as_str()) {
                return Err(adaptrep::Error::InvalidArgument(format!(
                    "unknown stage {stage:?}; expected one of {}",
                    STAGES.join(", ")
                )));
            }
            let a = args.build()?;
            let files = run_stage(&stage, &a)?;
            if args.json {
                let list: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
                println!("{}", serde_json::to_string_pretty(&list)?);
            } else {
                for p in &files {
                    println!("wrote {}", p.display());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { seed, perturb_eta, json, out } => {
            let report = run_all(&ValidateOptions { seed, perturb_eta })?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                adaptrep::io::write_json(&dir.join("validate.json"), &report)?;
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.table());
            }
            Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}
