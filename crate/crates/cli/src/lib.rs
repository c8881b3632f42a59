//! Library behind the `drnets` binary: simulate datasets, run the doubly robust estimators
//! on CSV files, and run the packaged Monte Carlo diagnostics.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 I/O error, 4 estimation failure,
//! 5 diagnostic threshold failure.

pub mod config;
pub mod io;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use drnets::estimators::{estimate_ate, estimate_cate, estimate_cde, estimate_dte};
use drnets::simlab::{self, gen_cate, gen_dte, Misspecification};

use config::{RunConfig, Study};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Estimation(String),
    Threshold(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Estimation(_) => 4,
            CliError::Threshold(_) => 5,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Estimation(m) | CliError::Threshold(m) => m,
        }
    }
}

impl From<drnets::Error> for CliError {
    fn from(e: drnets::Error) -> Self {
        use drnets::Error as E;
        match e {
            E::Config(_) | E::Input(_) => CliError::Usage(e.to_string()),
            E::Io(_) | E::Json(_) => CliError::Io(e.to_string()),
            _ => CliError::Estimation(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "drnets", version, about = "Doubly robust estimation with nested neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Draw a dataset from a synthetic design and write it as CSV with a JSON sidecar.
    Simulate(Flags),
    /// Run an estimator on a CSV dataset.
    Estimate(Flags),
    /// Run a Monte Carlo study: orthogonality, coverage, rate_slope or double_robustness.
    Diagnose {
        study: String,
        #[command(flatten)]
        flags: Flags,
    },
}

/// Flags shared by every command; values given here override `--config`.
#[derive(Args, Clone, Debug, Default)]
pub struct Flags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// One of ate, cate, dte, cde.
    #[arg(long)]
    pub estimand: Option<String>,
    #[arg(long)]
    pub dgp: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of cross-fitting folds.
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// CSV of covariate rows at which to evaluate a CATE estimate.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Perturbation scale of the orthogonality study.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Controlled-direct-effect target `t,m`.
    #[arg(long)]
    pub target: Option<String>,
    /// JSON run configuration, or any output of this tool.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Runs one command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Simulate(f) => simulate(&f),
        Command::Estimate(f) => estimate(&f),
        Command::Diagnose { study, flags } => diagnose(&study, &flags),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("DRNETS_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("DRNETS_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))
}

fn emit(out: Option<&Path>, value: &Value) -> Result<(), CliError> {
    match out {
        Some(p) => io::write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?);
            Ok(())
        }
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Io(e.to_string()))
}

fn simulate(flags: &Flags) -> Result<(), CliError> {
    let cfg = RunConfig::resolve("simulate", flags)?;
    let dgp = cfg.dgp_config()?;
    let n = cfg.n.filter(|n| *n >= 1).ok_or_else(|| CliError::Usage("--n must be at least 1".into()))?;
    let out = cfg.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let seed = cfg.seed_or_default();
    let mut meta = json!({ "config": to_value(&cfg)?, "seed": seed, "n": n, "dgp": to_value(&dgp)? });
    if dgp.kind.is_sequential() {
        let (data, truth) = gen_dte(&dgp, n, seed)?;
        io::write_dte(&out, &data)?;
        meta["theta"] = json!(truth.theta);
        meta["path_means"] = json!(truth.path_means);
    } else {
        let (data, truth) = gen_cate(&dgp, n, seed)?;
        io::write_cate(&out, &data)?;
        meta["theta"] = json!(truth.ate);
    }
    io::write_json(&sidecar(&out), &meta)
}

/// `data.csv` → `data.json`.
pub fn sidecar(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn estimate(flags: &Flags) -> Result<(), CliError> {
    let cfg = RunConfig::resolve("estimate", flags)?;
    let data = cfg.data.clone().ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let estimand = cfg.estimand.clone().ok_or_else(|| CliError::Usage("--estimand is required".into()))?;
    let (seed, k, alpha) = (cfg.seed_or_default(), cfg.k_or_default(), cfg.alpha_or_default());
    let spec = cfg.learners_or_default();
    let mut out = json!({ "config": to_value(&cfg)? });
    match estimand.as_str() {
        "ate" => out["report"] = to_value(&estimate_ate(&io::read_cate(&data)?, &spec, k, alpha, seed)?)?,
        "dte" => out["report"] = to_value(&estimate_dte(&io::read_dte(&data, false)?, &spec, k, alpha, seed)?)?,
        "cde" => {
            let target = cfg.target_or_default();
            out["report"] = to_value(&estimate_cde(&io::read_dte(&data, true)?, target, &spec, k, alpha, seed)?)?;
        }
        "cate" => {
            let est = estimate_cate(&io::read_cate(&data)?, &spec, &cfg.final_stage_or_default(), seed)?;
            if let Some(probe) = &cfg.probe {
                let points = io::read_probe(probe)?;
                let dim = est.model_half1.input_dim();
                if let Some(bad) = points.iter().position(|p| p.len() != dim) {
                    return Err(CliError::Usage(format!("probe row {}: expected {dim} covariates", bad + 1)));
                }
                out["predictions"] = json!(points.iter().map(|p| est.predict(p)).collect::<Vec<f64>>());
            }
            out["estimate"] = to_value(&est)?;
        }
        other => return Err(CliError::Usage(format!("unknown estimand `{other}` (expected ate, cate, dte or cde)"))),
    }
    emit(cfg.out.as_deref(), &out)
}

fn diagnose(study: &str, flags: &Flags) -> Result<(), CliError> {
    let study = Study::parse(study)?;
    let cfg = RunConfig::resolve_study(study, flags)?;
    let seed = cfg.seed_or_default();
    let dgp = cfg.dgp_config()?;
    let mut out = json!({ "config": to_value(&cfg)?, "study": study.name(), "seed": seed });
    let passed = match study {
        Study::Orthogonality => {
            let r =
                simlab::orthogonality_diagnostic(&dgp, cfg.scale.unwrap_or_default(), cfg.n.unwrap_or_default(), seed)?;
            out["mean_delta1"] = json!(r.full.mean_delta1);
            out["mean_delta2"] = json!(r.full.mean_delta2);
            out["result"] = to_value(&r)?;
            r.passed
        }
        Study::Coverage => {
            let st = cfg.coverage_study(&dgp);
            let r = simlab::coverage_study(&dgp, &st, seed)?;
            let tol = config::coverage_tolerance(st.alpha, st.reps);
            out["coverage"] = json!(r.coverage);
            out["tolerance"] = json!(tol);
            let ok = (r.coverage - (1.0 - st.alpha)).abs() <= tol;
            out["result"] = to_value(&r)?;
            ok
        }
        Study::RateSlope => {
            let grid = cfg.n_grid.clone().unwrap_or_default();
            let r = simlab::rate_slope_study(
                &dgp,
                &cfg.learners_or_default(),
                &cfg.final_stage_or_default(),
                &grid,
                cfg.reps.unwrap_or_default(),
                seed,
            )?;
            out["slope"] = json!(r.slope);
            out["result"] = to_value(&r)?;
            r.slope <= config::RATE_SLOPE_THRESHOLD
        }
        Study::DoubleRobustness => {
            let grid = cfg.n_grid.clone().unwrap_or_default();
            let (spec, fin) = (cfg.learners_or_default(), cfg.final_stage_or_default());
            let arms = Misspecification::ALL
                .into_iter()
                .map(|m| {
                    simlab::double_robustness_study(&dgp, m, &spec, &fin, &grid, cfg.reps.unwrap_or_default(), seed)
                })
                .collect::<drnets::Result<Vec<_>>>()?;
            let ok = arms.iter().all(|a| a.passed());
            out["arms"] = to_value(&arms)?;
            ok
        }
    };
    out["passed"] = json!(passed);
    emit(cfg.out.as_deref(), &out)?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Threshold(format!("{} study failed its acceptance threshold", study.name())))
    }
}
