//! Run configuration: built-in defaults, then a JSON file, then explicit flags.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use drnets::estimators::{LearnerSpec, DEFAULT_FOLDS};
use drnets::nnet::MlpConfig;
use drnets::simlab::{presets, CoverageStudy, CoverageTarget, DgpConfig, DgpKind};

use crate::{CliError, Flags};

pub const RATE_SLOPE_THRESHOLD: f64 = -0.3;

/// Half-width of the accepted coverage band around `1 - alpha`: at least 0.03, widened to
/// 2.7 binomial standard errors when replications are few or `alpha` is large.
pub fn coverage_tolerance(alpha: f64, reps: usize) -> f64 {
    (2.7 * (alpha * (1.0 - alpha) / reps as f64).sqrt()).max(0.03)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    Orthogonality,
    Coverage,
    RateSlope,
    DoubleRobustness,
}

impl Study {
    pub fn parse(name: &str) -> Result<Self, CliError> {
        match name {
            "orthogonality" => Ok(Study::Orthogonality),
            "coverage" => Ok(Study::Coverage),
            "rate_slope" => Ok(Study::RateSlope),
            "double_robustness" => Ok(Study::DoubleRobustness),
            other => Err(CliError::Usage(format!(
                "unknown study `{other}` (expected orthogonality, coverage, rate_slope or double_robustness)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Study::Orthogonality => "orthogonality",
            Study::Coverage => "coverage",
            Study::RateSlope => "rate_slope",
            Study::DoubleRobustness => "double_robustness",
        }
    }
}

/// Every option of every command. Outputs embed the resolved value, and passing an output
/// back through `--config` reproduces it.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimand: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dgp: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    /// Controlled-direct-effect target `(t, m)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<(u8, i64)>,
    /// Full design; its kind is replaced by `dgp` when both are given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dgp_config: Option<DgpConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learners: Option<LearnerSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_stage: Option<MlpConfig<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_grid: Option<Vec<usize>>,
}

fn parse_target(s: &str) -> Result<(u8, i64), CliError> {
    let bad = || CliError::Usage(format!("--target must look like `1,0`, got `{s}`"));
    let (t, m) = s.split_once(',').ok_or_else(bad)?;
    let t: u8 = t.trim().parse().ok().filter(|t| *t <= 1).ok_or_else(bad)?;
    let m: i64 = m.trim().parse().map_err(|_| bad())?;
    Ok((t, m))
}

impl RunConfig {
    fn load(path: &PathBuf) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut v: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if let Some(inner) = v.get_mut("config") {
            v = inner.take();
        }
        serde_json::from_value(v).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    fn overlay(&mut self, f: &Flags) -> Result<(), CliError> {
        macro_rules! take {
            ($($field:ident),*) => { $( if f.$field.is_some() { self.$field = f.$field.clone(); } )* };
        }
        take!(seed, out, data, estimand, dgp, n, k, alpha, reps, probe, scale);
        if let Some(t) = &f.target {
            self.target = Some(parse_target(t)?);
        }
        if let Some(name) = &self.dgp {
            let kind = DgpKind::parse(name).ok_or_else(|| CliError::Usage(format!("unknown DGP `{name}`")))?;
            if let Some(c) = &mut self.dgp_config {
                c.kind = kind;
            }
        }
        Ok(())
    }

    pub fn resolve(command: &str, flags: &Flags) -> Result<Self, CliError> {
        let mut cfg = match &flags.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.overlay(flags)?;
        cfg.seed.get_or_insert(0);
        match command {
            "simulate" => {
                if cfg.dgp.is_none() && cfg.dgp_config.is_none() {
                    return Err(CliError::Usage("--dgp is required".into()));
                }
                let dgp = cfg.dgp_config()?;
                cfg.dgp = Some(dgp.kind.name().into());
                cfg.dgp_config = Some(dgp);
            }
            "estimate" => {
                cfg.k.get_or_insert(DEFAULT_FOLDS);
                cfg.alpha.get_or_insert(0.05);
                cfg.learners.get_or_insert_with(LearnerSpec::lasso);
                match cfg.estimand.as_deref() {
                    Some("cde") => {
                        cfg.target.get_or_insert((1, 1));
                    }
                    Some("cate") => {
                        cfg.final_stage.get_or_insert_with(MlpConfig::default);
                    }
                    _ => {}
                }
            }
            _ => {}
        }
        Ok(cfg)
    }

    pub fn resolve_study(study: Study, flags: &Flags) -> Result<Self, CliError> {
        let mut cfg = Self::resolve("diagnose", flags)?;
        let default_dgp = match study {
            Study::Orthogonality => presets::orthogonality_dgp(),
            Study::Coverage => presets::coverage_dgp(),
            Study::RateSlope => presets::rate_slope_dgp(),
            Study::DoubleRobustness => presets::double_robustness_dgp(),
        };
        let dgp = match (&cfg.dgp_config, &cfg.dgp) {
            (Some(c), _) => c.clone(),
            (None, Some(name)) if name != default_dgp.kind.name() => {
                DgpConfig::new(DgpKind::parse(name).ok_or_else(|| CliError::Usage(format!("unknown DGP `{name}`")))?)
            }
            _ => default_dgp,
        };
        cfg.dgp = Some(dgp.kind.name().into());
        cfg.dgp_config = Some(dgp);
        match study {
            Study::Orthogonality => {
                cfg.n.get_or_insert(presets::ORTHOGONALITY_N);
                cfg.scale.get_or_insert(presets::ORTHOGONALITY_SCALE);
            }
            Study::Coverage => {
                let d = presets::coverage_study();
                cfg.n.get_or_insert(d.n);
                cfg.reps.get_or_insert(d.reps);
                cfg.k.get_or_insert(d.k);
                cfg.alpha.get_or_insert(d.alpha);
                cfg.learners.get_or_insert(d.spec);
            }
            Study::RateSlope => {
                cfg.n_grid.get_or_insert_with(presets::rate_slope_grid);
                cfg.reps.get_or_insert(presets::RATE_SLOPE_REPS);
                cfg.learners.get_or_insert_with(LearnerSpec::lasso);
                cfg.final_stage.get_or_insert_with(presets::cate_final_stage);
            }
            Study::DoubleRobustness => {
                cfg.n_grid.get_or_insert_with(presets::double_robustness_grid);
                cfg.reps.get_or_insert(presets::DOUBLE_ROBUSTNESS_REPS);
                cfg.learners.get_or_insert_with(LearnerSpec::lasso);
                cfg.final_stage.get_or_insert_with(presets::cate_final_stage);
            }
        }
        Ok(cfg)
    }

    pub fn dgp_config(&self) -> Result<DgpConfig, CliError> {
        let c = match (&self.dgp_config, &self.dgp) {
            (Some(c), _) => c.clone(),
            (None, Some(name)) => {
                DgpConfig::new(DgpKind::parse(name).ok_or_else(|| CliError::Usage(format!("unknown DGP `{name}`")))?)
            }
            (None, None) => return Err(CliError::Usage("--dgp is required".into())),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn seed_or_default(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn k_or_default(&self) -> usize {
        self.k.unwrap_or(DEFAULT_FOLDS)
    }

    pub fn alpha_or_default(&self) -> f64 {
        self.alpha.unwrap_or(0.05)
    }

    pub fn learners_or_default(&self) -> LearnerSpec {
        self.learners.clone().unwrap_or_else(LearnerSpec::lasso)
    }

    pub fn final_stage_or_default(&self) -> MlpConfig<f64> {
        self.final_stage.clone().unwrap_or_default()
    }

    pub fn target_or_default(&self) -> (bool, i64) {
        let (t, m) = self.target.unwrap_or((1, 1));
        (t == 1, m)
    }

    pub fn coverage_study(&self, dgp: &DgpConfig) -> CoverageStudy {
        let d = presets::coverage_study();
        CoverageStudy {
            target: if dgp.kind.is_sequential() { CoverageTarget::Dte } else { CoverageTarget::Ate },
            spec: self.learners.clone().unwrap_or(d.spec),
            k: self.k.unwrap_or(d.k),
            reps: self.reps.unwrap_or(d.reps),
            n: self.n.unwrap_or(d.n),
            alpha: self.alpha.unwrap_or(d.alpha),
        }
    }
}
