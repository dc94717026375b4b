//! The four-step run: probable data, union sizes, sample size, solve.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{build_d_alpha, eta_rule_of_thumb, underlying_set, DataSet, Norm, ScenarioSet};
use crate::dep::{solve, DepInstance, Solution, SolverConfig};
use crate::learn::predict_r_bar;
use crate::problem::ProblemSpec;
use crate::rng::PRNG_NAME;
use crate::sample_size::{draw_d_emb, rho_exact, to_f64, min_z, RhoInput};
use crate::sdds::{enumerate_sdds, index_subsets, SddsFamily, MAX_ENUMERATION};
use crate::store::{now_unix, RBarSource, RunRecord, RunStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Exact,
    Learned,
}

fn default_k() -> usize {
    5
}

/// Paths are relative to the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub problem: PathBuf,
    pub data: PathBuf,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Constant `c` of the rule-of-thumb bandwidth, used instead of `eta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_rule: Option<f64>,
    #[serde(default)]
    pub norm: Norm,
    pub target: f64,
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    pub mode: Mode,
    #[serde(default = "default_k")]
    pub k: usize,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        match (self.eta, self.eta_rule) {
            (Some(_), Some(_)) => return bad("give either eta or eta_rule, not both"),
            (None, None) => return bad("one of eta or eta_rule is required"),
            _ => {}
        }
        if !(self.target > 0.0 && self.target <= 1.0) {
            return bad("target must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        self.solver
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    DAlpha,
    Family,
    SampleSize,
    Embed,
    Solve,
    Store,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::DAlpha => "d-alpha",
            Stage::Family => "family",
            Stage::SampleSize => "sample-size",
            Stage::Embed => "embed",
            Stage::Solve => "solve",
            Stage::Store => "store",
        })
    }
}

#[derive(Debug, Error)]
pub enum StageFailure {
    #[error("no probable data points")]
    EmptyProbableSet,
    #[error("exact mode enumerates at most {MAX_ENUMERATION} scenarios, got {0}")]
    ExactModeTooLarge(usize),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

fn at<E: std::error::Error + Send + Sync + 'static>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: Box::new(e),
    }
}

fn config<E: fmt::Display>(what: &str) -> impl FnOnce(E) -> PipelineError + '_ {
    move |e| PipelineError::Config(format!("{what}: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbableSummary {
    pub alpha: f64,
    pub eta: f64,
    pub norm: Norm,
    pub size: usize,
    pub scenarios: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeSummary {
    pub target: f64,
    pub z: usize,
    pub rho: f64,
    pub rho_exact: String,
    pub monotone: bool,
}

/// Everything a run produced. Contains no clock values, so identical
/// inputs give byte-identical JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub prng: String,
    pub problem_digest: String,
    pub dataset_digest: String,
    pub d_alpha: ProbableSummary,
    pub r_bar_source: RBarSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<SddsFamily>,
    pub r_bar: Vec<(usize, usize)>,
    pub sample_size: SampleSizeSummary,
    pub embedded: Vec<Vec<f64>>,
    pub fingerprint: SolverConfig,
    pub solution: Solution,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(config(&path.display().to_string()))?;
    serde_json::from_str(&text).map_err(config(&path.display().to_string()))
}

/// Loads the config at `path` and runs it with paths resolved next to it.
pub fn run_pipeline_file(path: &Path, store: Option<&RunStore>) -> Result<(PipelineReport, RunRecord), PipelineError> {
    let cfg = load_config(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    run_pipeline(&cfg, base, store)
}

pub fn run_pipeline(
    cfg: &PipelineConfig,
    base: &Path,
    store: Option<&RunStore>,
) -> Result<(PipelineReport, RunRecord), PipelineError> {
    cfg.validate()?;
    let problem_path = base.join(&cfg.problem);
    let spec = ProblemSpec::load(&problem_path).map_err(config(&problem_path.display().to_string()))?;
    let data_path = base.join(&cfg.data);
    let data = DataSet::load_csv(&data_path).map_err(config(&data_path.display().to_string()))?;
    if data.dim() != spec.u {
        return Err(PipelineError::Config(format!(
            "data has {} components, problem expects {}",
            data.dim(),
            spec.u
        )));
    }
    let fingerprint = {
        let mut f = cfg.solver.clone();
        f.start = Some(cfg.solver.start_for(&spec).map_err(config("solver"))?);
        f
    };

    // 1. probable data
    let eta = match (cfg.eta, cfg.eta_rule) {
        (Some(eta), _) => eta,
        (None, Some(c)) => eta_rule_of_thumb(&data, c).map_err(at(Stage::DAlpha))?,
        (None, None) => unreachable!("validated"),
    };
    let d_alpha = build_d_alpha(&data, cfg.alpha, eta, cfg.norm).map_err(at(Stage::DAlpha))?;
    if d_alpha.is_empty() {
        return Err(at(Stage::DAlpha)(StageFailure::EmptyProbableSet));
    }
    let u_alpha = underlying_set(&d_alpha).map_err(at(Stage::DAlpha))?;
    let d_size = u_alpha.len();

    // 2. union sizes
    let (family, r_bar, source) = match cfg.mode {
        Mode::Exact => {
            if d_size > MAX_ENUMERATION {
                return Err(at(Stage::Family)(StageFailure::ExactModeTooLarge(d_size)));
            }
            let fam = enumerate_sdds(&spec, &u_alpha, &cfg.solver).map_err(at(Stage::Family))?;
            let pairs = fam.r_bar.iter().map(|e| (e.subset.len(), e.r_bar)).collect();
            (Some(fam), pairs, RBarSource::Enumerated)
        }
        Mode::Learned => {
            let store = store.ok_or_else(|| PipelineError::Config("learned mode needs a store".into()))?;
            let history = store.query(&spec.digest()).map_err(at(Stage::Family))?;
            let values = predict_r_bar(&history.records, &spec.delta, cfg.k).map_err(at(Stage::Family))?;
            let r = (values.len() + 1).trailing_zeros() as usize;
            let pairs = index_subsets(r).iter().map(|s| s.len()).zip(values).collect();
            (None, pairs, RBarSource::Predicted)
        }
    };

    // 3. sample size and embedding
    let input = RhoInput::new(d_size, r_bar).map_err(at(Stage::SampleSize))?;
    let m = min_z(&input, cfg.target).map_err(at(Stage::SampleSize))?;
    let exact = rho_exact(&input, m.z).map_err(at(Stage::SampleSize))?;
    let embedded = if m.z == 0 {
        ScenarioSet {
            scenarios: Vec::new(),
            counts: Vec::new(),
        }
    } else {
        let emb = draw_d_emb(&d_alpha, m.z, cfg.seed).map_err(at(Stage::Embed))?;
        underlying_set(&emb).map_err(at(Stage::Embed))?
    };

    // 4. solve
    let inst = DepInstance::from_scenarios(Arc::new(spec.clone()), embedded.clone()).map_err(at(Stage::Solve))?;
    let solution = solve(&inst, &cfg.solver)
        .and_then(Solution::ensure_optimal)
        .map_err(at(Stage::Solve))?;

    let report = PipelineReport {
        config: cfg.clone(),
        prng: PRNG_NAME.to_owned(),
        problem_digest: spec.digest(),
        dataset_digest: data.digest(),
        d_alpha: ProbableSummary {
            alpha: cfg.alpha,
            eta,
            norm: cfg.norm,
            size: d_alpha.len(),
            scenarios: u_alpha.scenarios.iter().map(|p| p.values.clone()).collect(),
            counts: u_alpha.counts.clone(),
        },
        r_bar_source: source,
        family,
        sample_size: SampleSizeSummary {
            target: cfg.target,
            z: m.z,
            rho: to_f64(&exact),
            rho_exact: exact.to_string(),
            monotone: m.monotone,
        },
        r_bar: input.r_bar.clone(),
        embedded: embedded.scenarios.iter().map(|p| p.values.clone()).collect(),
        fingerprint: fingerprint.clone(),
        solution,
    };
    let record = RunRecord {
        problem_digest: report.problem_digest.clone(),
        delta: spec.delta.clone(),
        r_bar: input.r_bar.iter().map(|&(_, r)| r).collect(),
        family_size: (input.r_bar.len() + 1).trailing_zeros() as usize,
        r_bar_source: source,
        fingerprint,
        seed: cfg.seed,
        prng: PRNG_NAME.to_owned(),
        alpha: cfg.alpha,
        eta,
        z: m.z,
        x_star: report.solution.x_star.clone(),
        objective: report.solution.objective_value,
        timestamp: now_unix(),
        dataset_digest: report.dataset_digest.clone(),
    };
    if let Some(store) = store {
        store.append(&record).map_err(at(Stage::Store))?;
    }
    Ok((report, record))
}
