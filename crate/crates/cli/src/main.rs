use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde_json::json;

use desp_core::data::{build_d_alpha, eta_rule_of_thumb, underlying_set, DataError, DataSet, Norm};
use desp_core::density::{alpha_from_beta, contour_grid, DensityError, ProductDensity, QuadratureSettings};
use desp_core::dep::{build_dep, solve, DepError, DepInstance, RunReport, SolverConfig, SolverId, Status};
use desp_core::pipeline::{run_pipeline_file, PipelineError};
use desp_core::problem::ProblemSpec;
use desp_core::sample_size::{monte_carlo_rho, rho_exact, to_f64, RhoInput, SampleSizeError, SampleSizePlan};
use desp_core::sdds::{enumerate_sdds, SddsError, SddsFamily, MAX_ENUMERATION};
use desp_core::store::RunStore;

#[derive(Parser)]
#[command(name = "desp", version, about = "Probable-event constrained optimization by data embedding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Keep the probable data points of a CSV dataset.
    Dalpha {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long, conflicts_with = "eta_rule", required_unless_present = "eta_rule")]
        eta: Option<f64>,
        /// Rule-of-thumb bandwidth with constant C.
        #[arg(long, value_name = "C", num_args = 0..=1, default_missing_value = "1.06")]
        eta_rule: Option<f64>,
        #[arg(long, value_enum, default_value = "l2")]
        norm: NormArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate rho(z) for a family and find the smallest z reaching a target.
    Samplesize {
        #[arg(long)]
        family: PathBuf,
        #[arg(long)]
        dalpha_size: usize,
        #[arg(long)]
        target: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare rho(z) with a Monte Carlo estimate.
    ValidateRho {
        #[arg(long)]
        family: PathBuf,
        #[arg(long)]
        dalpha_size: usize,
        #[arg(long)]
        z: usize,
        #[arg(long)]
        trials: u64,
        #[arg(long)]
        seed: u64,
    },
    /// Solve the data-embedded program for one embedding.
    Solve {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        embed: PathBuf,
        #[arg(long)]
        solver: String,
        /// Solver settings as JSON; `--solver` overrides its solver id.
        #[arg(long)]
        solver_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enumerate the support-determining subsets of a small scenario set.
    Sdds {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long, default_value = "builtin-penalty")]
        solver: String,
        #[arg(long)]
        solver_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline from a config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Density threshold whose superlevel set carries mass 1 - beta.
    AlphaFromBeta {
        #[arg(long)]
        density: PathBuf,
        #[arg(long)]
        beta: f64,
        /// Rescale every component to unit mass first.
        #[arg(long)]
        normalize: bool,
    },
    /// Grid of (xi1, xi2, density, member) rows for a 2-D density.
    Contour {
        #[arg(long)]
        density: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 201)]
        resolution: usize,
        #[arg(long, default_value_t = 4.0)]
        scales: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum NormArg {
    L2,
    Linf,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Norm {
        match n {
            NormArg::L2 => Norm::L2,
            NormArg::Linf => Norm::Linf,
        }
    }
}

/// Exit code plus message.
struct Failure {
    code: u8,
    message: String,
}

const STAGE: u8 = 2;
const CONFIG: u8 = 3;

fn config_err(what: impl Display) -> Failure {
    Failure {
        code: CONFIG,
        message: what.to_string(),
    }
}

fn stage_err(what: impl Display) -> Failure {
    Failure {
        code: STAGE,
        message: what.to_string(),
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::EmptyData => stage_err(e),
            _ => config_err(e),
        }
    }
}

impl From<DensityError> for Failure {
    fn from(e: DensityError) -> Self {
        match e {
            DensityError::NotNormalized { .. } | DensityError::DegenerateDensity => stage_err(e),
            _ => config_err(e),
        }
    }
}

impl From<DepError> for Failure {
    fn from(e: DepError) -> Self {
        match e {
            DepError::Infeasible { .. } | DepError::MaxIterations { .. } | DepError::Eval(_) => stage_err(e),
            _ => config_err(e),
        }
    }
}

impl From<SddsError> for Failure {
    fn from(e: SddsError) -> Self {
        match e {
            SddsError::Io(_) | SddsError::Json(_) | SddsError::FingerprintMismatch => config_err(e),
            _ => stage_err(e),
        }
    }
}

impl From<SampleSizeError> for Failure {
    fn from(e: SampleSizeError) -> Self {
        match e {
            SampleSizeError::AssumptionViolated { .. } | SampleSizeError::NoFeasibleZ { .. } => stage_err(e),
            _ => config_err(e),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => config_err(e),
            PipelineError::Stage { .. } => stage_err(e),
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn load_problem(path: &Path) -> Result<ProblemSpec, Failure> {
    ProblemSpec::load(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn solver_config(id: &str, file: Option<&Path>) -> Result<SolverConfig, Failure> {
    let solver_id = SolverId::parse(id).ok_or_else(|| config_err(format!("unknown solver {id:?}")))?;
    let mut cfg = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => SolverConfig::default(),
    };
    cfg.solver_id = solver_id;
    cfg.validate()?;
    Ok(cfg)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Dalpha {
            data,
            alpha,
            eta,
            eta_rule,
            norm,
            out,
        } => {
            let d = DataSet::load_csv(&data)?;
            let eta = match (eta, eta_rule) {
                (Some(e), _) => e,
                (None, Some(c)) => eta_rule_of_thumb(&d, c)?,
                (None, None) => return Err(config_err("one of --eta or --eta-rule is required")),
            };
            let kept = build_d_alpha(&d, alpha, eta, norm.into())?;
            kept.save_csv(&out)?;
            let distinct = if kept.is_empty() { 0 } else { underlying_set(&kept)?.len() };
            println!("{}", json!({"size": kept.len(), "distinct": distinct, "eta": eta}));
        }
        Command::Samplesize {
            family,
            dalpha_size,
            target,
            seed,
            out,
        } => {
            let fam = SddsFamily::load(&family)?;
            let input = RhoInput::from_family(&fam, dalpha_size)?;
            let plan = SampleSizePlan::build(&input, target, seed)?;
            write(&out, &plan.to_json())?;
            println!("{}", json!({"z_min": plan.z_min, "monotone": plan.monotone}));
        }
        Command::ValidateRho {
            family,
            dalpha_size,
            z,
            trials,
            seed,
        } => {
            let fam = SddsFamily::load(&family)?;
            let input = RhoInput::from_family(&fam, dalpha_size)?;
            let exact = rho_exact(&input, z)?;
            let rho = to_f64(&exact);
            let mc = monte_carlo_rho(&fam, dalpha_size, z, trials, seed)?;
            println!(
                "{}",
                to_json(&json!({
                    "z": z,
                    "trials": trials,
                    "seed": seed,
                    "rho": rho,
                    "rho_exact": exact.to_string(),
                    "monte_carlo": mc,
                    "difference": mc - rho,
                    "bound": 4.0 * (rho * (1.0 - rho) / trials as f64).sqrt() + 0.002,
                }))
            );
        }
        Command::Solve {
            problem,
            embed,
            solver,
            solver_config: file,
            out,
        } => {
            let spec = load_problem(&problem)?;
            let cfg = solver_config(&solver, file.as_deref())?;
            let inst = build_dep(&spec, &DataSet::load_csv(&embed)?)?;
            let solution = solve(&inst, &cfg)?;
            let status = solution.status;
            write(&out, &to_json(&RunReport { solution, config: cfg }))?;
            if status != Status::Optimal {
                return Err(stage_err(format!("solver finished with status {status:?}")));
            }
        }
        Command::Sdds {
            problem,
            scenarios,
            solver,
            solver_config: file,
            out,
        } => {
            let spec = load_problem(&problem)?;
            let cfg = solver_config(&solver, file.as_deref())?;
            let full = underlying_set(&DataSet::load_csv(&scenarios)?)?;
            if full.len() > MAX_ENUMERATION {
                return Err(stage_err(format!(
                    "{} distinct scenarios; enumeration is limited to {MAX_ENUMERATION}",
                    full.len()
                )));
            }
            // checked early so a dimension error is reported as such
            DepInstance::from_scenarios(Arc::new(spec.clone()), full.clone())?;
            let fam = enumerate_sdds(&spec, &full, &cfg)?;
            fam.save(&out)?;
            println!("{}", json!({"family_size": fam.len(), "sets": fam.sets}));
        }
        Command::Pipeline { config, store, out } => {
            let (report, _) = run_pipeline_file(&config, Some(&RunStore::new(store)))?;
            write(&out, &report.to_json())?;
            println!(
                "{}",
                json!({"z": report.sample_size.z, "rho": report.sample_size.rho, "x_star": report.solution.x_star})
            );
        }
        Command::AlphaFromBeta { density, beta, normalize } => {
            let mut d = ProductDensity::load(&density)?;
            if normalize {
                d = d.normalized();
            }
            let alpha = alpha_from_beta(&d, beta, &QuadratureSettings::default())?;
            println!("{}", json!({"beta": beta, "alpha": alpha}));
        }
        Command::Contour {
            density,
            alpha,
            resolution,
            scales,
            out,
        } => {
            let d = ProductDensity::load(&density)?;
            let rows = contour_grid(&d, alpha, resolution, scales)?;
            let io = |e: csv::Error| config_err(format!("{}: {e}", out.display()));
            let mut w = csv::Writer::from_path(&out).map_err(io)?;
            for r in &rows {
                w.serialize(r).map_err(io)?;
            }
            w.flush().map_err(config_err)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
