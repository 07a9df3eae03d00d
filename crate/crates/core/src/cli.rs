//! Command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success; `analyze`: MSS; `compare`: simulations agree |
//! | 3 | `analyze`: not MSS |
//! | 4 | `compare`: simulations disagree |
//! | 64 | bad command line |
//! | 65 | config cannot be parsed, violates the schema, or describes an unusable problem |
//! | 66 | config file cannot be read |
//! | 70 | internal error |
//! | 74 | output cannot be written |

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{analyze, covariance_trajectory};
use crate::config::{ProblemConfig, RawConfig};
use crate::error::Error;
use crate::operator::{equivalent_ito_system, Interpretation};
use crate::report::{
    simulation_csv, to_toml, trajectory_csv, AnalysisReport, AnalyzeDocument, CompareDocument, SimulationSummary,
};
use crate::simulate::{run_ensemble, Scheme, SimulationConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_MSS: i32 = 3;
pub const EXIT_DISAGREE: i32 = 4;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_NO_INPUT: i32 = 66;
pub const EXIT_INTERNAL: i32 = 70;
pub const EXIT_IO: i32 = 74;

/// Agreement band of `compare`, in combined standard errors.
pub const COMPARE_TOLERANCE: f64 = 3.0;

#[derive(Debug, Parser)]
#[command(
    name = "msslab",
    version,
    about = "Mean-square stability of LTI systems with multiplicative noise"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check mean-square stability and print a TOML report.
    Analyze(Common),
    /// Monte Carlo ensemble, written as CSV next to the predicted variance.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deterministic covariance trajectory, written as CSV.
    Trajectory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analyze and simulate under both interpretations and check they agree.
    Compare(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Problem configuration (TOML).
    pub config: PathBuf,
    #[arg(long, value_parser = parse_interpretation)]
    pub interpretation: Option<Interpretation>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<u64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: Option<Scheme>,
    /// Worker threads; 0 picks one per core.
    #[arg(long, env = "MSSLAB_THREADS")]
    pub threads: Option<u64>,
}

fn parse_interpretation(s: &str) -> Result<Interpretation, String> {
    match s {
        "ito" => Ok(Interpretation::Ito),
        "stratonovich" => Ok(Interpretation::Stratonovich),
        _ => Err(format!("expected ito or stratonovich, got {s}")),
    }
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "state_space_step" => Ok(Scheme::StateSpaceStep),
        "convolution_sum" => Ok(Scheme::ConvolutionSum),
        _ => Err(format!("expected state_space_step or convolution_sum, got {s}")),
    }
}

#[derive(Debug)]
enum Failure {
    Input(PathBuf, std::io::Error),
    Output(PathBuf, std::io::Error),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Input(..) => EXIT_NO_INPUT,
            Failure::Output(..) => EXIT_IO,
            Failure::Data(_) => EXIT_DATA,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Input(p, e) => format!("cannot read {}: {e}", p.display()),
            Failure::Output(p, e) => format!("cannot write {}: {e}", p.display()),
            Failure::Data(e) => e.to_string(),
        }
    }
}

impl Common {
    /// Load the config and apply command-line overrides, which win.
    fn load(&self) -> Result<ProblemConfig, Failure> {
        let text = std::fs::read_to_string(&self.config).map_err(|e| Failure::Input(self.config.clone(), e))?;
        let mut raw = RawConfig::parse(&text)?;
        if let Some(i) = self.interpretation {
            raw.interpretation = i;
        }
        if let Some(sim) = raw.simulation.as_mut() {
            if let Some(v) = self.seed {
                sim.seed = v;
            }
            if let Some(v) = self.paths {
                sim.n_paths = v;
            }
            if let Some(v) = self.dt {
                sim.dt = v;
            }
            if let Some(v) = self.horizon {
                sim.horizon = v;
            }
            if let Some(v) = self.scheme {
                sim.scheme = Some(v);
            }
            if let Some(v) = self.threads {
                sim.threads = Some(v);
            }
        }
        Ok(ProblemConfig::from_raw(&raw)?)
    }

    fn threads(&self, problem: &ProblemConfig) -> usize {
        self.threads
            .map(|t| t as usize)
            .or_else(|| problem.simulation.as_ref().map(|s| s.threads))
            .unwrap_or(0)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::Output(path.to_path_buf(), e))
}

fn in_pool<T>(threads: usize, f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

fn run_analyze(common: &Common, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let problem = common.load()?;
    let verdict = analyze(
        &problem.system,
        &problem.noise,
        problem.interpretation,
        &problem.analysis,
    )?;
    let doc = AnalyzeDocument {
        analysis: AnalysisReport::new(&verdict, &problem.system, &problem.noise),
    };
    let _ = stdout.write_all(to_toml(&doc)?.as_bytes());
    Ok(if verdict.mss { EXIT_OK } else { EXIT_NOT_MSS })
}

fn run_simulate(common: &Common, out: &Path, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let problem = common.load()?;
    let sim = problem.simulation()?;
    let cfg = &sim.config;
    let ensemble = in_pool(common.threads(&problem), || {
        run_ensemble(&problem.system, &problem.noise, cfg)
    })?;
    let predicted = covariance_trajectory(&problem.system, &problem.noise, cfg.interpretation, cfg.horizon, cfg.dt)?;
    write_file(out, &simulation_csv(&ensemble, &predicted))?;
    let _ = writeln!(
        stdout,
        "var_y(T) = {:?} ± {:?} over {} paths ({} diverged); wrote {}",
        ensemble.final_var_y(),
        ensemble.final_stderr_y(),
        ensemble.n_paths,
        ensemble.n_diverged,
        out.display()
    );
    Ok(EXIT_OK)
}

fn run_trajectory(common: &Common, out: &Path, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let problem = common.load()?;
    let (dt, horizon) = match (&problem.simulation, common.dt, common.horizon) {
        (_, Some(dt), Some(t)) => (dt, t),
        (Some(sim), _, _) => (sim.config.dt, sim.config.horizon),
        (None, _, _) => {
            return Err(Failure::Data(Error::SchemaViolation {
                field: "simulation".into(),
                message: "give a [simulation] table or both --dt and --horizon".into(),
            }))
        }
    };
    let traj = covariance_trajectory(&problem.system, &problem.noise, problem.interpretation, horizon, dt)?;
    write_file(out, &trajectory_csv(&traj))?;
    let _ = writeln!(
        stdout,
        "tr Y(T) = {:?}; wrote {}",
        traj.trace_y().last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(EXIT_OK)
}

fn run_compare(common: &Common, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let problem = common.load()?;
    let sim = problem.simulation()?;
    let (sys, noise) = (&problem.system, &problem.noise);
    let ito = analyze(sys, noise, Interpretation::Ito, &problem.analysis)?;
    let strat = analyze(sys, noise, Interpretation::Stratonovich, &problem.analysis)?;
    let converted = equivalent_ito_system(sys, &noise.gamma_cov)?;

    let strat_cfg = SimulationConfig {
        interpretation: Interpretation::Stratonovich,
        ..sim.config.clone()
    };
    let ito_cfg = SimulationConfig {
        interpretation: Interpretation::Ito,
        seed: sim.config.seed.wrapping_add(1),
        ..sim.config.clone()
    };
    let (strat_sim, ito_sim) = in_pool(common.threads(&problem), || {
        (
            run_ensemble(sys, noise, &strat_cfg),
            run_ensemble(&converted, noise, &ito_cfg),
        )
    });
    let strat_sum = SimulationSummary::new(
        "original system, stratonovich",
        Interpretation::Stratonovich,
        &strat_sim?,
    );
    let ito_sum = SimulationSummary::new("equivalent forward block, ito", Interpretation::Ito, &ito_sim?);

    let agreement = if strat.mss {
        let combined = (strat_sum.stderr_final.powi(2) + ito_sum.stderr_final.powi(2)).sqrt();
        strat_sum.n_diverged == 0
            && ito_sum.n_diverged == 0
            && (strat_sum.var_y_final - ito_sum.var_y_final).abs() <= COMPARE_TOLERANCE * combined
    } else {
        strat_sum.shows_divergence() && ito_sum.shows_divergence()
    };
    let doc = CompareDocument {
        ito_analysis: AnalysisReport::new(&ito, sys, noise),
        stratonovich_analysis: AnalysisReport::new(&strat, sys, noise),
        ito_simulation_of_equivalent: ito_sum,
        stratonovich_simulation: strat_sum,
        tolerance_stderr: COMPARE_TOLERANCE,
        agreement,
    };
    let _ = stdout.write_all(to_toml(&doc)?.as_bytes());
    Ok(if agreement { EXIT_OK } else { EXIT_DISAGREE })
}

/// Run the command line `args` (including the program name) and return the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                EXIT_USAGE
            } else {
                let _ = write!(stdout, "{e}");
                EXIT_OK
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Analyze(c) => run_analyze(c, stdout),
        Command::Simulate { common, out } => run_simulate(common, out, stdout),
        Command::Trajectory { common, out } => run_trajectory(common, out, stdout),
        Command::Compare(c) => run_compare(c, stdout),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message());
            f.code()
        }
    }
}
