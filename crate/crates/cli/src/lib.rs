//! Command-line front end. Exit codes: 0 success, 1 input error,
//! 2 a fit that did not converge (its results are still written).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod grid;
pub mod output;

pub use commands::{cmd_dist, cmd_fit, cmd_gam, cmd_robustness, cmd_simulate};
pub use grid::parse_grid;

const STUDY_HELP: &str = "\
Regenerate the regression study (one run per dispersion level):
  for nu in 0.5 1 2.5 4; do
    cmp simulate --scenario regression --nu $nu --reps 20 --seed 2024 --out study
  done
The additive study with the regression baseline on the same data:
  cmp simulate --scenario gam --nu 2.5 --reps 20 --seed 2024 --model cmp-gam --out study
  cmp simulate --scenario gam --nu 2.5 --reps 20 --seed 2024 --model cmp-reg --out study";

#[derive(Debug, Parser)]
#[command(name = "cmp", version, about = "Conway-Maxwell Poisson regression and additive models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a parametric CMP regression.
    Fit(FitArgs),
    /// Fit a CMP additive model with smoothing-spline terms.
    Gam(GamArgs),
    /// Run a replicated simulation study.
    #[command(after_help = STUDY_HELP)]
    Simulate(SimulateArgs),
    /// Tabulate the normalizing constant and cumulants over a (λ, ν) grid.
    Dist(DistArgs),
    /// Fit data carrying one injected large count, per magnitude.
    Robustness(RobustnessArgs),
}

#[derive(Debug, Clone, Args)]
pub struct IterationArgs {
    /// Starting value of ν.
    #[arg(long, default_value_t = 0.2)]
    pub nu_init: f64,
    /// Relative deviance change that ends the iterations.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Model formula, e.g. `y ~ x1 + s(x2, df=4) | nu: x3`.
    #[arg(long)]
    pub formula: String,
    /// Keep only rows of this month (YYYY-MM) of the date column.
    #[arg(long)]
    pub month: Option<String>,
    /// JSON column-type hints; defaults to the bike-sharing layout.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Treat these columns as categorical (repeatable or comma separated).
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub iter: IterationArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GamArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub iter: IterationArgs,
    /// Target df of smooths written without one.
    #[arg(long, default_value_t = 4.0)]
    pub df: f64,
    /// Pin γ at 0 (a Poisson additive model).
    #[arg(long)]
    pub poisson: bool,
    /// Points per partial-plot curve.
    #[arg(long, default_value_t = 100)]
    pub grid: usize,
    /// Skip the nonparametric score tests.
    #[arg(long)]
    pub no_score_tests: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioKind {
    Regression,
    Gam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    CmpReg,
    CmpGam,
    PoissonGam,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = ScenarioKind::Regression)]
    pub scenario: ScenarioKind,
    /// Dispersion preset: 0.5, 1, 2.5 or 4 (regression); 0.5 or 2.5 (additive).
    #[arg(long, default_value_t = 1.0)]
    pub nu: f64,
    /// Full scenario as JSON, overriding --scenario and --nu.
    #[arg(long)]
    pub scenario_file: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Sample size per replication (preset: 500).
    #[arg(long)]
    pub n: Option<usize>,
    /// Fitted model; defaults to the scenario's own.
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Resample rows of one dataset instead of redrawing data.
    #[arg(long)]
    pub resample: bool,
    #[arg(long, default_value_t = 4.0)]
    pub df: f64,
    #[command(flatten)]
    pub iter: IterationArgs,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DistArgs {
    /// λ values: `a:b:step` (inclusive) or a comma list.
    #[arg(long, default_value = "2:10:1")]
    pub lambda: String,
    /// ν values, same syntax.
    #[arg(long, default_value = "0.1:1:0.1")]
    pub nu: String,
    /// Truncation tolerance of the series.
    #[arg(long, default_value_t = 1e-12)]
    pub eps: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RobustnessArgs {
    #[arg(long, value_delimiter = ',', default_value = "50,150,300")]
    pub magnitudes: Vec<u64>,
    #[command(flatten)]
    pub iter: IterationArgs,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    NotConverged,
}

/// An input problem: bad file, formula, flag or scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

impl From<cmp_irls::CmpError> for InputError {
    fn from(e: cmp_irls::CmpError) -> Self {
        Self(e.to_string())
    }
}

pub type CliResult = Result<Status, InputError>;

pub fn exit_code(r: &CliResult) -> u8 {
    match r {
        Ok(Status::Ok) => 0,
        Err(_) => 1,
        Ok(Status::NotConverged) => 2,
    }
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Gam(a) => cmd_gam(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Dist(a) => cmd_dist(&a),
        Command::Robustness(a) => cmd_robustness(&a),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), InputError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| InputError(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| InputError(format!("{}: {e}", path.display())))
}
