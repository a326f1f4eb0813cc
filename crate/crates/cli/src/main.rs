//! `tapwb`: simulate TAP pulse responses, compute sensitivities and fit rate
//! constants from the command line.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

use tapwb_core::{Error, Scheme};

#[derive(Parser, Debug)]
#[command(name = "tapwb", version, about = "TAP reactor workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the forward model and write outlet fluxes and catalyst fields.
    Simulate(RunArgs),
    /// Simulate and write the outlet fluxes as experimental-data files.
    Synthesize(SynthArgs),
    /// Fit the free rate constants to experimental data.
    Fit(FitArgs),
    /// Gradient of the data objective or time-resolved flux sensitivities.
    Sensitivity(SensArgs),
    /// Hessian of the data objective by differences of adjoint gradients.
    Hessian(HessianArgs),
    /// Compare the solver against the analytical single-zone curves.
    Reference(ReferenceArgs),
    /// Time forward solves, adjoint and finite-difference gradients.
    Benchmark(BenchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Input file.
    #[arg(long)]
    pub input: PathBuf,
    /// Output folder; defaults to the one named in the input file.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Length of each pulse window in seconds.
    #[arg(long)]
    pub time: Option<f64>,
    /// Number of pulses.
    #[arg(long)]
    pub pulses: Option<usize>,
    /// Time steps per pulse window.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = SchemeArg::Semi)]
    pub scheme: SchemeArg,
    /// Only emit plot data for this pulse (1-based).
    #[arg(long)]
    pub pulse: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Experimental data folder; overrides the input file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Add Gaussian noise with this standard deviation relative to each
    /// gas's peak flux.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Weight of the thermodynamic penalty; defaults to 1 when the input
    /// gives an overall free energy and 0 otherwise.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 300)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 1e-12)]
    pub lower_bound: f64,
    /// Optimise log10 of the rate constants.
    #[arg(long)]
    pub log_scale: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SensType {
    /// dJ_data/dk by the adjoint method.
    Total,
    /// dF(t)/dk for every gas and time step.
    Transient,
}

#[derive(Args, Debug)]
pub struct SensArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = SensType::Total)]
    pub sens_type: SensType,
    /// Also compute central finite differences with this relative step.
    #[arg(long)]
    pub fd: Option<f64>,
}

#[derive(Args, Debug)]
pub struct HessianArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1.0 / 5000.0)]
    pub rel_step: f64,
}

#[derive(Args, Debug)]
pub struct ReferenceArgs {
    #[arg(long, default_value = "reference")]
    pub output: PathBuf,
    /// cm
    #[arg(long, default_value_t = 6.0)]
    pub length: f64,
    #[arg(long, default_value_t = 0.4)]
    pub void: f64,
    /// cm2/s
    #[arg(long, default_value_t = 13.5)]
    pub diffusivity: f64,
    /// Dimensionless adsorption numbers; 0 is the inert curve.
    #[arg(long, value_delimiter = ',', default_value = "0,2")]
    pub ka: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    pub mesh: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// s
    #[arg(long, default_value_t = 3.0)]
    pub time: f64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value = "benchmark")]
    pub output: PathBuf,
    /// Repetitions per timing; the minimum is reported.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Semi)]
    pub scheme: SchemeArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Semi,
    Implicit,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Semi => Scheme::SemiImplicit,
            SchemeArg::Implicit => Scheme::Implicit,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Input(_) | Error::Mechanism(_) | Error::Reactor(_) | Error::Objective(_) => 2,
        Error::Optimizer(_) => 4,
        e if e.is_solver_failure() => 3,
        _ => 1,
    }
}

fn configure_threads() {
    let Ok(v) = std::env::var("TAPWB_THREADS") else { return };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring TAPWB_THREADS={v:?}; expected a positive integer"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Synthesize(a) => commands::synthesize(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Sensitivity(a) => commands::sensitivity(&a),
        Command::Hessian(a) => commands::hessian(&a),
        Command::Reference(a) => commands::reference(&a),
        Command::Benchmark(a) => commands::benchmark(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
