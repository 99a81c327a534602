use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod svg;

use config::RunConfig;

/// ARZ traffic simulation with backstepping and learned boundary
/// controllers.
#[derive(Debug, Parser)]
#[command(name = "arz", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scenario preset (reference, demand_high, demand_medium, demand_low,
    /// nonrecurrent_sin, nonrecurrent_linear, ngsim_calibrated).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// open_loop, backstepping, pi, no_kernel, pino_kernel, pinn_kernel or
    /// no_control_law.
    #[arg(long, global = true)]
    controller: Option<String>,
    /// Model file for a learned controller.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for dataset generation and comparisons.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Finite-volume cells of the road.
    #[arg(long, global = true)]
    cells: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one closed loop and write the trajectory, an evaluation report
    /// against backstepping and optional heatmaps.
    Simulate {
        #[arg(long)]
        svg: bool,
    },
    /// Generate a kernel or control-trajectory dataset.
    GenData {
        /// kernels or control.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        /// Nodes per edge of the kernel grid.
        #[arg(long)]
        grid_n: Option<usize>,
    },
    /// Train a learned controller.
    Train {
        /// no_kernel, pino_kernel, pinn_kernel or no_control_law.
        #[arg(long)]
        method: Option<String>,
        /// Dataset directory from gen-data (not needed for pinn_kernel).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Train on every other labelled sample.
        #[arg(long)]
        half_data: bool,
        /// Kernel grid for the single-instance PINN.
        #[arg(long)]
        grid_n: Option<usize>,
        /// Start from the reference defaults instead of the desk settings.
        #[arg(long)]
        reference_defaults: bool,
    },
    /// Evaluate one controller against backstepping, including timing.
    Evaluate,
    /// Fit the three-parameter diagram to an aggregated grid.
    Calibrate {
        /// CSV with x_index,t_index,density,flow (veh/km, veh/h).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Jam density [veh/km].
        #[arg(long)]
        rho_max: Option<f64>,
        /// Write a synthetic grid with this many cells first.
        #[arg(long)]
        synthetic: Option<usize>,
    },
    /// Compare backstepping, PI and every model found in --model-dir.
    Compare {
        #[arg(long)]
        model_dir: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<arz_core::Error> for CliError {
    fn from(e: arz_core::Error) -> Self {
        use arz_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Io(_) | E::Json(_) | E::ModelFile { .. } | E::Parse { .. } => CliError::Io(msg),
            E::BlowUp { .. } | E::Training(_) | E::IllPosed(_) => CliError::Numerical(msg),
            _ => CliError::Usage(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &c.preset {
        cfg.preset = v.clone();
    }
    if let Some(v) = &c.controller {
        cfg.controller = v.clone();
    }
    if let Some(v) = &c.model {
        cfg.model = Some(v.clone());
    }
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.jobs {
        cfg.jobs = v;
    }
    if let Some(v) = c.cells {
        cfg.cells = v;
    }
    match &cli.command {
        Command::Simulate { svg } => cfg.svg |= svg,
        Command::GenData { kind, samples, grid_n } => {
            if let Some(v) = kind {
                cfg.data.kind = v.clone();
            }
            if let Some(v) = samples {
                cfg.data.samples = *v;
            }
            if let Some(v) = grid_n {
                cfg.data.grid_n = *v;
            }
        }
        Command::Train { method, data, epochs, lr, half_data, grid_n, reference_defaults } => {
            if let Some(v) = grid_n {
                cfg.data.grid_n = *v;
            }
            if let Some(v) = method {
                cfg.train.method = v.clone();
            }
            if let Some(v) = data {
                cfg.train.data = Some(v.clone());
            }
            if epochs.is_some() {
                cfg.train.epochs = *epochs;
            }
            if lr.is_some() {
                cfg.train.lr = *lr;
            }
            cfg.train.half_data |= half_data;
            if *reference_defaults {
                cfg.train.desk = false;
            }
        }
        Command::Evaluate => {}
        Command::Calibrate { input, rho_max, synthetic } => {
            if let Some(v) = input {
                cfg.calibrate.input = Some(v.clone());
            }
            if rho_max.is_some() {
                cfg.calibrate.rho_max_veh_per_km = *rho_max;
            }
            if synthetic.is_some() {
                cfg.calibrate.synthetic = *synthetic;
            }
        }
        Command::Compare { model_dir } => {
            if let Some(v) = model_dir {
                cfg.model_dir = Some(v.clone());
            }
        }
    }
    if cfg.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    // fail on a bad preset before any work is done
    cfg.preset()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Io(format!("{}: {e}", cfg.out.display())))?;
    match cli.command {
        Command::Simulate { .. } => commands::simulate(&cfg),
        Command::GenData { .. } => commands::gen_data(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Calibrate { .. } => commands::calibrate(&cfg),
        Command::Compare { .. } => commands::compare(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("arz: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
