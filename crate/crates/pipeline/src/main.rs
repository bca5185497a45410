use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use turbgate_pipeline::{execute, open_run, Command, Overrides, PipelineError};

#[derive(Debug, Parser)]
#[command(name = "turbgate", version, about = "Field inversion and gated ML correction of RANS runs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; defaults to runs/<config name> beside the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Acceptance threshold, overriding the config.
    #[arg(long = "sigma-bar", global = true)]
    sigma_bar: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Uncorrected solves of every case.
    Solve,
    /// Field inversion of the training cases.
    Invert,
    /// Feature extraction for every case.
    Features,
    /// Train the ensemble on the inverted training cases.
    Train,
    /// Gated prediction and corrected solve of the target cases.
    PredictCorrect,
    /// Active cells and corrected solves over several thresholds.
    SweepSigma {
        /// Comma-separated thresholds, overriding model.sigma_sweep.
        #[arg(long, value_delimiter = ',')]
        list: Option<Vec<f64>>,
    },
    /// Adjoint gradient and model archive checks.
    Verify {
        /// Finite-difference cells per training case.
        #[arg(long, default_value_t = 4)]
        cells: usize,
    },
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let Some(config) = cli.config else {
        return Err(PipelineError::Config("--config is required".into()));
    };
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config(format!("--threads: {e}")))?;
    }
    let command = match cli.command {
        Cmd::Solve => Command::Solve,
        Cmd::Invert => Command::Invert,
        Cmd::Features => Command::Features,
        Cmd::Train => Command::Train,
        Cmd::PredictCorrect => Command::PredictCorrect,
        Cmd::SweepSigma { list } => Command::SweepSigma { list },
        Cmd::Verify { cells } => Command::Verify { cells },
    };
    let ov = Overrides {
        out: cli.out,
        seed: cli.seed,
        sigma_bar: cli.sigma_bar,
    };
    let mut r = open_run(&config, &ov)?;
    execute(&mut r, &command)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
