//! Staged driver for the correction workflow: baseline solves, field
//! inversion, feature extraction, ensemble training and gated prediction.
//!
//! Every command works on an output directory, records what it did in an
//! append-only `manifest.json` and skips stages whose inputs are unchanged.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::path::{Path, PathBuf};

pub use config::{RunConfig, CONFIG_FORMAT};
pub use error::{PipelineError, Result};
pub use stages::Run;

use config::CaseRole;

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Solve,
    Invert,
    Features,
    Train,
    PredictCorrect,
    SweepSigma { list: Option<Vec<f64>> },
    Verify { cells: usize },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub sigma_bar: Option<f64>,
}

/// Loads the configuration, applies overrides and opens the output
/// directory (default: `runs/<config stem>` beside the config file).
pub fn open_run(config_path: &Path, ov: &Overrides) -> Result<Run> {
    let mut cfg = RunConfig::load(config_path)?;
    let seed = ov.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    if let Some(s) = ov.sigma_bar {
        if !(s >= 0.0) {
            return Err(PipelineError::Config(format!("sigma_bar must be >= 0, got {s}")));
        }
        cfg.model.sigma_bar = Some(s);
    }
    let base = config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let out = match &ov.out {
        Some(o) => o.clone(),
        None => {
            let stem = config_path
                .file_stem()
                .map_or("run".into(), |s| s.to_string_lossy().into_owned());
            base.join("runs").join(stem)
        }
    };
    Run::open(cfg, &base, &out)
}

fn names(run: &Run, role: Option<CaseRole>) -> Vec<String> {
    run.cfg
        .cases
        .iter()
        .filter(|c| role.map_or(true, |r| c.role == r))
        .map(|c| c.name.clone())
        .collect()
}

/// Runs one command to completion.
pub fn execute(run: &mut Run, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Solve => {
            for n in names(run, None) {
                run.baseline(&n)?;
            }
        }
        Command::Invert => {
            for n in names(run, Some(CaseRole::Training)) {
                run.inversion(&n)?;
                let s = run.inversion_summary(&n)?;
                log::info!(
                    "{n}: J reduced by {:.3e} in {} iterations ({:?})",
                    s.reduction,
                    s.iterations,
                    s.termination
                );
            }
        }
        Command::Features => {
            for n in names(run, None) {
                run.features(&n)?;
            }
        }
        Command::Train => {
            run.train()?;
            let r = run.training_report()?;
            log::info!("{} submodels, {} dropped sources", r.submodels, r.dropped.len());
        }
        Command::PredictCorrect => {
            let targets = names(run, Some(CaseRole::Target));
            if targets.is_empty() {
                return Err(PipelineError::Config("no target cases".into()));
            }
            let sigma_bar = run.cfg.model.sigma_bar;
            for n in targets {
                let s = run.predict_correct(&n, sigma_bar)?;
                log::info!(
                    "{n}: {} of {} cells accepted at sigma_bar {}, corrected solve {}",
                    s.active_cells,
                    s.predicted_cells,
                    s.sigma_bar,
                    s.corrected_solve
                );
            }
        }
        Command::SweepSigma { list } => {
            let targets = names(run, Some(CaseRole::Target));
            if targets.is_empty() {
                return Err(PipelineError::Config("no target cases".into()));
            }
            let list = list.clone().unwrap_or_else(|| run.cfg.model.sigma_sweep.clone());
            for n in targets {
                let rows = run.sweep_sigma(&n, &list)?;
                log::info!("{n}: {} thresholds swept", rows.len());
            }
        }
        Command::Verify { cells } => {
            let rows = run.verify(*cells)?;
            log::info!("{} checks passed", rows.len());
        }
    }
    Ok(())
}
