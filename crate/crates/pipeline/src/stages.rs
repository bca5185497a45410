//! Pipeline stages over an output directory.
//!
//! Layout:
//!
//! ```text
//! out/
//!   resolved-config.toml  manifest.json
//!   cases/<name>/baseline/    state.json state.csv residuals.csv mesh.csv state.vtk
//!   cases/<name>/reference/   data.json samples.csv [beta-star.csv state.json state.csv]
//!   cases/<name>/inversion/   beta.csv state.json state.csv objective.csv summary.json fields.vtk
//!   cases/<name>/features/    features.json features.csv [source.json targets.csv]
//!   model/                    archive.json training-report.json reference-features.json
//!   predict/<name>/           predictions.csv lof.csv beta.csv corrected-state.{csv,json}
//!                             profiles.csv [comparison.csv] fields.vtk summary.json
//!   sweep/<name>/             sweep.csv profiles.csv
//!   verify/                   verify.csv
//! ```
//!
//! Stages exchange data through their JSON payloads, which round-trip every
//! value exactly. Each stage directory holds a stamp with the content key of
//! its parameters and inputs; a stage whose key and outputs are unchanged is
//! skipped.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use turbgate::ensemble::{
    predict_field, train_deep_ensemble, train_gpe_ensemble, CellPrediction, GatedField, Inference,
    ModelArchive,
};
use turbgate::features::{compute_features, FeatureMatrix, SourceData, TrainingSet};
use turbgate::inversion::{adjoint_gradient, invert, AssimilationData, InversionProblem};
use turbgate::novelty::fit_lof;
use turbgate::{io, Case, CorrectionField, FlowState, Mesh};

use crate::config::{normalize_sigma_list, CaseConfig, CaseRole, ModelKind, RunConfig};
use crate::error::{PipelineError, Result};
use crate::manifest::{
    stage_key, write_atomic, FileRecord, RunManifest, Stamp, StageOutcome, StageRecord,
    MANIFEST_FILE,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RESOLVED_CONFIG: &str = "resolved-config.toml";

/// Files written by a stage, plus anything worth reporting.
#[derive(Debug, Default)]
struct Produced {
    files: Vec<PathBuf>,
    notes: Vec<String>,
    degraded: bool,
}

fn internal(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Internal(e.to_string())
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> turbgate::Result<()>) -> Result<PathBuf> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| PipelineError::io(path, e))?;
    write_atomic(path, &buf)?;
    Ok(path.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<PathBuf> {
    let s = if pretty {
        serde_json::to_string_pretty(value)
    } else {
        serde_json::to_string(value)
    }
    .map_err(internal)?;
    write_atomic(path, s.as_bytes())?;
    Ok(path.to_path_buf())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| PipelineError::io(path, e))
}

/// Plain CSV table from already formatted fields.
fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(path.to_path_buf())
}

fn rms_error(u: &[f64], data: &AssimilationData) -> f64 {
    let n = data.n_samples() as f64;
    (data
        .cells()
        .iter()
        .zip(data.u_ref())
        .map(|(&c, r)| (u[c] - r).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// Profile columns: the single column of a 1D mesh, else the column nearest
/// each station.
fn station_columns(mesh: &Mesh, stations: &[f64]) -> Vec<(f64, usize)> {
    let xc = mesh.x_centers();
    if mesh.dim() == 1 {
        return vec![(xc[0], 0)];
    }
    stations
        .iter()
        .map(|&x| {
            let i = (0..xc.len())
                .min_by(|&a, &b| (xc[a] - x).abs().total_cmp(&(xc[b] - x).abs()))
                .expect("mesh has columns");
            (x, i)
        })
        .collect()
}

fn column_cells(mesh: &Mesh, i: usize) -> impl Iterator<Item = usize> + '_ {
    (0..mesh.ny())
        .map(move |j| mesh.idx(i, j))
        .filter(|&c| !mesh.is_blanked(c))
}

#[derive(Debug, Clone)]
pub struct Reference {
    pub data: AssimilationData,
    /// Present for twin references.
    pub state: Option<FlowState>,
}

/// Outcome of solving with a gated correction.
#[derive(Debug, Clone)]
pub struct CorrectedSolve {
    pub state: FlowState,
    /// "converged", "unchanged" (no cell accepted) or "failed: ...".
    pub status: String,
}

impl CorrectedSolve {
    pub fn failed(&self) -> bool {
        self.status.starts_with("failed")
    }
}

/// Solves with the gated field, keeping the baseline when nothing is
/// accepted or the solve does not converge.
pub fn corrected_solve(case: &Case, baseline: &FlowState, gated: &GatedField) -> CorrectedSolve {
    if gated.beta.values().iter().all(|&b| b == 1.0) {
        return CorrectedSolve {
            state: baseline.clone(),
            status: "unchanged".into(),
        };
    }
    match case.solve_from(&gated.beta, baseline) {
        Ok(state) => CorrectedSolve {
            state,
            status: "converged".into(),
        },
        Err(e) => {
            log::warn!("corrected solve failed ({e}); keeping the uncorrected state");
            CorrectedSolve {
                state: baseline.clone(),
                status: format!("failed: {e}"),
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct InversionSummary {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub reduction: f64,
    pub iterations: usize,
    pub termination: turbgate::inversion::Termination,
    pub rejected_trials: usize,
    pub active_cells: usize,
    pub samples: usize,
    pub rms_error_baseline: f64,
    pub rms_error_inverted: f64,
    pub max_abs_beta_deviation: f64,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct SourceReport {
    pub label: String,
    pub rows_before_filter: usize,
    pub rows_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparameters: Option<turbgate::ensemble::Hyperparameters>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inducing_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_objective: Option<f64>,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct TrainingReport {
    pub kind: ModelKind,
    pub band: [f64; 2],
    pub submodels: usize,
    pub sources: Vec<SourceReport>,
    pub dropped: Vec<turbgate::features::DropNotice>,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct PredictionSummary {
    pub case: String,
    pub sigma_bar: f64,
    pub predicted_cells: usize,
    pub active_cells: usize,
    pub corrected_solve: String,
    pub max_lof: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rms_error_baseline: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rms_error_corrected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sigma_bar: f64,
    pub active_cells: usize,
    pub status: String,
    pub rms_error: Option<f64>,
}

/// A run over one output directory.
pub struct Run {
    pub cfg: RunConfig,
    out: PathBuf,
    base: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Prepares `out`, records the resolved configuration and checks that
    /// every reference file is readable before any solve starts.
    pub fn open(cfg: RunConfig, base: &Path, out: &Path) -> Result<Self> {
        cfg.validate()?;
        for c in &cfg.cases {
            if let Some(f) = c.reference_file(base) {
                fs::File::open(&f).map_err(|e| PipelineError::io(&f, e))?;
            }
        }
        fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
        let manifest = RunManifest::load_or_new(&out.join(MANIFEST_FILE))?;
        let mut run = Self {
            cfg,
            out: out.to_path_buf(),
            base: base.to_path_buf(),
            manifest,
        };
        let t = Instant::now();
        let path = run.out.join(RESOLVED_CONFIG);
        write_atomic(&path, run.cfg.to_toml()?.as_bytes())?;
        let rec = FileRecord::of(&path, &run.out)?;
        run.record(StageRecord {
            stage: "config".into(),
            subject: "run".into(),
            key: rec.sha256.clone(),
            seed: run.cfg.seed,
            tool_version: TOOL_VERSION.into(),
            wall_time_s: t.elapsed().as_secs_f64(),
            outcome: StageOutcome::Completed,
            inputs: Vec::new(),
            outputs: vec![rec],
            notes: Vec::new(),
        })?;
        Ok(run)
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn record(&mut self, rec: StageRecord) -> Result<()> {
        self.manifest.entries.push(rec);
        self.manifest.save(&self.out.join(MANIFEST_FILE))
    }

    pub fn case_dir(&self, name: &str, stage: &str) -> PathBuf {
        self.out.join("cases").join(name).join(stage)
    }

    fn case_config(&self, name: &str) -> Result<CaseConfig> {
        self.cfg
            .case(name)
            .cloned()
            .ok_or_else(|| PipelineError::Config(format!("no case named {name:?}")))
    }

    fn build_case(&self, cc: &CaseConfig) -> Result<Case> {
        cc.build()
            .map_err(|e| PipelineError::Config(format!("case {}: {e}", cc.name)))
    }

    /// Runs `compute` unless the stamp in `dir` matches the stage key and
    /// every recorded output is intact.
    fn cached<P: Serialize>(
        &mut self,
        stage: &str,
        subject: &str,
        dir: &Path,
        params: &P,
        inputs: &[PathBuf],
        compute: impl FnOnce(&Path) -> Result<Produced>,
    ) -> Result<()> {
        let inputs = inputs
            .iter()
            .map(|p| FileRecord::of(p, &self.out))
            .collect::<Result<Vec<_>>>()?;
        let key = stage_key(&(stage, TOOL_VERSION, params), &inputs)?;
        let t = Instant::now();
        let mut rec = StageRecord {
            stage: stage.into(),
            subject: subject.into(),
            key: key.clone(),
            seed: self.cfg.seed,
            tool_version: TOOL_VERSION.into(),
            wall_time_s: 0.0,
            outcome: StageOutcome::UpToDate,
            inputs,
            outputs: Vec::new(),
            notes: Vec::new(),
        };
        if let Some(stamp) = Stamp::read(dir) {
            if stamp.key == key && stamp.outputs_intact(&self.out) {
                log::info!("{stage} [{subject}]: up to date");
                rec.outputs = stamp.outputs;
                rec.wall_time_s = t.elapsed().as_secs_f64();
                return self.record(rec);
            }
        }
        log::info!("{stage} [{subject}]: running");
        let _ = fs::remove_file(dir.join(crate::manifest::STAMP_FILE));
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        match compute(dir) {
            Ok(p) => {
                let outputs = p
                    .files
                    .iter()
                    .map(|f| FileRecord::of(f, &self.out))
                    .collect::<Result<Vec<_>>>()?;
                Stamp {
                    key,
                    outputs: outputs.clone(),
                }
                .write(dir)?;
                rec.outputs = outputs;
                rec.notes = p.notes;
                rec.outcome = if p.degraded {
                    StageOutcome::Degraded
                } else {
                    StageOutcome::Completed
                };
                rec.wall_time_s = t.elapsed().as_secs_f64();
                self.record(rec)
            }
            Err(e) => {
                rec.outcome = StageOutcome::Failed;
                rec.notes = vec![e.to_string()];
                rec.wall_time_s = t.elapsed().as_secs_f64();
                self.record(rec)?;
                Err(e)
            }
        }
    }

    /// Uncorrected solve of a case.
    pub fn baseline(&mut self, name: &str) -> Result<FlowState> {
        let cc = self.case_config(name)?;
        let case = self.build_case(&cc)?;
        let dir = self.case_dir(name, "baseline");
        let params = (&cc.mesh, &cc.bc, &cc.solver);
        self.cached("baseline", name, &dir, &params, &[], |dir| {
            let st = case
                .solve(&CorrectionField::uniform(case.n_cells()))
                .map_err(|e| PipelineError::within("baseline", name, e))?;
            let m = &case.mesh;
            Ok(Produced {
                files: vec![
                    write_json(&dir.join("state.json"), &st, false)?,
                    write_with(&dir.join("state.csv"), |w| io::write_state_csv(w, m, &st))?,
                    write_with(&dir.join("residuals.csv"), |w| io::write_residual_history_csv(w, &st))?,
                    write_with(&dir.join("mesh.csv"), |w| io::write_mesh_csv(w, m))?,
                    write_with(&dir.join("state.vtk"), |w| io::write_state_vtk(w, m, &st))?,
                ],
                notes: vec![format!("{} iterations", st.iterations)],
                degraded: false,
            })
        })?;
        read_json(&dir.join("state.json"))
    }

    /// Reference samples of a case, from its file or a twin solve.
    pub fn reference(&mut self, name: &str) -> Result<Reference> {
        let cc = self.case_config(name)?;
        let Some(spec) = cc.reference.clone() else {
            return Err(PipelineError::Config(format!("case {name} has no reference")));
        };
        let case = self.build_case(&cc)?;
        let dir = self.case_dir(name, "reference");
        let file = cc.reference_file(&self.base);
        let inputs: Vec<PathBuf> = file.iter().cloned().collect();
        let params = (&cc.mesh, &cc.bc, &cc.solver, &spec);
        self.cached("reference", name, &dir, &params, &inputs, |dir| {
            let m = &case.mesh;
            let mut files = Vec::new();
            let data = if let Some(f) = &file {
                let rd = fs::File::open(f).map_err(|e| PipelineError::io(f, e))?;
                io::read_assimilation_csv(rd, m, name).map_err(|e| match e {
                    turbgate::Error::InvalidArgument(_) => PipelineError::Data(format!("{}: {e}", f.display())),
                    e => PipelineError::within("reference", name, e),
                })?
            } else {
                let bump = spec.twin.expect("validated: twin or file");
                let beta = bump
                    .field(m)
                    .map_err(|e| PipelineError::within("reference", name, e))?;
                let st = case
                    .solve(&beta)
                    .map_err(|e| PipelineError::within("reference", name, e))?;
                let mask = match &spec.region {
                    Some(b) => b.mask(m),
                    None => (0..m.n_cells()).map(|c| !m.is_blanked(c)).collect(),
                };
                let data = AssimilationData::from_state(m, &st, &mask, name)
                    .map_err(|e| PipelineError::within("reference", name, e))?;
                files.push(write_with(&dir.join("beta-star.csv"), |w| io::write_beta_csv(w, m, &beta))?);
                files.push(write_json(&dir.join("state.json"), &st, false)?);
                files.push(write_with(&dir.join("state.csv"), |w| io::write_state_csv(w, m, &st))?);
                data
            };
            let rows: Vec<Vec<String>> = data
                .cells()
                .iter()
                .zip(data.u_ref())
                .map(|(&c, u)| {
                    let [x, y] = m.center(c);
                    vec![c.to_string(), x.to_string(), y.to_string(), u.to_string()]
                })
                .collect();
            files.push(write_table(&dir.join("samples.csv"), &["cell", "x (L)", "y (L)", "u_ref (U)"], &rows)?);
            files.push(write_json(&dir.join("data.json"), &data, false)?);
            Ok(Produced {
                files,
                notes: vec![format!("{} samples", data.n_samples())],
                degraded: false,
            })
        })?;
        let data = read_json(&dir.join("data.json"))?;
        let sp = dir.join("state.json");
        let state = if file.is_none() { Some(read_json(&sp)?) } else { None };
        Ok(Reference { data, state })
    }

    /// Field inversion of a case against its reference.
    pub fn inversion(&mut self, name: &str) -> Result<(CorrectionField, FlowState)> {
        let baseline = self.baseline(name)?;
        let reference = self.reference(name)?;
        let cc = self.case_config(name)?;
        let case = self.build_case(&cc)?;
        let inv = self.cfg.inversion.clone();
        let dir = self.case_dir(name, "inversion");
        let inputs = [
            self.case_dir(name, "baseline").join("state.json"),
            self.case_dir(name, "reference").join("data.json"),
        ];
        let params = (&cc.mesh, &cc.bc, &cc.solver, &inv);
        self.cached("inversion", name, &dir, &params, &inputs, |dir| {
            let m = case.mesh.clone();
            let within = |e| PipelineError::within("inversion", name, e);
            let mut problem = InversionProblem::new(case, reference.data.clone(), inv.lambda)
                .and_then(|p| p.with_optimizer(inv.optimizer.clone()))
                .map_err(within)?;
            if let Some(b) = &inv.activity {
                problem = problem.with_activity(b.mask(&m)).map_err(within)?;
            }
            let res = invert(&problem, &CorrectionField::uniform(m.n_cells())).map_err(within)?;
            let summary = InversionSummary {
                initial_objective: res.initial_objective(),
                final_objective: res.final_objective(),
                reduction: res.final_objective() / res.initial_objective(),
                iterations: res.iterations,
                termination: res.termination,
                rejected_trials: res.rejected_trials,
                active_cells: problem.n_active(),
                samples: reference.data.n_samples(),
                rms_error_baseline: rms_error(&baseline.u, &reference.data),
                rms_error_inverted: rms_error(&res.state.u, &reference.data),
                max_abs_beta_deviation: res
                    .beta
                    .values()
                    .iter()
                    .fold(0.0f64, |a, b| a.max((b - 1.0).abs())),
            };
            let st = &res.state;
            Ok(Produced {
                files: vec![
                    write_with(&dir.join("beta.csv"), |w| io::write_beta_csv(w, &m, &res.beta))?,
                    write_json(&dir.join("state.json"), st, false)?,
                    write_with(&dir.join("state.csv"), |w| io::write_state_csv(w, &m, st))?,
                    write_with(&dir.join("objective.csv"), |w| {
                        io::write_objective_history_csv(w, &res.objective_history, &res.gradient_norm_history)
                    })?,
                    write_with(&dir.join("fields.vtk"), |w| {
                        io::write_vtk(w, &m, "inversion", &[("u", &st.u), ("beta", res.beta.values())])
                    })?,
                    write_json(&dir.join("summary.json"), &summary, true)?,
                ],
                notes: vec![format!(
                    "J {:.4e} -> {:.4e} ({:?})",
                    summary.initial_objective, summary.final_objective, summary.termination
                )],
                degraded: false,
            })
        })?;
        let n = self.build_case(&cc)?.n_cells();
        let bp = dir.join("beta.csv");
        let rd = fs::File::open(&bp).map_err(|e| PipelineError::io(&bp, e))?;
        let beta = io::read_beta_csv(rd, n).map_err(|e| PipelineError::io(&bp, e))?;
        Ok((beta, read_json(&dir.join("state.json"))?))
    }

    pub fn inversion_summary(&self, name: &str) -> Result<InversionSummary> {
        read_json(&self.case_dir(name, "inversion").join("summary.json"))
    }

    /// Features of a case: inverted state and targets for training cases,
    /// the baseline state otherwise.
    pub fn features(&mut self, name: &str) -> Result<FeatureMatrix> {
        let cc = self.case_config(name)?;
        let case = self.build_case(&cc)?;
        let opts = self.cfg.features.options();
        let activity = self.cfg.inversion.activity;
        let dir = self.case_dir(name, "features");
        let (state, beta, input) = match cc.role {
            CaseRole::Training => {
                let (b, s) = self.inversion(name)?;
                (s, Some(b), self.case_dir(name, "inversion").join("state.json"))
            }
            CaseRole::Target => (self.baseline(name)?, None, self.case_dir(name, "baseline").join("state.json")),
        };
        let params = (&cc.mesh, cc.role, &opts, &activity);
        self.cached("features", name, &dir, &params, &[input], |dir| {
            let m = &case.mesh;
            let x = compute_features(&state, m, &opts).map_err(|e| PipelineError::within("features", name, e))?;
            let mut files = vec![
                write_json(&dir.join("features.json"), &x, false)?,
                write_with(&dir.join("features.csv"), |w| io::write_features_csv(w, &x))?,
            ];
            if let Some(beta) = &beta {
                let keep: Vec<bool> = match &activity {
                    Some(b) => {
                        let mask = b.mask(m);
                        x.cells.iter().map(|&c| mask[c]).collect()
                    }
                    None => vec![true; x.n_rows()],
                };
                let xs = x.select(&keep);
                let y: Vec<f64> = xs.cells.iter().map(|&c| beta.values()[c]).collect();
                files.push(write_with(&dir.join("targets.csv"), |w| io::write_targets_csv(w, &xs.cells, &y))?);
                let src = SourceData {
                    label: name.to_string(),
                    rows_before_filter: xs.n_rows(),
                    x: xs,
                    y,
                };
                files.push(write_json(&dir.join("source.json"), &src, false)?);
            }
            Ok(Produced {
                files,
                notes: vec![format!("{} rows", x.n_rows())],
                degraded: false,
            })
        })?;
        read_json(&dir.join("features.json"))
    }

    fn model_dir(&self) -> PathBuf {
        self.out.join("model")
    }

    /// Trains the configured ensemble on every training case.
    pub fn train(&mut self) -> Result<(ModelArchive, FeatureMatrix)> {
        let names: Vec<String> = self
            .cfg
            .cases_with(CaseRole::Training)
            .map(|c| c.name.clone())
            .collect();
        if names.is_empty() {
            return Err(PipelineError::Config("no training cases".into()));
        }
        let mut inputs = Vec::new();
        for n in &names {
            self.features(n)?;
            inputs.push(self.case_dir(n, "features").join("source.json"));
        }
        let feat = self.cfg.features.clone();
        let model = self.cfg.model.clone();
        let dir = self.model_dir();
        let params = (&feat.band, model.kind, &model.gpe, &model.deep);
        let sources = inputs
            .iter()
            .map(|p| read_json::<SourceData>(p))
            .collect::<Result<Vec<_>>>()?;
        self.cached("train", "model", &dir, &params, &inputs, |dir| {
            let band = feat.band().map_err(|e| PipelineError::Config(e.to_string()))?;
            let set = TrainingSet::from_sources(sources, band)
                .map_err(|e| PipelineError::within("train", "model", e))?;
            if set.sources.is_empty() {
                return Err(PipelineError::Training(
                    "every training source was dropped by the band filter".into(),
                ));
            }
            let mut reports: Vec<SourceReport> = set
                .sources
                .iter()
                .map(|s| SourceReport {
                    label: s.label.clone(),
                    rows_before_filter: s.rows_before_filter,
                    rows_used: s.y.len(),
                    hyperparameters: None,
                    inference: None,
                    inducing_points: None,
                    fit_objective: None,
                })
                .collect();
            let within = |e| PipelineError::within("train", "model", e);
            let archive = match model.kind {
                ModelKind::Gpe => {
                    let ens = train_gpe_ensemble(&set, &model.gpe).map_err(within)?;
                    for (r, m) in reports.iter_mut().zip(&ens.submodels) {
                        r.hyperparameters = Some(m.hyperparameters().clone());
                        r.inference = Some(
                            match m.inference() {
                                Inference::Exact => "exact",
                                Inference::Sparse => "sparse",
                            }
                            .into(),
                        );
                        r.inducing_points = Some(m.n_inducing());
                        r.fit_objective = Some(m.fit_objective);
                    }
                    ModelArchive::gpe(ens)
                }
                ModelKind::DeepEnsemble => {
                    let (x, y) = set.pooled();
                    ModelArchive::deep(train_deep_ensemble(&x, &y, &model.deep).map_err(within)?)
                }
            };
            let submodels = match &archive {
                ModelArchive::Gpe { ensemble, .. } => ensemble.submodels.len(),
                ModelArchive::DeepEnsemble { ensemble, .. } => ensemble.n_members(),
            };
            let report = TrainingReport {
                kind: model.kind,
                band: feat.band,
                submodels,
                sources: reports,
                dropped: set.dropped.clone(),
            };
            let notes = set
                .dropped
                .iter()
                .map(|d| format!("source {} dropped: no targets outside the band", d.label))
                .collect();
            let (pooled, _) = set.pooled();
            let json = archive.to_json().map_err(within)?;
            let ap = dir.join("archive.json");
            write_atomic(&ap, json.as_bytes())?;
            Ok(Produced {
                files: vec![
                    ap,
                    write_json(&dir.join("training-report.json"), &report, true)?,
                    write_json(&dir.join("reference-features.json"), &pooled, false)?,
                ],
                notes,
                degraded: false,
            })
        })?;
        Ok((self.load_archive()?, read_json(&dir.join("reference-features.json"))?))
    }

    pub fn load_archive(&self) -> Result<ModelArchive> {
        let p = self.model_dir().join("archive.json");
        let s = fs::read_to_string(&p).map_err(|e| PipelineError::io(&p, e))?;
        ModelArchive::from_json(&s).map_err(|e| PipelineError::io(&p, e))
    }

    pub fn training_report(&self) -> Result<TrainingReport> {
        read_json(&self.model_dir().join("training-report.json"))
    }

    fn sigma_bar(&self, archive: &ModelArchive, overridden: Option<f64>) -> Result<f64> {
        let s = overridden
            .or(self.cfg.model.sigma_bar)
            .unwrap_or_else(|| archive.default_sigma_bar());
        if !(s >= 0.0) {
            return Err(PipelineError::Config(format!("sigma_bar must be >= 0, got {s}")));
        }
        Ok(s)
    }

    fn target_inputs(&self, name: &str, has_reference: bool) -> Vec<PathBuf> {
        let mut v = vec![
            self.model_dir().join("archive.json"),
            self.case_dir(name, "baseline").join("state.json"),
            self.case_dir(name, "features").join("features.json"),
        ];
        if has_reference {
            v.push(self.case_dir(name, "reference").join("data.json"));
        }
        v
    }

    /// Gated prediction on a case, the corrected solve and its diagnostics.
    pub fn predict_correct(&mut self, name: &str, sigma_bar: Option<f64>) -> Result<PredictionSummary> {
        let (archive, reference_x) = self.train()?;
        let sigma_bar = self.sigma_bar(&archive, sigma_bar)?;
        let cc = self.case_config(name)?;
        let case = self.build_case(&cc)?;
        let baseline = self.baseline(name)?;
        let x = self.features(name)?;
        let reference = match cc.reference {
            Some(_) => Some(self.reference(name)?),
            None => None,
        };
        let k = self.cfg.model.lof_neighbors;
        let dir = self.out.join("predict").join(name);
        let mut inputs = self.target_inputs(name, reference.is_some());
        inputs.push(self.model_dir().join("reference-features.json"));
        let params = (sigma_bar, k, &cc.stations);
        self.cached("predict-correct", name, &dir, &params, &inputs, |dir| {
            let m = &case.mesh;
            let within = |e| PipelineError::within("predict-correct", name, e);
            let gated = predict_field(archive.model(), &x, m.n_cells(), sigma_bar).map_err(within)?;
            let mut notes = Vec::new();
            let k_eff = k.min(reference_x.n_rows().saturating_sub(1)).max(1);
            if k_eff != k {
                notes.push(format!("LOF neighbours reduced to {k_eff}"));
            }
            let lof = fit_lof(reference_x, k_eff).map_err(within)?;
            let scores = lof.score_all(&x).map_err(within)?;
            let solved = corrected_solve(&case, &baseline, &gated);
            if solved.failed() {
                notes.push(format!("corrected solve {}; uncorrected state kept", solved.status));
            }
            let st = &solved.state;
            let sigma = cell_values(m.n_cells(), &gated.records, |r| r.sigma);
            let mut lof_field = vec![0.0; m.n_cells()];
            for (&c, s) in x.cells.iter().zip(&scores) {
                lof_field[c] = *s;
            }
            let mut files = vec![
                write_with(&dir.join("predictions.csv"), |w| io::write_predictions_csv(w, m, &gated.records))?,
                write_with(&dir.join("lof.csv"), |w| io::write_lof_csv(w, m, &x.cells, &scores))?,
                write_with(&dir.join("beta.csv"), |w| io::write_beta_csv(w, m, &gated.beta))?,
                write_with(&dir.join("corrected-state.csv"), |w| io::write_state_csv(w, m, st))?,
                write_json(&dir.join("corrected-state.json"), st, false)?,
                write_with(&dir.join("fields.vtk"), |w| {
                    io::write_vtk(
                        w,
                        m,
                        "gated correction",
                        &[
                            ("u_baseline", &baseline.u),
                            ("u_corrected", &st.u),
                            ("beta", gated.beta.values()),
                            ("sigma", &sigma),
                            ("lof", &lof_field),
                        ],
                    )
                })?,
            ];
            files.push(write_profiles(dir, m, &cc.stations, &baseline, st, reference.as_ref())?);
            if let Some(r) = &reference {
                files.push(write_comparison(dir, m, &cc.stations, &baseline, st, &r.data)?);
            }
            let summary = PredictionSummary {
                case: name.to_string(),
                sigma_bar,
                predicted_cells: gated.records.len(),
                active_cells: gated.n_active(),
                corrected_solve: solved.status.clone(),
                max_lof: scores.iter().cloned().fold(0.0, f64::max),
                rms_error_baseline: reference.as_ref().map(|r| rms_error(&baseline.u, &r.data)),
                rms_error_corrected: reference.as_ref().map(|r| rms_error(&st.u, &r.data)),
            };
            files.push(write_json(&dir.join("summary.json"), &summary, true)?);
            notes.push(format!("{} of {} cells accepted", summary.active_cells, summary.predicted_cells));
            Ok(Produced {
                files,
                notes,
                degraded: solved.failed(),
            })
        })?;
        read_json(&dir.join("summary.json"))
    }

    /// Active cells and corrected-solve outcome over a list of thresholds.
    pub fn sweep_sigma(&mut self, name: &str, list: &[f64]) -> Result<Vec<SweepRow>> {
        let list = normalize_sigma_list(list)?;
        let (archive, _) = self.train()?;
        let cc = self.case_config(name)?;
        let case = self.build_case(&cc)?;
        let baseline = self.baseline(name)?;
        let x = self.features(name)?;
        let reference = match cc.reference {
            Some(_) => Some(self.reference(name)?),
            None => None,
        };
        let dir = self.out.join("sweep").join(name);
        let inputs = self.target_inputs(name, reference.is_some());
        let params = (&list, &cc.stations);
        self.cached("sweep-sigma", name, &dir, &params, &inputs, |dir| {
            let m = &case.mesh;
            let results = list
                .par_iter()
                .map(|&s| {
                    let gated = predict_field(archive.model(), &x, m.n_cells(), s)
                        .map_err(|e| PipelineError::within("sweep-sigma", name, e))?;
                    Ok((s, gated.n_active(), corrected_solve(&case, &baseline, &gated)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            let mut prof = Vec::new();
            let cols = station_columns(m, &cc.stations);
            for (s, n, solved) in &results {
                let rms = reference.as_ref().map(|r| rms_error(&solved.state.u, &r.data));
                rows.push(vec![
                    s.to_string(),
                    n.to_string(),
                    csv_text(&solved.status),
                    rms.map_or(String::new(), |v| v.to_string()),
                ]);
                for &(xs, i) in &cols {
                    for c in column_cells(m, i) {
                        let [_, y] = m.center(c);
                        prof.push(vec![s.to_string(), xs.to_string(), y.to_string(), solved.state.u[c].to_string()]);
                    }
                }
            }
            let degraded = results.iter().any(|r| r.2.failed());
            Ok(Produced {
                files: vec![
                    write_table(
                        &dir.join("sweep.csv"),
                        &["sigma_bar (-)", "active_cells", "corrected_solve", "rms_error (U)"],
                        &rows,
                    )?,
                    write_table(&dir.join("profiles.csv"), &["sigma_bar (-)", "station (L)", "y (L)", "u (U)"], &prof)?,
                ],
                notes: vec![format!("{} thresholds", list.len())],
                degraded,
            })
        })?;
        read_sweep(&dir.join("sweep.csv"))
    }

    /// Adjoint-versus-finite-difference gradient checks on the training
    /// cases and a round trip of the model archive when one exists.
    pub fn verify(&mut self, cells_per_case: usize) -> Result<Vec<VerifyRow>> {
        let t = Instant::now();
        let mut rows = Vec::new();
        let names: Vec<String> = self
            .cfg
            .cases_with(CaseRole::Training)
            .map(|c| c.name.clone())
            .collect();
        let mut inputs = Vec::new();
        for (k, name) in names.iter().enumerate() {
            let baseline = self.baseline(name)?;
            let reference = self.reference(name)?;
            inputs.push(self.case_dir(name, "baseline").join("state.json"));
            let case = self.build_case(&self.case_config(name)?)?;
            let within = |e| PipelineError::within("verify", name, e);
            let problem = InversionProblem::new(case, reference.data, self.cfg.inversion.lambda)
                .and_then(|p| p.with_optimizer(self.cfg.inversion.optimizer.clone()))
                .map_err(within)?;
            let n = problem.case.n_cells();
            let one = CorrectionField::uniform(n);
            let g = adjoint_gradient(&baseline, &one, &problem).map_err(within)?;
            let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mut cells: Vec<usize> = (0..n).filter(|&c| !problem.case.mesh.is_blanked(c)).collect();
            cells.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(k as u64)));
            cells.truncate(cells_per_case);
            cells.sort_unstable();
            let h = 1e-4;
            let fd = cells
                .par_iter()
                .map(|&c| {
                    let j = |d: f64| {
                        let mut b = vec![1.0; n];
                        b[c] += d;
                        let beta = CorrectionField::from_values(b)?;
                        let st = problem.case.solve(&beta)?;
                        turbgate::inversion::objective(&st, &problem, &beta)
                    };
                    Ok((j(h)? - j(-h)?) / (2.0 * h))
                })
                .collect::<turbgate::Result<Vec<f64>>>()
                .map_err(within)?;
            for (&c, d) in cells.iter().zip(&fd) {
                let err = (g[c] - d).abs() / d.abs().max(1e-3 * gmax).max(1e-300);
                rows.push(VerifyRow {
                    check: format!("adjoint-gradient cell {c}"),
                    subject: name.clone(),
                    value: err,
                    tolerance: 1e-3,
                });
            }
        }
        let ap = self.model_dir().join("archive.json");
        if ap.exists() {
            inputs.push(ap.clone());
            let text = fs::read_to_string(&ap).map_err(|e| PipelineError::io(&ap, e))?;
            let a = ModelArchive::from_json(&text).map_err(|e| PipelineError::io(&ap, e))?;
            let again = a.to_json().map_err(internal)?;
            rows.push(VerifyRow {
                check: "archive round trip".into(),
                subject: "model".into(),
                value: if again == text { 0.0 } else { 1.0 },
                tolerance: 0.0,
            });
            let rp = self.model_dir().join("reference-features.json");
            if rp.exists() {
                let x: FeatureMatrix = read_json(&rp)?;
                let mut worst = 0.0f64;
                for i in 0..x.n_rows().min(16) {
                    let p = a.model().predict(x.row(i)).map_err(internal)?;
                    worst = worst.max((p.var_total - p.var_mu - p.var_sigma).abs());
                }
                rows.push(VerifyRow {
                    check: "variance decomposition".into(),
                    subject: "model".into(),
                    value: worst,
                    tolerance: 1e-12,
                });
            }
        }
        let dir = self.out.join("verify");
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    csv_text(&r.check),
                    r.subject.clone(),
                    r.value.to_string(),
                    r.tolerance.to_string(),
                    r.pass().to_string(),
                ]
            })
            .collect();
        let path = write_table(&dir.join("verify.csv"), &["check", "subject", "value", "tolerance", "pass"], &table)?;
        let failed = rows.iter().filter(|r| !r.pass()).count();
        let inputs = inputs
            .iter()
            .map(|p| FileRecord::of(p, &self.out))
            .collect::<Result<Vec<_>>>()?;
        self.record(StageRecord {
            stage: "verify".into(),
            subject: "run".into(),
            key: stage_key(&("verify", cells_per_case), &inputs)?,
            seed: self.cfg.seed,
            tool_version: TOOL_VERSION.into(),
            wall_time_s: t.elapsed().as_secs_f64(),
            outcome: if failed == 0 {
                StageOutcome::Completed
            } else {
                StageOutcome::Failed
            },
            inputs,
            outputs: vec![FileRecord::of(&path, &self.out)?],
            notes: vec![format!("{failed} of {} checks failed", rows.len())],
        })?;
        if failed > 0 {
            return Err(PipelineError::Verification(format!(
                "{failed} of {} checks failed; see verify/verify.csv",
                rows.len()
            )));
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRow {
    pub check: String,
    pub subject: String,
    pub value: f64,
    pub tolerance: f64,
}

impl VerifyRow {
    pub fn pass(&self) -> bool {
        self.value <= self.tolerance
    }
}

fn cell_values(n: usize, records: &[CellPrediction], f: impl Fn(&CellPrediction) -> f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for r in records {
        v[r.cell] = f(r);
    }
    v
}

/// Quotes a free-text field when it contains CSV syntax.
fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_profiles(
    dir: &Path,
    m: &Mesh,
    stations: &[f64],
    baseline: &FlowState,
    corrected: &FlowState,
    reference: Option<&Reference>,
) -> Result<PathBuf> {
    let ref_state = reference.and_then(|r| r.state.as_ref());
    let mut header = vec!["station (L)", "x (L)", "y (L)", "u_baseline (U)", "u_corrected (U)"];
    if ref_state.is_some() {
        header.push("u_reference (U)");
    }
    let mut rows = Vec::new();
    for (xs, i) in station_columns(m, stations) {
        for c in column_cells(m, i) {
            let [x, y] = m.center(c);
            let mut r = vec![
                xs.to_string(),
                x.to_string(),
                y.to_string(),
                baseline.u[c].to_string(),
                corrected.u[c].to_string(),
            ];
            if let Some(s) = ref_state {
                r.push(s.u[c].to_string());
            }
            rows.push(r);
        }
    }
    write_table(&dir.join("profiles.csv"), &header, &rows)
}

fn write_comparison(
    dir: &Path,
    m: &Mesh,
    stations: &[f64],
    baseline: &FlowState,
    corrected: &FlowState,
    data: &AssimilationData,
) -> Result<PathBuf> {
    let group = |keep: &dyn Fn(usize) -> bool, label: String| -> Option<Vec<String>> {
        let mut n = 0usize;
        let (mut eb, mut ec) = (0.0, 0.0);
        for (&c, r) in data.cells().iter().zip(data.u_ref()) {
            if keep(c) {
                n += 1;
                eb += (baseline.u[c] - r).powi(2);
                ec += (corrected.u[c] - r).powi(2);
            }
        }
        (n > 0).then(|| {
            vec![
                label,
                n.to_string(),
                (eb / n as f64).sqrt().to_string(),
                (ec / n as f64).sqrt().to_string(),
            ]
        })
    };
    let mut rows = Vec::new();
    rows.extend(group(&|_| true, "all".into()));
    if m.dim() == 2 {
        for (xs, i) in station_columns(m, stations) {
            rows.extend(group(&|c| m.ij(c).0 == i, format!("x={xs}")));
        }
    }
    write_table(
        &dir.join("comparison.csv"),
        &["group", "samples", "rms_baseline (U)", "rms_corrected (U)"],
        &rows,
    )
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let bad = || PipelineError::Data(format!("{}: malformed sweep table", path.display()));
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.splitn(3, ',').collect();
            if f.len() < 3 {
                return Err(bad());
            }
            let (status, rms) = match f[2].rsplit_once(',') {
                Some((s, r)) => (s.trim_matches('"').replace("\"\"", "\""), r),
                None => return Err(bad()),
            };
            Ok(SweepRow {
                sigma_bar: f[0].parse().map_err(|_| bad())?,
                active_cells: f[1].parse().map_err(|_| bad())?,
                status,
                rms_error: if rms.is_empty() {
                    None
                } else {
                    Some(rms.parse().map_err(|_| bad())?)
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_text_is_quoted() {
        assert_eq!(csv_text("converged"), "converged");
        assert_eq!(csv_text("failed: a, b"), "\"failed: a, b\"");
    }

    #[test]
    fn sweep_tables_read_back() {
        let dir = std::env::temp_dir().join(format!("turbgate-sweep-{}", std::process::id()));
        let rows = vec![
            vec!["0.1".into(), "3".into(), csv_text("failed: x, y"), "".into()],
            vec!["0.2".into(), "5".into(), "converged".into(), "0.5".into()],
        ];
        let p = write_table(&dir.join("s.csv"), &["a", "b", "c", "d"], &rows).unwrap();
        let back = read_sweep(&p).unwrap();
        assert_eq!(back[0].status, "failed: x, y");
        assert_eq!(back[0].rms_error, None);
        assert_eq!(back[1].active_cells, 5);
        assert_eq!(back[1].rms_error, Some(0.5));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn station_columns_pick_the_nearest_centre() {
        let m = Mesh::step_2d(16, 16, 0.25, 4.0, 1.0).unwrap();
        let cols = station_columns(&m, &[0.1, 2.1, 3.9]);
        assert_eq!(cols.iter().map(|c| c.1).collect::<Vec<_>>(), vec![0, 8, 15]);
        let ch = Mesh::channel_1d(8, 1.0, 1.0).unwrap();
        assert_eq!(station_columns(&ch, &[]).len(), 1);
    }
}
