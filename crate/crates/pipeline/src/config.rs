//! TOML run configuration.
//!
//! ```toml
//! format = "turbgate-config/1"
//! seed = 7
//!
//! [[case]]
//! name = "train-a"
//! role = "training"
//! mesh = { kind = "channel", n_cells = 48, stretch_ratio = 1.1 }
//! bc = { body_force = 1.0 }
//! solver = { model = "sst", nu = 0.0018 }
//! reference.twin = { center = [0.0, 0.5], width = [0.0, 0.15], depth = 0.5 }
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use turbgate::ensemble::{DeepEnsembleConfig, GpeOptions};
use turbgate::features::{Band, FeatureOptions};
use turbgate::inversion::{box_mask, OptimizerSettings};
use turbgate::{BoundaryConditions, Case, CorrectionField, Mesh, SolverSettings};

use crate::error::{PipelineError, Result};

pub const CONFIG_FORMAT: &str = "turbgate-config/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format: String,
    /// Master seed; model seeds are derived from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "case")]
    pub cases: Vec<CaseConfig>,
    #[serde(default)]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseRole {
    Training,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub name: String,
    pub role: CaseRole,
    pub mesh: MeshSpec,
    pub bc: BoundaryConditions,
    pub solver: SolverSettings,
    #[serde(default)]
    pub reference: Option<ReferenceSpec>,
    /// Streamwise positions of the exported velocity profiles (2D only).
    #[serde(default)]
    pub stations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeshSpec {
    Channel {
        n_cells: usize,
        #[serde(default = "one")]
        stretch_ratio: f64,
        #[serde(default = "one")]
        half_height: f64,
    },
    Step {
        nx: usize,
        ny: usize,
        step_height_fraction: f64,
        domain_length: f64,
        domain_height: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl MeshSpec {
    pub fn build(&self) -> turbgate::Result<Mesh> {
        match *self {
            Self::Channel {
                n_cells,
                stretch_ratio,
                half_height,
            } => Mesh::channel_1d(n_cells, stretch_ratio, half_height),
            Self::Step {
                nx,
                ny,
                step_height_fraction,
                domain_length,
                domain_height,
            } => Mesh::step_2d(nx, ny, step_height_fraction, domain_length, domain_height),
        }
    }
}

/// Where the reference velocities of a case come from: a sample file, or a
/// twin solve with a known correction field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    /// CSV with `x, y, u_ref[, v_ref]`, relative to the config file.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub twin: Option<BumpSpec>,
    /// Twin samples are taken only inside this box.
    #[serde(default)]
    pub region: Option<BoxSpec>,
}

/// `beta* = 1 - depth * exp(-sum ((x_d - c_d) / w_d)^2)` over the
/// directions with a positive width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub center: [f64; 2],
    pub width: [f64; 2],
    pub depth: f64,
}

impl BumpSpec {
    pub fn field(&self, mesh: &Mesh) -> turbgate::Result<CorrectionField> {
        let beta = (0..mesh.n_cells())
            .map(|c| {
                let x = mesh.center(c);
                let r2: f64 = (0..2)
                    .filter(|&d| self.width[d] > 0.0)
                    .map(|d| ((x[d] - self.center[d]) / self.width[d]).powi(2))
                    .sum();
                (1.0 - self.depth * (-r2).exp()).max(0.0)
            })
            .collect();
        CorrectionField::from_values(beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl BoxSpec {
    pub fn mask(&self, mesh: &Mesh) -> Vec<bool> {
        box_mask(mesh, self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    /// Cells whose beta may change; all active cells when absent.
    #[serde(default)]
    pub activity: Option<BoxSpec>,
}

fn default_lambda() -> f64 {
    1e-2
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            optimizer: OptimizerSettings::default(),
            activity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Targets inside `[lo, hi]` are left out of training.
    #[serde(default = "default_band")]
    pub band: [f64; 2],
    #[serde(default = "yes")]
    pub squash: bool,
    #[serde(default = "one")]
    pub x_ref: f64,
}

fn default_band() -> [f64; 2] {
    [0.9, 1.1]
}

fn yes() -> bool {
    true
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            band: default_band(),
            squash: true,
            x_ref: 1.0,
        }
    }
}

impl FeatureConfig {
    pub fn options(&self) -> FeatureOptions {
        FeatureOptions {
            squash: self.squash,
            x_ref: self.x_ref,
        }
    }

    pub fn band(&self) -> turbgate::Result<Band> {
        Band::new(self.band[0], self.band[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gpe,
    DeepEnsemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    /// Acceptance threshold; the model's default when absent.
    #[serde(default)]
    pub sigma_bar: Option<f64>,
    #[serde(default = "default_sweep")]
    pub sigma_sweep: Vec<f64>,
    #[serde(default)]
    pub gpe: GpeOptions,
    #[serde(default)]
    pub deep: DeepEnsembleConfig,
    #[serde(default = "default_neighbors")]
    pub lof_neighbors: usize,
}

fn default_kind() -> ModelKind {
    ModelKind::Gpe
}

fn default_sweep() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.2, 0.4, 0.8]
}

fn default_neighbors() -> usize {
    20
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            sigma_bar: None,
            sigma_sweep: default_sweep(),
            gpe: GpeOptions::default(),
            deep: DeepEnsembleConfig::default(),
            lof_neighbors: default_neighbors(),
        }
    }
}

fn config_error(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn safe_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !name.starts_with('.')
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Internal(e.to_string()))
    }

    /// Copies the master seed into the model seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.gpe.seed = seed;
        self.model.deep.seed = seed;
        self
    }

    pub fn case(&self, name: &str) -> Option<&CaseConfig> {
        self.cases.iter().find(|c| c.name == name)
    }

    pub fn cases_with(&self, role: CaseRole) -> impl Iterator<Item = &CaseConfig> {
        self.cases.iter().filter(move |c| c.role == role)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CONFIG_FORMAT {
            return Err(config_error(format!(
                "unsupported format {:?}, expected {CONFIG_FORMAT:?}",
                self.format
            )));
        }
        if self.cases.is_empty() {
            return Err(config_error("no [[case]] entries"));
        }
        let mut names = BTreeSet::new();
        for c in &self.cases {
            if !safe_name(&c.name) {
                return Err(config_error(format!("case name {:?} is not a plain file name", c.name)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(config_error(format!("case {:?} defined twice", c.name)));
            }
            c.build().map_err(|e| config_error(format!("case {}: {e}", c.name)))?;
            if let Some(r) = &c.reference {
                if r.file.is_some() == r.twin.is_some() {
                    return Err(config_error(format!(
                        "case {}: reference needs exactly one of file or twin",
                        c.name
                    )));
                }
                if r.region.is_some() && r.file.is_some() {
                    return Err(config_error(format!("case {}: region applies to twin references", c.name)));
                }
            } else if c.role == CaseRole::Training {
                return Err(config_error(format!("training case {} has no reference", c.name)));
            }
            if c.stations.iter().any(|x| !x.is_finite()) {
                return Err(config_error(format!("case {}: stations must be finite", c.name)));
            }
        }
        if !(self.inversion.lambda >= 0.0 && self.inversion.lambda.is_finite()) {
            return Err(config_error("inversion.lambda must be finite and >= 0"));
        }
        self.inversion
            .optimizer
            .validate()
            .map_err(|e| config_error(format!("inversion.optimizer: {e}")))?;
        self.features.band().map_err(|e| config_error(format!("features.band: {e}")))?;
        if !(self.features.x_ref > 0.0 && self.features.x_ref.is_finite()) {
            return Err(config_error("features.x_ref must be positive"));
        }
        if let Some(s) = self.model.sigma_bar {
            if !(s >= 0.0) {
                return Err(config_error("model.sigma_bar must be >= 0"));
            }
        }
        if self.model.sigma_sweep.iter().any(|s| !(*s >= 0.0)) {
            return Err(config_error("model.sigma_sweep values must be >= 0"));
        }
        if self.model.lof_neighbors == 0 {
            return Err(config_error("model.lof_neighbors must be positive"));
        }
        Ok(())
    }
}

impl CaseConfig {
    pub fn build(&self) -> turbgate::Result<Case> {
        Case::new(self.mesh.build()?, self.bc.clone(), self.solver.clone())
    }

    /// Absolute path of a file reference, resolved against `base`.
    pub fn reference_file(&self, base: &Path) -> Option<PathBuf> {
        let f = self.reference.as_ref()?.file.as_ref()?;
        Some(if f.is_absolute() { f.clone() } else { base.join(f) })
    }
}

/// Ascending, de-duplicated threshold list; duplicates are logged.
pub fn normalize_sigma_list(list: &[f64]) -> Result<Vec<f64>> {
    if list.is_empty() {
        return Err(config_error("sigma_bar list is empty"));
    }
    if list.iter().any(|s| !(*s >= 0.0)) {
        return Err(config_error("sigma_bar values must be >= 0"));
    }
    let mut v = list.to_vec();
    v.sort_by(f64::total_cmp);
    let before = v.len();
    v.dedup();
    if v.len() < before {
        log::warn!("removed {} duplicate sigma_bar values", before - v.len());
    }
    Ok(v)
}
