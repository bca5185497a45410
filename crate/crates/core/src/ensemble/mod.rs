//! Ensembles of probabilistic regressors for the correction field, their
//! mixture moments and the variance gate that decides where a prediction is
//! applied.
//!
//! For submodel moments `(mu_k, s_k)` and weights `w_k`:
//! `mu* = sum w_k mu_k`, `var_mu = sum w_k (mu_k - mu*)^2`,
//! `var_sigma = sum w_k s_k^2`, `var* = var_mu + var_sigma`. Emulator
//! ensembles weight by inverse variance, deep ensembles uniformly.

pub mod deep;
pub mod gp;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{FeatureMatrix, TrainingSet};
use crate::solver::CorrectionField;

pub use deep::{train_deep_ensemble, DeepEnsemble, DeepEnsembleConfig};
pub use gp::{train_gpe, GpeOptions, GpeSubmodel, Hyperparameters, Inference, PriorMean};

/// Submodel standard deviations are floored here before weighting.
pub const SIGMA_FLOOR: f64 = 1e-9;
/// Default gate for emulator ensembles.
pub const DEFAULT_SIGMA_BAR_GPE: f64 = 0.2;
/// Default gate for deep ensembles.
pub const DEFAULT_SIGMA_BAR_DE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    InverseVariance,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
    pub mean: f64,
    /// Spread of the submodel means.
    pub var_mu: f64,
    /// Weighted average submodel variance.
    pub var_sigma: f64,
    pub var_total: f64,
}

impl EnsemblePrediction {
    pub fn sigma_mu(&self) -> f64 {
        self.var_mu.sqrt()
    }

    pub fn sigma_sigma(&self) -> f64 {
        self.var_sigma.sqrt()
    }

    pub fn sigma(&self) -> f64 {
        self.var_total.sqrt()
    }
}

/// Mixture moments of submodel predictions `(mean, std)`.
pub fn combine(moments: &[(f64, f64)], weighting: Weighting) -> Result<EnsemblePrediction> {
    if moments.is_empty() {
        return invalid("an ensemble needs at least one submodel");
    }
    if moments.iter().any(|(m, s)| !m.is_finite() || !s.is_finite() || *s < 0.0) {
        return invalid("submodel moments must be finite with non-negative spread");
    }
    let means: Vec<f64> = moments.iter().map(|m| m.0).collect();
    let stds: Vec<f64> = moments.iter().map(|m| m.1.max(SIGMA_FLOOR)).collect();
    let raw: Vec<f64> = match weighting {
        Weighting::InverseVariance => stds.iter().map(|s| 1.0 / (s * s)).collect(),
        Weighting::Uniform => vec![1.0; stds.len()],
    };
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    // shifted by the first mean
    let pivot = means[0];
    let mean = pivot + weights.iter().zip(&means).map(|(w, m)| w * (m - pivot)).sum::<f64>();
    let var_mu = weights
        .iter()
        .zip(&means)
        .map(|(w, m)| w * (m - mean).powi(2))
        .sum::<f64>()
        .max(0.0);
    let var_sigma: f64 = weights.iter().zip(&stds).map(|(w, s)| w * s * s).sum();
    Ok(EnsemblePrediction {
        means,
        stds,
        weights,
        mean,
        var_mu,
        var_sigma,
        var_total: var_mu + var_sigma,
    })
}

/// The gate: `mu*` where `sigma* <= sigma_bar`, otherwise 1.
pub fn apply_acceptance(pred: &EnsemblePrediction, sigma_bar: f64) -> f64 {
    if pred.sigma() <= sigma_bar {
        pred.mean
    } else {
        1.0
    }
}

/// A trained model giving ensemble predictions at a feature vector.
pub trait EnsembleModel: Sync {
    fn n_features(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<EnsemblePrediction>;
}

/// One emulator per data source, combined by inverse-variance weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpeEnsemble {
    pub submodels: Vec<GpeSubmodel>,
}

impl GpeEnsemble {
    pub fn new(submodels: Vec<GpeSubmodel>) -> Result<Self> {
        let Some(first) = submodels.first() else {
            return invalid("an ensemble needs at least one submodel");
        };
        let d = first.n_features();
        if submodels.iter().any(|m| m.n_features() != d) {
            return invalid("submodels disagree on the feature width");
        }
        Ok(Self { submodels })
    }

    pub fn rebuild(&mut self) -> Result<()> {
        self.submodels.iter_mut().try_for_each(GpeSubmodel::rebuild)
    }
}

impl EnsembleModel for GpeEnsemble {
    fn n_features(&self) -> usize {
        self.submodels[0].n_features()
    }

    fn predict(&self, x: &[f64]) -> Result<EnsemblePrediction> {
        let moments = self
            .submodels
            .iter()
            .map(|m| m.predict(x))
            .collect::<Result<Vec<_>>>()?;
        combine(&moments, Weighting::InverseVariance)
    }
}

/// Trains one emulator per source of the training set in parallel; each
/// source gets its own seed derived from `opts.seed`.
pub fn train_gpe_ensemble(set: &TrainingSet, opts: &GpeOptions) -> Result<GpeEnsemble> {
    let models = set
        .sources
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let mut o = opts.clone();
            o.seed = opts.seed.wrapping_add(k as u64 * 7919);
            train_gpe(s.label.clone(), &s.x, &s.y, &o)
                .map_err(|e| Error::Training(format!("source {}: {e}", s.label)))
        })
        .collect::<Result<Vec<_>>>()?;
    GpeEnsemble::new(models)
}

/// Per-cell outcome of a gated prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub cell: usize,
    pub mean: f64,
    pub sigma_mu: f64,
    pub sigma_sigma: f64,
    pub sigma: f64,
    pub beta: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedField {
    pub beta: CorrectionField,
    pub records: Vec<CellPrediction>,
}

impl GatedField {
    pub fn n_active(&self) -> usize {
        self.records.iter().filter(|r| r.active).count()
    }
}

/// Predicts every feature row and gates it; cells without a row keep 1.
/// Accepted means are floored at 0 so the field stays a valid correction.
pub fn predict_field(
    model: &dyn EnsembleModel,
    features: &FeatureMatrix,
    n_cells: usize,
    sigma_bar: f64,
) -> Result<GatedField> {
    if !(sigma_bar >= 0.0) {
        return invalid(format!("sigma_bar must be >= 0, got {sigma_bar}"));
    }
    if features.n_cols() != model.n_features() {
        return invalid(format!(
            "features have width {}, model expects {}",
            features.n_cols(),
            model.n_features()
        ));
    }
    if let Some(&c) = features.cells.iter().find(|&&c| c >= n_cells) {
        return invalid(format!("feature row for cell {c} outside the mesh"));
    }
    let records = (0..features.n_rows())
        .into_par_iter()
        .map(|i| {
            let p = model.predict(features.row(i))?;
            let active = p.sigma() <= sigma_bar;
            Ok(CellPrediction {
                cell: features.cells[i],
                mean: p.mean,
                sigma_mu: p.sigma_mu(),
                sigma_sigma: p.sigma_sigma(),
                sigma: p.sigma(),
                beta: if active { apply_acceptance(&p, sigma_bar).max(0.0) } else { 1.0 },
                active,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut beta = vec![1.0; n_cells];
    for r in &records {
        beta[r.cell] = r.beta;
    }
    Ok(GatedField {
        beta: CorrectionField::from_values(beta)?,
        records,
    })
}

pub const ARCHIVE_FORMAT: &str = "turbgate-model/1";

/// Persisted model with a format tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelArchive {
    Gpe {
        format: String,
        ensemble: GpeEnsemble,
    },
    DeepEnsemble {
        format: String,
        ensemble: DeepEnsemble,
    },
}

impl ModelArchive {
    pub fn gpe(ensemble: GpeEnsemble) -> Self {
        Self::Gpe {
            format: ARCHIVE_FORMAT.into(),
            ensemble,
        }
    }

    pub fn deep(ensemble: DeepEnsemble) -> Self {
        Self::DeepEnsemble {
            format: ARCHIVE_FORMAT.into(),
            ensemble,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parses an archive and rebuilds cached factorisations.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut a: ModelArchive = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        let format = match &a {
            Self::Gpe { format, .. } | Self::DeepEnsemble { format, .. } => format.clone(),
        };
        if format != ARCHIVE_FORMAT {
            return Err(Error::Parse(format!("unsupported model archive format {format}")));
        }
        if let Self::Gpe { ensemble, .. } = &mut a {
            ensemble.rebuild()?;
        }
        Ok(a)
    }

    pub fn model(&self) -> &dyn EnsembleModel {
        match self {
            Self::Gpe { ensemble, .. } => ensemble,
            Self::DeepEnsemble { ensemble, .. } => ensemble,
        }
    }

    pub fn default_sigma_bar(&self) -> f64 {
        match self {
            Self::Gpe { .. } => DEFAULT_SIGMA_BAR_GPE,
            Self::DeepEnsemble { .. } => DEFAULT_SIGMA_BAR_DE,
        }
    }
}
