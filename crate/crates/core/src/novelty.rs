//! Local outlier factor scoring of query feature vectors against a reference
//! set. Scores near 1 mean the query sits at the density of its neighbours;
//! scores well above 1 flag extrapolation.
//!
//! Neighbourhoods follow the usual tie rule: the k-neighbourhood of a point
//! holds every reference point no farther than its k-th nearest neighbour,
//! so it can have more than `k` members. Reachability distances are floored
//! at [`REACH_FLOOR`] so duplicate points keep finite densities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::features::FeatureMatrix;

pub const DEFAULT_NEIGHBORS: usize = 20;
pub const REACH_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LofModel {
    reference: FeatureMatrix,
    k: usize,
    k_distance: Vec<f64>,
    lrd: Vec<f64>,
    training_scores: Vec<f64>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sorted `(distance, index)` pairs from `q` to every reference row, except
/// `skip`.
fn sorted_distances(x: &FeatureMatrix, q: &[f64], skip: Option<usize>) -> Vec<(f64, usize)> {
    let mut d: Vec<(f64, usize)> = (0..x.n_rows())
        .filter(|&j| Some(j) != skip)
        .map(|j| (distance(q, x.row(j)), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d
}

/// The k-distance and the tie-inclusive k-neighbourhood.
fn neighbourhood(sorted: &[(f64, usize)], k: usize) -> (f64, &[(f64, usize)]) {
    let kd = sorted[k - 1].0;
    let end = sorted.partition_point(|p| p.0 <= kd);
    (kd, &sorted[..end])
}

impl LofModel {
    pub fn fit(reference: FeatureMatrix, k: usize) -> Result<Self> {
        let n = reference.n_rows();
        if k == 0 || k >= n {
            return invalid(format!("neighbour count must be in [1, {}), got {k}", n));
        }
        if !reference.is_finite() {
            return invalid("reference features must be finite");
        }
        let hoods: Vec<(f64, Vec<(f64, usize)>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let s = sorted_distances(&reference, reference.row(i), Some(i));
                let (kd, h) = neighbourhood(&s, k);
                (kd, h.to_vec())
            })
            .collect();
        let k_distance: Vec<f64> = hoods.iter().map(|h| h.0).collect();
        let lrd: Vec<f64> = hoods
            .iter()
            .map(|(_, h)| density(h, &k_distance))
            .collect();
        let training_scores = hoods
            .iter()
            .zip(&lrd)
            .map(|((_, h), &l)| h.iter().map(|&(_, j)| lrd[j]).sum::<f64>() / (h.len() as f64 * l))
            .collect();
        Ok(Self {
            reference,
            k,
            k_distance,
            lrd,
            training_scores,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_features(&self) -> usize {
        self.reference.n_cols()
    }

    pub fn reference(&self) -> &FeatureMatrix {
        &self.reference
    }

    pub fn k_distances(&self) -> &[f64] {
        &self.k_distance
    }

    pub fn densities(&self) -> &[f64] {
        &self.lrd
    }

    /// LOF of each reference point within the reference set (self excluded).
    pub fn training_scores(&self) -> &[f64] {
        &self.training_scores
    }

    pub fn score(&self, q: &[f64]) -> Result<f64> {
        if q.len() != self.n_features() {
            return invalid(format!(
                "query has width {}, model expects {}",
                q.len(),
                self.n_features()
            ));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return invalid("query must be finite");
        }
        let s = sorted_distances(&self.reference, q, None);
        let (_, h) = neighbourhood(&s, self.k);
        let l = density(h, &self.k_distance);
        Ok(h.iter().map(|&(_, j)| self.lrd[j]).sum::<f64>() / (h.len() as f64 * l))
    }

    pub fn score_all(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        (0..x.n_rows()).into_par_iter().map(|i| self.score(x.row(i))).collect()
    }
}

fn density(hood: &[(f64, usize)], k_distance: &[f64]) -> f64 {
    let mean = hood
        .iter()
        .map(|&(d, j)| d.max(k_distance[j]).max(REACH_FLOOR))
        .sum::<f64>()
        / hood.len() as f64;
    1.0 / mean
}

pub fn fit_lof(reference: FeatureMatrix, k: usize) -> Result<LofModel> {
    LofModel::fit(reference, k)
}
