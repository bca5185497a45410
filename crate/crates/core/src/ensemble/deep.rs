//! Deep-ensembles baseline: independently initialised mean-variance
//! networks trained on the pooled data with a Gaussian negative log
//! likelihood, combined as a uniform mixture.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::FeatureMatrix;

use super::{combine, EnsembleModel, EnsemblePrediction, Weighting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepEnsembleConfig {
    #[serde(default = "defaults::members")]
    pub members: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Give every member the same seed (a degenerate ensemble).
    #[serde(default)]
    pub identical_members: bool,
    /// Re-initialisations allowed when a member's loss turns non-finite.
    #[serde(default = "defaults::max_restarts")]
    pub max_restarts: usize,
}

mod defaults {
    pub fn members() -> usize {
        5
    }
    pub fn hidden() -> Vec<usize> {
        vec![64, 64]
    }
    pub fn epochs() -> usize {
        200
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn max_restarts() -> usize {
        3
    }
}

impl Default for DeepEnsembleConfig {
    fn default() -> Self {
        Self {
            members: defaults::members(),
            hidden: defaults::hidden(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            seed: 0,
            identical_members: false,
            max_restarts: defaults::max_restarts(),
        }
    }
}

const VAR_FLOOR: f64 = 1e-6;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    n_in: usize,
    n_out: usize,
    /// Row-major `n_out x n_in`.
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Fully connected tanh network with a two-unit head (mean, raw variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanVarianceNet {
    layers: Vec<Layer>,
}

struct Trace {
    /// Activations entering each layer, plus the raw output.
    acts: Vec<Vec<f64>>,
}

impl MeanVarianceNet {
    fn new(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|s| {
                let (n_in, n_out) = (s[0], s[1]);
                let a = (6.0 / (n_in + n_out) as f64).sqrt();
                Layer {
                    n_in,
                    n_out,
                    w: (0..n_in * n_out).map(|_| rng.gen_range(-a..a)).collect(),
                    b: vec![0.0; n_out],
                }
            })
            .collect();
        Self { layers }
    }

    fn forward(&self, x: &[f64]) -> Trace {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let inp = acts.last().expect("input pushed");
            let mut out = l.b.clone();
            for (o, v) in out.iter_mut().enumerate() {
                *v += l.w[o * l.n_in..(o + 1) * l.n_in]
                    .iter()
                    .zip(inp)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            if li != last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        Trace { acts }
    }

    /// Mean and variance in standardised units.
    fn moments(&self, x: &[f64]) -> (f64, f64) {
        let t = self.forward(x);
        let o = t.acts.last().expect("output");
        (o[0], softplus(o[1]) + VAR_FLOOR)
    }

    /// Accumulates NLL gradients for one sample; returns the loss.
    fn backward(&self, x: &[f64], y: f64, grads: &mut [Layer]) -> f64 {
        let t = self.forward(x);
        let o = t.acts.last().expect("output");
        let mu = o[0];
        let var = softplus(o[1]) + VAR_FLOOR;
        let r = y - mu;
        let loss = 0.5 * var.ln() + 0.5 * r * r / var;
        let mut delta = vec![-r / var, (0.5 / var - 0.5 * r * r / (var * var)) * sigmoid(o[1])];
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let inp = &t.acts[li];
            let g = &mut grads[li];
            for o in 0..l.n_out {
                g.b[o] += delta[o];
                for i in 0..l.n_in {
                    g.w[o * l.n_in + i] += delta[o] * inp[i];
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; l.n_in];
                for o in 0..l.n_out {
                    for i in 0..l.n_in {
                        prev[i] += l.w[o * l.n_in + i] * delta[o];
                    }
                }
                // inputs of this layer are tanh outputs of the previous one
                for (p, a) in prev.iter_mut().zip(inp) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
        loss
    }

    fn zeros_like(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .map(|l| Layer {
                n_in: l.n_in,
                n_out: l.n_out,
                w: vec![0.0; l.w.len()],
                b: vec![0.0; l.b.len()],
            })
            .collect()
    }
}

struct Adam {
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: i32,
}

impl Adam {
    fn step(&mut self, net: &mut MeanVarianceNet, g: &[Layer], lr: f64) {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for li in 0..net.layers.len() {
            let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            };
            let (m, v) = (&mut self.m[li], &mut self.v[li]);
            upd(&mut net.layers[li].w, &g[li].w, &mut m.w, &mut v.w);
            upd(&mut net.layers[li].b, &g[li].b, &mut m.b, &mut v.b);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepEnsemble {
    members: Vec<MeanVarianceNet>,
    x_mean: Vec<f64>,
    x_scale: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    pub config: DeepEnsembleConfig,
}

fn member_seed(seed: u64, k: usize, identical: bool) -> u64 {
    if identical {
        seed
    } else {
        seed ^ (k as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

fn train_member(
    x: &[Vec<f64>],
    y: &[f64],
    sizes: &[usize],
    cfg: &DeepEnsembleConfig,
    seed: u64,
) -> Result<MeanVarianceNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'attempt: for attempt in 0..=cfg.max_restarts {
        let mut net = MeanVarianceNet::new(sizes, &mut rng);
        let mut adam = Adam {
            m: net.zeros_like(),
            v: net.zeros_like(),
            t: 0,
        };
        let mut order: Vec<usize> = (0..y.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let mut g = net.zeros_like();
                let mut loss = 0.0;
                for &i in batch {
                    loss += net.backward(&x[i], y[i], &mut g);
                }
                if !loss.is_finite() {
                    log::warn!("member loss became non-finite (attempt {attempt}); reinitialising");
                    continue 'attempt;
                }
                let scale = 1.0 / batch.len() as f64;
                for l in g.iter_mut() {
                    l.w.iter_mut().for_each(|v| *v *= scale);
                    l.b.iter_mut().for_each(|v| *v *= scale);
                }
                adam.step(&mut net, &g, cfg.learning_rate);
            }
        }
        return Ok(net);
    }
    Err(Error::Training(format!(
        "deep-ensemble member failed after {} restarts",
        cfg.max_restarts
    )))
}

/// Trains `cfg.members` networks in parallel on the pooled data.
pub fn train_deep_ensemble(x: &FeatureMatrix, y: &[f64], cfg: &DeepEnsembleConfig) -> Result<DeepEnsemble> {
    if cfg.members < 2 {
        return invalid("a deep ensemble needs at least two members");
    }
    if x.n_rows() != y.len() || y.is_empty() {
        return invalid("feature rows and targets must match and be non-empty");
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return invalid("training data must be finite");
    }
    if cfg.hidden.iter().any(|&h| h == 0) || cfg.epochs == 0 || !(cfg.learning_rate > 0.0) {
        return invalid("hidden widths, epochs and learning rate must be positive");
    }
    let n = y.len();
    let d = x.n_cols();
    let x_mean: Vec<f64> = (0..d)
        .map(|k| x.rows().map(|r| r[k]).sum::<f64>() / n as f64)
        .collect();
    let x_scale: Vec<f64> = (0..d)
        .map(|k| {
            let s = (x.rows().map(|r| (r[k] - x_mean[k]).powi(2)).sum::<f64>() / n as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let ys = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let y_scale = if ys > 0.0 { ys } else { 1.0 };
    let xs: Vec<Vec<f64>> = x
        .rows()
        .map(|r| r.iter().enumerate().map(|(k, v)| (v - x_mean[k]) / x_scale[k]).collect())
        .collect();
    let yn: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
    let mut sizes = vec![d];
    sizes.extend(&cfg.hidden);
    sizes.push(2);
    let members = (0..cfg.members)
        .into_par_iter()
        .map(|k| train_member(&xs, &yn, &sizes, cfg, member_seed(cfg.seed, k, cfg.identical_members)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DeepEnsemble {
        members,
        x_mean,
        x_scale,
        y_mean,
        y_scale,
        config: cfg.clone(),
    })
}

impl DeepEnsemble {
    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    /// Per-member mean and standard deviation.
    pub fn member_moments(&self, x: &[f64]) -> Result<Vec<(f64, f64)>> {
        if x.len() != self.x_mean.len() {
            return invalid(format!(
                "query has {} features, ensemble expects {}",
                x.len(),
                self.x_mean.len()
            ));
        }
        let xs: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.x_mean[k]) / self.x_scale[k])
            .collect();
        Ok(self
            .members
            .iter()
            .map(|m| {
                let (mu, var) = m.moments(&xs);
                (self.y_mean + self.y_scale * mu, self.y_scale * var.sqrt())
            })
            .collect())
    }
}

impl EnsembleModel for DeepEnsemble {
    fn n_features(&self) -> usize {
        self.x_mean.len()
    }

    fn predict(&self, x: &[f64]) -> Result<EnsemblePrediction> {
        combine(&self.member_moments(x)?, Weighting::Uniform)
    }
}
