//! Gaussian process emulator with an automatic-relevance squared-exponential
//! kernel, a constant prior mean, exact inference and an inducing-point
//! (variational free energy) approximation for large training sets.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::FeatureMatrix;
use crate::optim::{minimize, LbfgsOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
    /// Constant prior mean.
    pub mean: f64,
}

impl Hyperparameters {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.lengthscales.len() != d {
            return invalid(format!(
                "{} lengthscales for {d} features",
                self.lengthscales.len()
            ));
        }
        if self.lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return invalid("lengthscales must be positive");
        }
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return invalid("signal variance must be positive");
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return invalid("noise variance must be positive");
        }
        if !self.mean.is_finite() {
            return invalid("prior mean must be finite");
        }
        Ok(())
    }

    /// `s^2 exp(-1/2 sum ((a - b)/l)^2)`.
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum();
        self.signal_variance * (-0.5 * r2).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum PriorMean {
    /// Generalised least-squares constant.
    Fitted,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpeOptions {
    #[serde(default = "defaults::restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    /// Training sets larger than this use inducing-point inference.
    #[serde(default = "defaults::sparse_threshold")]
    pub sparse_threshold: usize,
    #[serde(default = "defaults::max_inducing")]
    pub max_inducing: usize,
    /// Hyperparameters are fitted on a random subset of at most this many
    /// points.
    #[serde(default = "defaults::max_fit_points")]
    pub max_fit_points: usize,
    #[serde(default = "defaults::prior_mean")]
    pub prior_mean: PriorMean,
    /// Add the noise variance to the predictive variance.
    #[serde(default)]
    pub include_noise: bool,
    #[serde(default = "defaults::max_iterations")]
    pub max_iterations: usize,
    /// Lengthscale search interval. The upper end is of the order of the
    /// squashed feature range so that no feature drops out of the distance.
    #[serde(default = "defaults::lengthscale_bounds")]
    pub lengthscale_bounds: (f64, f64),
}

mod defaults {
    use super::PriorMean;
    pub fn restarts() -> usize {
        5
    }
    pub fn sparse_threshold() -> usize {
        1000
    }
    pub fn max_inducing() -> usize {
        512
    }
    pub fn max_fit_points() -> usize {
        600
    }
    pub fn prior_mean() -> PriorMean {
        PriorMean::Fitted
    }
    pub fn max_iterations() -> usize {
        150
    }
    pub fn lengthscale_bounds() -> (f64, f64) {
        (1e-3, 1.0)
    }
}

impl Default for GpeOptions {
    fn default() -> Self {
        Self {
            restarts: defaults::restarts(),
            seed: 0,
            sparse_threshold: defaults::sparse_threshold(),
            max_inducing: defaults::max_inducing(),
            max_fit_points: defaults::max_fit_points(),
            prior_mean: defaults::prior_mean(),
            include_noise: false,
            max_iterations: defaults::max_iterations(),
            lengthscale_bounds: defaults::lengthscale_bounds(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Inference {
    Exact,
    Sparse,
}

/// Factorisation with jitter escalation: none first, then
/// `1e-8 s^2` growing tenfold up to `1e-2 s^2`.
fn jittered_cholesky(mut k: DMatrix<f64>, signal: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mut jitter = 0.0;
    let mut next = 1e-8 * signal;
    loop {
        if let Some(ch) = Cholesky::new(k.clone()) {
            return Ok((ch, jitter));
        }
        if next > 1e-2 * signal * (1.0 + 1e-9) {
            return Err(Error::Training(format!(
                "covariance not positive definite with jitter {jitter:.3e}"
            )));
        }
        for i in 0..n {
            k[(i, i)] += next - jitter;
        }
        jitter = next;
        next *= 10.0;
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Exact {
        chol: Cholesky<f64, Dyn>,
        alpha: DVector<f64>,
    },
    Sparse {
        l_m: Cholesky<f64, Dyn>,
        l_a: Cholesky<f64, Dyn>,
        w: DVector<f64>,
    },
}

/// One trained emulator. Only the data, hyperparameters and inducing inputs
/// are persisted; factorisations are rebuilt deterministically on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpeSubmodel {
    pub label: String,
    n_features: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    hyp: Hyperparameters,
    inference: Inference,
    inducing: Vec<f64>,
    include_noise: bool,
    #[serde(skip)]
    jitter: f64,
    #[serde(skip)]
    cache: Option<Cache>,
    /// Negative log marginal likelihood reached by the fit.
    pub fit_objective: f64,
}

impl PartialEq for GpeSubmodel {
    fn eq(&self, o: &Self) -> bool {
        self.label == o.label
            && self.x == o.x
            && self.y == o.y
            && self.hyp == o.hyp
            && self.inference == o.inference
            && self.inducing == o.inducing
            && self.include_noise == o.include_noise
    }
}

fn gram(hyp: &Hyperparameters, a: &[f64], na: usize, b: &[f64], nb: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(na, nb, |i, j| hyp.kernel(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]))
}

impl GpeSubmodel {
    /// Emulator with given hyperparameters (no fitting).
    pub fn with_hyperparameters(
        label: impl Into<String>,
        x: &FeatureMatrix,
        y: &[f64],
        hyp: Hyperparameters,
        inference: Inference,
        inducing: Vec<f64>,
        include_noise: bool,
    ) -> Result<Self> {
        let d = x.n_cols();
        check_data(x, y)?;
        hyp.validate(d)?;
        if inference == Inference::Sparse && (inducing.is_empty() || inducing.len() % d != 0) {
            return invalid("sparse inference needs inducing inputs of the feature width");
        }
        let mut m = Self {
            label: label.into(),
            n_features: d,
            x: x.rows().flatten().copied().collect(),
            y: y.to_vec(),
            hyp,
            inference,
            inducing,
            include_noise,
            jitter: 0.0,
            cache: None,
            fit_objective: f64::NAN,
        };
        m.rebuild()?;
        Ok(m)
    }

    /// Recomputes the cached factorisations (needed after deserialising).
    pub fn rebuild(&mut self) -> Result<()> {
        let d = self.n_features;
        let n = self.y.len();
        let r = DVector::from_iterator(n, self.y.iter().map(|y| y - self.hyp.mean));
        match self.inference {
            Inference::Exact => {
                let mut k = gram(&self.hyp, &self.x, n, &self.x, n, d);
                for i in 0..n {
                    k[(i, i)] += self.hyp.noise_variance;
                }
                let (chol, jitter) = jittered_cholesky(k, self.hyp.signal_variance)?;
                let alpha = chol.solve(&r);
                self.jitter = jitter;
                self.cache = Some(Cache::Exact { chol, alpha });
            }
            Inference::Sparse => {
                let m = self.inducing.len() / d;
                let kmm = gram(&self.hyp, &self.inducing, m, &self.inducing, m, d);
                let (l_m, jitter) = jittered_cholesky(kmm, self.hyp.signal_variance)?;
                let kmn = gram(&self.hyp, &self.inducing, m, &self.x, n, d);
                let v = l_m.l().solve_lower_triangular(&kmn).ok_or_else(|| {
                    Error::Training("inducing-point factor is singular".into())
                })?;
                let s2 = self.hyp.noise_variance;
                let mut a = &v * v.transpose() / s2;
                for i in 0..m {
                    a[(i, i)] += 1.0;
                }
                let l_a = Cholesky::new(a)
                    .ok_or_else(|| Error::Training("inducing-point system not positive definite".into()))?;
                let t = l_a.solve(&(&v * &r)) / s2;
                let w = l_m
                    .l()
                    .transpose()
                    .solve_upper_triangular(&t)
                    .ok_or_else(|| Error::Training("inducing-point factor is singular".into()))?;
                self.jitter = jitter;
                self.cache = Some(Cache::Sparse { l_m, l_a, w });
            }
        }
        Ok(())
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyp
    }

    pub fn inference(&self) -> Inference {
        self.inference
    }

    /// Diagonal jitter added on top of the noise (exact) or to `K_mm`
    /// (sparse).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing.len() / self.n_features
    }

    pub fn inducing_inputs(&self) -> &[f64] {
        &self.inducing
    }

    pub fn include_noise(&self) -> bool {
        self.include_noise
    }

    /// Posterior mean and standard deviation at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.n_features {
            return invalid(format!(
                "query has {} features, emulator expects {}",
                x.len(),
                self.n_features
            ));
        }
        let d = self.n_features;
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Internal("emulator used before rebuild".into()))?;
        let prior = self.hyp.signal_variance;
        let (mean, var) = match cache {
            Cache::Exact { chol, alpha } => {
                let n = self.y.len();
                let ks = DVector::from_fn(n, |i, _| self.hyp.kernel(x, &self.x[i * d..(i + 1) * d]));
                let v = chol
                    .l()
                    .solve_lower_triangular(&ks)
                    .ok_or_else(|| Error::Internal("singular factor".into()))?;
                (self.hyp.mean + ks.dot(alpha), prior - v.norm_squared())
            }
            Cache::Sparse { l_m, l_a, w } => {
                let m = self.n_inducing();
                let ks = DVector::from_fn(m, |i, _| {
                    self.hyp.kernel(x, &self.inducing[i * d..(i + 1) * d])
                });
                let q = l_m
                    .l()
                    .solve_lower_triangular(&ks)
                    .ok_or_else(|| Error::Internal("singular factor".into()))?;
                let z = l_a
                    .l()
                    .solve_lower_triangular(&q)
                    .ok_or_else(|| Error::Internal("singular factor".into()))?;
                (
                    self.hyp.mean + ks.dot(w),
                    prior - q.norm_squared() + z.norm_squared(),
                )
            }
        };
        let var = var.max(0.0) + if self.include_noise { self.hyp.noise_variance } else { 0.0 };
        Ok((mean, var.sqrt()))
    }
}

fn check_data(x: &FeatureMatrix, y: &[f64]) -> Result<()> {
    if x.n_rows() != y.len() {
        return invalid(format!("{} feature rows for {} targets", x.n_rows(), y.len()));
    }
    if y.len() < 2 {
        return invalid("an emulator needs at least two training points");
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return invalid("training data must be finite");
    }
    Ok(())
}

/// Negative log marginal likelihood and its gradient with respect to
/// `theta = (log l_1..d, log s^2, log sn^2)`; the constant mean is profiled
/// out when fitted.
pub fn neg_log_marginal_likelihood(
    x: &[f64],
    y: &[f64],
    d: usize,
    theta: &[f64],
    prior_mean: PriorMean,
) -> (f64, Vec<f64>, f64) {
    let n = y.len();
    let ls: Vec<f64> = theta[..d].iter().map(|t| t.exp()).collect();
    let sf = theta[d].exp();
    let sn = theta[d + 1].exp();
    let scaled: Vec<f64> = (0..n * d).map(|i| x[i] / ls[i % d]).collect();
    let mut kf = DMatrix::zeros(n, n);
    for i in 0..n {
        kf[(i, i)] = sf;
        for j in 0..i {
            let r2: f64 = (0..d)
                .map(|k| (scaled[i * d + k] - scaled[j * d + k]).powi(2))
                .sum();
            let v = sf * (-0.5 * r2).exp();
            kf[(i, j)] = v;
            kf[(j, i)] = v;
        }
    }
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += sn;
    }
    let bad = (f64::INFINITY, vec![0.0; d + 2], f64::NAN);
    let Some(chol) = Cholesky::new(k) else {
        return bad;
    };
    let yv = DVector::from_column_slice(y);
    let mean = match prior_mean {
        PriorMean::Fixed(m) => m,
        PriorMean::Fitted => {
            let ones = DVector::from_element(n, 1.0);
            let ki1 = chol.solve(&ones);
            let kiy = chol.solve(&yv);
            kiy.sum() / ki1.sum()
        }
    };
    let r = yv.add_scalar(-mean);
    let alpha = chol.solve(&r);
    let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    let value = 0.5 * r.dot(&alpha) + logdet + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let kinv = chol.inverse();
    // W = alpha alpha^T - K^-1; dNLL/dtheta = -1/2 tr(W dK)
    let mut grad = vec![0.0; d + 2];
    let mut trace_w = 0.0;
    let mut sum_wk = 0.0;
    let mut gl = vec![0.0; d];
    for i in 0..n {
        let wii = alpha[i] * alpha[i] - kinv[(i, i)];
        trace_w += wii;
        sum_wk += wii * kf[(i, i)];
        for j in 0..i {
            let m = 2.0 * (alpha[i] * alpha[j] - kinv[(i, j)]) * kf[(i, j)];
            sum_wk += m;
            for (k, g) in gl.iter_mut().enumerate() {
                *g += m * (scaled[i * d + k] - scaled[j * d + k]).powi(2);
            }
        }
    }
    for k in 0..d {
        grad[k] = -0.5 * gl[k];
    }
    grad[d] = -0.5 * sum_wk;
    grad[d + 1] = -0.5 * sn * trace_w;
    (value, grad, mean)
}

fn column_stats(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let m = (0..n).map(|i| x[i * d + k]).sum::<f64>() / n as f64;
            ((0..n).map(|i| (x[i * d + k] - m).powi(2)).sum::<f64>() / n as f64).sqrt()
        })
        .collect()
}

/// Seeded k-means++ initialisation followed by Lloyd iterations.
pub fn kmeans(x: &[f64], n: usize, d: usize, m: usize, seed: u64, iterations: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut centers: Vec<f64> = row(rng.gen_range(0..n)).to_vec();
    let mut best: Vec<f64> = (0..n).map(|i| dist2(row(i), &centers[..d])).collect();
    while centers.len() / d < m {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut p = n - 1;
            for (i, b) in best.iter().enumerate() {
                if t < *b {
                    p = i;
                    break;
                }
                t -= b;
            }
            p
        } else {
            rng.gen_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist2(row(i), &c));
        }
        centers.extend(c);
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iterations {
        let mut changed = false;
        for i in 0..n {
            let a = (0..m)
                .min_by(|&p, &q| {
                    dist2(row(i), &centers[p * d..(p + 1) * d])
                        .total_cmp(&dist2(row(i), &centers[q * d..(q + 1) * d]))
                })
                .expect("at least one centre");
            if assign[i] != a {
                assign[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; m * d];
        let mut counts = vec![0usize; m];
        for i in 0..n {
            counts[assign[i]] += 1;
            for k in 0..d {
                sums[assign[i] * d + k] += x[i * d + k];
            }
        }
        for c in 0..m {
            if counts[c] > 0 {
                for k in 0..d {
                    centers[c * d + k] = sums[c * d + k] / counts[c] as f64;
                }
            }
        }
    }
    centers
}

/// Fits hyperparameters by multi-restart maximisation of the marginal
/// likelihood and builds the emulator.
pub fn train_gpe(label: impl Into<String>, x: &FeatureMatrix, y: &[f64], opts: &GpeOptions) -> Result<GpeSubmodel> {
    check_data(x, y)?;
    if opts.restarts == 0 || opts.max_fit_points < 2 {
        return invalid("restarts and max_fit_points must be positive");
    }
    let (l_lo, l_hi) = opts.lengthscale_bounds;
    if !(l_lo > 0.0 && l_hi >= l_lo && l_hi.is_finite()) {
        return invalid("lengthscale bounds must satisfy 0 < lo <= hi < inf");
    }
    let label = label.into();
    let n = y.len();
    let d = x.n_cols();
    let flat: Vec<f64> = x.rows().flatten().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let (fx, fy): (Vec<f64>, Vec<f64>) = if n > opts.max_fit_points {
        let mut idx = sample(&mut rng, n, opts.max_fit_points).into_vec();
        idx.sort_unstable();
        (
            idx.iter().flat_map(|&i| flat[i * d..(i + 1) * d].iter().copied()).collect(),
            idx.iter().map(|&i| y[i]).collect(),
        )
    } else {
        (flat.clone(), y.to_vec())
    };
    let nf = fy.len();
    let ym = fy.iter().sum::<f64>() / nf as f64;
    let yvar = fy.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / nf as f64;
    let s = yvar.max(1e-12 * ym.abs().max(1.0).powi(2));
    let std = column_stats(&fx, nf, d);
    let active = std.iter().filter(|&&v| v > 0.0).count().max(1) as f64;

    let mut lo = vec![l_lo.ln(); d + 2];
    let mut hi = vec![l_hi.ln(); d + 2];
    lo[d] = (1e-6 * s).ln();
    hi[d] = (1e2 * s).ln();
    lo[d + 1] = (1e-6 * s).ln();
    hi[d + 1] = (10.0 * s).ln();

    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for restart in 0..opts.restarts {
        let mut theta = vec![0.0; d + 2];
        for k in 0..d {
            let base = (std[k].max(1e-2) * active.sqrt()).ln();
            let jitter = if restart == 0 { 0.0 } else { rng.gen_range(-1.0..1.0) };
            theta[k] = base + jitter;
        }
        theta[d] = if restart == 0 { s.ln() } else { (s * rng.gen_range(0.2..5.0)).ln() };
        theta[d + 1] = if restart == 0 { (0.1 * s).ln() } else { (s * rng.gen_range(0.01..0.5)).ln() };
        let mut f = |t: &[f64]| {
            let (v, g, _) = neg_log_marginal_likelihood(&fx, &fy, d, t, opts.prior_mean);
            (v, g)
        };
        let res = minimize(
            &mut f,
            &theta,
            &lo,
            &hi,
            LbfgsOptions {
                max_iterations: opts.max_iterations,
                gradient_tolerance: 1e-5,
                value_tolerance: 1e-9,
                ..Default::default()
            },
        );
        if !res.value.is_finite() {
            continue;
        }
        let (_, _, mean) = neg_log_marginal_likelihood(&fx, &fy, d, &res.x, opts.prior_mean);
        if best.as_ref().map_or(true, |b| res.value < b.0) {
            best = Some((res.value, res.x, mean));
        }
    }
    let (value, theta, fit_mean) =
        best.ok_or_else(|| Error::Training(format!("{label}: no restart produced a finite likelihood")))?;
    let mut hyp = Hyperparameters {
        lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
        signal_variance: theta[d].exp(),
        noise_variance: theta[d + 1].exp(),
        mean: fit_mean,
    };
    let sparse = n > opts.sparse_threshold;
    let (inference, inducing) = if sparse {
        let m = opts.max_inducing.min(n / 4).max(1);
        (Inference::Sparse, kmeans(&flat, n, d, m, opts.seed ^ 0x9e37_79b9, 25))
    } else {
        (Inference::Exact, Vec::new())
    };
    if opts.prior_mean == PriorMean::Fitted && n > nf {
        // refit the constant on the full data with the chosen hyperparameters
        hyp.mean = full_data_mean(&hyp, &flat, y, d, inference, &inducing).unwrap_or(hyp.mean);
    }
    let mut model = GpeSubmodel::with_hyperparameters(label, x, y, hyp, inference, inducing, opts.include_noise)?;
    model.fit_objective = value;
    Ok(model)
}

/// GLS mean of all targets; for sparse inference the Nystrom covariance
/// is used.
fn full_data_mean(
    hyp: &Hyperparameters,
    x: &[f64],
    y: &[f64],
    d: usize,
    inference: Inference,
    inducing: &[f64],
) -> Option<f64> {
    let n = y.len();
    let yv = DVector::from_column_slice(y);
    let ones = DVector::from_element(n, 1.0);
    match inference {
        Inference::Exact => {
            let mut k = gram(hyp, x, n, x, n, d);
            for i in 0..n {
                k[(i, i)] += hyp.noise_variance;
            }
            let (ch, _) = jittered_cholesky(k, hyp.signal_variance).ok()?;
            Some(ch.solve(&yv).sum() / ch.solve(&ones).sum())
        }
        Inference::Sparse => {
            // (Q + sn I)^-1 b via Woodbury with Q = Knm Kmm^-1 Kmn
            let m = inducing.len() / d;
            let (l_m, _) = jittered_cholesky(gram(hyp, inducing, m, inducing, m, d), hyp.signal_variance).ok()?;
            let v = l_m.l().solve_lower_triangular(&gram(hyp, inducing, m, x, n, d))?;
            let s2 = hyp.noise_variance;
            let mut a = &v * v.transpose() / s2;
            for i in 0..m {
                a[(i, i)] += 1.0;
            }
            let l_a = Cholesky::new(a)?;
            let apply = |b: &DVector<f64>| -> DVector<f64> {
                let t = l_a.solve(&(&v * b));
                (b - v.transpose() * t / s2) / s2
            };
            Some(apply(&yv).sum() / apply(&ones).sum())
        }
    }
}
