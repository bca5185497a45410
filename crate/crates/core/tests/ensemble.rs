use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use turbgate::ensemble::{
    apply_acceptance, combine, predict_field, train_deep_ensemble, DeepEnsembleConfig,
    EnsembleModel, EnsemblePrediction, ModelArchive, Weighting,
};
use turbgate::features::FeatureMatrix;

fn arb_moments() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-3.0..3.0f64, 1e-3..2.0f64), 1..8)
}

proptest! {
    #[test]
    fn total_variance_is_the_mixture_variance(m in arb_moments(), uniform in any::<bool>()) {
        let w = if uniform { Weighting::Uniform } else { Weighting::InverseVariance };
        let p = combine(&m, w).unwrap();
        let second: f64 = p.weights.iter().zip(&m).map(|(w, (mu, s))| w * (s * s + mu * mu)).sum();
        let analytic = second - p.mean * p.mean;
        prop_assert!((p.var_total - analytic).abs() <= 1e-12 * analytic.max(1.0));
        prop_assert!((p.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-14);
        prop_assert!(p.var_mu >= 0.0);
    }

    #[test]
    fn inverse_variance_weights_follow_precision(m in arb_moments()) {
        let p = combine(&m, Weighting::InverseVariance).unwrap();
        for i in 0..m.len() {
            for j in 0..m.len() {
                if m[i].1 < m[j].1 {
                    prop_assert!(p.weights[i] >= p.weights[j]);
                }
            }
        }
    }

    #[test]
    fn gate_is_monotone(m in arb_moments(), a in 0.0..3.0f64, b in 0.0..3.0f64) {
        let p = combine(&m, Weighting::InverseVariance).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let open_lo = apply_acceptance(&p, lo) == p.mean && p.sigma() <= lo;
        if open_lo {
            prop_assert!(p.sigma() <= hi);
        }
    }
}

fn sample_variance(p: &EnsemblePrediction, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = WeightedIndex::new(&p.weights).unwrap();
    let comps: Vec<Normal<f64>> = p.means.iter().zip(&p.stds).map(|(m, s)| Normal::new(*m, *s).unwrap()).collect();
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let v = comps[pick.sample(&mut rng)].sample(&mut rng);
        s1 += v;
        s2 += v * v;
    }
    let m = s1 / n as f64;
    s2 / n as f64 - m * m
}

#[test]
fn monte_carlo_agrees_with_mixture_variance() {
    let p = combine(&[(0.5, 0.1), (1.5, 0.2), (1.0, 0.4)], Weighting::InverseVariance).unwrap();
    let mc = sample_variance(&p, 1_000_000, 1);
    assert!((mc - p.var_total).abs() <= 0.01 * p.var_total, "{mc} vs {}", p.var_total);
}

#[test]
fn gate_boundary_is_inclusive() {
    let p = combine(&[(0.25, 0.5)], Weighting::InverseVariance).unwrap();
    assert_eq!(p.sigma(), 0.5);
    assert_eq!(apply_acceptance(&p, 0.5), 0.25);
    assert_eq!(apply_acceptance(&p, 0.5 - 1e-15), 1.0);
}

struct Table(Vec<(f64, f64)>);

impl EnsembleModel for Table {
    fn n_features(&self) -> usize {
        1
    }
    fn predict(&self, x: &[f64]) -> turbgate::Result<EnsemblePrediction> {
        combine(&[self.0[x[0] as usize]], Weighting::InverseVariance)
    }
}

#[test]
fn field_prediction_gates_per_cell() {
    let model = Table(vec![(0.5, 0.05), (0.7, 0.3), (-0.2, 0.01)]);
    let x = FeatureMatrix::from_rows(vec![1, 3, 4], &[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
    let g = predict_field(&model, &x, 6, 0.2).unwrap();
    assert_eq!(g.beta.values(), &[1.0, 0.5, 1.0, 1.0, 0.0, 1.0]);
    assert_eq!(g.n_active(), 2);
    let closed = predict_field(&model, &x, 6, 0.0).unwrap();
    assert_eq!(closed.beta.values(), &[1.0; 6]);
    assert!(predict_field(&model, &x, 6, -0.1).is_err());
    assert!(predict_field(&model, &x, 4, 0.1).is_err());
}

#[test]
fn empty_ensemble_is_rejected() {
    assert!(combine(&[], Weighting::Uniform).is_err());
    assert!(combine(&[(0.0, f64::NAN)], Weighting::Uniform).is_err());
}

fn conflicting_data(seed: u64) -> (FeatureMatrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for i in 0..200 {
        let t = i as f64 / 200.0;
        rows.push(vec![t, 1.0 - t]);
        y.push(if i % 2 == 0 { 0.5 } else { 1.5 } + noise.sample(&mut rng));
    }
    (FeatureMatrix::from_rows((0..200).collect(), &rows).unwrap(), y)
}

#[test]
fn deep_ensemble_learns_a_smooth_target() {
    let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 200.0]).collect();
    let y: Vec<f64> = rows.iter().map(|r| 1.0 + 0.5 * (4.0 * r[0]).sin()).collect();
    let x = FeatureMatrix::from_rows((0..200).collect(), &rows).unwrap();
    let cfg = DeepEnsembleConfig { epochs: 1500, seed: 3, ..Default::default() };
    let de = train_deep_ensemble(&x, &y, &cfg).unwrap();
    let err: f64 = rows.iter().zip(&y).map(|(r, t)| (de.predict(r).unwrap().mean - t).abs()).sum::<f64>() / 200.0;
    assert!(err < 0.05, "mean abs error {err}");
}

#[test]
fn deep_ensemble_reports_aleatoric_spread_for_conflicts() {
    let (x, y) = conflicting_data(1);
    let cfg = DeepEnsembleConfig { seed: 7, ..Default::default() };
    let de = train_deep_ensemble(&x, &y, &cfg).unwrap();
    let p = de.predict(&[0.5, 0.5]).unwrap();
    assert!(p.sigma_sigma() > 0.4, "sigma_sigma {}", p.sigma_sigma());
    assert!(p.sigma_sigma() > p.sigma_mu());
    assert!((p.mean - 1.0).abs() < 0.2);
}

#[test]
fn deep_ensemble_archive_round_trip() {
    let (x, y) = conflicting_data(2);
    let cfg = DeepEnsembleConfig { epochs: 20, members: 3, seed: 1, ..Default::default() };
    let de = train_deep_ensemble(&x, &y, &cfg).unwrap();
    let back = ModelArchive::from_json(&ModelArchive::deep(de.clone()).to_json().unwrap()).unwrap();
    for r in x.rows().take(20) {
        assert_eq!(de.predict(r).unwrap(), back.model().predict(r).unwrap());
    }
    let again = train_deep_ensemble(&x, &y, &cfg).unwrap();
    assert_eq!(de.predict(&[0.3, 0.7]).unwrap(), again.predict(&[0.3, 0.7]).unwrap());
}

proptest! {
    #[test]
    fn ensemble_mean_lies_within_submodel_means(m in arb_moments(), uniform in any::<bool>()) {
        let w = if uniform { Weighting::Uniform } else { Weighting::InverseVariance };
        let p = combine(&m, w).unwrap();
        let lo = m.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
        let hi = m.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p.mean >= lo - 1e-12 && p.mean <= hi + 1e-12);
    }
}

#[test]
fn vanishing_variance_takes_all_weight() {
    let mut last = 0.0;
    for s in [1e-1, 1e-2, 1e-3, 1e-4] {
        let p = combine(&[(0.3, s), (1.2, 0.5), (0.9, 0.2)], Weighting::InverseVariance).unwrap();
        assert!(p.weights[0] > last);
        last = p.weights[0];
    }
    assert!(last > 1.0 - 1e-5);
    let p = combine(&[(0.3, 1e-4), (1.2, 0.5), (0.9, 0.2)], Weighting::InverseVariance).unwrap();
    assert!((p.mean - 0.3).abs() < 1e-6);
}

#[test]
fn unbounded_tolerance_accepts_every_mean() {
    let model = Table(vec![(0.5, 0.05), (0.7, 3.0), (1.4, 0.01)]);
    let x = FeatureMatrix::from_rows(vec![0, 1, 2], &[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
    let g = predict_field(&model, &x, 3, f64::INFINITY).unwrap();
    assert_eq!(g.beta.values(), &[0.5, 0.7, 1.4]);
}

#[test]
fn identical_members_have_no_spread() {
    let (x, y) = conflicting_data(3);
    let cfg = DeepEnsembleConfig { epochs: 30, identical_members: true, ..Default::default() };
    let de = train_deep_ensemble(&x, &y, &cfg).unwrap();
    for r in x.rows().step_by(17) {
        assert_eq!(de.predict(r).unwrap().sigma_mu(), 0.0);
    }
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn aleatoric_spread_follows_a_noise_ramp() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let level = |t: f64| 0.02 + 0.4 * t;
    let rows: Vec<Vec<f64>> = (0..600).map(|i| vec![i as f64 / 600.0]).collect();
    let y: Vec<f64> = rows.iter().map(|r| 1.0 + 0.2 * r[0] + level(r[0]) * std_normal.sample(&mut rng)).collect();
    let x = FeatureMatrix::from_rows((0..600).collect(), &rows).unwrap();
    let de = train_deep_ensemble(&x, &y, &DeepEnsembleConfig { epochs: 300, seed: 4, ..Default::default() }).unwrap();
    let probes: Vec<f64> = (0..20).map(|i| 0.025 + 0.95 * i as f64 / 19.0).collect();
    let predicted: Vec<f64> = probes.iter().map(|&t| de.predict(&[t]).unwrap().sigma_sigma()).collect();
    let truth: Vec<f64> = probes.iter().map(|&t| level(t)).collect();
    let rho = spearman(&predicted, &truth);
    assert!(rho > 0.9, "rank correlation {rho}, {predicted:?}");
}

#[test]
fn coincident_conflicting_targets_give_wide_aleatoric_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for i in 0..100 {
        let a = [i as f64 / 100.0, 0.5];
        for level in [0.5, 1.5] {
            rows.push(a.to_vec());
            y.push(level + noise.sample(&mut rng));
        }
    }
    let x = FeatureMatrix::from_rows((0..rows.len()).collect(), &rows).unwrap();
    let de = train_deep_ensemble(&x, &y, &DeepEnsembleConfig { seed: 9, ..Default::default() }).unwrap();
    for t in [0.2, 0.5, 0.8] {
        let s = de.predict(&[t, 0.5]).unwrap().sigma_sigma();
        assert!(s >= 0.5 * 1.0, "sigma_sigma {s} at {t}");
    }
}
