use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turbgate::ensemble::gp::neg_log_marginal_likelihood;
use turbgate::ensemble::{
    train_gpe, EnsembleModel, GpeEnsemble, GpeOptions, GpeSubmodel, Hyperparameters, Inference,
    ModelArchive, PriorMean,
};
use turbgate::features::FeatureMatrix;

/// Plain textbook GP posterior with a hand-written Cholesky.
fn dense_oracle(
    x: &[Vec<f64>],
    y: &[f64],
    hyp: &Hyperparameters,
    diag_extra: f64,
    q: &[f64],
) -> (f64, f64) {
    let n = y.len();
    let k = |a: &[f64], b: &[f64]| {
        let mut r2 = 0.0;
        for i in 0..a.len() {
            let t = (a[i] - b[i]) / hyp.lengthscales[i];
            r2 += t * t;
        }
        hyp.signal_variance * (-0.5 * r2).exp()
    };
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = k(&x[i], &x[j]);
            if i == j {
                s += hyp.noise_variance + diag_extra;
            }
            for p in 0..j {
                s -= l[i][p] * l[j][p];
            }
            l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
        }
    }
    let lower = |b: &[f64]| {
        let mut z = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for p in 0..i {
                s -= l[i][p] * z[p];
            }
            z[i] = s / l[i][i];
        }
        z
    };
    let r: Vec<f64> = y.iter().map(|v| v - hyp.mean).collect();
    let ks: Vec<f64> = x.iter().map(|xi| k(q, xi)).collect();
    let a = lower(&r);
    let v = lower(&ks);
    let mean = hyp.mean + a.iter().zip(&v).map(|(p, q)| p * q).sum::<f64>();
    let var = hyp.signal_variance - v.iter().map(|t| t * t).sum::<f64>();
    (mean, var.max(0.0).sqrt())
}

fn instance(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let y = x
        .iter()
        .map(|r| 1.0 + (3.0 * r[0]).sin() + 0.3 * r.iter().sum::<f64>() + 0.05 * rng.gen_range(-1.0..1.0))
        .collect();
    (x, y)
}

fn matrix(x: &[Vec<f64>]) -> FeatureMatrix {
    FeatureMatrix::from_rows((0..x.len()).collect(), x).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn fixed_hyperparameters_match_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..25 {
        let n = rng.gen_range(3..=200);
        let d = rng.gen_range(1..=5);
        let (x, y) = instance(&mut rng, n, d);
        let hyp = Hyperparameters {
            lengthscales: (0..d).map(|_| rng.gen_range(0.2..2.0)).collect(),
            signal_variance: rng.gen_range(0.1..3.0),
            noise_variance: rng.gen_range(1e-3..1e-1),
            mean: rng.gen_range(-1.0..2.0),
        };
        let m = GpeSubmodel::with_hyperparameters("s", &matrix(&x), &y, hyp.clone(), Inference::Exact, vec![], false)
            .unwrap();
        for _ in 0..40 {
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let (mu, sd) = m.predict(&q).unwrap();
            let (om, osd) = dense_oracle(&x, &y, &hyp, m.jitter(), &q);
            assert!(rel(mu, om) <= 1e-8, "case {case}: mean {mu} vs {om}");
            assert!(rel(sd * sd, osd * osd) <= 1e-8, "case {case}: var {} vs {}", sd * sd, osd * osd);
        }
    }
}

#[test]
fn trained_emulators_match_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..6 {
        let n = [10, 40, 80, 120, 160, 200][case];
        let d = 1 + case % 3;
        let (x, y) = instance(&mut rng, n, d);
        let m = train_gpe("t", &matrix(&x), &y, &GpeOptions { seed: case as u64, ..Default::default() }).unwrap();
        assert_eq!(m.inference(), Inference::Exact);
        let hyp = m.hyperparameters().clone();
        for _ in 0..40 {
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let (mu, sd) = m.predict(&q).unwrap();
            let (om, osd) = dense_oracle(&x, &y, &hyp, m.jitter(), &q);
            assert!(rel(mu, om) <= 1e-8, "case {case}: mean {mu} vs {om}");
            assert!(rel(sd * sd, osd * osd) <= 1e-8, "case {case}: var {} vs {}", sd * sd, osd * osd);
        }
    }
}

#[test]
fn far_queries_revert_to_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, y) = instance(&mut rng, 60, 3);
    let m = train_gpe("t", &matrix(&x), &y, &GpeOptions::default()).unwrap();
    let h = m.hyperparameters();
    let far: Vec<f64> = h.lengthscales.iter().map(|l| 1e3 * l).collect();
    let (mu, sd) = m.predict(&far).unwrap();
    assert_eq!(mu, h.mean);
    assert_eq!(sd, h.signal_variance.sqrt());
}

#[test]
fn fixed_prior_mean_is_respected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, y) = instance(&mut rng, 30, 2);
    let opts = GpeOptions { prior_mean: PriorMean::Fixed(1.0), ..Default::default() };
    let m = train_gpe("t", &matrix(&x), &y, &opts).unwrap();
    assert_eq!(m.hyperparameters().mean, 1.0);
}

#[test]
fn sparse_with_inducing_at_data_equals_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, y) = instance(&mut rng, 50, 2);
    let hyp = Hyperparameters {
        lengthscales: vec![0.5, 0.8],
        signal_variance: 1.2,
        noise_variance: 0.05,
        mean: 0.9,
    };
    let fm = matrix(&x);
    let exact = GpeSubmodel::with_hyperparameters("e", &fm, &y, hyp.clone(), Inference::Exact, vec![], false).unwrap();
    let inducing: Vec<f64> = x.concat();
    let sparse = GpeSubmodel::with_hyperparameters("s", &fm, &y, hyp, Inference::Sparse, inducing, false).unwrap();
    assert_eq!(sparse.jitter(), 0.0);
    for _ in 0..30 {
        let q = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
        let (a, sa) = exact.predict(&q).unwrap();
        let (b, sb) = sparse.predict(&q).unwrap();
        assert!((a - b).abs() <= 1e-7 * a.abs().max(1.0), "{a} vs {b}");
        assert!((sa * sa - sb * sb).abs() <= 1e-7, "{sa} vs {sb}");
    }
}

#[test]
fn large_sources_switch_to_sparse() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (x, y) = instance(&mut rng, 1200, 2);
    let m = train_gpe("big", &matrix(&x), &y, &GpeOptions::default()).unwrap();
    assert_eq!(m.inference(), Inference::Sparse);
    assert_eq!(m.n_inducing(), 300);
    // accuracy on training inputs is close to the noise level
    let err: f64 = (0..100).map(|i| (m.predict(&x[i]).unwrap().0 - y[i]).abs()).sum::<f64>() / 100.0;
    assert!(err < 0.1, "mean abs error {err}");
}

#[test]
fn likelihood_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, y) = instance(&mut rng, 40, 3);
    let flat = x.concat();
    let theta = [-0.3, 0.1, 0.4, 0.2, -3.0];
    let (_, g, _) = neg_log_marginal_likelihood(&flat, &y, 3, &theta, PriorMean::Fitted);
    for i in 0..theta.len() {
        let h = 1e-5;
        let mut tp = theta;
        let mut tm = theta;
        tp[i] += h;
        tm[i] -= h;
        let fp = neg_log_marginal_likelihood(&flat, &y, 3, &tp, PriorMean::Fitted).0;
        let fm = neg_log_marginal_likelihood(&flat, &y, 3, &tm, PriorMean::Fitted).0;
        let fd = (fp - fm) / (2.0 * h);
        assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1.0), "component {i}: {} vs {fd}", g[i]);
    }
}

#[test]
fn archive_round_trip_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let subs: Vec<GpeSubmodel> = (0..3)
        .map(|k| {
            let (x, y) = instance(&mut rng, 40, 2);
            train_gpe(format!("s{k}"), &matrix(&x), &y, &GpeOptions { seed: k, ..Default::default() }).unwrap()
        })
        .collect();
    let ens = GpeEnsemble::new(subs).unwrap();
    let text = ModelArchive::gpe(ens.clone()).to_json().unwrap();
    let back = ModelArchive::from_json(&text).unwrap();
    for _ in 0..20 {
        let q = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let a = ens.predict(&q).unwrap();
        let b = back.model().predict(&q).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (x, y) = instance(&mut rng, 50, 2);
    let a = train_gpe("t", &matrix(&x), &y, &GpeOptions::default()).unwrap();
    let b = train_gpe("t", &matrix(&x), &y, &GpeOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn constant_targets_train() {
    let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 20.0]).collect();
    let y = vec![0.5; 20];
    let m = train_gpe("c", &matrix(&x), &y, &GpeOptions::default()).unwrap();
    let (mu, _) = m.predict(&[0.33]).unwrap();
    assert!((mu - 0.5).abs() < 1e-6);
}

#[test]
fn width_mismatch_is_rejected() {
    let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
    let m = train_gpe("w", &matrix(&x), &[0.1, 0.2, 0.3, 0.4, 0.5], &GpeOptions::default()).unwrap();
    assert!(m.predict(&[1.0]).is_err());
}

#[test]
fn noisy_sine_is_close_to_the_known_hyperparameter_gp() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let two_pi = 2.0 * std::f64::consts::PI;
    let x: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.gen_range(0.0..1.0)]).collect();
    let noise = |r: &mut ChaCha8Rng| {
        // Box-Muller, standard deviation 0.1
        let (u1, u2): (f64, f64) = (r.gen_range(1e-12..1.0), r.gen_range(0.0..1.0));
        0.1 * (-2.0 * u1.ln()).sqrt() * (two_pi * u2).cos()
    };
    let y: Vec<f64> = x.iter().map(|r| (two_pi * r[0]).sin() + noise(&mut rng)).collect();
    // the sinusoid's variance and curvature scale, the true noise level
    let known = Hyperparameters {
        lengthscales: vec![1.0 / two_pi],
        signal_variance: 0.5,
        noise_variance: 0.01,
        mean: 0.0,
    };
    let m = train_gpe("sine", &matrix(&x), &y, &GpeOptions::default()).unwrap();
    let probes: Vec<f64> = (0..200).map(|i| 0.025 + 0.95 * i as f64 / 199.0).collect();
    let rmse = |f: &dyn Fn(f64) -> f64| {
        (probes.iter().map(|&p| (f(p) - (two_pi * p).sin()).powi(2)).sum::<f64>() / probes.len() as f64).sqrt()
    };
    let fitted = rmse(&|p| m.predict(&[p]).unwrap().0);
    let oracle = rmse(&|p| dense_oracle(&x, &y, &known, 0.0, &[p]).0);
    assert!(fitted <= 1.5 * oracle, "fitted {fitted} oracle {oracle}");
}

#[test]
fn sparse_posterior_tracks_exact_posterior_on_a_subsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (x, y) = instance(&mut rng, 1500, 2);
    let sparse = train_gpe("big", &matrix(&x), &y, &GpeOptions::default()).unwrap();
    assert_eq!(sparse.inference(), Inference::Sparse);
    let hyp = sparse.hyperparameters().clone();
    let sub: Vec<usize> = (0..x.len()).step_by(3).collect();
    let xs: Vec<Vec<f64>> = sub.iter().map(|&i| x[i].clone()).collect();
    let ys: Vec<f64> = sub.iter().map(|&i| y[i]).collect();
    for _ in 0..10 {
        let q = [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)];
        let (mu, _) = sparse.predict(&q).unwrap();
        let (om, _) = dense_oracle(&xs, &ys, &hyp, 0.0, &q);
        assert!((mu - om).abs() <= 0.05 * om.abs(), "{mu} vs {om}");
    }
}

#[test]
fn training_point_is_interpolated_as_noise_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (x, y) = instance(&mut rng, 20, 2);
    let hyp = Hyperparameters { lengthscales: vec![0.5, 0.5], signal_variance: 1.0, noise_variance: 1e-10, mean: 1.0 };
    let m = GpeSubmodel::with_hyperparameters("i", &matrix(&x), &y, hyp, Inference::Exact, vec![], false).unwrap();
    for i in 0..20 {
        assert!((m.predict(&x[i]).unwrap().0 - y[i]).abs() < 1e-4);
    }
}
