use proptest::prelude::*;
use turbgate::features::{
    assemble_training_set, compute_features, engineered_point, feature_index, feature_names,
    invariant_point, point_features, raw_invariants, Band, Basis, FeatureOptions, PointInputs,
    TrainingCase, INVARIANT_BASIS, N_ENGINEERED, N_FEATURES,
};
use turbgate::{BoundaryConditions, CorrectionField, Mesh, SolverSettings, TurbulenceModel};

type M3 = [[f64; 3]; 3];

fn rotation(axis: [f64; 3], angle: f64) -> M3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|a| a / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn rotate_vec(q: &M3, v: &[f64; 3]) -> [f64; 3] {
    let mut o = [0.0; 3];
    for i in 0..3 {
        o[i] = (0..3).map(|j| q[i][j] * v[j]).sum();
    }
    o
}

fn rotate_tensor(q: &M3, a: &M3) -> M3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3)
                .flat_map(|k| (0..3).map(move |l| (k, l)))
                .map(|(k, l)| q[i][k] * a[k][l] * q[j][l])
                .sum();
        }
    }
    o
}

fn point() -> PointInputs {
    PointInputs {
        grad_u: [[0.0; 3]; 3],
        u: [0.0; 3],
        grad_p: [0.0; 3],
        grad_k: [0.0; 3],
        k: 0.0,
        omega: 1.0,
        nu: 1e-3,
        nu_t: 0.0,
    }
}

fn arb_vec() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-2.0..2.0f64)
}

fn arb_point() -> impl Strategy<Value = PointInputs> {
    (
        prop::array::uniform3(arb_vec()),
        arb_vec(),
        arb_vec(),
        arb_vec(),
        0.01..2.0f64,
        0.1..10.0f64,
        0.0..0.1f64,
    )
        .prop_map(|(grad_u, u, grad_p, grad_k, k, omega, nu_t)| PointInputs {
            grad_u,
            u,
            grad_p,
            grad_k,
            k,
            omega,
            nu: 1e-3,
            nu_t,
        })
}

proptest! {
    #[test]
    fn invariants_survive_rigid_rotations(
        p in arb_point(),
        axis in arb_vec().prop_filter("non-zero axis", |a| a.iter().map(|x| x * x).sum::<f64>() > 1e-3),
        angle in -3.2..3.2f64,
    ) {
        let q = rotation(axis, angle);
        let r = PointInputs {
            grad_u: rotate_tensor(&q, &p.grad_u),
            u: rotate_vec(&q, &p.u),
            grad_p: rotate_vec(&q, &p.grad_p),
            grad_k: rotate_vec(&q, &p.grad_k),
            ..p
        };
        let a = raw_invariants(&p);
        let b = raw_invariants(&r);
        for i in 0..a.len() {
            prop_assert!((a[i] - b[i]).abs() <= 1e-8, "invariant {i}: {} vs {}", a[i], b[i]);
        }
        let fa = engineered_point(&p);
        let fb = engineered_point(&r);
        for i in 0..fa.len() {
            prop_assert!((fa[i] - fb[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn galilean_shift(p in arb_point(), shift in arb_vec()) {
        prop_assume!(shift.iter().map(|x| x * x).sum::<f64>() > 0.25);
        let q = PointInputs { u: [p.u[0] + shift[0], p.u[1] + shift[1], p.u[2] + shift[2]], ..p };
        let a = raw_invariants(&p);
        let b = raw_invariants(&q);
        for (i, prod) in INVARIANT_BASIS.iter().enumerate() {
            if !prod.contains(&Basis::Ap) {
                prop_assert_eq!(a[i], b[i]);
            }
        }
        let fa = engineered_point(&p);
        let fb = engineered_point(&q);
        prop_assert_eq!(fa[1], fb[1]);
        prop_assert_eq!(fa[2], fb[2]);
        prop_assert_eq!(fa[4], fb[4]);
    }

    #[test]
    fn squashed_features_are_bounded(p in arb_point()) {
        let f = point_features(&p, &FeatureOptions::default());
        prop_assert!(f.iter().all(|v| v.is_finite() && v.abs() <= 1.0 + 1e-12));
    }
}

#[test]
fn galilean_shift_moves_velocity_features() {
    let p = PointInputs {
        grad_u: [[0.0, 1.0, 0.0], [0.0; 3], [0.0; 3]],
        u: [1.0, 0.0, 0.0],
        grad_p: [0.3, 0.4, 0.0],
        k: 0.1,
        ..point()
    };
    let q = PointInputs { u: [1.0, 5.0, 0.0], ..p };
    let (a, b) = (engineered_point(&p), engineered_point(&q));
    assert!((a[0] - b[0]).abs() > 1e-3);
    assert!((a[3] - b[3]).abs() > 1e-3);
}

#[test]
fn pressure_gradient_alignment_endpoints() {
    let base = PointInputs { u: [2.0, 0.0, 0.0], ..point() };
    let f = |g: [f64; 3]| engineered_point(&PointInputs { grad_p: g, ..base })[0];
    assert_eq!(f([3.0, 0.0, 0.0]), -1.0);
    assert!(f([0.0, 3.0, 0.0]).abs() < 1e-15);
    assert_eq!(f([-3.0, 0.0, 0.0]), 1.0);
}

#[test]
fn strain_trace_by_hand() {
    let p = PointInputs {
        grad_u: [[0.0, 1.0, 0.0], [0.0; 3], [0.0; 3]],
        ..point()
    };
    // S has two entries 0.5; |S|_F = sqrt(0.5); S^ = S/(|S| + 1)
    let d = 0.5f64.sqrt() + 1.0;
    let expected = 2.0 * 0.25 / (d * d);
    let raw = raw_invariants(&p)[0];
    assert!((raw - expected).abs() < 1e-15);
    let sq = invariant_point(&p, &FeatureOptions::default())[0];
    assert!((sq - expected / (expected + 1.0)).abs() < 1e-15);
}

#[test]
fn feature_index_round_trip() {
    let names = feature_names();
    assert_eq!(names.len(), N_FEATURES);
    for (i, n) in names.iter().enumerate() {
        assert_eq!(feature_index(n), Some(i));
    }
    assert_eq!(names[0], "streamline_pressure_gradient");
    assert_eq!(names[N_ENGINEERED], "tr(S.S)");
}

fn channel_state(beta: f64) -> (Mesh, turbgate::FlowState, CorrectionField) {
    let mesh = Mesh::channel_1d(32, 1.1, 1.0).unwrap();
    let b = CorrectionField::from_values(vec![beta; 32]).unwrap();
    let st = turbgate::solve_rans(
        &mesh,
        &BoundaryConditions::channel(1.0),
        &b,
        &SolverSettings::new(TurbulenceModel::Sst, 1.0 / 180.0),
    )
    .unwrap();
    (mesh, st, b)
}

#[test]
fn converged_channel_features_are_finite() {
    let (mesh, st, _) = channel_state(1.0);
    let x = compute_features(&st, &mesh, &FeatureOptions::default()).unwrap();
    assert_eq!(x.n_rows(), 32);
    assert_eq!(x.n_cols(), N_FEATURES);
    assert!(x.is_finite());
}

#[test]
fn band_filter_drops_sources_inside_band() {
    let (mesh, st, _) = channel_state(1.0);
    let inside = CorrectionField::from_values(vec![1.05; 32]).unwrap();
    let below = CorrectionField::from_values((0..32).map(|c| if c % 2 == 0 { 0.5 } else { 0.95 }).collect()).unwrap();
    let above = CorrectionField::from_values(vec![1.3; 32]).unwrap();
    let cases = vec![
        TrainingCase { label: "inside".into(), mesh: &mesh, state: &st, beta: &inside, mask: None },
        TrainingCase { label: "below".into(), mesh: &mesh, state: &st, beta: &below, mask: None },
        TrainingCase { label: "above".into(), mesh: &mesh, state: &st, beta: &above, mask: None },
    ];
    let set = assemble_training_set(&cases, Band::default(), &FeatureOptions::default()).unwrap();
    assert_eq!(set.sources.len(), 2);
    assert_eq!(set.dropped.len(), 1);
    assert_eq!(set.dropped[0].label, "inside");
    let (_, y) = set.pooled();
    assert!(y.iter().all(|v| !(0.9..=1.1).contains(v)));
    assert_eq!(set.sources[0].x.n_rows(), 16);
}
