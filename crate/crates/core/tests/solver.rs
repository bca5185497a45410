use turbgate::solver::{
    normalized_residual_norms, omega_production, residual, Inlet, InletProfile,
};
use turbgate::{
    BoundaryConditions, Case, CorrectionField, Error, FlowState, Mesh, SolverSettings,
    TurbulenceModel,
};

fn channel(n: usize, stretch: f64, model: TurbulenceModel, nu: f64) -> Case {
    let mesh = Mesh::channel_1d(n, stretch, 1.0).unwrap();
    Case::new(mesh, BoundaryConditions::channel(1.0), SolverSettings::new(model, nu)).unwrap()
}

fn small_step() -> Case {
    let mesh = Mesh::step_2d(32, 16, 0.5, 6.0, 2.0).unwrap();
    let inlet = Inlet { velocity: 1.0, profile: InletProfile::Parabolic, k: 1e-3, omega: 1.0 };
    Case::new(mesh, BoundaryConditions::with_inlet(inlet), SolverSettings::new(TurbulenceModel::Sst, 1e-3)).unwrap()
}

#[test]
fn laminar_channel_is_poiseuille() {
    for (n, stretch) in [(32, 1.0), (40, 1.08)] {
        let nu = 0.05;
        let case = channel(n, stretch, TurbulenceModel::Laminar, nu);
        let st = case.solve(&CorrectionField::uniform(n)).unwrap();
        let exact = |y: f64| y * (2.0 - y) / (2.0 * nu);
        let peak = exact(1.0);
        for c in 0..n {
            let y = case.mesh.center(c)[1];
            assert!((st.u[c] - exact(y)).abs() <= 0.01 * peak, "cell {c}: {} vs {}", st.u[c], exact(y));
        }
    }
}

#[test]
fn repeated_solves_are_bit_identical() {
    let case = channel(48, 1.1, TurbulenceModel::Sst, 1.0 / 550.0);
    let a = case.solve(&CorrectionField::uniform(48)).unwrap();
    let b = case.solve(&CorrectionField::uniform(48)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn converged_state_meets_tolerance() {
    let case = channel(48, 1.1, TurbulenceModel::Sst, 1.0 / 550.0);
    let beta = CorrectionField::uniform(48);
    let st = case.solve(&beta).unwrap();
    let norms = normalized_residual_norms(&st, &beta, &case.mesh, &case.bc, &case.settings).unwrap();
    assert_eq!(norms.len(), st.equations.len());
    assert!(norms.iter().all(|&r| r <= case.settings.tolerance), "{norms:?}");
    assert!(st.k.iter().all(|&k| k >= 0.0) && st.omega.iter().all(|&w| w > 0.0));
}

#[test]
fn production_scales_linearly_with_beta() {
    let case = channel(32, 1.1, TurbulenceModel::Sst, 1.0 / 180.0);
    let one = CorrectionField::uniform(32);
    let st = case.solve(&one).unwrap();
    let (m, bc, s) = (&case.mesh, &case.bc, &case.settings);
    let base = omega_production(&st, &one, m, bc, s).unwrap();
    let zero = omega_production(&st, &CorrectionField::from_values(vec![0.0; 32]).unwrap(), m, bc, s).unwrap();
    assert!(zero.iter().all(|&p| p == 0.0));
    let mut half = vec![1.0; 32];
    half[11] = 0.5;
    let p = omega_production(&st, &CorrectionField::from_values(half).unwrap(), m, bc, s).unwrap();
    for c in 0..32 {
        let want = if c == 11 { 0.5 * base[c] } else { base[c] };
        assert_eq!(p[c], want, "cell {c}");
    }
    assert!(base[11] > 0.0);
}

#[test]
fn step_case_converges_with_positive_turbulence() {
    let case = small_step();
    let st = case.solve(&CorrectionField::uniform(case.n_cells())).unwrap();
    assert!(st.residual_norms.iter().all(|&r| r <= case.settings.tolerance));
    for c in 0..case.n_cells() {
        if !case.mesh.is_blanked(c) {
            assert!(st.k[c] >= 0.0 && st.omega[c] > 0.0 && st.nu_t[c] >= 0.0, "cell {c}");
        }
    }
    // recirculation behind the step
    let m = &case.mesh;
    let behind = (0..m.n_cells()).any(|c| {
        let [x, y] = m.center(c);
        !m.is_blanked(c) && x > 1.6 && x < 3.0 && y < 0.3 && st.u[c] < 0.0
    });
    assert!(behind);
}

#[test]
fn omega_perturbation_stays_local() {
    let case = small_step();
    let beta = CorrectionField::uniform(case.n_cells());
    let st = case.solve(&beta).unwrap();
    let (m, bc, s) = (&case.mesh, &case.bc, &case.settings);
    let r0 = residual(&st, &beta, m, bc, s).unwrap();
    let n_eq = st.equations.len();
    let target = m.idx(16, 10);
    let mut pert: FlowState = st.clone();
    pert.omega[target] *= 1.1;
    let r1 = residual(&pert, &beta, m, bc, s).unwrap();
    let (ti, tj) = m.ij(target);
    let mut changed_here = false;
    for c in 0..m.n_cells() {
        let (i, j) = m.ij(c);
        let reach = ti.abs_diff(i) + tj.abs_diff(j);
        for e in 0..n_eq {
            let moved = r0[c * n_eq + e] != r1[c * n_eq + e];
            if reach > 2 {
                assert!(!moved, "cell ({i},{j}) equation {} changed", st.equations[e]);
            }
            changed_here |= moved && c == target;
        }
    }
    assert!(changed_here);
}

#[test]
fn iteration_cap_reports_non_convergence_with_history() {
    let mut case = small_step();
    case.settings.max_iterations = 3;
    case.settings.first_order_fallback = false;
    match case.solve(&CorrectionField::uniform(case.n_cells())) {
        Err(Error::NonConvergence { history, partial, .. }) => {
            assert!(!history.is_empty());
            assert!(partial.is_some());
        }
        other => panic!("expected non-convergence, got {:?}", other.map(|s| s.iterations)),
    }
}

#[test]
fn mismatched_correction_field_is_rejected() {
    let case = channel(16, 1.0, TurbulenceModel::Sst, 1e-2);
    assert!(matches!(case.solve(&CorrectionField::uniform(15)), Err(Error::InvalidArgument(_))));
}
