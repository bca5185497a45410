//! Steady incompressible RANS with a k-omega SST closure whose omega
//! production is multiplied by a per-cell correction field.
//!
//! Solves start with segregated iterations (a SIMPLE pressure correction in
//! 2D, a direct sweep per variable in the 1D channel) and finish with a
//! damped Newton polish on the coupled residual once it is small.

pub mod discretization;
mod newton;
mod segregated;
pub mod sst;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, ResidualHistory, Result};
use crate::mesh::{BoundaryTag, Direction, Mesh, Neighbor};

pub use discretization::{Discretization, Fields, Layout, Var, BETA_MIN};
pub use sst::TurbulenceConstants;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TurbulenceModel {
    Sst,
    /// Wilcox (1988) k-omega.
    KOmega,
    /// Turbulence equations disabled.
    Laminar,
}

impl TurbulenceModel {
    pub fn constants(self) -> TurbulenceConstants {
        match self {
            TurbulenceModel::KOmega => TurbulenceConstants::wilcox_1988(),
            _ => TurbulenceConstants::sst_2003(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvectionScheme {
    SecondOrderUpwind,
    FirstOrderUpwind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InletProfile {
    Uniform,
    /// Parabola over the open part of the inlet with the given mean.
    Parabolic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inlet {
    /// Mean inflow velocity.
    pub velocity: f64,
    pub profile: InletProfile,
    pub k: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConditions {
    /// Streamwise body force per unit mass; the periodic channel is driven
    /// by it as a mean pressure gradient `dp/dx = -body_force`.
    #[serde(default)]
    pub body_force: f64,
    #[serde(default)]
    pub inlet: Option<Inlet>,
}

impl BoundaryConditions {
    pub fn channel(body_force: f64) -> Self {
        Self {
            body_force,
            inlet: None,
        }
    }

    pub fn with_inlet(inlet: Inlet) -> Self {
        Self {
            body_force: 0.0,
            inlet: Some(inlet),
        }
    }

    fn open_inlet_span(mesh: &Mesh) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for j in 0..mesh.ny() {
            let c = mesh.idx(0, j);
            if !mesh.is_blanked(c) {
                lo = lo.min(mesh.y_faces()[j]);
                hi = hi.max(mesh.y_faces()[j + 1]);
            }
        }
        (lo, hi)
    }

    /// Inflow velocity seen by cell `c` (meaningful only at inlet faces).
    pub fn inlet_velocity(&self, mesh: &Mesh, c: usize) -> f64 {
        let Some(inlet) = self.inlet else {
            return 0.0;
        };
        match inlet.profile {
            InletProfile::Uniform => inlet.velocity,
            InletProfile::Parabolic => {
                if mesh.dim() != 2 {
                    return inlet.velocity;
                }
                let (lo, hi) = Self::open_inlet_span(mesh);
                let y = mesh.center(c)[1];
                let s = ((y - lo) / (hi - lo)).clamp(0.0, 1.0);
                6.0 * inlet.velocity * s * (1.0 - s)
            }
        }
    }

    pub fn validate(&self, mesh: &Mesh, model: TurbulenceModel) -> Result<()> {
        if !self.body_force.is_finite() {
            return invalid("body force must be finite");
        }
        let needs_inlet = mesh
            .boundary_faces()
            .iter()
            .any(|&(_, _, t)| t == BoundaryTag::Inlet);
        match (&self.inlet, needs_inlet) {
            (None, true) => invalid("mesh has inlet faces but no inlet conditions were given"),
            (Some(i), _) => {
                if !(i.velocity.is_finite() && i.k.is_finite() && i.omega.is_finite()) {
                    return invalid("inlet values must be finite");
                }
                if model != TurbulenceModel::Laminar && (i.k < 0.0 || i.omega <= 0.0) {
                    return invalid("inlet turbulence needs k >= 0 and omega > 0");
                }
                Ok(())
            }
            (None, false) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub model: TurbulenceModel,
    /// Molecular kinematic viscosity.
    pub nu: f64,
    #[serde(default = "defaults::relax_momentum")]
    pub relax_momentum: f64,
    #[serde(default = "defaults::relax_pressure")]
    pub relax_pressure: f64,
    #[serde(default = "defaults::relax_turbulence")]
    pub relax_turbulence: f64,
    /// Bound on the normalised residual of every equation.
    #[serde(default = "defaults::tolerance")]
    pub tolerance: f64,
    #[serde(default = "defaults::max_iterations")]
    pub max_iterations: usize,
    /// Abort when the residual grows beyond this factor of its best value.
    #[serde(default = "defaults::divergence_factor")]
    pub divergence_factor: f64,
    #[serde(default = "defaults::convection")]
    pub convection: ConvectionScheme,
    /// Fall back to first-order convection if the second-order run fails.
    #[serde(default = "defaults::yes")]
    pub first_order_fallback: bool,
    /// Normalised residual below which the Newton polish takes over.
    #[serde(default = "defaults::newton_switch")]
    pub newton_switch: f64,
    #[serde(default = "defaults::newton_max_iterations")]
    pub newton_max_iterations: usize,
}

mod defaults {
    use super::ConvectionScheme;
    pub fn relax_momentum() -> f64 {
        0.7
    }
    pub fn relax_pressure() -> f64 {
        0.3
    }
    pub fn relax_turbulence() -> f64 {
        0.5
    }
    pub fn tolerance() -> f64 {
        1e-6
    }
    pub fn max_iterations() -> usize {
        5000
    }
    pub fn divergence_factor() -> f64 {
        1e8
    }
    pub fn convection() -> ConvectionScheme {
        ConvectionScheme::SecondOrderUpwind
    }
    pub fn yes() -> bool {
        true
    }
    pub fn newton_switch() -> f64 {
        1e-2
    }
    pub fn newton_max_iterations() -> usize {
        60
    }
}

impl SolverSettings {
    pub fn new(model: TurbulenceModel, nu: f64) -> Self {
        Self {
            model,
            nu,
            relax_momentum: defaults::relax_momentum(),
            relax_pressure: defaults::relax_pressure(),
            relax_turbulence: defaults::relax_turbulence(),
            tolerance: defaults::tolerance(),
            max_iterations: defaults::max_iterations(),
            divergence_factor: defaults::divergence_factor(),
            convection: defaults::convection(),
            first_order_fallback: true,
            newton_switch: defaults::newton_switch(),
            newton_max_iterations: defaults::newton_max_iterations(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu.is_finite() && self.nu > 0.0) {
            return invalid(format!("nu must be positive, got {}", self.nu));
        }
        for (name, a) in [
            ("relax_momentum", self.relax_momentum),
            ("relax_pressure", self.relax_pressure),
            ("relax_turbulence", self.relax_turbulence),
        ] {
            if !(a > 0.0 && a <= 1.0) {
                return invalid(format!("{name} must lie in (0, 1], got {a}"));
            }
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return invalid("tolerance must be positive");
        }
        if self.max_iterations == 0 {
            return invalid("max_iterations must be positive");
        }
        if !(self.divergence_factor > 1.0) {
            return invalid("divergence_factor must exceed 1");
        }
        Ok(())
    }
}

/// Per-cell correction `beta_c` of the omega production term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionField {
    beta: Vec<f64>,
}

impl CorrectionField {
    /// The uncorrected model, `beta_c = 1` everywhere.
    pub fn uniform(n_cells: usize) -> Self {
        Self {
            beta: vec![1.0; n_cells],
        }
    }

    pub fn from_values(beta: Vec<f64>) -> Result<Self> {
        if let Some(b) = beta.iter().find(|b| !b.is_finite() || **b < 0.0) {
            return invalid(format!("correction values must be finite and >= 0, got {b}"));
        }
        Ok(Self { beta })
    }

    pub fn values(&self) -> &[f64] {
        &self.beta
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Cells where the correction differs from 1.
    pub fn active(&self) -> Vec<bool> {
        self.beta.iter().map(|&b| b != 1.0).collect()
    }

    pub fn n_active(&self) -> usize {
        self.beta.iter().filter(|&&b| b != 1.0).count()
    }
}

/// Converged (or partial) flow solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub k: Vec<f64>,
    pub omega: Vec<f64>,
    pub nu_t: Vec<f64>,
    pub nu: f64,
    /// Uniform pressure gradient superposed on `p` (the periodic channel
    /// drive); the full gradient is `grad p + mean_pressure_gradient`.
    pub mean_pressure_gradient: [f64; 2],
    /// Names of the solved equations, in residual order.
    pub equations: Vec<String>,
    /// Final normalised residual per equation.
    pub residual_norms: Vec<f64>,
    pub history: ResidualHistory,
    pub iterations: usize,
    /// Number of positivity clips applied to k or omega.
    pub clip_events: usize,
}

impl FlowState {
    pub fn n_cells(&self) -> usize {
        self.u.len()
    }

    pub(crate) fn fields(&self) -> Fields {
        Fields {
            u: self.u.clone(),
            v: self.v.clone(),
            p: self.p.clone(),
            k: self.k.clone(),
            w: self.omega.clone(),
        }
    }

    fn check(&self, mesh: &Mesh) -> Result<()> {
        let n = mesh.n_cells();
        for (name, f) in [
            ("u", &self.u),
            ("v", &self.v),
            ("p", &self.p),
            ("k", &self.k),
            ("omega", &self.omega),
        ] {
            if f.len() != n {
                return invalid(format!("{name} has {} entries, mesh has {n} cells", f.len()));
            }
        }
        Ok(())
    }
}

/// Everything needed to solve one flow configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub mesh: Mesh,
    pub bc: BoundaryConditions,
    pub settings: SolverSettings,
}

impl Case {
    pub fn new(mesh: Mesh, bc: BoundaryConditions, settings: SolverSettings) -> Result<Self> {
        settings.validate()?;
        bc.validate(&mesh, settings.model)?;
        Ok(Self { mesh, bc, settings })
    }

    pub fn n_cells(&self) -> usize {
        self.mesh.n_cells()
    }

    pub fn solve(&self, beta: &CorrectionField) -> Result<FlowState> {
        solve_rans(&self.mesh, &self.bc, beta, &self.settings)
    }

    pub fn solve_from(&self, beta: &CorrectionField, start: &FlowState) -> Result<FlowState> {
        solve_rans_from(&self.mesh, &self.bc, beta, &self.settings, Some(start))
    }

    pub fn discretization<'a>(&'a self, beta: &CorrectionField) -> Discretization<'a> {
        Discretization::new(&self.mesh, &self.bc, &self.settings, beta.values())
    }
}

fn check_beta(mesh: &Mesh, beta: &CorrectionField) -> Result<()> {
    if beta.len() != mesh.n_cells() {
        return invalid(format!(
            "correction field has {} entries, mesh has {} cells",
            beta.len(),
            mesh.n_cells()
        ));
    }
    Ok(())
}

/// Solve from the built-in initial guess.
pub fn solve_rans(
    mesh: &Mesh,
    bc: &BoundaryConditions,
    beta: &CorrectionField,
    settings: &SolverSettings,
) -> Result<FlowState> {
    solve_rans_from(mesh, bc, beta, settings, None)
}

/// Solve, optionally warm-started from a previous state on the same mesh.
pub fn solve_rans_from(
    mesh: &Mesh,
    bc: &BoundaryConditions,
    beta: &CorrectionField,
    settings: &SolverSettings,
    start: Option<&FlowState>,
) -> Result<FlowState> {
    settings.validate()?;
    bc.validate(mesh, settings.model)?;
    check_beta(mesh, beta)?;
    if let Some(s) = start {
        s.check(mesh)?;
    }
    let first = run(mesh, bc, beta, settings, start);
    match first {
        Err(Error::NonConvergence { .. }) | Err(Error::NumericalFailure(_))
            if settings.first_order_fallback
                && settings.convection == ConvectionScheme::SecondOrderUpwind =>
        {
            log::warn!("second-order solve failed, retrying with first-order start");
            let mut low = settings.clone();
            low.convection = ConvectionScheme::FirstOrderUpwind;
            let coarse = run(mesh, bc, beta, &low, start)?;
            run(mesh, bc, beta, settings, Some(&coarse)).or(first)
        }
        other => other,
    }
}

fn run(
    mesh: &Mesh,
    bc: &BoundaryConditions,
    beta: &CorrectionField,
    settings: &SolverSettings,
    start: Option<&FlowState>,
) -> Result<FlowState> {
    let disc = Discretization::new(mesh, bc, settings, beta.values());
    let fields = match start {
        Some(s) => {
            let mut f = s.fields();
            impose_fixed(&disc, &mut f);
            f
        }
        None => initial_guess(&disc),
    };
    let driver = segregated::Driver::new(&disc, fields);
    driver.run()
}

/// Pins blanked cells and wall-adjacent omega to their prescribed values.
pub(crate) fn impose_fixed(disc: &Discretization, f: &mut Fields) {
    let mesh = disc.mesh;
    for c in 0..mesh.n_cells() {
        if mesh.is_blanked(c) {
            f.u[c] = 0.0;
            f.v[c] = 0.0;
            f.p[c] = 0.0;
            f.k[c] = 0.0;
            f.w[c] = 1.0;
        } else if let Some(w) = disc.fixed_omega(c) {
            f.w[c] = w;
        }
    }
}

fn initial_guess(disc: &Discretization) -> Fields {
    let mesh = disc.mesh;
    let nu = disc.settings.nu;
    let mut f = disc.blank_fields();
    let turbulent = disc.layout.turbulent;
    if mesh.dim() == 1 {
        let h = mesh.y_faces()[mesh.ny()];
        let g = disc.bc.body_force.abs().max(1e-300);
        let u_tau = (g * h).sqrt();
        for c in 0..mesh.n_cells() {
            let y = mesh.center(c)[1];
            let s = y / h;
            if turbulent {
                let yp = y * u_tau / nu;
                let law = if yp < 11.0 {
                    yp
                } else {
                    yp.ln() / 0.41 + 5.2
                };
                f.u[c] = u_tau * law * disc.bc.body_force.signum();
                f.k[c] = u_tau * u_tau / 0.3 * (1.0 - 0.8 * s).max(0.1) * (yp / 10.0).min(1.0).powi(2);
                let l = 0.41 * y.min(0.2 * h);
                f.w[c] = (f.k[c].sqrt() / (0.3 * l)).max(u_tau / h);
            } else {
                f.u[c] = disc.bc.body_force / (2.0 * nu) * y * (2.0 * h - y);
            }
        }
    } else {
        let inlet = disc.bc.inlet;
        for c in 0..mesh.n_cells() {
            if mesh.is_blanked(c) {
                continue;
            }
            f.u[c] = inlet.map_or(0.0, |i| i.velocity);
            if let Some(i) = inlet {
                f.k[c] = i.k.max(1e-10);
                f.w[c] = i.omega;
            }
        }
    }
    impose_fixed(disc, &mut f);
    f
}

pub(crate) fn build_state(
    disc: &Discretization,
    f: Fields,
    norms: Vec<f64>,
    history: ResidualHistory,
    iterations: usize,
    clip_events: usize,
) -> FlowState {
    let aux = disc.aux(&f);
    let mean_grad = if disc.mesh.dim() == 1 {
        [-disc.bc.body_force, 0.0]
    } else {
        [0.0, 0.0]
    };
    FlowState {
        u: f.u,
        v: f.v,
        p: f.p,
        k: f.k,
        omega: f.w,
        nu_t: aux.nu_t,
        nu: disc.settings.nu,
        mean_pressure_gradient: mean_grad,
        equations: disc.layout.vars().iter().map(|v| v.name().to_string()).collect(),
        residual_norms: norms,
        history,
        iterations,
        clip_events,
    }
}

/// Residual array `R` (cells x equations, row-major) of a state.
pub fn residual(
    state: &FlowState,
    beta: &CorrectionField,
    mesh: &Mesh,
    bc: &BoundaryConditions,
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    state.check(mesh)?;
    check_beta(mesh, beta)?;
    let disc = Discretization::new(mesh, bc, settings, beta.values());
    let mut r = vec![0.0; mesh.n_cells() * disc.n_eq()];
    disc.evaluate(&state.fields(), &mut r, None);
    Ok(r)
}

/// Residual normalised per equation as used by the convergence test.
pub fn normalized_residual_norms(
    state: &FlowState,
    beta: &CorrectionField,
    mesh: &Mesh,
    bc: &BoundaryConditions,
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    state.check(mesh)?;
    check_beta(mesh, beta)?;
    let disc = Discretization::new(mesh, bc, settings, beta.values());
    let n = mesh.n_cells() * disc.n_eq();
    let (mut r, mut s) = (vec![0.0; n], vec![0.0; n]);
    disc.evaluate(&state.fields(), &mut r, Some(&mut s));
    Ok(disc.normalized_norms(&r, &s))
}

/// Corrected omega production density `beta_c * gamma * S^2` per cell.
///
/// Uses the raw correction values so the source is exactly linear in
/// `beta_c`; the solver itself applies the lower bound [`BETA_MIN`].
pub fn omega_production(
    state: &FlowState,
    beta: &CorrectionField,
    mesh: &Mesh,
    bc: &BoundaryConditions,
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    state.check(mesh)?;
    check_beta(mesh, beta)?;
    let disc = Discretization::new(mesh, bc, settings, beta.values());
    let aux = disc.aux(&state.fields());
    Ok((0..mesh.n_cells())
        .map(|c| {
            if mesh.is_blanked(c) {
                0.0
            } else {
                beta.values()[c] * sst::omega_production(&disc.consts, aux.f1[c], aux.strain[c])
            }
        })
        .collect())
}

/// Eddy viscosity implied by the state's k, omega and velocity gradients.
pub fn eddy_viscosity(
    state: &FlowState,
    mesh: &Mesh,
    bc: &BoundaryConditions,
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    state.check(mesh)?;
    if let Some((c, _)) = state
        .k
        .iter()
        .zip(&state.omega)
        .enumerate()
        .find(|(c, (k, w))| !mesh.is_blanked(*c) && (**k < 0.0 || **w <= 0.0))
        .map(|(c, kw)| (c, kw))
    {
        return invalid(format!("eddy viscosity needs k >= 0 and omega > 0 (cell {c})"));
    }
    let beta = CorrectionField::uniform(mesh.n_cells());
    let disc = Discretization::new(mesh, bc, settings, beta.values());
    Ok(disc.aux(&state.fields()).nu_t)
}

/// Wall-normal gradient helper shared by post-processing: `du/dy` at the
/// wall face of a wall-adjacent cell.
pub fn wall_shear_rate(state: &FlowState, mesh: &Mesh, c: usize) -> Option<f64> {
    for d in [Direction::South, Direction::North] {
        if mesh.neighbor(c, d) == Neighbor::Boundary(BoundaryTag::Wall) {
            return Some(state.u[c] / mesh.half_spacing(c, d));
        }
    }
    None
}
