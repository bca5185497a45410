//! Finite-volume residual of the incompressible RANS system.
//!
//! The same operator serves the 1D fully developed channel (periodic in x,
//! driven by a body force) and the 2D Cartesian case with blanked cells. It
//! is the single definition of `R(w)` that the segregated iterations, the
//! Newton polish and the discrete adjoint all share.

use crate::linalg::{ResidualOperator, SparsityPattern};
use crate::mesh::{BoundaryTag, Direction, FaceRule, Mesh, Neighbor};

use super::sst::{self, BlendInputs, TurbulenceConstants};
use super::{BoundaryConditions, ConvectionScheme, SolverSettings, TurbulenceModel};

/// Lower bound applied to the correction multiplier inside the solver.
pub const BETA_MIN: f64 = 1e-3;
/// Floor applied to omega by the segregated iterations.
pub(crate) const OMEGA_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    U,
    V,
    P,
    K,
    W,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::U => "u",
            Var::V => "v",
            Var::P => "p",
            Var::K => "k",
            Var::W => "omega",
        }
    }
}

/// Which unknowns are carried per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub two_d: bool,
    pub turbulent: bool,
}

impl Layout {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![Var::U];
        if self.two_d {
            v.push(Var::V);
            v.push(Var::P);
        }
        if self.turbulent {
            v.push(Var::K);
            v.push(Var::W);
        }
        v
    }

    pub fn n_eq(&self) -> usize {
        self.vars().len()
    }

    pub fn slot(&self, var: Var) -> Option<usize> {
        self.vars().iter().position(|&v| v == var)
    }
}

/// Primitive fields on all cells (blanked cells carry placeholders).
#[derive(Debug, Clone, PartialEq)]
pub struct Fields {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub k: Vec<f64>,
    pub w: Vec<f64>,
}

impl Fields {
    pub fn get(&self, var: Var) -> &[f64] {
        match var {
            Var::U => &self.u,
            Var::V => &self.v,
            Var::P => &self.p,
            Var::K => &self.k,
            Var::W => &self.w,
        }
    }

    pub fn get_mut(&mut self, var: Var) -> &mut Vec<f64> {
        match var {
            Var::U => &mut self.u,
            Var::V => &mut self.v,
            Var::P => &mut self.p,
            Var::K => &mut self.k,
            Var::W => &mut self.w,
        }
    }
}

/// Cell quantities derived from the primitive fields.
#[derive(Debug, Clone)]
pub struct Aux {
    pub grad_u: Vec<[f64; 2]>,
    pub grad_v: Vec<[f64; 2]>,
    pub grad_p: Vec<[f64; 2]>,
    pub grad_k: Vec<[f64; 2]>,
    pub grad_w: Vec<[f64; 2]>,
    /// `sqrt(2 S_ij S_ij)`
    pub strain: Vec<f64>,
    pub f1: Vec<f64>,
    pub nu_t: Vec<f64>,
    /// Momentum diagonal estimate used for Rhie-Chow face velocities.
    pub a_rc: Vec<f64>,
}

/// Boundary treatment of one variable at one face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum FaceBc {
    /// Fixed face value with the given face diffusivity.
    Dirichlet { value: f64, gamma: f64 },
    ZeroGradient,
    /// Face carries neither flux nor value (periodic direction).
    Inactive,
}

pub struct Discretization<'a> {
    pub mesh: &'a Mesh,
    pub bc: &'a BoundaryConditions,
    pub settings: &'a SolverSettings,
    pub consts: TurbulenceConstants,
    pub layout: Layout,
    beta_eff: Vec<f64>,
    fixed_omega: Vec<Option<f64>>,
    inlet_profile: Vec<f64>,
}

impl<'a> Discretization<'a> {
    pub fn new(
        mesh: &'a Mesh,
        bc: &'a BoundaryConditions,
        settings: &'a SolverSettings,
        beta: &[f64],
    ) -> Self {
        let consts = settings.model.constants();
        let layout = Layout {
            two_d: mesh.dim() == 2,
            turbulent: settings.model != TurbulenceModel::Laminar,
        };
        let beta_eff = beta.iter().map(|&b| b.max(BETA_MIN)).collect();
        let fixed_omega = (0..mesh.n_cells())
            .map(|c| {
                if layout.turbulent && mesh.is_wall_adjacent(c) {
                    Some(sst::wall_omega(&consts, settings.nu, mesh.wall_distance()[c]))
                } else {
                    None
                }
            })
            .collect();
        let inlet_profile = (0..mesh.n_cells())
            .map(|c| bc.inlet_velocity(mesh, c))
            .collect();
        Self {
            mesh,
            bc,
            settings,
            consts,
            layout,
            beta_eff,
            fixed_omega,
            inlet_profile,
        }
    }

    pub fn n_eq(&self) -> usize {
        self.layout.n_eq()
    }

    pub fn fixed_omega(&self, c: usize) -> Option<f64> {
        self.fixed_omega[c]
    }

    pub fn beta_eff(&self) -> &[f64] {
        &self.beta_eff
    }

    pub fn pack(&self, f: &Fields) -> Vec<f64> {
        let vars = self.layout.vars();
        let n = self.mesh.n_cells();
        let mut w = vec![0.0; n * vars.len()];
        for c in 0..n {
            for (s, &var) in vars.iter().enumerate() {
                w[c * vars.len() + s] = f.get(var)[c];
            }
        }
        w
    }

    pub fn unpack(&self, w: &[f64]) -> Fields {
        let n = self.mesh.n_cells();
        let vars = self.layout.vars();
        let ne = vars.len();
        let mut f = self.blank_fields();
        for c in 0..n {
            for (s, &var) in vars.iter().enumerate() {
                f.get_mut(var)[c] = w[c * ne + s];
            }
        }
        f
    }

    pub fn blank_fields(&self) -> Fields {
        let n = self.mesh.n_cells();
        Fields {
            u: vec![0.0; n],
            v: vec![0.0; n],
            p: vec![0.0; n],
            k: vec![0.0; n],
            w: vec![1.0; n],
        }
    }

    /// Placeholder value the identity rows pin blanked cells to.
    fn blank_value(var: Var) -> f64 {
        if var == Var::W {
            1.0
        } else {
            0.0
        }
    }

    pub(crate) fn face_bc(&self, var: Var, c: usize, d: Direction, tag: BoundaryTag) -> FaceBc {
        let nu = self.settings.nu;
        match tag {
            BoundaryTag::Periodic => FaceBc::Inactive,
            BoundaryTag::Wall => match var {
                Var::U | Var::V | Var::K => FaceBc::Dirichlet {
                    value: 0.0,
                    gamma: nu,
                },
                Var::P | Var::W => FaceBc::ZeroGradient,
            },
            BoundaryTag::Inlet => {
                let inlet = self.bc.inlet.as_ref();
                match var {
                    Var::U => FaceBc::Dirichlet {
                        value: self.inlet_profile[c],
                        gamma: f64::NAN,
                    },
                    Var::V => FaceBc::Dirichlet {
                        value: 0.0,
                        gamma: f64::NAN,
                    },
                    Var::K => FaceBc::Dirichlet {
                        value: inlet.map_or(0.0, |i| i.k),
                        gamma: f64::NAN,
                    },
                    Var::W => FaceBc::Dirichlet {
                        value: inlet.map_or(1.0, |i| i.omega),
                        gamma: f64::NAN,
                    },
                    Var::P => FaceBc::ZeroGradient,
                }
            }
            BoundaryTag::Outlet => match var {
                Var::P => FaceBc::Dirichlet {
                    value: 0.0,
                    gamma: f64::NAN,
                },
                _ => FaceBc::ZeroGradient,
            },
            BoundaryTag::Symmetry => {
                let normal_component = match d.axis() {
                    0 => Var::U,
                    _ => Var::V,
                };
                if var == normal_component {
                    FaceBc::Dirichlet {
                        value: 0.0,
                        gamma: f64::NAN,
                    }
                } else {
                    FaceBc::ZeroGradient
                }
            }
        }
    }

    /// Green-Gauss gradient with boundary faces carrying the same values the
    /// transport equations see.
    fn bc_gradient(&self, f: &Fields, var: Var) -> Vec<[f64; 2]> {
        self.mesh
            .gradient_cellwise(f.get(var), |c, tag, d| match (tag, var) {
                (BoundaryTag::Wall, Var::W) => FaceRule::Extrapolate,
                _ => match self.face_bc(var, c, d, tag) {
                    FaceBc::Dirichlet { value, .. } => FaceRule::Dirichlet(value),
                    FaceBc::ZeroGradient | FaceBc::Inactive => FaceRule::ZeroGradient,
                },
            })
            .expect("field sized to mesh")
    }

    pub fn aux(&self, f: &Fields) -> Aux {
        let mesh = self.mesh;
        let n = mesh.n_cells();
        let grad_u = self.bc_gradient(f, Var::U);
        let grad_v = if self.layout.two_d {
            self.bc_gradient(f, Var::V)
        } else {
            vec![[0.0; 2]; n]
        };
        let grad_p = if self.layout.two_d {
            self.bc_gradient(f, Var::P)
        } else {
            vec![[0.0; 2]; n]
        };
        let (grad_k, grad_w) = if self.layout.turbulent {
            (self.bc_gradient(f, Var::K), self.bc_gradient(f, Var::W))
        } else {
            (vec![[0.0; 2]; n], vec![[0.0; 2]; n])
        };
        let mut strain = vec![0.0; n];
        let mut f1 = vec![1.0; n];
        let mut nu_t = vec![0.0; n];
        let mut a_rc = vec![1.0; n];
        let nu = self.settings.nu;
        let c = &self.consts;
        for cell in 0..n {
            if mesh.is_blanked(cell) {
                continue;
            }
            let [ux, uy] = grad_u[cell];
            let [vx, vy] = grad_v[cell];
            strain[cell] = (2.0 * (ux * ux + vy * vy) + (uy + vx) * (uy + vx)).sqrt();
            if self.layout.turbulent {
                let b = BlendInputs {
                    k: f.k[cell],
                    omega: f.w[cell],
                    nu,
                    wall_distance: mesh.wall_distance()[cell],
                    grad_k_dot_grad_w: grad_k[cell][0] * grad_w[cell][0]
                        + grad_k[cell][1] * grad_w[cell][1],
                };
                match self.settings.model {
                    TurbulenceModel::Sst => {
                        f1[cell] = sst::f1(c, &b);
                        let f2 = sst::f2(c, &b);
                        nu_t[cell] = sst::eddy_viscosity(c, f.k[cell], f.w[cell], strain[cell], f2);
                    }
                    TurbulenceModel::KOmega => {
                        f1[cell] = 1.0;
                        nu_t[cell] = f.k[cell].max(0.0) / f.w[cell];
                    }
                    TurbulenceModel::Laminar => {}
                }
            }
            if self.layout.two_d {
                let g = nu + nu_t[cell];
                let speed = (f.u[cell] * f.u[cell] + f.v[cell] * f.v[cell]).sqrt();
                let mut a = 0.0;
                for d in Direction::ALL {
                    let area = mesh.face_area(cell, d);
                    a += g * area / mesh.spacing(cell, d) + 0.5 * speed * area;
                }
                a_rc[cell] = a;
            }
        }
        Aux {
            grad_u,
            grad_v,
            grad_p,
            grad_k,
            grad_w,
            strain,
            f1,
            nu_t,
            a_rc,
        }
    }

    /// Outward volumetric flux through face `d` of cell `c`.
    pub fn mass_flux(&self, f: &Fields, aux: &Aux, c: usize, d: Direction) -> f64 {
        if !self.layout.two_d {
            return 0.0;
        }
        let mesh = self.mesh;
        let axis = d.axis();
        let sign = d.normal()[axis];
        let area = mesh.face_area(c, d);
        let vel = |cell: usize| if axis == 0 { f.u[cell] } else { f.v[cell] };
        match mesh.neighbor(c, d) {
            Neighbor::Cell(nb) => {
                let xc = mesh.center(c)[axis];
                let xn = mesh.center(nb)[axis];
                let xf = mesh.face_center(c, d)[axis];
                let wn = (xf - xc) / (xn - xc);
                let ubar = (1.0 - wn) * vel(c) + wn * vel(nb);
                let dbar = 0.5 * (mesh.volume(c) / aux.a_rc[c] + mesh.volume(nb) / aux.a_rc[nb]);
                let dp = (f.p[nb] - f.p[c]) / (xn - xc);
                let gp = (1.0 - wn) * aux.grad_p[c][axis] + wn * aux.grad_p[nb][axis];
                sign * (ubar - dbar * (dp - gp)) * area
            }
            Neighbor::Boundary(BoundaryTag::Inlet) => sign * self.inlet_profile[c] * area,
            Neighbor::Boundary(BoundaryTag::Outlet) => sign * vel(c) * area,
            Neighbor::Boundary(_) => 0.0,
        }
    }

    pub fn fluxes(&self, f: &Fields, aux: &Aux) -> Vec<[f64; 4]> {
        (0..self.mesh.n_cells())
            .map(|c| {
                let mut out = [0.0; 4];
                if !self.mesh.is_blanked(c) {
                    for d in Direction::ALL {
                        out[d.slot()] = self.mass_flux(f, aux, c, d);
                    }
                }
                out
            })
            .collect()
    }

    /// Face value of a convected variable from the upwind side.
    pub(crate) fn upwind_value(
        &self,
        field: &[f64],
        var: Var,
        c: usize,
        d: Direction,
        flux: f64,
        second_order: bool,
    ) -> f64 {
        let mesh = self.mesh;
        let axis = d.axis();
        let xf = mesh.face_center(c, d)[axis];
        let (up, beyond) = match mesh.neighbor(c, d) {
            Neighbor::Cell(nb) => {
                if flux >= 0.0 {
                    (c, mesh.neighbor(c, d.opposite()))
                } else {
                    (nb, mesh.neighbor(nb, d))
                }
            }
            Neighbor::Boundary(tag) => {
                return match self.face_bc(var, c, d, tag) {
                    FaceBc::Dirichlet { value, .. } if flux < 0.0 => value,
                    _ => field[c],
                };
            }
        };
        if !second_order {
            return field[up];
        }
        let xu = mesh.center(up)[axis];
        match beyond {
            Neighbor::Cell(uu) => {
                let xuu = mesh.center(uu)[axis];
                field[up] + (field[up] - field[uu]) * (xf - xu) / (xu - xuu)
            }
            _ => field[up],
        }
    }

    /// Second-order upwinding applies to momentum only; k and omega are
    /// convected first-order so that their discrete equations stay bounded.
    pub fn second_order(&self, var: Var) -> bool {
        self.settings.convection == ConvectionScheme::SecondOrderUpwind
            && matches!(var, Var::U | Var::V)
    }

    /// Residual of every equation at every cell plus the magnitude of the
    /// terms balanced in that cell (used to normalise convergence norms).
    pub fn evaluate(&self, f: &Fields, r: &mut [f64], mut scale: Option<&mut [f64]>) {
        let aux = self.aux(f);
        let mesh = self.mesh;
        let vars = self.layout.vars();
        let ne = vars.len();
        let nu = self.settings.nu;
        let fluxes = self.fluxes(f, &aux);
        let c_ = &self.consts;

        for c in 0..mesh.n_cells() {
            let base = c * ne;
            if mesh.is_blanked(c) {
                for (s, &var) in vars.iter().enumerate() {
                    r[base + s] = f.get(var)[c] - Self::blank_value(var);
                    if let Some(sc) = scale.as_deref_mut() {
                        sc[base + s] = 1.0;
                    }
                }
                continue;
            }
            let vol = mesh.volume(c);
            for (s, &var) in vars.iter().enumerate() {
                let (res, mag) = match var {
                    Var::P => {
                        let mut res = 0.0;
                        let mut mag = 0.0;
                        for d in Direction::ALL {
                            let fl = fluxes[c][d.slot()];
                            res -= fl;
                            mag += fl.abs();
                        }
                        (res, mag)
                    }
                    Var::W if self.fixed_omega[c].is_some() => {
                        let target = self.fixed_omega[c].unwrap();
                        (f.w[c] - target, target.abs())
                    }
                    _ => self.transport_residual(
                        f,
                        &aux,
                        &fluxes,
                        var,
                        c,
                        vol,
                        nu,
                        self.second_order(var),
                        c_,
                    ),
                };
                r[base + s] = res;
                if let Some(sc) = scale.as_deref_mut() {
                    sc[base + s] = mag;
                }
            }
        }
    }

    /// Diffusivity of `var` at the cell centre.
    pub(crate) fn cell_gamma(&self, aux: &Aux, var: Var, c: usize) -> f64 {
        let nu = self.settings.nu;
        let nut = aux.nu_t[c];
        match var {
            Var::U | Var::V => nu + nut,
            Var::K => nu + self.consts.sigma_k(aux.f1[c]) * nut,
            Var::W => nu + self.consts.sigma_w(aux.f1[c]) * nut,
            Var::P => 0.0,
        }
    }

    /// Face diffusivity `Gamma_f * A_f / delta_f` and the neighbour/boundary
    /// value for the diffusive flux of `var` across face `d` of `c`.
    pub(crate) fn diffusion_link(
        &self,
        f: &Fields,
        aux: &Aux,
        var: Var,
        c: usize,
        d: Direction,
    ) -> Option<(f64, DiffusionTarget)> {
        let mesh = self.mesh;
        let area = mesh.face_area(c, d);
        match mesh.neighbor(c, d) {
            Neighbor::Cell(nb) => {
                let axis = d.axis();
                let xc = mesh.center(c)[axis];
                let xn = mesh.center(nb)[axis];
                let xf = mesh.face_center(c, d)[axis];
                let wn = (xf - xc) / (xn - xc);
                let g = (1.0 - wn) * self.cell_gamma(aux, var, c) + wn * self.cell_gamma(aux, var, nb);
                Some((g * area / (xn - xc).abs(), DiffusionTarget::Cell(nb)))
            }
            Neighbor::Boundary(tag) => match self.face_bc(var, c, d, tag) {
                FaceBc::Dirichlet { value, gamma } => {
                    let g = if gamma.is_nan() {
                        self.cell_gamma(aux, var, c)
                    } else {
                        gamma
                    };
                    let _ = f;
                    Some((g * area / mesh.half_spacing(c, d), DiffusionTarget::Value(value)))
                }
                FaceBc::ZeroGradient | FaceBc::Inactive => None,
            },
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn transport_residual(
        &self,
        f: &Fields,
        aux: &Aux,
        fluxes: &[[f64; 4]],
        var: Var,
        c: usize,
        vol: f64,
        nu: f64,
        sou: bool,
        cst: &TurbulenceConstants,
    ) -> (f64, f64) {
        let field = f.get(var);
        let mut res = 0.0;
        let mut mag = 0.0;
        for d in Direction::ALL {
            let fl = fluxes[c][d.slot()];
            if fl != 0.0 {
                let phi_f = self.upwind_value(field, var, c, d, fl, sou);
                res -= fl * phi_f;
                mag += (fl * phi_f).abs();
            }
            if let Some((coef, target)) = self.diffusion_link(f, aux, var, c, d) {
                let other = match target {
                    DiffusionTarget::Cell(nb) => field[nb],
                    DiffusionTarget::Value(v) => v,
                };
                let flux = coef * (other - field[c]);
                res += flux;
                mag += flux.abs();
            }
        }
        let src = match var {
            Var::U => {
                let s = (-aux.grad_p[c][0] + self.bc.body_force) * vol;
                mag += s.abs();
                s
            }
            Var::V => {
                let s = -aux.grad_p[c][1] * vol;
                mag += s.abs();
                s
            }
            Var::K => {
                let prod = sst::k_production(cst, aux.nu_t[c], aux.strain[c], f.k[c], f.w[c]) * vol;
                let dest = cst.beta_star * f.k[c] * f.w[c] * vol;
                mag += prod.abs() + dest.abs();
                prod - dest
            }
            Var::W => {
                let prod = self.beta_eff[c] * sst::omega_production(cst, aux.f1[c], aux.strain[c]) * vol;
                let dest = cst.beta(aux.f1[c]) * f.w[c] * f.w[c] * vol;
                let cross = self.cross_diffusion_source(f, aux, c) * vol;
                mag += prod.abs() + dest.abs() + cross.abs();
                prod - dest + cross
            }
            Var::P => 0.0,
        };
        let _ = nu;
        (res + src, mag)
    }

    /// `(1 - F1) 2 sigma_w2 / omega grad k . grad omega` (zero for Wilcox).
    pub(crate) fn cross_diffusion_source(&self, f: &Fields, aux: &Aux, c: usize) -> f64 {
        if self.settings.model != TurbulenceModel::Sst {
            return 0.0;
        }
        let gk = aux.grad_k[c];
        let gw = aux.grad_w[c];
        (1.0 - aux.f1[c]) * 2.0 * self.consts.sigma_w2 / f.w[c] * (gk[0] * gw[0] + gk[1] * gw[1])
    }

    /// `dR_omega / d beta` per cell (the correction enters linearly).
    pub fn production_sensitivity(&self, f: &Fields, raw_beta: &[f64]) -> Vec<f64> {
        let aux = self.aux(f);
        (0..self.mesh.n_cells())
            .map(|c| {
                if !self.layout.turbulent
                    || self.mesh.is_blanked(c)
                    || self.fixed_omega[c].is_some()
                    || raw_beta[c] < BETA_MIN
                {
                    0.0
                } else {
                    sst::omega_production(&self.consts, aux.f1[c], aux.strain[c]) * self.mesh.volume(c)
                }
            })
            .collect()
    }

    /// Per-equation normalised residual norms: max over cells of
    /// `|R| / sum|terms|`.
    pub fn normalized_norms(&self, r: &[f64], scale: &[f64]) -> Vec<f64> {
        let ne = self.n_eq();
        let mut out = vec![0.0f64; ne];
        for c in 0..self.mesh.n_cells() {
            if self.mesh.is_blanked(c) {
                continue;
            }
            for s in 0..ne {
                let i = c * ne + s;
                let v = r[i].abs() / (scale[i] + 1e-300);
                let v = if r[i] == 0.0 { 0.0 } else { v };
                if v.is_nan() {
                    out[s] = f64::NAN;
                } else if !out[s].is_nan() {
                    out[s] = out[s].max(v);
                }
            }
        }
        out
    }

    /// Structural pattern: every unknown of a cell couples to every unknown
    /// of the cells within two cells in each direction (box stencil).
    pub fn pattern(&self) -> SparsityPattern {
        let mesh = self.mesh;
        let ne = self.n_eq();
        let (nx, ny) = (mesh.nx() as isize, mesh.ny() as isize);
        let radius: isize = 2;
        let mut rows = Vec::with_capacity(mesh.n_cells() * ne);
        for c in 0..mesh.n_cells() {
            let mut cols = Vec::new();
            if mesh.is_blanked(c) {
                for s in 0..ne {
                    rows.push(vec![c * ne + s]);
                }
                continue;
            }
            let (i, j) = mesh.ij(c);
            let ri = if self.layout.two_d { radius } else { 0 };
            for di in -ri..=ri {
                for dj in -radius..=radius {
                    let (a, b) = (i as isize + di, j as isize + dj);
                    if a < 0 || b < 0 || a >= nx || b >= ny {
                        continue;
                    }
                    let nb = mesh.idx(a as usize, b as usize);
                    if mesh.is_blanked(nb) {
                        continue;
                    }
                    cols.extend((0..ne).map(|s| nb * ne + s));
                }
            }
            for _ in 0..ne {
                rows.push(cols.clone());
            }
        }
        SparsityPattern::new(rows, mesh.n_cells() * ne)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum DiffusionTarget {
    Cell(usize),
    Value(f64),
}

impl ResidualOperator for Discretization<'_> {
    fn len(&self) -> usize {
        self.mesh.n_cells() * self.n_eq()
    }

    fn eval(&self, w: &[f64], out: &mut [f64]) {
        let f = self.unpack(w);
        self.evaluate(&f, out, None);
    }

    fn pattern(&self) -> SparsityPattern {
        Discretization::pattern(self)
    }
}
