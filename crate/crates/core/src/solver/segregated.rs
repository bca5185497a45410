//! Segregated outer iterations: one linear solve per transported variable
//! with deferred-correction convection, followed in 2D by a SIMPLE pressure
//! correction. Hands over to the Newton polish once the residual is small.

use sprs::TriMat;

use crate::error::{Error, ResidualHistory, Result};
use crate::linalg::BandedLu;
use crate::mesh::{BoundaryTag, Direction, FaceRule, Neighbor};

use super::discretization::{Aux, DiffusionTarget, Discretization, Fields, Var, OMEGA_MIN};
use super::{build_state, newton, sst, FlowState};

pub(crate) struct Driver<'a> {
    disc: &'a Discretization<'a>,
    f: Fields,
    history: ResidualHistory,
    clips: usize,
}

/// Iterations without a 1% improvement before Newton is tried regardless
/// of the residual level.
const STALL_WINDOW: usize = 100;

fn worst(norms: &[f64]) -> f64 {
    norms
        .iter()
        .fold(0.0f64, |m, &v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v) })
}

impl<'a> Driver<'a> {
    pub fn new(disc: &'a Discretization<'a>, f: Fields) -> Self {
        Self {
            disc,
            f,
            history: Vec::new(),
            clips: 0,
        }
    }

    fn norms(&self) -> Vec<f64> {
        let n = self.disc.mesh.n_cells() * self.disc.n_eq();
        let (mut r, mut s) = (vec![0.0; n], vec![0.0; n]);
        self.disc.evaluate(&self.f, &mut r, Some(&mut s));
        self.disc.normalized_norms(&r, &s)
    }

    fn finish(self, norms: Vec<f64>) -> FlowState {
        let iterations = self.history.len();
        build_state(self.disc, self.f, norms, self.history, iterations, self.clips)
    }

    fn failure(self, reason: String, norms: Vec<f64>) -> Error {
        let partial = self.finish(norms);
        Error::NonConvergence {
            reason,
            history: partial.history.clone(),
            partial: Some(Box::new(partial)),
        }
    }

    pub fn run(mut self) -> Result<FlowState> {
        let settings = self.disc.settings;
        let tol = settings.tolerance;
        let mut best = f64::INFINITY;
        let mut best_at = 0;
        let mut newton_after = 0;
        for it in 0..settings.max_iterations {
            let norms = self.norms();
            let w = worst(&norms);
            self.history.push(norms.clone());
            if w.is_nan() || self.f.u.iter().chain(&self.f.k).chain(&self.f.w).any(|x| !x.is_finite()) {
                return Err(Error::NumericalFailure(format!(
                    "non-finite field after {it} segregated iterations"
                )));
            }
            if w > settings.divergence_factor * best {
                return Err(self.failure(
                    format!("residual grew from {best:.3e} to {w:.3e}"),
                    norms,
                ));
            }
            if w < 0.99 * best {
                best_at = it;
            }
            best = best.min(w);
            let stagnating = it >= best_at + STALL_WINDOW;
            if ((w <= settings.newton_switch || stagnating) && it >= newton_after) || w <= tol {
                match newton::polish(self.disc, &self.f, tol, settings.newton_max_iterations) {
                    Ok(out) => {
                        self.history.extend(out.history);
                        self.clips += out.clips;
                        self.f = out.fields;
                        return Ok(self.finish(out.norms));
                    }
                    Err(e) => {
                        log::debug!("newton polish failed at iteration {it}: {e}");
                        if w <= tol {
                            return Ok(self.finish(norms));
                        }
                        newton_after = it + 25 + it / 2;
                    }
                }
            }
            self.sweep()?;
        }
        let norms = self.norms();
        let w = worst(&norms);
        Err(self.failure(
            format!(
                "iteration cap {} reached with residual {w:.3e}",
                settings.max_iterations
            ),
            norms,
        ))
    }

    fn sweep(&mut self) -> Result<()> {
        let disc = self.disc;
        let s = disc.settings;
        let aux = disc.aux(&self.f);
        let fluxes = disc.fluxes(&self.f, &aux);
        let a_u = self.solve_transport(Var::U, &aux, &fluxes, s.relax_momentum)?;
        if disc.layout.two_d {
            let a_v = self.solve_transport(Var::V, &aux, &fluxes, s.relax_momentum)?;
            self.pressure_correction(&a_u, &a_v)?;
        }
        if disc.layout.turbulent {
            let aux = disc.aux(&self.f);
            let fluxes = disc.fluxes(&self.f, &aux);
            self.solve_transport(Var::K, &aux, &fluxes, s.relax_turbulence)?;
            for k in self.f.k.iter_mut() {
                if *k < 0.0 {
                    *k = 0.0;
                    self.clips += 1;
                }
            }
            self.solve_transport(Var::W, &aux, &fluxes, s.relax_turbulence)?;
            for (c, w) in self.f.w.iter_mut().enumerate() {
                if !disc.mesh.is_blanked(c) && *w < OMEGA_MIN {
                    *w = OMEGA_MIN;
                    self.clips += 1;
                }
            }
        }
        Ok(())
    }

    /// Assembles and solves one transport equation; returns the relaxed
    /// diagonal coefficients.
    fn solve_transport(
        &mut self,
        var: Var,
        aux: &Aux,
        fluxes: &[[f64; 4]],
        relax: f64,
    ) -> Result<Vec<f64>> {
        let disc = self.disc;
        let mesh = disc.mesh;
        let n = mesh.n_cells();
        let cst = &disc.consts;
        let sou = disc.second_order(var);
        let field = self.f.get(var).to_vec();
        let mut tri = TriMat::new((n, n));
        let mut rhs = vec![0.0; n];
        let mut diag = vec![1.0; n];
        for c in 0..n {
            if mesh.is_blanked(c) {
                tri.add_triplet(c, c, 1.0);
                rhs[c] = field[c];
                continue;
            }
            if var == Var::W {
                if let Some(w) = disc.fixed_omega(c) {
                    tri.add_triplet(c, c, 1.0);
                    rhs[c] = w;
                    continue;
                }
            }
            let vol = mesh.volume(c);
            let mut ap = 0.0;
            let mut b = 0.0;
            for d in Direction::ALL {
                let fl = fluxes[c][d.slot()];
                if fl != 0.0 {
                    match mesh.neighbor(c, d) {
                        Neighbor::Cell(nb) => {
                            ap += fl.max(0.0);
                            tri.add_triplet(c, nb, -(-fl).max(0.0));
                        }
                        Neighbor::Boundary(_) => {
                            ap += fl.max(0.0);
                            if fl < 0.0 {
                                b -= fl * disc.upwind_value(&field, var, c, d, fl, false);
                            }
                        }
                    }
                    if sou {
                        let hi = disc.upwind_value(&field, var, c, d, fl, true);
                        let lo = disc.upwind_value(&field, var, c, d, fl, false);
                        b -= fl * (hi - lo);
                    }
                }
                if let Some((coef, target)) = disc.diffusion_link(&self.f, aux, var, c, d) {
                    ap += coef;
                    match target {
                        DiffusionTarget::Cell(nb) => tri.add_triplet(c, nb, -coef),
                        DiffusionTarget::Value(v) => b += coef * v,
                    }
                }
            }
            match var {
                Var::U => b += (-aux.grad_p[c][0] + disc.bc.body_force) * vol,
                Var::V => b += -aux.grad_p[c][1] * vol,
                Var::K => {
                    let w = self.f.w[c];
                    b += sst::k_production(cst, aux.nu_t[c], aux.strain[c], self.f.k[c], w) * vol;
                    ap += cst.beta_star * w * vol;
                }
                Var::W => {
                    let w = self.f.w[c];
                    let beta = cst.beta(aux.f1[c]);
                    b += disc.beta_eff()[c] * sst::omega_production(cst, aux.f1[c], aux.strain[c]) * vol;
                    ap += 2.0 * beta * w * vol;
                    b += beta * w * w * vol;
                    let cross = disc.cross_diffusion_source(&self.f, aux, c);
                    if cross >= 0.0 {
                        b += cross * vol;
                    } else {
                        ap += -cross / w * vol;
                    }
                }
                Var::P => unreachable!("pressure is not a transported variable"),
            }
            let ap_r = ap / relax;
            b += (1.0 - relax) * ap_r * field[c];
            tri.add_triplet(c, c, ap_r);
            rhs[c] = b;
            diag[c] = ap_r;
        }
        let lu = BandedLu::factor(&tri.to_csr())?;
        let x = lu.solve(&rhs);
        *self.f.get_mut(var) = x;
        Ok(diag)
    }

    fn pressure_correction(&mut self, a_u: &[f64], a_v: &[f64]) -> Result<()> {
        let disc = self.disc;
        let mesh = disc.mesh;
        let n = mesh.n_cells();
        let aux = disc.aux(&self.f);
        let fluxes = disc.fluxes(&self.f, &aux);
        let dcoef: Vec<[f64; 2]> = (0..n)
            .map(|c| [mesh.volume(c) / a_u[c], mesh.volume(c) / a_v[c]])
            .collect();
        let mut tri = TriMat::new((n, n));
        let mut rhs = vec![0.0; n];
        for c in 0..n {
            if mesh.is_blanked(c) {
                tri.add_triplet(c, c, 1.0);
                continue;
            }
            let mut ap = 0.0;
            for d in Direction::ALL {
                let axis = d.axis();
                let area = mesh.face_area(c, d);
                match mesh.neighbor(c, d) {
                    Neighbor::Cell(nb) => {
                        let coef = 0.5 * (dcoef[c][axis] + dcoef[nb][axis]) * area
                            / mesh.center_distance(c, nb, d);
                        ap += coef;
                        tri.add_triplet(c, nb, -coef);
                    }
                    Neighbor::Boundary(BoundaryTag::Outlet) => {
                        ap += dcoef[c][axis] * area / mesh.half_spacing(c, d);
                    }
                    Neighbor::Boundary(_) => {}
                }
                rhs[c] -= fluxes[c][d.slot()];
            }
            tri.add_triplet(c, c, ap);
        }
        let lu = BandedLu::factor(&tri.to_csr())?;
        let pc = lu.solve(&rhs);
        let grad = mesh.gradient_with(&pc, |tag, _| match tag {
            BoundaryTag::Outlet => FaceRule::Dirichlet(0.0),
            _ => FaceRule::ZeroGradient,
        })?;
        let alpha = disc.settings.relax_pressure;
        for c in 0..n {
            if mesh.is_blanked(c) {
                continue;
            }
            self.f.p[c] += alpha * pc[c];
            self.f.u[c] -= dcoef[c][0] * grad[c][0];
            self.f.v[c] -= dcoef[c][1] * grad[c][1];
        }
        Ok(())
    }
}
