//! Field inversion: find the correction field that makes the solved velocity
//! match reference samples, with gradients from the discrete adjoint.
//!
//! The objective is
//! `J = (1/n_a) sum_sel |u - u_ref|^2 + (lambda/n) sum (beta - 1)^2`
//! and `dJ/dbeta = dJ/dbeta|_w - phi^T dR/dbeta` with
//! `(dR/dw)^T phi = dJ/dw`.

use serde::{Deserialize, Serialize};
use sprs::CsMat;

use crate::error::{invalid, Error, Result};
use crate::linalg::{
    colored_jacobian, gmres, transpose_csr, BandedLu, FdOptions, FdScheme, GmresOptions,
    JacobiPreconditioner,
};
use crate::mesh::Mesh;
use crate::solver::{Case, CorrectionField, FlowState, Var, BETA_MIN};

/// Reference velocity samples at selected cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssimilationData {
    cells: Vec<usize>,
    u_ref: Vec<f64>,
    v_ref: Option<Vec<f64>>,
    pub source: String,
}

impl AssimilationData {
    pub fn new(
        mesh: &Mesh,
        cells: Vec<usize>,
        u_ref: Vec<f64>,
        v_ref: Option<Vec<f64>>,
        source: impl Into<String>,
    ) -> Result<Self> {
        if cells.is_empty() {
            return invalid("assimilation data selects no cells");
        }
        if u_ref.len() != cells.len() || v_ref.as_ref().is_some_and(|v| v.len() != cells.len()) {
            return invalid("reference values do not match the selected cells");
        }
        let mut seen = vec![false; mesh.n_cells()];
        for &c in &cells {
            if c >= mesh.n_cells() {
                return invalid(format!("cell {c} is outside the mesh"));
            }
            if mesh.is_blanked(c) {
                return invalid(format!("cell {c} is blanked"));
            }
            if seen[c] {
                return invalid(format!("cell {c} selected twice"));
            }
            seen[c] = true;
        }
        if u_ref
            .iter()
            .chain(v_ref.iter().flatten())
            .any(|x| !x.is_finite())
        {
            return invalid("reference velocities must be finite");
        }
        Ok(Self {
            cells,
            u_ref,
            v_ref,
            source: source.into(),
        })
    }

    /// Samples a reference state on the cells where `mask` is set.
    pub fn from_state(
        mesh: &Mesh,
        reference: &FlowState,
        mask: &[bool],
        source: impl Into<String>,
    ) -> Result<Self> {
        if mask.len() != mesh.n_cells() || reference.n_cells() != mesh.n_cells() {
            return invalid("mask and reference must cover the mesh");
        }
        let cells: Vec<usize> = (0..mesh.n_cells())
            .filter(|&c| mask[c] && !mesh.is_blanked(c))
            .collect();
        let u = cells.iter().map(|&c| reference.u[c]).collect();
        let v = (mesh.dim() == 2).then(|| cells.iter().map(|&c| reference.v[c]).collect());
        Self::new(mesh, cells, u, v, source)
    }

    /// Nearest unblanked cell for every point; points falling into the same
    /// cell are averaged.
    pub fn from_points(
        mesh: &Mesh,
        points: &[[f64; 2]],
        u: &[f64],
        v: Option<&[f64]>,
        source: impl Into<String>,
    ) -> Result<Self> {
        if points.len() != u.len() || v.is_some_and(|v| v.len() != u.len()) {
            return invalid("sample coordinates and values differ in length");
        }
        let mut sums: Vec<(usize, f64, f64, usize)> = Vec::new();
        for (i, p) in points.iter().enumerate() {
            let c = nearest_cell(mesh, *p)
                .ok_or_else(|| Error::InvalidArgument("mesh has no active cells".into()))?;
            let vi = v.map_or(0.0, |v| v[i]);
            match sums.iter_mut().find(|s| s.0 == c) {
                Some(s) => {
                    s.1 += u[i];
                    s.2 += vi;
                    s.3 += 1;
                }
                None => sums.push((c, u[i], vi, 1)),
            }
        }
        sums.sort_by_key(|s| s.0);
        let cells = sums.iter().map(|s| s.0).collect();
        let ur = sums.iter().map(|s| s.1 / s.3 as f64).collect();
        let vr = v.map(|_| sums.iter().map(|s| s.2 / s.3 as f64).collect());
        Self::new(mesh, cells, ur, vr, source)
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn u_ref(&self) -> &[f64] {
        &self.u_ref
    }

    pub fn v_ref(&self) -> Option<&[f64]> {
        self.v_ref.as_deref()
    }

    pub fn n_samples(&self) -> usize {
        self.cells.len()
    }

    pub fn mask(&self, n_cells: usize) -> Vec<bool> {
        let mut m = vec![false; n_cells];
        for &c in &self.cells {
            m[c] = true;
        }
        m
    }
}

/// Cells whose centre lies inside an axis-aligned box.
pub fn box_mask(mesh: &Mesh, lo: [f64; 2], hi: [f64; 2]) -> Vec<bool> {
    (0..mesh.n_cells())
        .map(|c| {
            let x = mesh.center(c);
            !mesh.is_blanked(c) && x[0] >= lo[0] && x[0] <= hi[0] && x[1] >= lo[1] && x[1] <= hi[1]
        })
        .collect()
}

pub fn nearest_cell(mesh: &Mesh, p: [f64; 2]) -> Option<usize> {
    (0..mesh.n_cells())
        .filter(|&c| !mesh.is_blanked(c))
        .map(|c| {
            let x = mesh.center(c);
            let d = if mesh.dim() == 1 {
                (x[1] - p[1]).powi(2)
            } else {
                (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2)
            };
            (c, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, _)| c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Optimizer {
    SteepestDescent,
    Lbfgs { memory: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    #[serde(default = "defaults::optimizer")]
    pub method: Optimizer,
    /// Largest change of any beta on the very first trial step.
    #[serde(default = "defaults::initial_step")]
    pub initial_step: f64,
    #[serde(default = "defaults::max_iterations")]
    pub max_iterations: usize,
    /// Relative J change counted as a plateau.
    #[serde(default = "defaults::plateau_tolerance")]
    pub plateau_tolerance: f64,
    /// Consecutive plateau iterations that stop the run.
    #[serde(default = "defaults::plateau_window")]
    pub plateau_window: usize,
    /// Stop once `J <= target_reduction * J_initial`.
    #[serde(default)]
    pub target_reduction: Option<f64>,
    #[serde(default = "defaults::armijo")]
    pub armijo: f64,
    #[serde(default = "defaults::max_backtracks")]
    pub max_backtracks: usize,
    /// Gradient max-norm treated as stationary.
    #[serde(default = "defaults::gradient_tolerance")]
    pub gradient_tolerance: f64,
    /// Relative step of the finite-difference state Jacobian.
    #[serde(default = "defaults::jacobian_step")]
    pub jacobian_step: f64,
    #[serde(default = "defaults::adjoint_tolerance")]
    pub adjoint_tolerance: f64,
}

mod defaults {
    use super::Optimizer;
    pub fn optimizer() -> Optimizer {
        Optimizer::SteepestDescent
    }
    pub fn initial_step() -> f64 {
        0.1
    }
    pub fn max_iterations() -> usize {
        100
    }
    pub fn plateau_tolerance() -> f64 {
        1e-3
    }
    pub fn plateau_window() -> usize {
        5
    }
    pub fn armijo() -> f64 {
        1e-4
    }
    pub fn max_backtracks() -> usize {
        20
    }
    pub fn gradient_tolerance() -> f64 {
        1e-14
    }
    pub fn jacobian_step() -> f64 {
        1e-6
    }
    pub fn adjoint_tolerance() -> f64 {
        1e-10
    }
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            method: defaults::optimizer(),
            initial_step: defaults::initial_step(),
            max_iterations: defaults::max_iterations(),
            plateau_tolerance: defaults::plateau_tolerance(),
            plateau_window: defaults::plateau_window(),
            target_reduction: None,
            armijo: defaults::armijo(),
            max_backtracks: defaults::max_backtracks(),
            gradient_tolerance: defaults::gradient_tolerance(),
            jacobian_step: defaults::jacobian_step(),
            adjoint_tolerance: defaults::adjoint_tolerance(),
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return invalid("initial_step must be positive");
        }
        if self.max_iterations == 0 || self.plateau_window == 0 {
            return invalid("max_iterations and plateau_window must be positive");
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return invalid("armijo constant must lie in (0, 1)");
        }
        if let Some(t) = self.target_reduction {
            if !(t > 0.0 && t < 1.0) {
                return invalid("target_reduction must lie in (0, 1)");
            }
        }
        if let Optimizer::Lbfgs { memory } = self.method {
            if memory == 0 {
                return invalid("L-BFGS memory must be positive");
            }
        }
        if !(self.jacobian_step > 0.0) {
            return invalid("jacobian_step must be positive");
        }
        Ok(())
    }
}

/// Regularisation weight used when a case does not set one.
pub const DEFAULT_LAMBDA: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionProblem {
    pub case: Case,
    pub data: AssimilationData,
    pub lambda: f64,
    /// Cells where beta may differ from 1.
    pub activity: Vec<bool>,
    pub optimizer: OptimizerSettings,
}

impl InversionProblem {
    /// Problem with every unblanked cell active and default optimizer
    /// settings.
    pub fn new(case: Case, data: AssimilationData, lambda: f64) -> Result<Self> {
        let activity = (0..case.n_cells()).map(|c| !case.mesh.is_blanked(c)).collect();
        let p = Self {
            case,
            data,
            lambda,
            activity,
            optimizer: OptimizerSettings::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_activity(mut self, activity: Vec<bool>) -> Result<Self> {
        self.activity = activity;
        self.validate()?;
        Ok(self)
    }

    pub fn with_optimizer(mut self, optimizer: OptimizerSettings) -> Result<Self> {
        self.optimizer = optimizer;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mesh = &self.case.mesh;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return invalid(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.activity.len() != mesh.n_cells() {
            return invalid("activity mask does not match the mesh");
        }
        if let Some(c) = (0..mesh.n_cells()).find(|&c| self.activity[c] && mesh.is_blanked(c)) {
            return invalid(format!("activity mask includes blanked cell {c}"));
        }
        if let Some(&c) = self.data.cells().iter().find(|&&c| c >= mesh.n_cells()) {
            return invalid(format!("assimilation cell {c} is outside the mesh"));
        }
        self.optimizer.validate()
    }

    pub fn n_active(&self) -> usize {
        self.activity.iter().filter(|&&a| a).count()
    }
}

/// `J` for a state solved at `beta`.
pub fn objective(state: &FlowState, problem: &InversionProblem, beta: &CorrectionField) -> Result<f64> {
    let (data, reg) = objective_parts(state, problem, beta)?;
    Ok(data + reg)
}

/// Data misfit and regularisation parts of `J`.
pub fn objective_parts(
    state: &FlowState,
    problem: &InversionProblem,
    beta: &CorrectionField,
) -> Result<(f64, f64)> {
    let d = &problem.data;
    if d.n_samples() == 0 {
        return invalid("assimilation data selects no cells");
    }
    if beta.len() != state.n_cells() {
        return invalid("correction field and state differ in size");
    }
    let n_a = d.n_samples() as f64;
    let mut misfit = 0.0;
    for (i, &c) in d.cells().iter().enumerate() {
        misfit += (state.u[c] - d.u_ref()[i]).powi(2);
        if let Some(v) = d.v_ref() {
            misfit += (state.v[c] - v[i]).powi(2);
        }
    }
    let n = beta.len() as f64;
    let reg: f64 = beta.values().iter().map(|b| (b - 1.0).powi(2)).sum();
    Ok((misfit / n_a, problem.lambda / n * reg))
}

/// `dR/dw` at the state by coloured central differences with step
/// `h (1 + |w|)`.
pub fn assemble_state_jacobian(
    state: &FlowState,
    beta: &CorrectionField,
    problem: &InversionProblem,
) -> Result<CsMat<f64>> {
    state_jacobian_with_step(state, beta, &problem.case, problem.optimizer.jacobian_step)
}

pub fn state_jacobian_with_step(
    state: &FlowState,
    beta: &CorrectionField,
    case: &Case,
    step: f64,
) -> Result<CsMat<f64>> {
    if beta.len() != case.n_cells() || state.n_cells() != case.n_cells() {
        return invalid("state, correction field and mesh differ in size");
    }
    let disc = case.discretization(beta);
    let w = disc.pack(&state.fields());
    colored_jacobian(
        &disc,
        &w,
        FdOptions {
            relative_step: step,
            scheme: FdScheme::Central,
        },
    )
}

/// `dJ/dw` in the packed unknown layout.
pub fn objective_state_gradient(state: &FlowState, problem: &InversionProblem) -> Vec<f64> {
    let disc = problem.case.discretization(&CorrectionField::uniform(problem.case.n_cells()));
    let ne = disc.n_eq();
    let mut g = vec![0.0; problem.case.n_cells() * ne];
    let d = &problem.data;
    let n_a = d.n_samples() as f64;
    let su = disc.layout.slot(Var::U).expect("u is always solved");
    let sv = disc.layout.slot(Var::V);
    for (i, &c) in d.cells().iter().enumerate() {
        g[c * ne + su] = 2.0 * (state.u[c] - d.u_ref()[i]) / n_a;
        if let (Some(v), Some(sv)) = (d.v_ref(), sv) {
            g[c * ne + sv] = 2.0 * (state.v[c] - v[i]) / n_a;
        }
    }
    g
}

#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub phi: Vec<f64>,
    /// Relative residual history of the iterative solve.
    pub history: Vec<f64>,
}

/// Solves `J^T phi = rhs` by GMRES, preconditioned with a banded LU of
/// `J^T` (Jacobi if that factorisation fails).
pub fn solve_adjoint(jacobian: &CsMat<f64>, rhs: &[f64], tolerance: f64) -> Result<AdjointSolution> {
    if jacobian.rows() != jacobian.cols() || jacobian.rows() != rhs.len() {
        return invalid(format!(
            "adjoint system is {}x{} with a right-hand side of {}",
            jacobian.rows(),
            jacobian.cols(),
            rhs.len()
        ));
    }
    let jt = transpose_csr(jacobian);
    let opts = GmresOptions {
        rel_tol: tolerance,
        restart: 50,
        max_iter: 500,
    };
    let out = match BandedLu::factor(&jt) {
        Ok(lu) => gmres(&jt, rhs, &lu, opts)?,
        Err(e) => {
            log::warn!("banded LU of the adjoint operator failed ({e}); using Jacobi");
            gmres(&jt, rhs, &JacobiPreconditioner::new(&jt), opts)?
        }
    };
    Ok(AdjointSolution {
        phi: out.x,
        history: out.history,
    })
}

/// `dJ/dbeta` per cell; zero outside the activity mask.
pub fn total_gradient(
    phi: &[f64],
    state: &FlowState,
    beta: &CorrectionField,
    problem: &InversionProblem,
) -> Result<Vec<f64>> {
    let case = &problem.case;
    let n = case.n_cells();
    if beta.len() != n || state.n_cells() != n {
        return invalid("state, correction field and mesh differ in size");
    }
    let disc = case.discretization(beta);
    let ne = disc.n_eq();
    if phi.len() != n * ne {
        return invalid("adjoint field has the wrong length");
    }
    let mut g = vec![0.0; n];
    let reg = 2.0 * problem.lambda / n as f64;
    let slot = disc.layout.slot(Var::W);
    let sens = slot.map(|_| disc.production_sensitivity(&state.fields(), beta.values()));
    for c in 0..n {
        if !problem.activity[c] {
            continue;
        }
        let b = beta.values()[c];
        g[c] = reg * (b - 1.0);
        if let (Some(s), Some(sens)) = (slot, &sens) {
            g[c] -= phi[c * ne + s] * sens[c];
        }
    }
    Ok(g)
}

/// Adjoint gradient at a converged state: Jacobian, adjoint solve and
/// assembly in one call.
pub fn adjoint_gradient(
    state: &FlowState,
    beta: &CorrectionField,
    problem: &InversionProblem,
) -> Result<Vec<f64>> {
    let jac = assemble_state_jacobian(state, beta, problem)?;
    let rhs = objective_state_gradient(state, problem);
    let adj = solve_adjoint(&jac, &rhs, problem.optimizer.adjoint_tolerance)?;
    total_gradient(&adj.phi, state, beta, problem)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    MaxIterations,
    Plateau,
    TargetReduction,
    /// Gradient vanished (already at a stationary point).
    Stationary,
    /// No trial step decreased J.
    LineSearchFailed,
    /// Trial solves kept failing; the result holds the last accepted state.
    PrimalFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub beta: CorrectionField,
    pub objective_history: Vec<f64>,
    pub gradient_norm_history: Vec<f64>,
    pub state: FlowState,
    pub termination: Termination,
    pub iterations: usize,
    /// Trial solves that failed and were rejected.
    pub rejected_trials: usize,
}

impl InversionResult {
    pub fn initial_objective(&self) -> f64 {
        self.objective_history[0]
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_history.last().expect("history holds the initial J")
    }
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Lbfgs {
    memory: usize,
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

impl Lbfgs {
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.s.len());
        for (s, y) in self.s.iter().zip(&self.y).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push((a, rho));
        }
        if let (Some(s), Some(y)) = (self.s.last(), self.y.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|x| *x *= gamma);
        }
        for ((s, y), (a, rho)) in self.s.iter().zip(&self.y).zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|x| *x = -*x);
        q
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        if dot(&s, &y) <= 1e-300 {
            return;
        }
        if self.s.len() == self.memory {
            self.s.remove(0);
            self.y.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
    }
}

/// Gradient-based minimisation of `J` over the active correction values.
/// Every accepted iterate is a fully converged primal solve, warm-started
/// from the previous one.
pub fn invert(problem: &InversionProblem, initial: &CorrectionField) -> Result<InversionResult> {
    problem.validate()?;
    let n = problem.case.n_cells();
    if initial.len() != n {
        return invalid("initial correction field does not match the mesh");
    }
    if problem.n_active() == 0 {
        return invalid("activity mask leaves no cells to invert");
    }
    let opts = &problem.optimizer;
    let project = |b: &mut [f64]| {
        for c in 0..n {
            b[c] = if problem.activity[c] { b[c].max(BETA_MIN) } else { 1.0 };
        }
    };
    let mut beta_v = initial.values().to_vec();
    project(&mut beta_v);
    let mut beta = CorrectionField::from_values(beta_v)?;
    let mut state = problem.case.solve(&beta)?;
    let mut j = objective(&state, problem, &beta)?;
    let mut grad = adjoint_gradient(&state, &beta, problem)?;
    let mut j_hist = vec![j];
    let mut g_hist = vec![max_abs(&grad)];
    let mut lbfgs = match opts.method {
        Optimizer::Lbfgs { memory } => Some(Lbfgs {
            memory,
            s: Vec::new(),
            y: Vec::new(),
        }),
        Optimizer::SteepestDescent => None,
    };
    let mut step_scale: Option<f64> = None;
    let mut plateau = 0;
    let mut rejected = 0;
    let mut iterations = 0;

    let termination = loop {
        if j == 0.0 || max_abs(&grad) <= opts.gradient_tolerance {
            break Termination::Stationary;
        }
        if let Some(t) = opts.target_reduction {
            if j <= t * j_hist[0] {
                break Termination::TargetReduction;
            }
        }
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        let mut dir = match &lbfgs {
            Some(l) => l.direction(&grad),
            None => grad.iter().map(|g| -g).collect(),
        };
        if dot(&dir, &grad) >= 0.0 {
            dir = grad.iter().map(|g| -g).collect();
        }
        let dmax = max_abs(&dir);
        // unit step for quasi-Newton, Barzilai-Borwein trial for descent
        let mut alpha = match (&lbfgs, step_scale) {
            (Some(l), _) if !l.s.is_empty() => 1.0,
            (_, Some(a)) => a,
            _ => opts.initial_step / dmax,
        };
        let slope = dot(&dir, &grad);
        let mut accepted = None;
        let mut failures = 0;
        for _ in 0..=opts.max_backtracks {
            let mut trial: Vec<f64> = beta
                .values()
                .iter()
                .zip(&dir)
                .map(|(b, d)| b + alpha * d)
                .collect();
            project(&mut trial);
            let trial = CorrectionField::from_values(trial)?;
            match problem.case.solve_from(&trial, &state) {
                Ok(s) => {
                    let jt = objective(&s, problem, &trial)?;
                    if jt.is_finite() && jt <= j + opts.armijo * alpha * slope {
                        accepted = Some((trial, s, jt));
                        break;
                    }
                }
                Err(e @ (Error::NonConvergence { .. } | Error::NumericalFailure(_))) => {
                    log::debug!("trial solve at step {alpha:.3e} failed: {e}");
                    rejected += 1;
                    failures += 1;
                }
                Err(e) => return Err(e),
            }
            alpha *= 0.5;
        }
        let Some((new_beta, new_state, new_j)) = accepted else {
            break if failures > opts.max_backtracks / 2 {
                Termination::PrimalFailure
            } else {
                Termination::LineSearchFailed
            };
        };
        iterations += 1;
        let new_grad = adjoint_gradient(&new_state, &new_beta, problem)?;
        let s: Vec<f64> = new_beta.values().iter().zip(beta.values()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        step_scale = Some(if sy > 0.0 { dot(&s, &s) / sy } else { 2.0 * alpha });
        if let Some(l) = lbfgs.as_mut() {
            l.push(s, y);
        }
        let rel = (j - new_j).abs() / j.abs().max(f64::MIN_POSITIVE);
        plateau = if rel < opts.plateau_tolerance { plateau + 1 } else { 0 };
        beta = new_beta;
        state = new_state;
        j = new_j;
        grad = new_grad;
        j_hist.push(j);
        g_hist.push(max_abs(&grad));
        if plateau >= opts.plateau_window {
            break Termination::Plateau;
        }
    };
    Ok(InversionResult {
        beta,
        objective_history: j_hist,
        gradient_norm_history: g_hist,
        state,
        termination,
        iterations,
        rejected_trials: rejected,
    })
}
