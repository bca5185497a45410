//! Non-dimensional per-cell flow features: five engineered scalars followed
//! by the 47 invariants of the minimal integrity basis of one symmetric and
//! three antisymmetric tensors (strain, rotation, pressure- and
//! k-gradient tensors).
//!
//! Index map:
//!
//! | index | feature |
//! |-------|---------|
//! | 0 | streamline pressure gradient `2/pi acos(grad p . u / (|grad p||u|)) - 1` |
//! | 1 | time scale ratio `2[(S/(S+omega))^0.25 - 0.5]` |
//! | 2 | Q-criterion `(S^2 - W^2)/(S^2 + W^2)` |
//! | 3 | turbulence intensity `2[(k/(0.5|U|^2 + k))^0.25 - 0.5]` |
//! | 4 | viscosity ratio `2[nu_t/(100 nu + nu_t) - 0.5]` |
//! | 5.. | `tr(...)` of the products listed in [`INVARIANT_BASIS`] |
//!
//! The tensors are non-dimensionalised as
//! `S^ = S/(|S| + omega)`, `R^ = R/(|R| + omega)`,
//! `Ap^ = Ap/(|Ap| + |u.grad u|)`, `Ak^ = Ak/(|Ak| + omega sqrt(k))`
//! with `A = -I x g`, i.e. `A_ij = -eps_ijk g_k`. Each trace is then squashed
//! by `x/(|x| + x_ref)` unless disabled. Norms are Frobenius norms.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mesh::{BoundaryTag, FaceRule, Mesh};
use crate::solver::{CorrectionField, FlowState};

pub const N_ENGINEERED: usize = 5;
pub const N_INVARIANTS: usize = 47;
pub const N_FEATURES: usize = N_ENGINEERED + N_INVARIANTS;

pub const ENGINEERED_NAMES: [&str; N_ENGINEERED] = [
    "streamline_pressure_gradient",
    "time_scale_ratio",
    "q_criterion",
    "turbulence_intensity",
    "viscosity_ratio",
];

/// Basis tensors in invariant products.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    /// Strain rate (symmetric).
    S,
    /// Rotation rate.
    R,
    /// Pressure-gradient tensor.
    Ap,
    /// k-gradient tensor.
    Ak,
}

use Basis::{Ak, Ap, R, S};

/// Minimal integrity basis for `{S; R, Ap, Ak}`; each entry is the matrix
/// product whose trace gives one invariant. Grouped by the number of
/// symmetric/antisymmetric tensors involved; the starred groups of the
/// usual table appear with both orderings of the antisymmetric pair.
pub const INVARIANT_BASIS: [&[Basis]; N_INVARIANTS] = [
    // one symmetric
    &[S, S],
    &[S, S, S],
    // one antisymmetric
    &[R, R],
    &[Ap, Ap],
    &[Ak, Ak],
    // one of each
    &[R, R, S],
    &[R, R, S, S],
    &[R, R, S, R, S, S],
    &[Ap, Ap, S],
    &[Ap, Ap, S, S],
    &[Ap, Ap, S, Ap, S, S],
    &[Ak, Ak, S],
    &[Ak, Ak, S, S],
    &[Ak, Ak, S, Ak, S, S],
    // two antisymmetric
    &[R, Ap],
    &[Ap, Ak],
    &[R, Ak],
    // one symmetric, two antisymmetric
    &[R, Ap, S],
    &[R, Ap, S, S],
    &[R, R, Ap, S],
    &[Ap, Ap, R, S],
    &[R, R, Ap, S, S],
    &[Ap, Ap, R, S, S],
    &[R, R, S, Ap, S, S],
    &[Ap, Ap, S, R, S, S],
    &[R, Ak, S],
    &[R, Ak, S, S],
    &[R, R, Ak, S],
    &[Ak, Ak, R, S],
    &[R, R, Ak, S, S],
    &[Ak, Ak, R, S, S],
    &[R, R, S, Ak, S, S],
    &[Ak, Ak, S, R, S, S],
    &[Ap, Ak, S],
    &[Ap, Ak, S, S],
    &[Ap, Ap, Ak, S],
    &[Ak, Ak, Ap, S],
    &[Ap, Ap, Ak, S, S],
    &[Ak, Ak, Ap, S, S],
    &[Ap, Ap, S, Ak, S, S],
    &[Ak, Ak, S, Ap, S, S],
    // three antisymmetric
    &[R, Ap, Ak],
    // one symmetric, three antisymmetric
    &[R, Ap, Ak, S],
    &[R, Ak, Ap, S],
    &[R, Ap, Ak, S, S],
    &[R, Ak, Ap, S, S],
    &[R, Ap, S, Ak, S, S],
];

fn basis_symbol(b: Basis) -> &'static str {
    match b {
        S => "S",
        R => "R",
        Ap => "Ap",
        Ak => "Ak",
    }
}

/// Name of every feature column, in index order.
pub fn feature_names() -> Vec<String> {
    ENGINEERED_NAMES
        .iter()
        .map(|s| s.to_string())
        .chain(INVARIANT_BASIS.iter().map(|prod| {
            let body: Vec<&str> = prod.iter().map(|&b| basis_symbol(b)).collect();
            format!("tr({})", body.join("."))
        }))
        .collect()
}

pub fn feature_index(name: &str) -> Option<usize> {
    feature_names().iter().position(|n| n == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureOptions {
    /// Squash raw invariants with `x/(|x| + x_ref)`.
    #[serde(default = "yes")]
    pub squash: bool,
    #[serde(default = "one")]
    pub x_ref: f64,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            squash: true,
            x_ref: 1.0,
        }
    }
}

type M3 = [[f64; 3]; 3];

fn matmul(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn trace(a: &M3) -> f64 {
    a[0][0] + a[1][1] + a[2][2]
}

fn frobenius(a: &M3) -> f64 {
    a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

fn scaled(a: &M3, s: f64) -> M3 {
    let mut o = *a;
    o.iter_mut().flatten().for_each(|x| *x *= s);
    o
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `-I x g`: the antisymmetric tensor `A_ij = -eps_ijk g_k`.
pub fn antisymmetric_from_vector(g: &[f64; 3]) -> M3 {
    [
        [0.0, -g[2], g[1]],
        [g[2], 0.0, -g[0]],
        [-g[1], g[0], 0.0],
    ]
}

/// `a / (|a| + scale)` with a zero result for zero tensors.
fn normalise(a: &M3, scale: f64) -> M3 {
    let d = frobenius(a) + scale;
    if d > 0.0 {
        scaled(a, 1.0 / d)
    } else {
        [[0.0; 3]; 3]
    }
}

/// Everything the features need at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointInputs {
    /// `grad_u[i][j] = du_i/dx_j`.
    pub grad_u: M3,
    pub u: [f64; 3],
    pub grad_p: [f64; 3],
    pub grad_k: [f64; 3],
    pub k: f64,
    pub omega: f64,
    pub nu: f64,
    pub nu_t: f64,
}

impl PointInputs {
    pub fn strain(&self) -> M3 {
        let g = &self.grad_u;
        let mut s = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] = 0.5 * (g[i][j] + g[j][i]);
            }
        }
        s
    }

    pub fn rotation(&self) -> M3 {
        let g = &self.grad_u;
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = 0.5 * (g[i][j] - g[j][i]);
            }
        }
        r
    }

    /// `(u . grad) u`.
    pub fn convective_acceleration(&self) -> [f64; 3] {
        let mut a = [0.0; 3];
        for (i, ai) in a.iter_mut().enumerate() {
            *ai = (0..3).map(|j| self.u[j] * self.grad_u[i][j]).sum();
        }
        a
    }
}

/// `num/den` with `0/0 = 0`.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn engineered_point(p: &PointInputs) -> [f64; N_ENGINEERED] {
    let s = frobenius(&p.strain());
    let w = frobenius(&p.rotation());
    let gp = norm3(&p.grad_p);
    let un = norm3(&p.u);
    let dot: f64 = (0..3).map(|i| p.grad_p[i] * p.u[i]).sum();
    let cos = ratio(dot, gp * un).clamp(-1.0, 1.0);
    let f0 = if gp * un == 0.0 {
        0.0
    } else {
        2.0 / std::f64::consts::PI * cos.acos() - 1.0
    };
    let f1 = 2.0 * (ratio(s, s + p.omega).powf(0.25) - 0.5);
    let f2 = ratio(s * s - w * w, s * s + w * w);
    let f3 = 2.0 * (ratio(p.k, 0.5 * un * un + p.k).powf(0.25) - 0.5);
    let f4 = 2.0 * (ratio(p.nu_t, 100.0 * p.nu + p.nu_t) - 0.5);
    [f0, f1, f2, f3, f4]
}

/// Non-dimensional basis tensors `(S^, R^, Ap^, Ak^)`.
pub fn basis_tensors(p: &PointInputs) -> [M3; 4] {
    let s = p.strain();
    let r = p.rotation();
    let ap = antisymmetric_from_vector(&p.grad_p);
    let ak = antisymmetric_from_vector(&p.grad_k);
    let acc = norm3(&p.convective_acceleration());
    [
        normalise(&s, p.omega),
        normalise(&r, p.omega),
        normalise(&ap, acc),
        normalise(&ak, p.omega * p.k.max(0.0).sqrt()),
    ]
}

/// Raw traces of the basis products, before squashing.
pub fn raw_invariants(p: &PointInputs) -> [f64; N_INVARIANTS] {
    let t = basis_tensors(p);
    let pick = |b: Basis| -> &M3 {
        match b {
            S => &t[0],
            R => &t[1],
            Ap => &t[2],
            Ak => &t[3],
        }
    };
    let mut out = [0.0; N_INVARIANTS];
    for (o, prod) in out.iter_mut().zip(INVARIANT_BASIS.iter()) {
        let mut m = *pick(prod[0]);
        for &b in &prod[1..] {
            m = matmul(&m, pick(b));
        }
        *o = trace(&m);
    }
    out
}

pub fn invariant_point(p: &PointInputs, opts: &FeatureOptions) -> [f64; N_INVARIANTS] {
    let mut x = raw_invariants(p);
    if opts.squash {
        for v in x.iter_mut() {
            *v /= v.abs() + opts.x_ref;
        }
    }
    x
}

pub fn point_features(p: &PointInputs, opts: &FeatureOptions) -> [f64; N_FEATURES] {
    let mut out = [0.0; N_FEATURES];
    out[..N_ENGINEERED].copy_from_slice(&engineered_point(p));
    out[N_ENGINEERED..].copy_from_slice(&invariant_point(p, opts));
    out
}

/// Per-cell feature inputs gathered from a state. Velocity gradients use the
/// no-slip value on wall faces and k gradients `k = 0` there; every other
/// boundary face is extrapolated one-sidedly.
pub fn cell_inputs(state: &FlowState, mesh: &Mesh) -> Result<Vec<PointInputs>> {
    let n = mesh.n_cells();
    if state.n_cells() != n {
        return invalid(format!("state has {} cells, mesh has {n}", state.n_cells()));
    }
    let wall_zero = |tag: BoundaryTag, _| match tag {
        BoundaryTag::Wall => FaceRule::Dirichlet(0.0),
        _ => FaceRule::Extrapolate,
    };
    let gu = mesh.gradient_with(&state.u, wall_zero)?;
    let gv = mesh.gradient_with(&state.v, wall_zero)?;
    let gk = mesh.gradient_with(&state.k, wall_zero)?;
    let gp = mesh.gradient_with(&state.p, |tag, _| match tag {
        BoundaryTag::Wall => FaceRule::ZeroGradient,
        _ => FaceRule::Extrapolate,
    })?;
    let mpg = state.mean_pressure_gradient;
    Ok((0..n)
        .map(|c| PointInputs {
            grad_u: [
                [gu[c][0], gu[c][1], 0.0],
                [gv[c][0], gv[c][1], 0.0],
                [0.0; 3],
            ],
            u: [state.u[c], state.v[c], 0.0],
            grad_p: [gp[c][0] + mpg[0], gp[c][1] + mpg[1], 0.0],
            grad_k: [gk[c][0], gk[c][1], 0.0],
            k: state.k[c],
            omega: state.omega[c],
            nu: state.nu,
            nu_t: state.nu_t[c],
        })
        .collect())
}

/// Row-major feature matrix over a set of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    /// Mesh cell of each row.
    pub cells: Vec<usize>,
    data: Vec<f64>,
    n_cols: usize,
}

impl FeatureMatrix {
    pub fn new(cells: Vec<usize>, data: Vec<f64>, n_cols: usize) -> Result<Self> {
        if n_cols == 0 || data.len() != cells.len() * n_cols {
            return invalid(format!(
                "{} values do not form {} rows of width {n_cols}",
                data.len(),
                cells.len()
            ));
        }
        Ok(Self { cells, data, n_cols })
    }

    pub fn from_rows(cells: Vec<usize>, rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(N_FEATURES, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) || rows.len() != cells.len() {
            return invalid("ragged feature rows");
        }
        Self::new(cells, rows.concat(), n_cols)
    }

    pub fn n_rows(&self) -> usize {
        self.cells.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows for which `keep` holds.
    pub fn select(&self, keep: &[bool]) -> FeatureMatrix {
        let mut cells = Vec::new();
        let mut data = Vec::new();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                cells.push(self.cells[i]);
                data.extend_from_slice(self.row(i));
            }
        }
        FeatureMatrix {
            cells,
            data,
            n_cols: self.n_cols,
        }
    }
}

pub fn engineered_features(state: &FlowState, mesh: &Mesh) -> Result<Vec<[f64; N_ENGINEERED]>> {
    Ok(cell_inputs(state, mesh)?.iter().map(engineered_point).collect())
}

pub fn invariant_features(
    state: &FlowState,
    mesh: &Mesh,
    opts: &FeatureOptions,
) -> Result<Vec<[f64; N_INVARIANTS]>> {
    Ok(cell_inputs(state, mesh)?
        .iter()
        .map(|p| invariant_point(p, opts))
        .collect())
}

/// All 52 features on every unblanked cell.
pub fn compute_features(state: &FlowState, mesh: &Mesh, opts: &FeatureOptions) -> Result<FeatureMatrix> {
    let inputs = cell_inputs(state, mesh)?;
    let mut cells = Vec::new();
    let mut data = Vec::new();
    for (c, p) in inputs.iter().enumerate() {
        if mesh.is_blanked(c) {
            continue;
        }
        cells.push(c);
        data.extend_from_slice(&point_features(p, opts));
    }
    FeatureMatrix::new(cells, data, N_FEATURES)
}

/// Closed interval of targets removed from training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return invalid(format!("band [{lo}, {hi}] is not an interval"));
        }
        Ok(Self { lo, hi })
    }

    pub fn excludes(&self, y: f64) -> bool {
        y >= self.lo && y <= self.hi
    }
}

impl Default for Band {
    fn default() -> Self {
        Self { lo: 0.9, hi: 1.1 }
    }
}

/// One inverted case offered for training.
#[derive(Debug, Clone)]
pub struct TrainingCase<'a> {
    pub label: String,
    pub mesh: &'a Mesh,
    pub state: &'a FlowState,
    pub beta: &'a CorrectionField,
    /// Restricts the rows taken from the case (e.g. to the inversion's
    /// activity mask).
    pub mask: Option<&'a [bool]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceData {
    pub label: String,
    pub x: FeatureMatrix,
    pub y: Vec<f64>,
    /// Rows offered before the band filter.
    pub rows_before_filter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropNotice {
    pub label: String,
    pub rows_before_filter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub sources: Vec<SourceData>,
    pub band: Band,
    pub dropped: Vec<DropNotice>,
}

impl TrainingSet {
    /// Filters every source through the band and drops sources left empty.
    pub fn from_sources(raw: Vec<SourceData>, band: Band) -> Result<Self> {
        let mut sources = Vec::new();
        let mut dropped = Vec::new();
        for s in raw {
            if s.x.n_rows() != s.y.len() {
                return invalid(format!("source {} has mismatched rows and targets", s.label));
            }
            if !s.x.is_finite() || s.y.iter().any(|y| !y.is_finite()) {
                return invalid(format!("source {} contains non-finite values", s.label));
            }
            let keep: Vec<bool> = s.y.iter().map(|&y| !band.excludes(y)).collect();
            let x = s.x.select(&keep);
            let y: Vec<f64> = s.y.iter().zip(&keep).filter(|(_, &k)| k).map(|(&y, _)| y).collect();
            let before = s.x.n_rows();
            if y.is_empty() {
                log::warn!("source {} has no targets outside the band; dropped", s.label);
                dropped.push(DropNotice {
                    label: s.label,
                    rows_before_filter: before,
                });
            } else {
                sources.push(SourceData {
                    label: s.label,
                    x,
                    y,
                    rows_before_filter: before,
                });
            }
        }
        Ok(Self {
            sources,
            band,
            dropped,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.sources.iter().map(|s| s.y.len()).sum()
    }

    /// Union of all sources (what a pooled model trains on).
    pub fn pooled(&self) -> (FeatureMatrix, Vec<f64>) {
        let n_cols = self.sources.first().map_or(N_FEATURES, |s| s.x.n_cols());
        let mut cells = Vec::new();
        let mut data = Vec::new();
        let mut y = Vec::new();
        for s in &self.sources {
            cells.extend_from_slice(&s.x.cells);
            for r in s.x.rows() {
                data.extend_from_slice(r);
            }
            y.extend_from_slice(&s.y);
        }
        (FeatureMatrix { cells, data, n_cols }, y)
    }
}

/// Features and inverted targets from each case, band-filtered per source.
pub fn assemble_training_set(
    cases: &[TrainingCase],
    band: Band,
    opts: &FeatureOptions,
) -> Result<TrainingSet> {
    let mut raw = Vec::new();
    for case in cases {
        let n = case.mesh.n_cells();
        if case.beta.len() != n {
            return invalid(format!("case {}: correction field does not match mesh", case.label));
        }
        if case.mask.is_some_and(|m| m.len() != n) {
            return invalid(format!("case {}: mask does not match mesh", case.label));
        }
        let x = compute_features(case.state, case.mesh, opts)?;
        let keep: Vec<bool> = x
            .cells
            .iter()
            .map(|&c| case.mask.map_or(true, |m| m[c]))
            .collect();
        let x = x.select(&keep);
        let y = x.cells.iter().map(|&c| case.beta.values()[c]).collect();
        raw.push(SourceData {
            label: case.label.clone(),
            rows_before_filter: x.n_rows(),
            x,
            y,
        });
    }
    TrainingSet::from_sources(raw, band)
}
