//! Sparse Jacobians by colored finite differences, banded LU and GMRES.

use rayon::prelude::*;
use sprs::{CsMat, TriMat};

use crate::error::{invalid, Error, Result};

/// A nonlinear residual map `w -> R(w)` with known structural sparsity.
pub trait ResidualOperator: Sync {
    fn len(&self) -> usize;
    fn eval(&self, w: &[f64], out: &mut [f64]);
    /// Column indices each residual row may depend on.
    fn pattern(&self) -> SparsityPattern;
}

/// Row-wise structural sparsity (sorted, deduplicated column lists).
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPattern {
    rows: Vec<Vec<usize>>,
    n_cols: usize,
}

impl SparsityPattern {
    pub fn new(mut rows: Vec<Vec<usize>>, n_cols: usize) -> Self {
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
        }
        Self { rows, n_cols }
    }

    pub fn dense(n: usize) -> Self {
        Self::new((0..n).map(|_| (0..n).collect()).collect(), n)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.rows[r]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn columns(&self) -> Vec<Vec<usize>> {
        let mut cols = vec![Vec::new(); self.n_cols];
        for (r, row) in self.rows.iter().enumerate() {
            for &c in row {
                cols[c].push(r);
            }
        }
        cols
    }
}

/// Greedy distance-2 coloring of the column intersection graph: two columns
/// share a color only if no row touches both.
pub fn color_columns(pattern: &SparsityPattern) -> Result<Vec<usize>> {
    let cols = pattern.columns();
    let n = pattern.n_cols();
    let mut color = vec![usize::MAX; n];
    let mut forbidden: Vec<usize> = Vec::new();
    for c in 0..n {
        forbidden.clear();
        for &r in &cols[c] {
            for &c2 in pattern.row(r) {
                if c2 != c && color[c2] != usize::MAX {
                    forbidden.push(color[c2]);
                }
            }
        }
        forbidden.sort_unstable();
        forbidden.dedup();
        let mut k = 0;
        for &f in &forbidden {
            if f == k {
                k += 1;
            } else if f > k {
                break;
            }
        }
        color[c] = k;
    }
    validate_coloring(pattern, &color)?;
    Ok(color)
}

pub fn validate_coloring(pattern: &SparsityPattern, color: &[usize]) -> Result<()> {
    let mut seen = Vec::new();
    for r in 0..pattern.n_rows() {
        seen.clear();
        seen.extend(pattern.row(r).iter().map(|&c| color[c]));
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Internal(format!(
                "column coloring conflict in row {r}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdScheme {
    Forward,
    Central,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    /// Perturbation is `relative_step * (1 + |w_j|)`.
    pub relative_step: f64,
    pub scheme: FdScheme,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            relative_step: 1e-6,
            scheme: FdScheme::Central,
        }
    }
}

/// Jacobian `dR/dw` assembled column-group by column-group: all columns of one
/// color are perturbed together and the residual difference is scattered back
/// through the pattern.
pub fn colored_jacobian(
    op: &dyn ResidualOperator,
    w: &[f64],
    opts: FdOptions,
) -> Result<CsMat<f64>> {
    if !(opts.relative_step.is_finite() && opts.relative_step > 0.0) {
        return invalid(format!(
            "finite-difference step must be positive, got {}",
            opts.relative_step
        ));
    }
    let n = op.len();
    if w.len() != n {
        return invalid(format!("state has {} entries, operator expects {n}", w.len()));
    }
    let pattern = op.pattern();
    let colors = color_columns(&pattern)?;
    let n_colors = colors.iter().copied().max().map_or(0, |m| m + 1);
    let cols = pattern.columns();
    let mut groups = vec![Vec::new(); n_colors];
    for (c, &k) in colors.iter().enumerate() {
        groups[k].push(c);
    }

    let base = if opts.scheme == FdScheme::Forward {
        let mut r = vec![0.0; n];
        op.eval(w, &mut r);
        Some(r)
    } else {
        None
    };

    let entries: Vec<Vec<(usize, usize, f64)>> = groups
        .par_iter()
        .map(|group| {
            let steps: Vec<f64> = group
                .iter()
                .map(|&c| opts.relative_step * (1.0 + w[c].abs()))
                .collect();
            let mut wp = w.to_vec();
            for (&c, &h) in group.iter().zip(&steps) {
                wp[c] += h;
            }
            let mut rp = vec![0.0; n];
            op.eval(&wp, &mut rp);
            let rm = match &base {
                Some(b) => b.clone(),
                None => {
                    let mut wm = w.to_vec();
                    for (&c, &h) in group.iter().zip(&steps) {
                        wm[c] -= h;
                    }
                    let mut rm = vec![0.0; n];
                    op.eval(&wm, &mut rm);
                    rm
                }
            };
            let mut out = Vec::new();
            for (&c, &h) in group.iter().zip(&steps) {
                let denom = match opts.scheme {
                    FdScheme::Central => 2.0 * h,
                    FdScheme::Forward => h,
                };
                for &r in &cols[c] {
                    let v = (rp[r] - rm[r]) / denom;
                    if v != 0.0 {
                        out.push((r, c, v));
                    }
                }
            }
            out
        })
        .collect();

    let mut tri = TriMat::new((n, n));
    for group in entries {
        for (r, c, v) in group {
            tri.add_triplet(r, c, v);
        }
    }
    Ok(tri.to_csr())
}

pub fn matvec(a: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.rows()];
    if a.is_csr() {
        for (r, row) in a.outer_iterator().enumerate() {
            y[r] = row.iter().map(|(c, &v)| v * x[c]).sum();
        }
    } else {
        for (c, col) in a.outer_iterator().enumerate() {
            for (r, &v) in col.iter() {
                y[r] += v * x[c];
            }
        }
    }
    y
}

pub fn transpose_csr(a: &CsMat<f64>) -> CsMat<f64> {
    a.transpose_view().to_csr()
}

/// LU factorisation with partial pivoting in LAPACK band layout: column `j`
/// holds rows `j - kl - ku ..= j + kl`; the extra `kl` superdiagonals absorb
/// pivoting fill.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    kv: usize,
    cols: Vec<Vec<f64>>,
    pivots: Vec<usize>,
}

impl BandedLu {
    pub fn factor(a: &CsMat<f64>) -> Result<BandedLu> {
        let n = a.rows();
        if a.cols() != n {
            return invalid("banded LU needs a square matrix");
        }
        let a = if a.is_csr() { a.clone() } else { a.to_csr() };
        let (mut kl, mut ku) = (0usize, 0usize);
        for (r, row) in a.outer_iterator().enumerate() {
            for (c, _) in row.iter() {
                if r > c {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        let kv = kl + ku;
        let width = 2 * kl + ku + 1;
        let mut lu = BandedLu {
            n,
            kl,
            ku,
            kv,
            cols: vec![vec![0.0; width]; n],
            pivots: vec![0; n],
        };
        for (r, row) in a.outer_iterator().enumerate() {
            for (c, &v) in row.iter() {
                *lu.at_mut(r, c) += v;
            }
        }
        lu.decompose()?;
        Ok(lu)
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.cols[j][self.kv + i - j]
    }

    #[inline]
    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let kv = self.kv;
        &mut self.cols[j][kv + i - j]
    }

    fn decompose(&mut self) -> Result<()> {
        let n = self.n;
        let mut ju = 0usize;
        for j in 0..n {
            let km = self.kl.min(n - 1 - j);
            let mut p = j;
            let mut best = self.at(j, j).abs();
            for i in j + 1..=j + km {
                let v = self.at(i, j).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            self.pivots[j] = p;
            if best == 0.0 || !best.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "singular matrix in banded LU at column {j}"
                )));
            }
            ju = ju.max((j + self.ku + (p - j)).min(n - 1));
            if p != j {
                for c in j..=ju {
                    let a = self.at(j, c);
                    let b = self.at(p, c);
                    *self.at_mut(j, c) = b;
                    *self.at_mut(p, c) = a;
                }
            }
            let inv = 1.0 / self.at(j, j);
            for i in j + 1..=j + km {
                *self.at_mut(i, j) *= inv;
            }
            for c in j + 1..=ju {
                let ajc = self.at(j, c);
                if ajc == 0.0 {
                    continue;
                }
                for i in j + 1..=j + km {
                    let l = self.at(i, j);
                    *self.at_mut(i, c) -= l * ajc;
                }
            }
        }
        Ok(())
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for j in 0..n {
            let p = self.pivots[j];
            if p != j {
                x.swap(j, p);
            }
            let km = self.kl.min(n - 1 - j);
            let xj = x[j];
            if xj != 0.0 {
                for i in j + 1..=j + km {
                    x[i] -= self.at(i, j) * xj;
                }
            }
        }
        for j in (0..n).rev() {
            x[j] /= self.at(j, j);
            let xj = x[j];
            if xj != 0.0 {
                for i in j.saturating_sub(self.kv)..j {
                    x[i] -= self.at(i, j) * xj;
                }
            }
        }
        x
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }
}

pub trait Preconditioner: Sync {
    fn apply(&self, r: &[f64]) -> Vec<f64>;
}

pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.to_vec()
    }
}

pub struct JacobiPreconditioner {
    inv_diag: Vec<f64>,
}

impl JacobiPreconditioner {
    pub fn new(a: &CsMat<f64>) -> Self {
        let mut inv_diag = vec![1.0; a.rows()];
        for (r, row) in a.outer_iterator().enumerate() {
            if let Some(&d) = row.get(r) {
                if d != 0.0 {
                    inv_diag[r] = 1.0 / d;
                }
            }
        }
        Self { inv_diag }
    }
}

impl Preconditioner for JacobiPreconditioner {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.inv_diag).map(|(a, b)| a * b).collect()
    }
}

impl Preconditioner for BandedLu {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        self.solve(r)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GmresOptions {
    pub rel_tol: f64,
    pub restart: usize,
    pub max_iter: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            restart: 50,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmresOutcome {
    pub x: Vec<f64>,
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Restarted right-preconditioned GMRES. `history` records the true residual
/// norm relative to `‖b‖` at every restart and the Arnoldi estimate in
/// between.
pub fn gmres(
    a: &CsMat<f64>,
    b: &[f64],
    precond: &dyn Preconditioner,
    opts: GmresOptions,
) -> Result<GmresOutcome> {
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    let mut history = Vec::new();
    if bnorm == 0.0 {
        history.push(0.0);
        return Ok(GmresOutcome { x, history });
    }
    let m = opts.restart.max(1);
    let mut iters = 0;
    let mut cycle_start = f64::INFINITY;
    loop {
        let ax = matvec(a, &x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm(&r);
        history.push(beta / bnorm);
        if beta <= opts.rel_tol * bnorm {
            return Ok(GmresOutcome { x, history });
        }
        if iters >= opts.max_iter || beta / bnorm >= cycle_start * (1.0 - 1e-10) {
            return Err(Error::LinearStagnation {
                last: beta / bnorm,
                history,
            });
        }
        cycle_start = beta / bnorm;
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            let zk = precond.apply(&v[k]);
            let mut wv = matvec(a, &zk);
            z.push(zk);
            for (i, vi) in v.iter().enumerate() {
                h[i][k] = dot(&wv, vi);
                for (wj, vj) in wv.iter_mut().zip(vi) {
                    *wj -= h[i][k] * vj;
                }
            }
            let hk1 = norm(&wv);
            h[k + 1][k] = hk1;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if denom == 0.0 {
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            iters += 1;
            k_used = k + 1;
            let est = g[k + 1].abs() / bnorm;
            if est <= opts.rel_tol || iters >= opts.max_iter || hk1 == 0.0 {
                break;
            }
            history.push(est);
            v.push(wv.iter().map(|x| x / hk1).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = (i + 1..k_used).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for (yi, zi) in y.iter().zip(&z) {
            for (xj, zj) in x.iter_mut().zip(zi) {
                *xj += yi * zj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_banded(n: usize, kl: usize, ku: usize, seed: u64) -> (CsMat<f64>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = vec![vec![0.0; n]; n];
        let mut tri = TriMat::new((n, n));
        for r in 0..n {
            for c in r.saturating_sub(kl)..=(r + ku).min(n - 1) {
                // weak diagonal so pivoting actually happens
                let v: f64 = rng.gen_range(-1.0..1.0) + if r == c { 0.1 } else { 0.0 };
                dense[r][c] = v;
                tri.add_triplet(r, c, v);
            }
        }
        (tri.to_csr(), dense)
    }

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.to_vec();
        let mut x = b.to_vec();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| m[i][k].abs().partial_cmp(&m[j][k].abs()).unwrap())
                .unwrap();
            m.swap(k, p);
            x.swap(k, p);
            for i in k + 1..n {
                let f = m[i][k] / m[k][k];
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                x[i] -= f * x[k];
            }
        }
        for k in (0..n).rev() {
            let s: f64 = (k + 1..n).map(|j| m[k][j] * x[j]).sum();
            x[k] = (x[k] - s) / m[k][k];
        }
        x
    }

    #[test]
    fn banded_lu_matches_dense() {
        for (seed, (kl, ku)) in [(1, (2, 3)), (2, (5, 1)), (3, (0, 4)), (4, (7, 7))] {
            let n = 40;
            let (a, dense) = random_banded(n, kl, ku, seed);
            let lu = BandedLu::factor(&a).unwrap();
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = lu.solve(&b);
            let xr = dense_solve(&dense, &b);
            for (p, q) in x.iter().zip(&xr) {
                assert!((p - q).abs() < 1e-9 * (1.0 + q.abs()), "{p} vs {q}");
            }
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut tri = TriMat::new((3, 3));
        tri.add_triplet(0, 0, 1.0);
        tri.add_triplet(1, 1, 1.0);
        tri.add_triplet(2, 1, 1.0);
        assert!(BandedLu::factor(&tri.to_csr()).is_err());
    }

    #[test]
    fn gmres_with_jacobi_converges() {
        let n = 30;
        let mut tri = TriMat::new((n, n));
        for i in 0..n {
            tri.add_triplet(i, i, 4.0);
            if i > 0 {
                tri.add_triplet(i, i - 1, -1.0);
            }
            if i + 1 < n {
                tri.add_triplet(i, i + 1, -1.5);
            }
        }
        let a = tri.to_csr();
        let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let out = gmres(&a, &b, &JacobiPreconditioner::new(&a), GmresOptions::default()).unwrap();
        let r = matvec(&a, &out.x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-9);
        }
    }

    #[test]
    fn gmres_reports_stagnation() {
        // Skew operator: unpreconditioned GMRES(1) cannot reduce the residual.
        let mut tri = TriMat::new((2, 2));
        tri.add_triplet(0, 1, 1.0);
        tri.add_triplet(1, 0, -1.0);
        let a = tri.to_csr();
        let opts = GmresOptions {
            rel_tol: 1e-12,
            restart: 1,
            max_iter: 10,
        };
        let err = gmres(&a, &[1.0, 0.0], &IdentityPreconditioner, opts).unwrap_err();
        match err {
            Error::LinearStagnation { history, .. } => assert!(!history.is_empty()),
            e => panic!("unexpected {e}"),
        }
    }

    struct Tridiag;
    impl ResidualOperator for Tridiag {
        fn len(&self) -> usize {
            6
        }
        fn eval(&self, w: &[f64], out: &mut [f64]) {
            for i in 0..6 {
                let l = if i > 0 { w[i - 1] } else { 0.0 };
                let r = if i < 5 { w[i + 1] } else { 0.0 };
                out[i] = l - 2.0 * w[i] + r + w[i] * w[i] * 0.1;
            }
        }
        fn pattern(&self) -> SparsityPattern {
            SparsityPattern::new(
                (0..6usize)
                    .map(|i| (i.saturating_sub(1)..=(i + 1).min(5)).collect())
                    .collect(),
                6,
            )
        }
    }

    #[test]
    fn coloring_of_tridiagonal_uses_three_colors() {
        let colors = color_columns(&Tridiag.pattern()).unwrap();
        assert_eq!(colors.iter().max(), Some(&2));
    }

    #[test]
    fn invalid_coloring_detected() {
        let p = Tridiag.pattern();
        assert!(validate_coloring(&p, &[0; 6]).is_err());
    }

    #[test]
    fn zero_step_rejected() {
        let w = vec![0.5; 6];
        let opts = FdOptions {
            relative_step: 0.0,
            ..FdOptions::default()
        };
        assert!(colored_jacobian(&Tridiag, &w, opts).is_err());
    }
}
