//! Householder QR with in-order rank screening.
//!
//! Columns are processed left to right. A column whose component orthogonal
//! to the already-accepted columns has norm at most `RANK_TOL` times its own
//! norm is declared collinear and skipped, so ties always drop the later
//! column. All solves go through the triangular factor; nothing here forms
//! or inverts a cross-product matrix.

use nalgebra::DMatrix;

/// Relative pivot tolerance for declaring a column collinear.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct ScreenedQr {
    nrows: usize,
    ncols: usize,
    /// Householder vectors, one per accepted column; `vs[k]` acts on rows k..n.
    vs: Vec<Vec<f64>>,
    betas: Vec<f64>,
    /// Upper-triangular factor, rank x rank, column-major.
    r: DMatrix<f64>,
    kept: Vec<usize>,
}

impl ScreenedQr {
    pub fn new(x: &DMatrix<f64>) -> Self {
        let (n, k) = x.shape();
        let mut vs: Vec<Vec<f64>> = Vec::new();
        let mut betas = Vec::new();
        let mut rcols: Vec<Vec<f64>> = Vec::new();
        let mut kept = Vec::new();
        let mut work = vec![0.0; n];
        for c in 0..k {
            work.copy_from_slice(x.column(c).as_slice());
            let orig = norm(&work);
            let rank = vs.len();
            for (j, (v, &b)) in vs.iter().zip(&betas).enumerate() {
                apply_reflector(v, b, &mut work[j..]);
            }
            if rank >= n {
                continue;
            }
            let rest = norm(&work[rank..]);
            if orig == 0.0 || rest <= RANK_TOL * orig {
                continue;
            }
            let alpha = if work[rank] >= 0.0 { -rest } else { rest };
            let mut v = work[rank..].to_vec();
            v[0] -= alpha;
            let vnorm2: f64 = v.iter().map(|a| a * a).sum();
            let beta = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
            let mut rc = work[..rank].to_vec();
            rc.push(alpha);
            rcols.push(rc);
            vs.push(v);
            betas.push(beta);
            kept.push(c);
        }
        let rank = kept.len();
        let mut r = DMatrix::zeros(rank, rank);
        for (j, col) in rcols.iter().enumerate() {
            for (i, &val) in col.iter().enumerate() {
                r[(i, j)] = val;
            }
        }
        ScreenedQr {
            nrows: n,
            ncols: k,
            vs,
            betas,
            r,
            kept,
        }
    }

    pub fn rank(&self) -> usize {
        self.kept.len()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    /// Indices of the accepted (linearly independent) columns, in design order.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    /// Indices of columns screened out as collinear.
    pub fn aliased(&self) -> Vec<usize> {
        (0..self.ncols).filter(|c| !self.kept.contains(c)).collect()
    }

    /// Q'y.
    pub fn qt_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut w = y.to_vec();
        for (j, (v, &b)) in self.vs.iter().zip(&self.betas).enumerate() {
            apply_reflector(v, b, &mut w[j..]);
        }
        w
    }

    /// Least-squares coefficients on the kept columns.
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let qty = self.qt_mul(y);
        let mut b = qty[..self.rank()].to_vec();
        back_substitute(&self.r, &mut b);
        b
    }

    /// R^{-1}, upper triangular.
    pub fn r_inverse(&self) -> DMatrix<f64> {
        let p = self.rank();
        let mut inv = DMatrix::zeros(p, p);
        for j in 0..p {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            back_substitute(&self.r, &mut e);
            for i in 0..p {
                inv[(i, j)] = e[i];
            }
        }
        inv
    }

    /// (X'X)^{-1} restricted to the kept columns, as R^{-1} R^{-T}.
    pub fn xtx_inverse(&self) -> DMatrix<f64> {
        let ri = self.r_inverse();
        &ri * ri.transpose()
    }

    /// Diagonal of the projection onto the kept columns of `x`.
    ///
    /// `x` must be the matrix this factorization was built from.
    pub fn hat_diagonals(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let xk = self.kept_columns(x);
        let q = xk * self.r_inverse();
        (0..self.nrows)
            .map(|i| q.row(i).iter().map(|a| a * a).sum())
            .collect()
    }

    pub fn kept_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x.select_columns(self.kept.iter())
    }
}

fn norm(v: &[f64]) -> f64 {
    // Scaled to avoid overflow on large-magnitude columns.
    let scale = v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    scale * v.iter().map(|a| (a / scale).powi(2)).sum::<f64>().sqrt()
}

fn apply_reflector(v: &[f64], beta: f64, w: &mut [f64]) {
    let dot: f64 = v.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
    let s = beta * dot;
    for (wi, vi) in w.iter_mut().zip(v) {
        *wi -= s * vi;
    }
}

fn back_substitute(r: &DMatrix<f64>, b: &mut [f64]) {
    let p = b.len();
    for i in (0..p).rev() {
        let mut acc = b[i];
        for j in i + 1..p {
            acc -= r[(i, j)] * b[j];
        }
        b[i] = acc / r[(i, i)];
    }
}
