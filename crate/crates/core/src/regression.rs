//! OLS and 2SLS with classical, HC0/HC1 and cluster-robust covariance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ScreenedQr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeType {
    Classical,
    Hc0,
    Hc1,
    Cluster,
}

impl SeType {
    pub fn label(self) -> &'static str {
        match self {
            SeType::Classical => "classical",
            SeType::Hc0 => "HC0",
            SeType::Hc1 => "HC1",
            SeType::Cluster => "cluster",
        }
    }

    /// HC1, or cluster-robust when cluster labels are available.
    pub fn default_for(cluster: Option<&[usize]>) -> SeType {
        if cluster.is_some() {
            SeType::Cluster
        } else {
            SeType::Hc1
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegressionFit {
    /// One entry per design column; `NaN` where the column was aliased.
    pub coefficients: Vec<f64>,
    pub aliased: Vec<bool>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Full-size covariance; aliased rows and columns are `NaN`.
    pub vcov: DMatrix<f64>,
    pub df_resid: usize,
    pub rank: usize,
    pub se_type: SeType,
    pub n: usize,
}

impl RegressionFit {
    pub fn se(&self, j: usize) -> f64 {
        self.vcov[(j, j)].max(0.0).sqrt()
    }

    /// Coefficient of the last design column (the endogenous regressor for 2SLS).
    pub fn last(&self) -> (f64, f64) {
        let j = self.coefficients.len() - 1;
        (self.coefficients[j], self.se(j))
    }
}

fn check_shapes(y: &[f64], rows: usize) -> Result<()> {
    if y.is_empty() {
        return Err(Error::EmptyData("regression has no rows".into()));
    }
    if rows != y.len() {
        return Err(Error::Config(format!(
            "design has {rows} rows but response has {}",
            y.len()
        )));
    }
    Ok(())
}

/// Robust or classical covariance for coefficients whose score contributions
/// are `regs[i, ] * resid[i]` and whose bread is `bread`.
pub(crate) fn sandwich_vcov(
    regs: &DMatrix<f64>,
    resid: &[f64],
    bread: &DMatrix<f64>,
    se: SeType,
    cluster: Option<&[usize]>,
) -> Result<DMatrix<f64>> {
    let (n, p) = regs.shape();
    let df = n.saturating_sub(p);
    let v = match se {
        SeType::Classical => {
            let ssr: f64 = resid.iter().map(|e| e * e).sum();
            let s2 = if df > 0 { ssr / df as f64 } else { 0.0 };
            bread * s2
        }
        SeType::Hc0 | SeType::Hc1 => {
            let mut scores = regs.clone();
            for (i, &e) in resid.iter().enumerate() {
                scores.row_mut(i).scale_mut(e);
            }
            let meat = scores.transpose() * &scores;
            let mut v = bread * meat * bread;
            if se == SeType::Hc1 && df > 0 {
                v *= n as f64 / df as f64;
            }
            v
        }
        SeType::Cluster => {
            let labels = cluster.ok_or_else(|| {
                Error::Config("cluster-robust errors requested without cluster labels".into())
            })?;
            if labels.len() != n {
                return Err(Error::Config("cluster labels do not match rows".into()));
            }
            let mut index = std::collections::HashMap::new();
            for &g in labels {
                let next = index.len();
                index.entry(g).or_insert(next);
            }
            let groups = index.len();
            if groups < 2 {
                return Err(Error::Config(
                    "cluster-robust errors need at least two clusters".into(),
                ));
            }
            let mut sums = DMatrix::zeros(groups, p);
            for i in 0..n {
                let g = index[&labels[i]];
                for j in 0..p {
                    sums[(g, j)] += regs[(i, j)] * resid[i];
                }
            }
            let meat = sums.transpose() * &sums;
            let g = groups as f64;
            let factor = if df > 0 {
                g / (g - 1.0) * (n as f64 - 1.0) / df as f64
            } else {
                g / (g - 1.0)
            };
            bread * meat * bread * factor
        }
    };
    Ok((&v + v.transpose()) * 0.5)
}

fn expand(
    k: usize,
    kept: &[usize],
    coef: &[f64],
    vcov: &DMatrix<f64>,
) -> (Vec<f64>, Vec<bool>, DMatrix<f64>) {
    let mut full = vec![f64::NAN; k];
    let mut aliased = vec![true; k];
    let mut v = DMatrix::from_element(k, k, f64::NAN);
    for (a, &ca) in kept.iter().enumerate() {
        full[ca] = coef[a];
        aliased[ca] = false;
        for (b, &cb) in kept.iter().enumerate() {
            v[(ca, cb)] = vcov[(a, b)];
        }
    }
    (full, aliased, v)
}

fn matvec(x: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| (0..x.ncols()).map(|j| x[(i, j)] * b[j]).sum())
        .collect()
}

/// Least squares of `y` on `x`, screening collinear columns in design order.
pub fn ols(
    y: &[f64],
    x: &DMatrix<f64>,
    se: SeType,
    cluster: Option<&[usize]>,
) -> Result<RegressionFit> {
    check_shapes(y, x.nrows())?;
    let qr = ScreenedQr::new(x);
    if qr.rank() == 0 {
        return Err(Error::Rank("all design columns are collinear or zero".into()));
    }
    let xk = qr.kept_columns(x);
    let b = qr.solve(y);
    let fitted = matvec(&xk, &b);
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, f)| a - f).collect();
    let vk = sandwich_vcov(&xk, &residuals, &qr.xtx_inverse(), se, cluster)?;
    let (coefficients, aliased, vcov) = expand(x.ncols(), qr.kept(), &b, &vk);
    let n = y.len();
    Ok(RegressionFit {
        coefficients,
        aliased,
        fitted,
        residuals,
        vcov,
        df_resid: n.saturating_sub(qr.rank()),
        rank: qr.rank(),
        se_type: se,
        n,
    })
}

/// Two-stage least squares of `y` on `[x_exog, d]`, instrumenting `d` with
/// `z_inst`. The coefficient on `d` is the last entry.
pub fn tsls(
    y: &[f64],
    x_exog: &DMatrix<f64>,
    d: &[f64],
    z_inst: &DMatrix<f64>,
    se: SeType,
    cluster: Option<&[usize]>,
) -> Result<RegressionFit> {
    let n = y.len();
    check_shapes(y, x_exog.nrows())?;
    check_shapes(d, n)?;
    check_shapes(y, z_inst.nrows())?;
    if z_inst.ncols() == 0 {
        return Err(Error::Identification("no excluded instruments".into()));
    }
    let kx = x_exog.ncols();
    let mut w = DMatrix::zeros(n, kx + z_inst.ncols());
    w.columns_mut(0, kx).copy_from(x_exog);
    w.columns_mut(kx, z_inst.ncols()).copy_from(z_inst);
    let qr_w = ScreenedQr::new(&w);
    if !qr_w.kept().iter().any(|&c| c >= kx) {
        return Err(Error::Identification(
            "excluded instruments are collinear with the exogenous regressors".into(),
        ));
    }
    let exog_kept: Vec<usize> = qr_w.kept().iter().copied().filter(|&c| c < kx).collect();
    let wk = qr_w.kept_columns(&w);
    let d_hat = matvec(&wk, &qr_w.solve(d));

    let p = exog_kept.len() + 1;
    let mut xhat = DMatrix::zeros(n, p);
    let mut xd = DMatrix::zeros(n, p);
    for (a, &c) in exog_kept.iter().enumerate() {
        xhat.set_column(a, &x_exog.column(c));
        xd.set_column(a, &x_exog.column(c));
    }
    for i in 0..n {
        xhat[(i, p - 1)] = d_hat[i];
        xd[(i, p - 1)] = d[i];
    }
    let qr2 = ScreenedQr::new(&xhat);
    if qr2.rank() < p {
        return Err(Error::Identification(
            "first-stage fitted treatment is collinear with the exogenous regressors".into(),
        ));
    }
    let b = qr2.solve(y);
    let fitted = matvec(&xd, &b);
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, f)| a - f).collect();
    let vk = sandwich_vcov(&xhat, &residuals, &qr2.xtx_inverse(), se, cluster)?;

    let mut kept: Vec<usize> = exog_kept.clone();
    kept.push(kx);
    let (coefficients, aliased, vcov) = expand(kx + 1, &kept, &b, &vk);
    Ok(RegressionFit {
        coefficients,
        aliased,
        fitted,
        residuals,
        vcov,
        df_resid: n.saturating_sub(p),
        rank: p,
        se_type: se,
        n,
    })
}

/// Leverages h_i = x_i'(X'X)^{-1}x_i of a full-rank design.
pub fn hat_diagonals(x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.nrows() == 0 {
        return Err(Error::EmptyData("design has no rows".into()));
    }
    let qr = ScreenedQr::new(x);
    if qr.rank() < x.ncols() {
        return Err(Error::Rank(format!(
            "design has rank {} < {} columns",
            qr.rank(),
            x.ncols()
        )));
    }
    Ok(qr.hat_diagonals(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn exact_fit_recovers_coefficients() {
        let x = DMatrix::from_row_slice(5, 2, &[1., 0., 1., 1., 1., 2., 1., 3., 1., 4.]);
        let y: Vec<f64> = (0..5).map(|i| 2.0 - 0.5 * i as f64).collect();
        let fit = ols(&y, &x, SeType::Hc1, None).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-10);
        assert!((fit.coefficients[1] + 0.5).abs() < 1e-10);
        assert!(fit.residuals.iter().all(|e| e.abs() < 1e-10));
    }

    #[test]
    fn intercept_only_is_mean() {
        let y = [1.0, 4.0, 2.0, 7.0];
        let fit = ols(&y, &col(&[1.0; 4]), SeType::Classical, None).unwrap();
        assert!((fit.coefficients[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn collinear_column_flagged_not_zeroed() {
        let x = DMatrix::from_row_slice(4, 3, &[1., 1., 2., 1., 2., 4., 1., 3., 6., 1., 5., 10.]);
        let fit = ols(&[1.0, 2.0, 2.5, 4.0], &x, SeType::Hc1, None).unwrap();
        assert_eq!(fit.aliased, vec![false, false, true]);
        assert!(fit.coefficients[2].is_nan());
        assert_eq!(fit.rank, 2);
    }

    #[test]
    fn all_zero_design_is_rank_error() {
        let x = DMatrix::zeros(3, 2);
        assert!(matches!(
            ols(&[1.0, 2.0, 3.0], &x, SeType::Hc1, None),
            Err(Error::Rank(_))
        ));
    }

    #[test]
    fn empty_rows_error() {
        let x = DMatrix::zeros(0, 1);
        assert!(matches!(
            ols(&[], &x, SeType::Hc1, None),
            Err(Error::EmptyData(_))
        ));
    }

    #[test]
    fn tsls_without_covariates_is_wald_ratio() {
        let z = [1., 1., 1., 1., 0., 0., 0., 0., 1., 0.];
        let d = [1., 1., 0., 1., 0., 1., 0., 0., 1., 0.];
        let y = [3.0, 2.5, 1.0, 4.0, 0.5, 2.0, 1.0, 0.0, 3.5, 1.5];
        let mean = |v: &[f64], arm: f64| {
            let (s, c) = v
                .iter()
                .zip(&z)
                .filter(|(_, &zz)| zz == arm)
                .fold((0.0, 0.0), |(s, c), (a, _)| (s + a, c + 1.0));
            s / c
        };
        let wald = (mean(&y, 1.0) - mean(&y, 0.0)) / (mean(&d, 1.0) - mean(&d, 0.0));
        let fit = tsls(&y, &col(&[1.0; 10]), &d, &col(&z), SeType::Hc1, None).unwrap();
        assert!((fit.last().0 - wald).abs() < 1e-10);
    }

    #[test]
    fn tsls_with_d_as_instrument_is_ols() {
        let d = [1., 0., 1., 1., 0., 0., 1., 0.];
        let y = [2.0, 1.0, 2.5, 3.0, 0.0, 0.5, 1.5, 1.0];
        let x = col(&[1.0; 8]);
        let iv = tsls(&y, &x, &d, &col(&d), SeType::Hc1, None).unwrap();
        let mut xd = DMatrix::from_element(8, 2, 1.0);
        xd.set_column(1, &nalgebra::DVector::from_column_slice(&d));
        let o = ols(&y, &xd, SeType::Hc1, None).unwrap();
        assert!((iv.last().0 - o.coefficients[1]).abs() < 1e-12);
        assert!((iv.se(1) - o.se(1)).abs() < 1e-12);
    }

    #[test]
    fn tsls_weak_instrument_identification_error() {
        // instrument equals the intercept: no excluded variation
        let d = [1., 0., 1., 0.];
        let err = tsls(
            &[1., 2., 3., 4.],
            &col(&[1.0; 4]),
            &d,
            &col(&[2.0; 4]),
            SeType::Hc1,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Identification(_)));
    }

    #[test]
    fn hat_diagonals_intercept_and_dummies() {
        let h = hat_diagonals(&col(&[1.0; 5])).unwrap();
        assert!(h.iter().all(|v| (v - 0.2).abs() < 1e-12));
        let x = DMatrix::from_row_slice(5, 2, &[1., 0., 1., 0., 0., 1., 0., 1., 0., 1.]);
        let h = hat_diagonals(&x).unwrap();
        let want = [0.5, 0.5, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        for (a, b) in h.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hat_diagonals_rank_deficient_errors() {
        let x = DMatrix::from_row_slice(3, 2, &[1., 2., 1., 2., 1., 2.]);
        assert!(matches!(hat_diagonals(&x), Err(Error::Rank(_))));
    }

    #[test]
    fn cluster_requires_labels() {
        assert!(matches!(
            ols(&[1., 2., 3.], &col(&[1.; 3]), SeType::Cluster, None),
            Err(Error::Config(_))
        ));
    }
}
