//! RESET-type misspecification tests for the instrument propensity model.
//!
//! `reset_linear` adds powers of the linear-probability fitted values and
//! runs a heteroskedasticity-robust Wald F test. `reset_binary_index` adds
//! powers of the fitted logit/probit index and runs a likelihood-ratio test.
//! Both standardize the base series before taking powers; the span, and hence
//! the test, is unchanged.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::linalg::ScreenedQr;
use crate::propensity::{fit_binary_index, with_intercept, Link, PropensityFit};
use crate::regression::{ols, SeType};

pub const DEFAULT_POWERS: [u32; 3] = [2, 3, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub test: String,
    pub statistic: f64,
    /// One entry for chi-square, numerator and denominator for F.
    pub df: Vec<f64>,
    /// `None` when the augmented model could not be fitted.
    pub p_value: Option<f64>,
    /// The added terms span nothing new, so the test passes by construction.
    pub trivial: bool,
    pub error: Option<String>,
    pub method: BTreeMap<String, String>,
}

fn check_powers(powers: &[u32]) -> Result<()> {
    if powers.is_empty() {
        return Err(Error::Config("at least one RESET power is required".into()));
    }
    if let Some(p) = powers.iter().find(|p| !(2..=4).contains(*p)) {
        return Err(Error::Config(format!("RESET power {p} not in {{2,3,4}}")));
    }
    Ok(())
}

fn powers_label(powers: &[u32]) -> String {
    powers.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")
}

/// Centered and scaled copy of `v`, or `None` if `v` is numerically constant.
fn standardize(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
    let scale = v.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1.0);
    if sd <= 1e-10 * scale {
        None
    } else {
        Some(v.iter().map(|a| (a - m) / sd).collect())
    }
}

fn augment(x: &DMatrix<f64>, base: &[f64], powers: &[u32]) -> DMatrix<f64> {
    let k = x.ncols();
    let mut xa = x.clone().resize_horizontally(k + powers.len(), 0.0);
    for (a, &p) in powers.iter().enumerate() {
        for (i, v) in base.iter().enumerate() {
            xa[(i, k + a)] = v.powi(p as i32);
        }
    }
    xa
}

fn trivial_report(test: &str, df: Vec<f64>, mut method: BTreeMap<String, String>) -> TestReport {
    method.insert(
        "note".into(),
        "trivially passes: fitted values span no new direction".into(),
    );
    TestReport {
        test: test.to_string(),
        statistic: 0.0,
        df,
        p_value: Some(1.0),
        trivial: true,
        error: None,
        method,
    }
}

/// Linear-probability RESET with an HC1 Wald F test on the added powers.
pub fn reset_linear(z: &[f64], x: &DMatrix<f64>, powers: &[u32]) -> Result<TestReport> {
    check_powers(powers)?;
    let (xi, _) = with_intercept(x);
    let base = ols(z, &xi, SeType::Classical, None)?;
    let n = z.len();
    let method = BTreeMap::from([
        ("powers".into(), powers_label(powers)),
        ("covariance".into(), "HC1".into()),
        ("base".into(), "fitted values".into()),
    ]);
    let Some(s) = standardize(&base.fitted) else {
        return Ok(trivial_report("RESET (linear)", vec![0.0, n as f64], method));
    };
    let xa = augment(&xi, &s, powers);
    let kx = xi.ncols();
    let fit = ols(z, &xa, SeType::Hc1, None)?;
    let added: Vec<usize> = (kx..xa.ncols()).filter(|&j| !fit.aliased[j]).collect();
    let df2 = fit.df_resid as f64;
    if added.is_empty() {
        return Ok(trivial_report("RESET (linear)", vec![0.0, df2], method));
    }
    let q = added.len();
    let b = DMatrix::from_iterator(q, 1, added.iter().map(|&j| fit.coefficients[j]));
    let v = DMatrix::from_fn(q, q, |a, c| fit.vcov[(added[a], added[c])]);
    let wald = match v.clone().cholesky() {
        Some(ch) => (b.transpose() * ch.solve(&b))[(0, 0)],
        None => {
            return Err(Error::Rank(
                "robust covariance of the RESET terms is singular".into(),
            ))
        }
    };
    let f = wald / q as f64;
    let dist = FisherSnedecor::new(q as f64, df2)
        .map_err(|e| Error::TestUndefined(format!("F reference distribution: {e}")))?;
    let p = dist.sf(f).clamp(0.0, 1.0);
    Ok(TestReport {
        test: "RESET (linear)".into(),
        statistic: f,
        df: vec![q as f64, df2],
        p_value: Some(p),
        trivial: false,
        error: None,
        method,
    })
}

/// Binary-index RESET: refit the same link with powers of the standardized
/// index added, and compare log-likelihoods.
pub fn reset_binary_index(
    pf: &PropensityFit,
    z: &[f64],
    x: &DMatrix<f64>,
    powers: &[u32],
) -> Result<TestReport> {
    check_powers(powers)?;
    if pf.link == Link::Linear {
        return Err(Error::Config(
            "binary-index RESET needs a logit or probit fit".into(),
        ));
    }
    if !pf.converged {
        return Err(Error::Config("base propensity fit did not converge".into()));
    }
    let test = format!("RESET ({})", pf.link.label());
    let mut method = BTreeMap::from([
        ("powers".into(), powers_label(powers)),
        ("statistic".into(), "likelihood ratio".into()),
        ("base".into(), "standardized index".into()),
    ]);
    let Some(s) = standardize(&pf.index) else {
        return Ok(trivial_report(&test, vec![0.0], method));
    };
    let (xi, _) = with_intercept(x);
    let xa = augment(&xi, &s, powers);
    let base_rank = ScreenedQr::new(&xi).rank();
    let q = ScreenedQr::new(&xa).rank() - base_rank;
    if q == 0 {
        return Ok(trivial_report(&test, vec![0.0], method));
    }
    let aug = match fit_binary_index(z, &xa, pf.link) {
        Ok(f) => f,
        Err(e @ (Error::NonConvergence { .. } | Error::Separation { .. })) => {
            method.insert("augmented_fit".into(), "failed".into());
            return Ok(TestReport {
                test,
                statistic: f64::NAN,
                df: vec![q as f64],
                p_value: None,
                trivial: false,
                error: Some(e.to_string()),
                method,
            });
        }
        Err(e) => return Err(e),
    };
    let lr = (2.0 * (aug.loglik - pf.loglik)).max(0.0);
    let dist = ChiSquared::new(q as f64)
        .map_err(|e| Error::TestUndefined(format!("chi-square reference distribution: {e}")))?;
    Ok(TestReport {
        test,
        statistic: lr,
        df: vec![q as f64],
        p_value: Some(dist.sf(lr).clamp(0.0, 1.0)),
        trivial: false,
        error: None,
        method,
    })
}
