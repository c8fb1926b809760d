//! Instrument propensity scores and the normalized IPW estimator of the LATE.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{Estimand, EstimateReport};
use crate::linalg::ScreenedQr;
use crate::regression::{ols, SeType};

pub const MAX_ITER: usize = 100;
pub const SEPARATION_BOUND: f64 = 30.0;
pub const DEFAULT_TRIM: (f64, f64) = (0.01, 0.99);
pub const DEFAULT_BOOTSTRAP_REPS: usize = 500;

const LOGLIK_RTOL: f64 = 1e-10;
const SCORE_TOL: f64 = 1e-6;
const PHAT_EPS: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Probit,
    Linear,
}

impl Link {
    pub fn label(self) -> &'static str {
        match self {
            Link::Logit => "logit",
            Link::Probit => "probit",
            Link::Linear => "linear",
        }
    }
}

/// Standard normal CDF through the `libm` complementary error function
/// (rational approximations, sub-ulp error).
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// log Phi(x).
fn log_norm_cdf(x: f64) -> f64 {
    if x < -35.0 {
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    } else {
        norm_cdf(x).ln()
    }
}

/// Inverse Mills ratio phi(x) / Phi(x).
fn mills(x: f64) -> f64 {
    if x < -35.0 {
        let x2 = x * x;
        -x / (1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2))
    } else {
        norm_pdf(x) / norm_cdf(x)
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-observation log-likelihood, its first and (negated) second derivative in the index.
fn unit_terms(link: Link, z: f64, eta: f64) -> (f64, f64, f64) {
    match link {
        Link::Logit => {
            let p = logistic(eta);
            let ll = if z == 1.0 { -softplus(-eta) } else { -softplus(eta) };
            (ll, z - p, p * (1.0 - p))
        }
        Link::Probit => {
            if z == 1.0 {
                let l = mills(eta);
                (log_norm_cdf(eta), l, l * (l + eta))
            } else {
                let l = mills(-eta);
                (log_norm_cdf(-eta), -l, l * (l - eta))
            }
        }
        Link::Linear => unreachable!("linear link has no likelihood"),
    }
}

/// Log-likelihood and score of a binary-index model at `b`.
pub fn loglik_score(link: Link, z: &[f64], x: &DMatrix<f64>, b: &[f64]) -> (f64, Vec<f64>) {
    let eta = x * DVector::from_column_slice(b);
    let mut ll = 0.0;
    let mut score = vec![0.0; x.ncols()];
    for i in 0..z.len() {
        let (l, g, _) = unit_terms(link, z[i], eta[i]);
        ll += l;
        for (j, s) in score.iter_mut().enumerate() {
            *s += g * x[(i, j)];
        }
    }
    (ll, score)
}

fn fitted_prob(link: Link, eta: f64) -> f64 {
    match link {
        Link::Logit => logistic(eta),
        Link::Probit => norm_cdf(eta),
        Link::Linear => eta,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityFit {
    pub link: Link,
    /// One per column of the fitted design; `NaN` for screened-out columns.
    pub coefficients: Vec<f64>,
    /// True when a constant column was prepended to the supplied covariates.
    pub intercept_added: bool,
    pub index: Vec<f64>,
    pub phat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub score_norm: f64,
    /// Linear link only: some fitted values fall outside (0, 1).
    pub out_of_range: bool,
}

fn has_constant_column(x: &DMatrix<f64>) -> bool {
    (0..x.ncols()).any(|j| {
        let c = x.column(j);
        c[0] != 0.0 && c.iter().all(|&v| v == c[0])
    })
}

/// The design actually fitted: `x`, with an intercept in front when it has no constant column.
pub fn with_intercept(x: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if x.ncols() > 0 && has_constant_column(x) {
        (x.clone(), false)
    } else {
        (x.clone().insert_column(0, 1.0), true)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, a| m.max(a.abs()))
}

/// Maximum-likelihood fit of `P(z = 1 | x)`; `Link::Linear` is least squares.
pub fn fit_binary_index(z: &[f64], x: &DMatrix<f64>, link: Link) -> Result<PropensityFit> {
    let n = z.len();
    if n == 0 || x.nrows() != n {
        return Err(Error::Config(format!(
            "propensity design has {} rows for {n} observations",
            x.nrows()
        )));
    }
    if z.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain("instrument must be binary".into()));
    }
    if z.iter().all(|&v| v == z[0]) {
        return Err(Error::Identification("instrument has no variation".into()));
    }
    let (xa, intercept_added) = with_intercept(x);
    let qr = ScreenedQr::new(&xa);
    let xk = qr.kept_columns(&xa);
    let expand = |b: &[f64]| {
        let mut full = vec![f64::NAN; xa.ncols()];
        for (a, &c) in qr.kept().iter().enumerate() {
            full[c] = b[a];
        }
        full
    };

    if link == Link::Linear {
        let fit = ols(z, &xk, SeType::Classical, None)?;
        let out_of_range = fit.fitted.iter().any(|&p| p <= 0.0 || p >= 1.0);
        return Ok(PropensityFit {
            link,
            coefficients: expand(&fit.coefficients),
            intercept_added,
            index: fit.fitted.clone(),
            phat: fit.fitted,
            converged: true,
            iterations: 1,
            loglik: f64::NAN,
            score_norm: 0.0,
            out_of_range,
        });
    }

    let p = xk.ncols();
    let mut b = vec![0.0; p];
    let (mut ll, mut score) = loglik_score(link, z, &xk, &b);
    let mut converged = false;
    let mut polish = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let eta = &xk * DVector::from_column_slice(&b);
        let mut xw = xk.clone();
        for i in 0..n {
            let (_, _, w) = unit_terms(link, z[i], eta[i]);
            xw.row_mut(i).scale_mut(w);
        }
        let info = xk.transpose() * xw;
        let rhs = DVector::from_column_slice(&score);
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                let ridge = 1e-10 * info.trace().max(1e-300);
                match (info + DMatrix::identity(p, p) * ridge).cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    None => break,
                }
            }
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = b.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let (ll_c, sc_c) = loglik_score(link, z, &xk, &cand);
            if ll_c.is_finite() && ll_c >= ll - 1e-12 * ll.abs().max(1.0) {
                accepted = Some((cand, ll_c, sc_c));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, ll_new, sc_new)) = accepted else {
            break;
        };
        let gain = ll_new - ll;
        b = cand;
        ll = ll_new;
        score = sc_new;
        if max_abs(&b) > SEPARATION_BOUND && gain > LOGLIK_RTOL * ll.abs() {
            let column = (0..p)
                .max_by(|&i, &j| b[i].abs().total_cmp(&b[j].abs()))
                .unwrap();
            return Err(Error::Separation {
                column: qr.kept()[column],
                direction: if b[column] > 0.0 { "+inf" } else { "-inf" }.to_string(),
            });
        }
        if polish {
            converged = true;
            break;
        }
        if gain.abs() <= LOGLIK_RTOL * ll.abs() || max_abs(&score) < SCORE_TOL {
            // one more Newton step from a point this close is essentially free
            polish = true;
        }
    }
    let score_norm = max_abs(&score);
    if max_abs(&b) > 0.0 {
        // the MLE strictly beats 2b; along a separating direction it does not
        let doubled: Vec<f64> = b.iter().map(|v| 2.0 * v).collect();
        let (ll2, _) = loglik_score(link, z, &xk, &doubled);
        if ll2 >= ll {
            let column = (0..p)
                .max_by(|&i, &j| b[i].abs().total_cmp(&b[j].abs()))
                .unwrap();
            return Err(Error::Separation {
                column: qr.kept()[column],
                direction: if b[column] > 0.0 { "+inf" } else { "-inf" }.to_string(),
            });
        }
    }
    if !converged {
        if score_norm < SCORE_TOL && polish {
            converged = true;
        } else {
            return Err(Error::NonConvergence {
                iterations,
                loglik: ll,
                score_norm,
            });
        }
    }
    let index: Vec<f64> = (&xk * DVector::from_column_slice(&b)).iter().copied().collect();
    let phat = index
        .iter()
        .map(|&e| fitted_prob(link, e).clamp(PHAT_EPS, 1.0 - PHAT_EPS))
        .collect();
    Ok(PropensityFit {
        link,
        coefficients: expand(&b),
        intercept_added,
        index,
        phat,
        converged,
        iterations,
        loglik: ll,
        score_norm,
        out_of_range: false,
    })
}

fn check_trim(trim: (f64, f64)) -> Result<()> {
    let (lo, hi) = trim;
    if !(0.0..1.0).contains(&lo) || !(hi > lo && hi <= 1.0) {
        return Err(Error::Config(format!(
            "trim bounds must satisfy 0 <= lo < hi <= 1, got [{lo}, {hi}]"
        )));
    }
    Ok(())
}

struct IpwPoint {
    estimate: f64,
    psi: Vec<f64>,
    kept: Vec<usize>,
}

fn ipw_point(y: &[f64], d: &[f64], z: &[f64], phat: &[f64], trim: (f64, f64)) -> Result<IpwPoint> {
    let kept: Vec<usize> = (0..y.len())
        .filter(|&i| phat[i] >= trim.0 && phat[i] <= trim.1)
        .collect();
    let mut raw1 = vec![0.0; kept.len()];
    let mut raw0 = vec![0.0; kept.len()];
    for (r, &i) in kept.iter().enumerate() {
        if z[i] == 1.0 {
            raw1[r] = 1.0 / phat[i];
        } else {
            raw0[r] = 1.0 / (1.0 - phat[i]);
        }
    }
    let s1: f64 = raw1.iter().sum();
    let s0: f64 = raw0.iter().sum();
    if s1 == 0.0 || s0 == 0.0 {
        return Err(Error::Trim(format!(
            "an instrument arm is empty after trimming to [{}, {}]",
            trim.0, trim.1
        )));
    }
    let w1: Vec<f64> = raw1.iter().map(|w| w / s1).collect();
    let w0: Vec<f64> = raw0.iter().map(|w| w / s0).collect();
    let mean = |w: &[f64], v: &[f64]| -> f64 { kept.iter().enumerate().map(|(r, &i)| w[r] * v[i]).sum() };
    let (m1y, m0y, m1d, m0d) = (mean(&w1, y), mean(&w0, y), mean(&w1, d), mean(&w0, d));
    let den = m1d - m0d;
    if den.abs() < 1e-14 {
        return Err(Error::Identification(
            "weighted first stage is zero after trimming".into(),
        ));
    }
    let estimate = (m1y - m0y) / den;
    let psi = kept
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let a = w1[r] * ((y[i] - m1y) - estimate * (d[i] - m1d));
            let b = w0[r] * ((y[i] - m0y) - estimate * (d[i] - m0d));
            (a - b) / den
        })
        .collect();
    Ok(IpwPoint {
        estimate,
        psi,
        kept,
    })
}

/// Normalized inverse-probability-weighted LATE.
///
/// Rows with `phat` outside `trim` are dropped. The delta-method standard
/// error treats `phat` as known.
pub fn ipw_late(ds: &Dataset, pf: &PropensityFit, trim: (f64, f64)) -> Result<EstimateReport> {
    check_trim(trim)?;
    if pf.phat.len() != ds.n() {
        return Err(Error::Config("propensity scores do not match the data".into()));
    }
    let pt = ipw_point(ds.y(), ds.d(), ds.z(), &pf.phat, trim)?;
    let (var, se_type) = match ds.cluster() {
        Some(cl) => {
            let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
            for (r, &i) in pt.kept.iter().enumerate() {
                *sums.entry(cl[i]).or_default() += pt.psi[r];
            }
            let g = sums.len() as f64;
            let factor = if g > 1.0 { g / (g - 1.0) } else { 1.0 };
            (
                factor * sums.values().map(|s| s * s).sum::<f64>(),
                "delta (propensity fixed, cluster)",
            )
        }
        None => (
            pt.psi.iter().map(|p| p * p).sum::<f64>(),
            "delta (propensity fixed)",
        ),
    };
    let trimmed = ds.n() - pt.kept.len();
    Ok(EstimateReport {
        estimand: Estimand::BetaLateIpw,
        estimate: pt.estimate,
        se: var.sqrt(),
        se_type: se_type.to_string(),
        n_used: pt.kept.len(),
        cells_used: None,
        metadata: BTreeMap::from([
            ("link".into(), pf.link.label().into()),
            ("trim".into(), format!("[{}, {}]", trim.0, trim.1)),
            ("trimmed".into(), trimmed.to_string()),
        ]),
    })
}

/// IPW LATE with a nonparametric bootstrap standard error that refits the
/// propensity model in every replication. Replications that fail to fit are
/// skipped and counted in the metadata.
pub fn ipw_late_bootstrap(
    ds: &Dataset,
    x: &DMatrix<f64>,
    link: Link,
    trim: (f64, f64),
    reps: usize,
    seed: u64,
) -> Result<EstimateReport> {
    check_trim(trim)?;
    if reps < 2 {
        return Err(Error::Config("bootstrap needs at least two replications".into()));
    }
    let pf = fit_binary_index(ds.z(), x, link)?;
    let mut report = ipw_late(ds, &pf, trim)?;
    let n = ds.n();
    let rows: Vec<usize> = (0..n).collect();
    let draws: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            let idx: Vec<usize> = (0..n).map(|_| *rows.choose(&mut rng).unwrap()).collect();
            let y: Vec<f64> = idx.iter().map(|&i| ds.y()[i]).collect();
            let d: Vec<f64> = idx.iter().map(|&i| ds.d()[i]).collect();
            let z: Vec<f64> = idx.iter().map(|&i| ds.z()[i]).collect();
            let xb = x.select_rows(idx.iter());
            let fit = fit_binary_index(&z, &xb, link).ok()?;
            ipw_point(&y, &d, &z, &fit.phat, trim).ok().map(|p| p.estimate)
        })
        .collect();
    let ok: Vec<f64> = draws.into_iter().flatten().collect();
    if ok.len() < 2 {
        return Err(Error::NonConvergence {
            iterations: reps,
            loglik: f64::NAN,
            score_norm: f64::NAN,
        });
    }
    let m = ok.iter().sum::<f64>() / ok.len() as f64;
    let var = ok.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (ok.len() - 1) as f64;
    report.se = var.sqrt();
    report.se_type = "bootstrap (propensity refit)".into();
    report.metadata.insert("bootstrap_reps".into(), reps.to_string());
    report
        .metadata
        .insert("bootstrap_failed".into(), (reps - ok.len()).to_string());
    report.metadata.insert("seed".into(), seed.to_string());
    Ok(report)
}
