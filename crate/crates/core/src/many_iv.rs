//! 2SLS, JIVE and UJIVE for the interacted (many-instrument) specification.
//!
//! Leave-one-out first-stage fits use the closed form
//! `D_hat(-i) = (w_i'b - h_i d_i) / (1 - h_i)`, with `h_i` the hat diagonal
//! of the first-stage design.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cells::CellTable;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::ScreenedQr;
use crate::regression::{tsls, SeType};

/// Hat diagonals above this are treated as one.
pub const LEVERAGE_LIMIT: f64 = 1.0 - 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManyIvEstimator {
    Tsls,
    Jive,
    Ujive,
}

impl ManyIvEstimator {
    pub fn label(self) -> &'static str {
        match self {
            ManyIvEstimator::Tsls => "2SLS",
            ManyIvEstimator::Jive => "JIVE",
            ManyIvEstimator::Ujive => "UJIVE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManyIVFit {
    pub estimator: ManyIvEstimator,
    pub estimate: f64,
    pub se: f64,
    /// Excluded instruments.
    pub k: usize,
    /// Exogenous columns.
    pub l: usize,
    pub leverage_max: f64,
    pub n_used: usize,
}

/// Leave-one-out fitted values of `v` on `x` and the largest hat diagonal.
/// `rows` maps design rows to dataset rows for error reporting.
pub fn loo_fitted(x: &DMatrix<f64>, v: &[f64], rows: &[usize]) -> Result<(Vec<f64>, f64)> {
    let qr = ScreenedQr::new(x);
    if qr.rank() == 0 {
        return Err(Error::Rank("first-stage design has rank zero".into()));
    }
    let h = qr.hat_diagonals(x);
    let b = qr.solve(v);
    let xk = qr.kept_columns(x);
    let mut out = Vec::with_capacity(v.len());
    let mut hmax = 0.0f64;
    for i in 0..v.len() {
        if h[i] > LEVERAGE_LIMIT {
            return Err(Error::Leverage {
                row: rows[i],
                leverage: h[i],
            });
        }
        hmax = hmax.max(h[i]);
        let fit: f64 = (0..xk.ncols()).map(|j| xk[(i, j)] * b[j]).sum();
        out.push((fit - h[i] * v[i]) / (1.0 - h[i]));
    }
    Ok((out, hmax))
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    w.columns_mut(0, a.ncols()).copy_from(a);
    w.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    w
}

fn col(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

/// Inputs of a generic many-instrument problem.
pub struct IvDesign<'a> {
    pub y: &'a [f64],
    pub d: &'a [f64],
    pub exog: &'a DMatrix<f64>,
    pub instruments: &'a DMatrix<f64>,
    pub cluster: Option<&'a [usize]>,
    /// Dataset row of each design row.
    pub rows: &'a [usize],
}

fn fit(
    est: ManyIvEstimator,
    dz: &IvDesign,
    inst: &DMatrix<f64>,
    leverage_max: f64,
    se: SeType,
) -> Result<ManyIVFit> {
    let f = tsls(dz.y, dz.exog, dz.d, inst, se, dz.cluster)?;
    let (estimate, s) = f.last();
    Ok(ManyIVFit {
        estimator: est,
        estimate,
        se: s,
        k: ScreenedQr::new(&hstack(dz.exog, dz.instruments)).rank()
            - ScreenedQr::new(dz.exog).rank(),
        l: dz.exog.ncols(),
        leverage_max,
        n_used: dz.y.len(),
    })
}

pub fn tsls_design(dz: &IvDesign, se: SeType) -> Result<ManyIVFit> {
    let w = hstack(dz.exog, dz.instruments);
    let hmax = ScreenedQr::new(&w)
        .hat_diagonals(&w)
        .into_iter()
        .fold(0.0f64, f64::max);
    fit(ManyIvEstimator::Tsls, dz, dz.instruments, hmax, se)
}

pub fn jive_design(dz: &IvDesign, se: SeType) -> Result<ManyIVFit> {
    let w = hstack(dz.exog, dz.instruments);
    let (dhat, hmax) = loo_fitted(&w, dz.d, dz.rows)?;
    fit(ManyIvEstimator::Jive, dz, &col(&dhat), hmax, se)
}

pub fn ujive_design(dz: &IvDesign, se: SeType) -> Result<ManyIVFit> {
    let w = hstack(dz.exog, dz.instruments);
    let (dw, hw) = loo_fitted(&w, dz.d, dz.rows)?;
    let (dx, hx) = loo_fitted(dz.exog, dz.d, dz.rows)?;
    let inst: Vec<f64> = dw.iter().zip(&dx).map(|(a, b)| a - b).collect();
    fit(ManyIvEstimator::Ujive, dz, &col(&inst), hw.max(hx), se)
}

fn with_cell_design<T>(
    ds: &Dataset,
    ct: &CellTable,
    f: impl FnOnce(&IvDesign) -> Result<T>,
) -> Result<T> {
    let rd = ct.retained_design(ds);
    let inst = rd.interactions();
    let rows: Vec<usize> = rd.rows.clone();
    let dz = IvDesign {
        y: &rd.y,
        d: &rd.d,
        exog: &rd.dummies,
        instruments: &inst,
        cluster: rd.cluster.as_deref(),
        rows: &rows,
    };
    f(&dz)
}

/// Interacted 2SLS: cell dummies as controls, Z x cell dummies as instruments.
pub fn many_tsls(ds: &Dataset, ct: &CellTable, se: SeType) -> Result<ManyIVFit> {
    with_cell_design(ds, ct, |dz| tsls_design(dz, se))
}

pub fn jive(ds: &Dataset, ct: &CellTable, se: SeType) -> Result<ManyIVFit> {
    with_cell_design(ds, ct, |dz| jive_design(dz, se))
}

pub fn ujive(ds: &Dataset, ct: &CellTable, se: SeType) -> Result<ManyIVFit> {
    with_cell_design(ds, ct, |dz| ujive_design(dz, se))
}
