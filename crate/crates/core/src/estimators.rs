//! The three target parameters and their weighted-average decomposition.
//!
//! With saturated covariates each estimand is a weighted mean of the cell
//! Wald ratios `tau_j`:
//!
//! * LATE: weights proportional to `p_j * pi_j`
//! * linear IV: weights proportional to `p_j * pi_j * Var(Z | cell j)`
//! * interacted 2SLS ("AI"): weights proportional to `p_j * pi_j^2 * Var(Z | cell j)`
//!
//! The regression-based estimators below are computed by 2SLS on the rows of
//! the non-degenerate cells, so the dot-product identities hold exactly.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cells::CellTable;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::regression::{tsls, SeType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    BetaIv,
    BetaAi,
    BetaLateSaturated,
    BetaLateIpw,
}

impl Estimand {
    pub fn label(self) -> &'static str {
        match self {
            Estimand::BetaIv => "beta_IV",
            Estimand::BetaAi => "beta_AI",
            Estimand::BetaLateSaturated => "beta_LATE",
            Estimand::BetaLateIpw => "beta_LATE (IPW)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: Estimand,
    pub estimate: f64,
    pub se: f64,
    pub se_type: String,
    pub n_used: usize,
    pub cells_used: Option<usize>,
    pub metadata: BTreeMap<String, String>,
}

fn check_se(se: SeType, cluster: Option<&[usize]>) -> Result<()> {
    if se == SeType::Cluster && cluster.is_none() {
        return Err(Error::Config(
            "cluster-robust errors requested but no cluster column is mapped".into(),
        ));
    }
    Ok(())
}

/// Linear IV with additively separable cell dummies and the single instrument Z.
pub fn estimate_beta_iv(ds: &Dataset, ct: &CellTable, se: SeType) -> Result<EstimateReport> {
    check_se(se, ds.cluster())?;
    let rd = ct.retained_design(ds);
    let fit = tsls(&rd.y, &rd.dummies, &rd.d, &rd.z_column(), se, rd.cluster.as_deref())?;
    let (b, s) = fit.last();
    Ok(EstimateReport {
        estimand: Estimand::BetaIv,
        estimate: b,
        se: s,
        se_type: se.label().to_string(),
        n_used: rd.rows.len(),
        cells_used: Some(rd.cells.len()),
        metadata: BTreeMap::from([(
            "specification".into(),
            "2SLS, cell dummies, instrument Z".into(),
        )]),
    })
}

/// Linear IV with covariates entering linearly next to an intercept
/// (the non-saturated specification).
pub fn estimate_beta_iv_linear(ds: &Dataset, se: SeType) -> Result<EstimateReport> {
    check_se(se, ds.cluster())?;
    let n = ds.n();
    let k = ds.covariates().len();
    let mut x = DMatrix::from_element(n, k + 1, 1.0);
    for (j, c) in ds.covariates().iter().enumerate() {
        for i in 0..n {
            x[(i, j + 1)] = c.values[i];
        }
    }
    let z = DMatrix::from_column_slice(n, 1, ds.z());
    let fit = tsls(ds.y(), &x, ds.d(), &z, se, ds.cluster())?;
    let (b, s) = fit.last();
    Ok(EstimateReport {
        estimand: Estimand::BetaIv,
        estimate: b,
        se: s,
        se_type: se.label().to_string(),
        n_used: n,
        cells_used: None,
        metadata: BTreeMap::from([(
            "specification".into(),
            "2SLS, intercept + linear covariates, instrument Z".into(),
        )]),
    })
}

/// Interacted specification: cell dummies in both stages, Z x cell dummies as instruments.
pub fn estimate_beta_ai(ds: &Dataset, ct: &CellTable, se: SeType) -> Result<EstimateReport> {
    check_se(se, ds.cluster())?;
    let rd = ct.retained_design(ds);
    let fit = tsls(
        &rd.y,
        &rd.dummies,
        &rd.d,
        &rd.interactions(),
        se,
        rd.cluster.as_deref(),
    )?;
    let (b, s) = fit.last();
    Ok(EstimateReport {
        estimand: Estimand::BetaAi,
        estimate: b,
        se: s,
        se_type: se.label().to_string(),
        n_used: rd.rows.len(),
        cells_used: Some(rd.cells.len()),
        metadata: BTreeMap::from([(
            "specification".into(),
            "2SLS, cell dummies, instruments Z x cell".into(),
        )]),
    })
}

/// Share-weighted ratio of within-cell reduced form and first stage.
///
/// The standard error is a delta-method one built from the stacked influence
/// functions of the numerator and denominator (cell shares estimated),
/// summed within clusters when `se` is `Cluster`.
pub fn estimate_beta_late_saturated(
    ds: &Dataset,
    ct: &CellTable,
    se: SeType,
) -> Result<EstimateReport> {
    check_se(se, ds.cluster())?;
    let rd = ct.retained_design(ds);
    let m = rd.rows.len() as f64;
    let cells: Vec<_> = rd.cells.iter().map(|&c| &ct.cells()[c]).collect();
    let share: Vec<f64> = cells.iter().map(|c| c.n as f64 / m).collect();
    let dy: Vec<f64> = cells.iter().map(|c| c.delta_y().unwrap()).collect();
    let dd: Vec<f64> = cells.iter().map(|c| c.pi.unwrap()).collect();
    let num: f64 = share.iter().zip(&dy).map(|(p, a)| p * a).sum();
    let den: f64 = share.iter().zip(&dd).map(|(p, a)| p * a).sum();
    if den.abs() < 1e-14 {
        return Err(Error::Identification(
            "aggregate first stage is zero over retained cells".into(),
        ));
    }
    let estimate = num / den;

    let psi: Vec<f64> = (0..rd.rows.len())
        .map(|r| {
            let s = rd.cell_of_row[r];
            let c = cells[s];
            let z = rd.z[r] as usize;
            let scale = c.n as f64 / c.n_arm[z] as f64;
            let sign = if z == 1 { 1.0 } else { -1.0 };
            let psi_n = (dy[s] - num) + sign * scale * (rd.y[r] - c.mean_y[z].unwrap());
            let psi_d = (dd[s] - den) + sign * scale * (rd.d[r] - c.mean_d[z].unwrap());
            (psi_n - estimate * psi_d) / den
        })
        .collect();
    let var = match se {
        SeType::Cluster => {
            let labels = rd.cluster.as_deref().unwrap();
            let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
            for (r, &g) in labels.iter().enumerate() {
                *sums.entry(g).or_default() += psi[r];
            }
            let g = sums.len() as f64;
            if g < 2.0 {
                return Err(Error::Config(
                    "cluster-robust errors need at least two clusters".into(),
                ));
            }
            g / (g - 1.0) * sums.values().map(|s| s * s).sum::<f64>() / (m * m)
        }
        _ => psi.iter().map(|p| p * p).sum::<f64>() / (m * m),
    };
    let label = if se == SeType::Cluster {
        "delta (influence function, cluster)"
    } else {
        "delta (influence function)"
    };
    Ok(EstimateReport {
        estimand: Estimand::BetaLateSaturated,
        estimate,
        se: var.sqrt(),
        se_type: label.to_string(),
        n_used: rd.rows.len(),
        cells_used: Some(rd.cells.len()),
        metadata: BTreeMap::from([(
            "specification".into(),
            "cell-share weighted reduced form / first stage".into(),
        )]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFamily {
    Late,
    Iv,
    Ai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    /// Index into the originating cell table.
    pub cell: usize,
    pub p: f64,
    pub var_z: f64,
    pub pi: f64,
    pub tau: f64,
    pub w_late: Option<f64>,
    pub w_iv: Option<f64>,
    pub w_ai: Option<f64>,
}

/// Per-cell weights of the three estimands over the non-degenerate cells.
/// A family is `None` throughout when its normalizer is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub rows: Vec<WeightRow>,
}

impl WeightTable {
    pub fn weights(&self, family: WeightFamily) -> Option<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| match family {
                WeightFamily::Late => r.w_late,
                WeightFamily::Iv => r.w_iv,
                WeightFamily::Ai => r.w_ai,
            })
            .collect()
    }

    /// Σ_j w_j τ_j for one family.
    pub fn implied(&self, family: WeightFamily) -> Option<f64> {
        let w = self.weights(family)?;
        Some(w.iter().zip(&self.rows).map(|(w, r)| w * r.tau).sum())
    }
}

fn normalize(raw: &[f64]) -> Vec<Option<f64>> {
    let total: f64 = raw.iter().sum();
    let scale = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if total == 0.0 || total.abs() <= 1e-14 * scale {
        vec![None; raw.len()]
    } else {
        raw.iter().map(|v| Some(v / total)).collect()
    }
}

/// Weights from per-cell components `(cell, p, var_z, pi, tau)`.
pub fn weights_from_components(components: &[(usize, f64, f64, f64, f64)]) -> WeightTable {
    let late: Vec<f64> = components.iter().map(|c| c.1 * c.3).collect();
    let iv: Vec<f64> = components.iter().map(|c| c.1 * c.3 * c.2).collect();
    let ai: Vec<f64> = components.iter().map(|c| c.1 * c.3 * c.3 * c.2).collect();
    let (late, iv, ai) = (normalize(&late), normalize(&iv), normalize(&ai));
    let rows = components
        .iter()
        .enumerate()
        .map(|(k, &(cell, p, var_z, pi, tau))| WeightRow {
            cell,
            p,
            var_z,
            pi,
            tau,
            w_late: late[k],
            w_iv: iv[k],
            w_ai: ai[k],
        })
        .collect();
    WeightTable { rows }
}

pub fn decompose_weights(ct: &CellTable) -> WeightTable {
    let comps: Vec<_> = ct
        .retained()
        .into_iter()
        .map(|c| {
            let cell = &ct.cells()[c];
            (c, cell.p, cell.var_z, cell.pi.unwrap(), cell.tau.unwrap())
        })
        .collect();
    weights_from_components(&comps)
}
