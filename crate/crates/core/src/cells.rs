//! Saturated covariate cells and their per-cell first-stage and Wald statistics.
//!
//! A cell is one distinct tuple of covariate labels. Within each cell we keep
//! the instrument-arm counts, the arm means of `y` and `d`, the population
//! (divide-by-n) variance of the instrument, the first stage `pi` and the
//! within-cell Wald ratio `tau`. Cells too small, lacking an instrument arm,
//! or with a zero first stage are flagged degenerate: they stay in the table
//! but are excluded from every aggregate.

use std::cmp::Ordering;
use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::WeightTable;
use crate::report::{fmt3, fmt3_opt};

pub const DEFAULT_MIN_CELL_SIZE: usize = 1;
pub const DEFAULT_MIN_ARM_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: Vec<String>,
    pub n: usize,
    /// Observations with z = 0 and z = 1.
    pub n_arm: [usize; 2],
    /// Counts indexed `[z][d]`.
    pub n_zd: [[usize; 2]; 2],
    pub p: f64,
    pub var_z: f64,
    pub mean_y: [Option<f64>; 2],
    pub mean_d: [Option<f64>; 2],
    pub pi: Option<f64>,
    pub tau: Option<f64>,
    pub degenerate: bool,
    pub reason: Option<String>,
}

impl Cell {
    pub fn label(&self) -> String {
        if self.key.is_empty() {
            "all".to_string()
        } else {
            self.key.join(",")
        }
    }

    /// Arm difference of mean outcomes, when both arms are present.
    pub fn delta_y(&self) -> Option<f64> {
        Some(self.mean_y[1]? - self.mean_y[0]?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellTable {
    assignments: Vec<usize>,
    cells: Vec<Cell>,
    n: usize,
    pub min_cell_size: usize,
    pub min_arm_size: usize,
    pub warnings: Vec<String>,
}

fn compare_keys(a: &[String], b: &[String]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let ord = match (x.parse::<f64>(), y.parse::<f64>()) {
            (Ok(u), Ok(v)) => u.total_cmp(&v).then_with(|| x.cmp(y)),
            _ => x.cmp(y),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    a.len().cmp(&b.len())
}

/// Partition `ds` into covariate cells and compute per-cell statistics.
pub fn build_cells(ds: &Dataset, min_cell_size: usize, min_arm_size: usize) -> Result<CellTable> {
    let ct = build_partition(ds, min_cell_size, min_arm_size)?;
    if ct.cells.iter().all(|c| c.degenerate) {
        return Err(Error::Identification(format!(
            "all {} covariate cells are degenerate (min_cell_size={min_cell_size}, min_arm_size={min_arm_size})",
            ct.cells.len()
        )));
    }
    Ok(ct)
}

/// As [`build_cells`], but a table whose cells are all degenerate is
/// returned instead of rejected. Validity tests use it: a cell with a zero
/// first stage identifies nothing but is still informative about monotonicity.
pub fn build_partition(
    ds: &Dataset,
    min_cell_size: usize,
    min_arm_size: usize,
) -> Result<CellTable> {
    if min_arm_size < 1 {
        return Err(Error::Config("min_arm_size must be at least 1".into()));
    }
    let n = ds.n();
    let mut first_seen: HashMap<Vec<String>, usize> = HashMap::new();
    let mut raw_assign = Vec::with_capacity(n);
    let mut keys: Vec<Vec<String>> = Vec::new();
    for i in 0..n {
        let key = ds.covariate_key(i);
        let next = keys.len();
        let id = *first_seen.entry(key.clone()).or_insert_with(|| {
            keys.push(key);
            next
        });
        raw_assign.push(id);
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| compare_keys(&keys[a], &keys[b]));
    let mut remap = vec![0; keys.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let assignments: Vec<usize> = raw_assign.iter().map(|&c| remap[c]).collect();
    let j = keys.len();

    let mut counts = vec![[[0usize; 2]; 2]; j];
    let mut sum_y = vec![[0.0f64; 2]; j];
    for i in 0..n {
        let c = assignments[i];
        let z = ds.z()[i] as usize;
        let d = ds.d()[i] as usize;
        counts[c][z][d] += 1;
        sum_y[c][z] += ds.y()[i];
    }

    let cells: Vec<Cell> = order
        .iter()
        .enumerate()
        .map(|(c, &old)| {
            let nzd = counts[c];
            let n_arm = [nzd[0][0] + nzd[0][1], nzd[1][0] + nzd[1][1]];
            let nc = n_arm[0] + n_arm[1];
            let q = n_arm[1] as f64 / nc as f64;
            let arm_mean = |s: f64, k: usize| (k > 0).then(|| s / k as f64);
            let mean_y = [arm_mean(sum_y[c][0], n_arm[0]), arm_mean(sum_y[c][1], n_arm[1])];
            let mean_d = [
                arm_mean(nzd[0][1] as f64, n_arm[0]),
                arm_mean(nzd[1][1] as f64, n_arm[1]),
            ];
            let pi = match (mean_d[0], mean_d[1]) {
                (Some(a), Some(b)) => Some(b - a),
                _ => None,
            };
            let reason = if n_arm[0] == 0 || n_arm[1] == 0 {
                Some("instrument constant within cell".to_string())
            } else if nc < min_cell_size {
                Some(format!("cell size {nc} below minimum {min_cell_size}"))
            } else if n_arm[0].min(n_arm[1]) < min_arm_size {
                Some(format!(
                    "instrument arm of size {} below minimum {min_arm_size}",
                    n_arm[0].min(n_arm[1])
                ))
            } else if pi == Some(0.0) {
                Some("zero first stage".to_string())
            } else {
                None
            };
            let degenerate = reason.is_some();
            let tau = if degenerate {
                None
            } else {
                Some((mean_y[1].unwrap() - mean_y[0].unwrap()) / pi.unwrap())
            };
            Cell {
                key: keys[old].clone(),
                n: nc,
                n_arm,
                n_zd: nzd,
                p: nc as f64 / n as f64,
                var_z: q * (1.0 - q),
                mean_y,
                mean_d,
                pi,
                tau,
                degenerate,
                reason,
            }
        })
        .collect();

    let mut warnings = Vec::new();
    if 2 * j > n {
        warnings.push(format!(
            "{j} covariate cells for {n} observations; covariates may not be discrete"
        ));
    }
    let dropped = cells.iter().filter(|c| c.degenerate).count();
    if dropped > 0 {
        warnings.push(format!("{dropped} degenerate cell(s) excluded from aggregation"));
    }
    Ok(CellTable {
        assignments,
        cells,
        n,
        min_cell_size,
        min_arm_size,
        warnings,
    })
}

impl CellTable {
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of cells, degenerate included.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    /// Indices of non-degenerate cells.
    pub fn retained(&self) -> Vec<usize> {
        (0..self.cells.len())
            .filter(|&c| !self.cells[c].degenerate)
            .collect()
    }

    /// Indices of cells meeting the size minima in both instrument arms,
    /// whatever their first stage.
    pub fn testable(&self) -> Vec<usize> {
        (0..self.cells.len())
            .filter(|&c| {
                let cell = &self.cells[c];
                cell.n >= self.min_cell_size
                    && cell.n_arm[0].min(cell.n_arm[1]) >= self.min_arm_size
            })
            .collect()
    }

    /// Design pieces for the rows that fall in non-degenerate cells.
    pub fn retained_design(&self, ds: &Dataset) -> RetainedDesign {
        let retained = self.retained();
        let mut slot = vec![usize::MAX; self.cells.len()];
        for (s, &c) in retained.iter().enumerate() {
            slot[c] = s;
        }
        let rows: Vec<usize> = (0..self.n)
            .filter(|&i| slot[self.assignments[i]] != usize::MAX)
            .collect();
        let cell_of_row: Vec<usize> = rows.iter().map(|&i| slot[self.assignments[i]]).collect();
        let mut dummies = DMatrix::zeros(rows.len(), retained.len());
        for (r, &s) in cell_of_row.iter().enumerate() {
            dummies[(r, s)] = 1.0;
        }
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        RetainedDesign {
            y: pick(ds.y()),
            d: pick(ds.d()),
            z: pick(ds.z()),
            cluster: ds.cluster().map(|cl| rows.iter().map(|&i| cl[i]).collect()),
            rows,
            cells: retained,
            cell_of_row,
            dummies,
        }
    }
}

/// Rows of the retained (non-degenerate) cells with their cell dummies.
#[derive(Debug, Clone)]
pub struct RetainedDesign {
    pub rows: Vec<usize>,
    /// Cell-table indices of the retained cells, one per dummy column.
    pub cells: Vec<usize>,
    /// Dummy column of each retained row.
    pub cell_of_row: Vec<usize>,
    pub dummies: DMatrix<f64>,
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    pub z: Vec<f64>,
    pub cluster: Option<Vec<usize>>,
}

impl RetainedDesign {
    /// Instrument interacted with each cell dummy.
    pub fn interactions(&self) -> DMatrix<f64> {
        let mut m = self.dummies.clone();
        for (r, &z) in self.z.iter().enumerate() {
            if z == 0.0 {
                m.row_mut(r).fill(0.0);
            }
        }
        m
    }

    pub fn z_column(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.z.len(), 1, &self.z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatsRow {
    pub cell: String,
    pub n: usize,
    pub p: f64,
    pub var_z: f64,
    pub pi: Option<f64>,
    pub tau: Option<f64>,
    pub w_late: Option<f64>,
    pub w_iv: Option<f64>,
    pub w_ai: Option<f64>,
    pub degenerate: bool,
}

/// Per-cell report: text rendering rounds to three decimals, the JSON form
/// keeps full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatsTable {
    pub rows: Vec<CellStatsRow>,
}

pub fn cell_stats_table(ct: &CellTable, weights: Option<&WeightTable>) -> CellStatsTable {
    let rows = ct
        .cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let w = weights.and_then(|w| w.rows.iter().find(|r| r.cell == c));
            CellStatsRow {
                cell: cell.label(),
                n: cell.n,
                p: cell.p,
                var_z: cell.var_z,
                pi: cell.pi,
                tau: cell.tau,
                w_late: w.and_then(|r| r.w_late),
                w_iv: w.and_then(|r| r.w_iv),
                w_ai: w.and_then(|r| r.w_ai),
                degenerate: cell.degenerate,
            }
        })
        .collect();
    CellStatsTable { rows }
}

impl CellStatsTable {
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "cell", "n", "p", "Var(Z)", "pi", "w_LATE", "w_IV", "w_AI", "tau"
        );
        for r in &self.rows {
            let mark = if r.degenerate { "*" } else { "" };
            out.push_str(&format!(
                "{:<12} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
                format!("{}{mark}", r.cell),
                r.n,
                fmt3(r.p),
                fmt3(r.var_z),
                fmt3_opt(r.pi),
                fmt3_opt(r.w_late),
                fmt3_opt(r.w_iv),
                fmt3_opt(r.w_ai),
                fmt3_opt(r.tau),
            ));
        }
        if self.rows.iter().any(|r| r.degenerate) {
            out.push_str("* degenerate cell, excluded from aggregation\n");
        }
        out
    }
}
