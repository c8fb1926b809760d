//! Testable implications of instrument validity and monotonicity.
//!
//! Every test here is a max of studentized moment violations,
//! `T = max_k (-m_k / sigma_k)`, with a multiplier (Rademacher) bootstrap
//! for the null distribution. Each moment's influence function is constant
//! on small groups of observations (cell x arm x outcome bin x treatment), so
//! a bootstrap draw only needs the per-group sums of Rademacher weights; a sum
//! of `k` signs is drawn as `2 * Binomial(k, 1/2) - k`.
//!
//! * `bp_test`: for every interval `A` of the outcome partition,
//!   `P(Y in A, D=1 | Z=1) - P(Y in A, D=1 | Z=0) >= 0` and
//!   `P(Y in A, D=0 | Z=0) - P(Y in A, D=0 | Z=1) >= 0`, pooled or per cell.
//! * `mw_test`: the same differences divided by `P(Y in A | cell)`, so that
//!   `Y` acts as a conditioning variable within each covariate cell.
//! * `first_stage_nonneg_test`: `pi_j >= 0` in every cell.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::CellTable;
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_REPS: usize = 999;
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Outcomes with at most this many distinct values are partitioned by support.
pub const DISCRETE_SUPPORT_MAX: usize = 10;

/// Bins `[c_k, c_{k+1})` over sorted cut points; the first bin extends to
/// -inf and the last to +inf so every outcome falls in some bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSetPartition {
    cut_points: Vec<f64>,
}

impl OutcomeSetPartition {
    pub fn new(cut_points: Vec<f64>) -> Result<Self> {
        if cut_points.len() < 2 {
            return Err(Error::Config("outcome partition needs at least two cut points".into()));
        }
        if cut_points.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("outcome cut points must be finite".into()));
        }
        if cut_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("outcome cut points must be strictly increasing".into()));
        }
        Ok(OutcomeSetPartition { cut_points })
    }

    /// Distinct sample deciles (minimum and maximum included).
    pub fn deciles(y: &[f64]) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::EmptyData("no outcomes to partition".into()));
        }
        let mut s = y.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let mut cuts: Vec<f64> = (0..=10).map(|k| s[(k * (n - 1)) / 10]).collect();
        cuts.dedup();
        if cuts.len() < 2 {
            cuts.push(cuts[0] + 1.0);
        }
        Self::new(cuts)
    }

    /// One bin per support point.
    pub fn support(y: &[f64]) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::EmptyData("no outcomes to partition".into()));
        }
        let mut s = y.to_vec();
        s.sort_by(f64::total_cmp);
        s.dedup();
        let top = s[s.len() - 1] + 1.0;
        s.push(top);
        Self::new(s)
    }

    /// Support for discrete outcomes, deciles otherwise.
    pub fn auto(y: &[f64]) -> Result<Self> {
        let mut s = y.to_vec();
        s.sort_by(f64::total_cmp);
        s.dedup();
        if s.len() <= DISCRETE_SUPPORT_MAX {
            Self::support(y)
        } else {
            Self::deciles(y)
        }
    }

    /// A single set covering every outcome.
    pub fn whole_range(y: &[f64]) -> Result<Self> {
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return Err(Error::EmptyData("no outcomes to partition".into()));
        }
        Self::new(vec![lo, hi + 1.0])
    }

    pub fn cut_points(&self) -> &[f64] {
        &self.cut_points
    }

    pub fn bins(&self) -> usize {
        self.cut_points.len() - 1
    }

    pub fn bin_of(&self, y: f64) -> usize {
        let k = self.cut_points.partition_point(|&c| c <= y);
        k.saturating_sub(1).min(self.bins() - 1)
    }

    fn interval_label(&self, lo: usize, hi: usize) -> String {
        let a = if lo == 0 {
            "-inf".to_string()
        } else {
            format!("{}", self.cut_points[lo])
        };
        let b = if hi + 1 == self.bins() {
            "+inf".to_string()
        } else {
            format!("{}", self.cut_points[hi + 1])
        };
        format!("[{a}, {b})")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidityTest {
    #[serde(rename = "BP")]
    Bp,
    #[serde(rename = "MW")]
    Mw,
    #[serde(rename = "FS")]
    Fs,
}

impl ValidityTest {
    pub fn label(self) -> &'static str {
        match self {
            ValidityTest::Bp => "BP",
            ValidityTest::Mw => "MW",
            ValidityTest::Fs => "FS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub test: ValidityTest,
    /// Largest studentized violation.
    pub statistic: f64,
    pub p_value: f64,
    pub worst_set: String,
    pub bootstrap_reps: usize,
    pub seed: u64,
    pub moments: usize,
    /// Cells or (set, cell) pairs that could not be evaluated.
    pub skipped: usize,
}

/// A moment inequality `m >= 0` whose influence function is `coefs` over the
/// groups `first_group..first_group + coefs.len()`.
struct Moment {
    estimate: f64,
    sigma: f64,
    first_group: usize,
    coefs: Vec<f64>,
    label: String,
}

fn moment(estimate: f64, first_group: usize, coefs: Vec<f64>, sizes: &[usize], label: String) -> Moment {
    let var: f64 = coefs
        .iter()
        .zip(&sizes[first_group..first_group + coefs.len()])
        .map(|(c, &k)| k as f64 * c * c)
        .sum();
    Moment {
        estimate,
        sigma: var.sqrt().max(SIGMA_FLOOR),
        first_group,
        coefs,
        label,
    }
}

fn run_bootstrap(
    test: ValidityTest,
    moments: &[Moment],
    sizes: &[usize],
    reps: usize,
    seed: u64,
    skipped: usize,
) -> Result<ValidityReport> {
    if moments.is_empty() {
        return Err(Error::TestUndefined(format!(
            "{} test: no moment could be evaluated ({skipped} skipped)",
            test.label()
        )));
    }
    if reps == 0 {
        return Err(Error::Config("bootstrap replications must be positive".into()));
    }
    let (worst, stat) = moments
        .iter()
        .enumerate()
        .map(|(k, m)| (k, -m.estimate / m.sigma))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let dists: Vec<Option<Binomial>> = sizes
        .iter()
        .map(|&k| (k > 0).then(|| Binomial::new(k as u64, 0.5).unwrap()))
        .collect();
    let exceed: usize = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            let s: Vec<f64> = dists
                .iter()
                .zip(sizes)
                .map(|(d, &k)| match d {
                    Some(b) => 2.0 * b.sample(&mut rng) as f64 - k as f64,
                    None => 0.0,
                })
                .collect();
            let t = moments
                .iter()
                .map(|m| {
                    let g = &s[m.first_group..m.first_group + m.coefs.len()];
                    m.coefs.iter().zip(g).map(|(c, v)| c * v).sum::<f64>() / m.sigma
                })
                .fold(f64::NEG_INFINITY, f64::max);
            (t >= stat) as usize
        })
        .sum();
    Ok(ValidityReport {
        test,
        statistic: stat,
        p_value: (1 + exceed) as f64 / (reps + 1) as f64,
        worst_set: moments[worst].label.clone(),
        bootstrap_reps: reps,
        seed,
        moments: moments.len(),
        skipped,
    })
}

/// Rows grouped into evaluation cells: all rows pooled, or the retained cells of `ct`.
fn evaluation_cells(ds: &Dataset, ct: Option<&CellTable>) -> (Vec<(String, Vec<usize>)>, usize) {
    match ct {
        None => (vec![("all".to_string(), (0..ds.n()).collect())], 0),
        Some(ct) => {
            let retained = ct.retained();
            let mut slot = vec![usize::MAX; ct.len()];
            for (s, &c) in retained.iter().enumerate() {
                slot[c] = s;
            }
            let mut rows = vec![Vec::new(); retained.len()];
            for (i, &c) in ct.assignments().iter().enumerate() {
                if slot[c] != usize::MAX {
                    rows[slot[c]].push(i);
                }
            }
            let cells = retained
                .iter()
                .zip(rows)
                .map(|(&c, r)| (ct.cells()[c].label(), r))
                .collect();
            (cells, ct.len() - retained.len())
        }
    }
}

fn outcome_moment_test(
    test: ValidityTest,
    ds: &Dataset,
    ct: Option<&CellTable>,
    partition: &OutcomeSetPartition,
    reps: usize,
    seed: u64,
) -> Result<ValidityReport> {
    let nb = partition.bins();
    // local group index within a cell: (z, bin, d)
    let local = |z: usize, bin: usize, d: usize| (z * nb + bin) * 2 + d;
    let per_cell = 4 * nb;
    let (cells, mut skipped) = evaluation_cells(ds, ct);
    let mut sizes = vec![0usize; cells.len() * per_cell];
    let mut moments = Vec::new();
    for (slot, (label, rows)) in cells.iter().enumerate() {
        let base = slot * per_cell;
        for &i in rows {
            let g = local(
                ds.z()[i] as usize,
                partition.bin_of(ds.y()[i]),
                ds.d()[i] as usize,
            );
            sizes[base + g] += 1;
        }
        let cnt = &sizes[base..base + per_cell];
        let n_arm = [0, 1].map(|z| {
            (0..nb)
                .map(|b| cnt[local(z, b, 0)] + cnt[local(z, b, 1)])
                .sum::<usize>() as f64
        });
        if n_arm[0] == 0.0 || n_arm[1] == 0.0 {
            skipped += nb * (nb + 1) / 2;
            continue;
        }
        let n_cell = n_arm[0] + n_arm[1];
        for lo in 0..nb {
            for hi in lo..nb {
                let in_a = |b: usize| b >= lo && b <= hi;
                let count_a: usize = (lo..=hi)
                    .map(|b| (0..2).map(|z| cnt[local(z, b, 0)] + cnt[local(z, b, 1)]).sum::<usize>())
                    .sum();
                let p_a = count_a as f64 / n_cell;
                if test == ValidityTest::Mw && count_a == 0 {
                    skipped += 1;
                    continue;
                }
                // side 1: D=1, Z=1 minus Z=0; side 2: D=0, Z=0 minus Z=1
                for (side, d_sel, z_plus) in [(1usize, 1usize, 1usize), (2, 0, 0)] {
                    let z_minus = 1 - z_plus;
                    let share = |z: usize| {
                        (lo..=hi).map(|b| cnt[local(z, b, d_sel)]).sum::<usize>() as f64 / n_arm[z]
                    };
                    let (pp, pm) = (share(z_plus), share(z_minus));
                    let delta = pp - pm;
                    let mut coefs = vec![0.0; per_cell];
                    for z in 0..2 {
                        for b in 0..nb {
                            for d in 0..2 {
                                let hit = (in_a(b) && d == d_sel) as u8 as f64;
                                let c = if z == z_plus {
                                    (hit - pp) / n_arm[z]
                                } else {
                                    -(hit - pm) / n_arm[z]
                                };
                                coefs[local(z, b, d)] = c;
                            }
                        }
                    }
                    let estimate = if test == ValidityTest::Mw {
                        let m = delta / p_a;
                        for z in 0..2 {
                            for b in 0..nb {
                                let ip = ((in_a(b) as u8 as f64) - p_a) / n_cell;
                                for d in 0..2 {
                                    let g = local(z, b, d);
                                    coefs[g] = (coefs[g] - m * ip) / p_a;
                                }
                            }
                        }
                        m
                    } else {
                        delta
                    };
                    let what = if side == 1 { "D=1" } else { "D=0" };
                    moments.push(moment(
                        estimate,
                        base,
                        coefs,
                        &sizes,
                        format!(
                            "cell {label}, Y in {}, {what}",
                            partition.interval_label(lo, hi)
                        ),
                    ));
                }
            }
        }
    }
    run_bootstrap(test, &moments, &sizes, reps, seed, skipped)
}

/// Balke-Pearl inequalities over all intervals of `partition`, pooled or
/// within each non-degenerate cell of `ct`.
pub fn bp_test(
    ds: &Dataset,
    ct: Option<&CellTable>,
    partition: &OutcomeSetPartition,
    reps: usize,
    seed: u64,
) -> Result<ValidityReport> {
    outcome_moment_test(ValidityTest::Bp, ds, ct, partition, reps, seed)
}

/// The Balke-Pearl differences normalized by `P(Y in A | cell)`, within
/// each non-degenerate cell (a variant in the spirit of conditional moment
/// inequalities with `Y` as a conditioning variable).
pub fn mw_test(
    ds: &Dataset,
    ct: &CellTable,
    partition: &OutcomeSetPartition,
    reps: usize,
    seed: u64,
) -> Result<ValidityReport> {
    outcome_moment_test(ValidityTest::Mw, ds, Some(ct), partition, reps, seed)
}

/// Nonnegativity of the first stage in every cell whose instrument arms
/// meet the size minima (cells with a zero first stage included).
pub fn first_stage_nonneg_test(ct: &CellTable, reps: usize, seed: u64) -> Result<ValidityReport> {
    let retained = ct.testable();
    let mut sizes = Vec::with_capacity(4 * retained.len());
    let mut moments = Vec::new();
    for (slot, &c) in retained.iter().enumerate() {
        let cell = &ct.cells()[c];
        // groups (z, d)
        for z in 0..2 {
            for d in 0..2 {
                sizes.push(cell.n_zd[z][d]);
            }
        }
        let n1 = cell.n_arm[1] as f64;
        let n0 = cell.n_arm[0] as f64;
        let (m1, m0) = (cell.mean_d[1].unwrap(), cell.mean_d[0].unwrap());
        let coefs: Vec<f64> = [(0, 0.0), (0, 1.0), (1, 0.0), (1, 1.0)]
            .iter()
            .map(|&(z, d)| if z == 1 { (d - m1) / n1 } else { -(d - m0) / n0 })
            .collect();
        moments.push(moment(
            cell.pi.unwrap(),
            4 * slot,
            coefs,
            &sizes,
            format!("cell {}", cell.label()),
        ));
    }
    run_bootstrap(
        ValidityTest::Fs,
        &moments,
        &sizes,
        reps,
        seed,
        ct.len() - retained.len(),
    )
}
