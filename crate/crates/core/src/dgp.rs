//! Synthetic stratified experiments with known compliance types, and the
//! brute-force truths they imply.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Covariate, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{weights_from_components, WeightTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CType {
    AlwaysTaker,
    NeverTaker,
    Complier,
    Defier,
}

impl CType {
    pub const ALL: [CType; 4] = [
        CType::AlwaysTaker,
        CType::NeverTaker,
        CType::Complier,
        CType::Defier,
    ];

    /// `(D(1), D(0))`.
    pub fn potential_treatments(self) -> (u8, u8) {
        match self {
            CType::AlwaysTaker => (1, 1),
            CType::NeverTaker => (0, 0),
            CType::Complier => (1, 0),
            CType::Defier => (0, 1),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CType::AlwaysTaker => "always_taker",
            CType::NeverTaker => "never_taker",
            CType::Complier => "complier",
            CType::Defier => "defier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OutcomeSpec {
    #[serde(default)]
    pub y1_mean: f64,
    #[serde(default)]
    pub y0_mean: f64,
    #[serde(default)]
    pub y1_sd: f64,
    #[serde(default)]
    pub y0_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub share: f64,
    /// P(Z = 1 | cell).
    pub q: f64,
    /// Type shares; missing types have share zero.
    pub types: BTreeMap<CType, f64>,
    /// Potential-outcome distribution by type; missing types are all zero.
    #[serde(default)]
    pub outcomes: BTreeMap<CType, OutcomeSpec>,
}

impl CellSpec {
    fn type_share(&self, t: CType) -> f64 {
        self.types.get(&t).copied().unwrap_or(0.0)
    }

    fn outcome(&self, t: CType) -> OutcomeSpec {
        self.outcomes.get(&t).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub cells: Vec<CellSpec>,
    /// Added to the observed outcome of never-takers assigned z = 1.
    #[serde(default)]
    pub exclusion_shift: f64,
    #[serde(default)]
    pub allow_defiers: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl DgpSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let f = File::open(path.as_ref())?;
        let spec: DgpSpec = serde_json::from_reader(f)
            .map_err(|e| Error::Config(format!("DGP spec {}: {e}", path.as_ref().display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("DGP spec has no cells".into()));
        }
        let total: f64 = self.cells.iter().map(|c| c.share).sum();
        if (total - 1.0).abs() > 1e-9 || self.cells.iter().any(|c| c.share < 0.0) {
            return Err(Error::Config(format!("cell shares must be nonnegative and sum to 1, got {total}")));
        }
        for (j, c) in self.cells.iter().enumerate() {
            if !(c.q > 0.0 && c.q < 1.0) {
                return Err(Error::Config(format!("cell {j}: q = {} not in (0, 1)", c.q)));
            }
            let s: f64 = CType::ALL.iter().map(|&t| c.type_share(t)).sum();
            if (s - 1.0).abs() > 1e-9 || CType::ALL.iter().any(|&t| c.type_share(t) < 0.0) {
                return Err(Error::Config(format!("cell {j}: type shares must sum to 1, got {s}")));
            }
            if !self.allow_defiers && c.type_share(CType::Defier) > 0.0 {
                return Err(Error::Config(format!(
                    "cell {j} has defiers but allow_defiers is false"
                )));
            }
            for o in c.outcomes.values() {
                if o.y1_sd < 0.0 || o.y0_sd < 0.0 {
                    return Err(Error::Config(format!("cell {j}: negative outcome sd")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUnit {
    pub cell: usize,
    pub ctype: CType,
    pub y1: f64,
    pub y0: f64,
    pub d1: u8,
    pub d0: u8,
    pub z: u8,
    pub d: u8,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTable {
    pub units: Vec<SyntheticUnit>,
}

impl LatentTable {
    pub fn cells(&self) -> usize {
        self.units.iter().map(|u| u.cell + 1).max().unwrap_or(0)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["cell", "ctype", "z", "d1", "d0", "d", "y1", "y0", "y"])?;
        for u in &self.units {
            w.write_record([
                u.cell.to_string(),
                u.ctype.label().to_string(),
                u.z.to_string(),
                u.d1.to_string(),
                u.d0.to_string(),
                u.d.to_string(),
                format!("{}", u.y1),
                format!("{}", u.y0),
                format!("{}", u.y),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Observable sample with the cell index as the single covariate `cell`.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let col = |f: &dyn Fn(&SyntheticUnit) -> f64| self.units.iter().map(f).collect::<Vec<_>>();
        Dataset::new(
            col(&|u| u.y),
            col(&|u| u.d as f64),
            col(&|u| u.z as f64),
            vec![Covariate::new("cell", col(&|u| u.cell as f64))],
            None,
        )
    }
}

/// Deterministic allocation of `n` units to cells by largest remainder.
pub fn allocate(shares: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[j] += 1;
        left -= 1;
    }
    counts
}

fn draw_type(c: &CellSpec, u: f64) -> CType {
    let mut acc = 0.0;
    for t in CType::ALL {
        acc += c.type_share(t);
        if u < acc {
            return t;
        }
    }
    // rounding slack: last type with positive share
    *CType::ALL.iter().rev().find(|&&t| c.type_share(t) > 0.0).unwrap()
}

/// Draw `n` units. Each unit uses its own ChaCha8 stream of the root seed.
pub fn generate(spec: &DgpSpec, n: usize, seed: u64) -> Result<(Dataset, LatentTable)> {
    spec.validate()?;
    if n < spec.cells.len() {
        return Err(Error::Config(format!(
            "n = {n} is smaller than the number of cells {}",
            spec.cells.len()
        )));
    }
    let shares: Vec<f64> = spec.cells.iter().map(|c| c.share).collect();
    let counts = allocate(&shares, n);
    let cell_of: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(j, &k)| std::iter::repeat_n(j, k))
        .collect();
    let units: Vec<SyntheticUnit> = cell_of
        .par_iter()
        .enumerate()
        .map(|(i, &j)| {
            let c = &spec.cells[j];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let z = (rng.random::<f64>() < c.q) as u8;
            let ctype = draw_type(c, rng.random::<f64>());
            let o = c.outcome(ctype);
            let e1: f64 = rng.sample(StandardNormal);
            let e0: f64 = rng.sample(StandardNormal);
            let y1 = o.y1_mean + o.y1_sd * e1;
            let y0 = o.y0_mean + o.y0_sd * e0;
            let (d1, d0) = ctype.potential_treatments();
            let d = if z == 1 { d1 } else { d0 };
            let mut y = if d == 1 { y1 } else { y0 };
            if ctype == CType::NeverTaker && z == 1 {
                y += spec.exclusion_shift;
            }
            SyntheticUnit {
                cell: j,
                ctype,
                y1,
                y0,
                d1,
                d0,
                z,
                d,
                y,
            }
        })
        .collect();
    let latent = LatentTable { units };
    Ok((latent.to_dataset()?, latent))
}

/// Mean of `y1 - y0` over compliers.
pub fn brute_force_late(latent: &LatentTable) -> Result<f64> {
    let (s, k) = latent
        .units
        .iter()
        .filter(|u| u.ctype == CType::Complier)
        .fold((0.0, 0usize), |(s, k), u| (s + u.y1 - u.y0, k + 1));
    if k == 0 {
        return Err(Error::Identification("latent table has no compliers".into()));
    }
    Ok(s / k as f64)
}

/// Finite-population weights: `p_j`, net complier share `pi_j`,
/// `q_j (1 - q_j)` from the realized assignment share, and `tau_j` as the
/// complier-minus-defier mean effect ratio. Cells with `pi_j = 0` or a
/// constant instrument are left out.
pub fn brute_force_weights(latent: &LatentTable) -> Result<WeightTable> {
    let n = latent.units.len() as f64;
    let j = latent.cells();
    let mut count = vec![0usize; j];
    let mut z1 = vec![0usize; j];
    let mut net = vec![0i64; j];
    let mut net_effect = vec![0.0f64; j];
    for u in &latent.units {
        count[u.cell] += 1;
        z1[u.cell] += u.z as usize;
        match u.ctype {
            CType::Complier => {
                net[u.cell] += 1;
                net_effect[u.cell] += u.y1 - u.y0;
            }
            CType::Defier => {
                net[u.cell] -= 1;
                net_effect[u.cell] -= u.y1 - u.y0;
            }
            _ => {}
        }
    }
    let comps: Vec<_> = (0..j)
        .filter(|&c| count[c] > 0 && net[c] != 0 && z1[c] > 0 && z1[c] < count[c])
        .map(|c| {
            let nj = count[c] as f64;
            let q = z1[c] as f64 / nj;
            (
                c,
                nj / n,
                q * (1.0 - q),
                net[c] as f64 / nj,
                net_effect[c] / net[c] as f64,
            )
        })
        .collect();
    if comps.is_empty() {
        return Err(Error::Identification(
            "no cell has a nonzero net complier share".into(),
        ));
    }
    Ok(weights_from_components(&comps))
}

/// Constructed samples with known statistics.
pub mod fixtures {
    use super::*;

    /// Per cell: wave label, treated outcomes (z = 1), untreated outcomes with z = 1,
    /// outcomes with z = 0 (all untreated).
    type ArmSpec = (f64, Vec<f64>, Vec<f64>, Vec<f64>);

    fn table2_arms() -> Vec<ArmSpec> {
        vec![
            (
                1.0,
                vec![2., 2., 1., 1., 1.],
                vec![1., 1., 0., 0., 0., 0.],
                vec![1., 0., 0.],
            ),
            (
                2.0,
                vec![6., 5., 5., 4., 4., 3., 3.],
                [vec![1.0; 12], vec![0.0; 6]].concat(),
                vec![0.],
            ),
            (3.0, vec![5., 4., 4., 3.], vec![1.0; 12], vec![1., 0.]),
        ]
    }

    /// 58 observations in three `wave` cells, one-sided noncompliance.
    ///
    /// Cell statistics: n = 14/26/18, `Var(Z|cell)` = 33/196, 25/676, 32/324,
    /// `pi` = 5/11, 7/25, 1/4 and `tau` = 16/15, 6, 5. The z = 0 arms of the
    /// second and third cells have one and two observations, so build cells
    /// with `min_arm_size = 1`.
    pub fn table2_dataset() -> Dataset {
        let (mut y, mut d, mut z, mut w) = (vec![], vec![], vec![], vec![]);
        for (wave, treated, untreated1, arm0) in table2_arms() {
            for (vals, dv, zv) in [(&treated, 1.0, 1.0), (&untreated1, 0.0, 1.0), (&arm0, 0.0, 0.0)] {
                for &v in vals {
                    y.push(v);
                    d.push(dv);
                    z.push(zv);
                    w.push(wave);
                }
            }
        }
        Dataset::new(y, d, z, vec![Covariate::new("wave", w)], None).unwrap()
    }

    /// Finite population (n = 31900) whose cell shares, realized `Var(Z|cell)`,
    /// complier shares and complier effects equal those of [`table2_dataset`].
    /// Compliers appear in equal proportion in both arms; effects are constant
    /// within a cell.
    pub fn table2_population() -> LatentTable {
        // (cell size, z = 1 count, compliers, effect)
        let cells: [(usize, usize, usize, f64); 3] = [
            (7700, 6050, 3500, 16.0 / 15.0),
            (14300, 13750, 4004, 6.0),
            (9900, 8800, 2475, 5.0),
        ];
        let mut units = Vec::with_capacity(31900);
        for (j, &(nj, n1, nc, tau)) in cells.iter().enumerate() {
            let c1 = nc * n1 / nj;
            let c0 = nc - c1;
            for arm in [1u8, 0] {
                let (size, compliers) = if arm == 1 { (n1, c1) } else { (nj - n1, c0) };
                for k in 0..size {
                    let ctype = if k < compliers {
                        CType::Complier
                    } else {
                        CType::NeverTaker
                    };
                    let (d1, d0) = ctype.potential_treatments();
                    let y1 = if ctype == CType::Complier { tau } else { 0.0 };
                    let d = if arm == 1 { d1 } else { d0 };
                    units.push(SyntheticUnit {
                        cell: j,
                        ctype,
                        y1,
                        y0: 0.0,
                        d1,
                        d0,
                        z: arm,
                        d,
                        y: if d == 1 { y1 } else { 0.0 },
                    });
                }
            }
        }
        LatentTable { units }
    }
}
