#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ivlate::dgp::{CType, CellSpec, DgpSpec, OutcomeSpec};

/// Random valid spec with `j` cells: every type present, compliers at least 20%.
pub fn random_spec(rng: &mut ChaCha8Rng, j: usize) -> DgpSpec {
    let raw: Vec<f64> = (0..j).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let cells = raw
        .iter()
        .map(|r| {
            let c = rng.random_range(0.2..0.6);
            let a = rng.random_range(0.0..(1.0 - c) * 0.6);
            let types = BTreeMap::from([
                (CType::Complier, c),
                (CType::AlwaysTaker, a),
                (CType::NeverTaker, 1.0 - c - a),
            ]);
            let outcomes = CType::ALL
                .iter()
                .map(|&t| {
                    let y0 = rng.random_range(-1.0..1.0);
                    (
                        t,
                        OutcomeSpec {
                            y1_mean: y0 + rng.random_range(-2.0..4.0),
                            y0_mean: y0,
                            y1_sd: 1.0,
                            y0_sd: 1.0,
                        },
                    )
                })
                .collect();
            CellSpec {
                share: r / total,
                q: rng.random_range(0.25..0.75),
                types,
                outcomes,
            }
        })
        .collect();
    DgpSpec {
        cells,
        exclusion_shift: 0.0,
        allow_defiers: false,
        seed: None,
    }
}

pub fn dense_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible")
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, k, |_, j| {
        if j == 0 {
            1.0
        } else {
            rng.random_range(-2.0..2.0)
        }
    })
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}
