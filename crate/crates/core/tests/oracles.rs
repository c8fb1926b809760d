mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{dense_inverse, random_matrix, random_spec, rel_close};
use ivlate::cells::build_cells;
use ivlate::dgp::generate;
use ivlate::estimators::estimate_beta_late_saturated;
use ivlate::many_iv::{jive, jive_design, ujive, ujive_design, IvDesign};
use ivlate::propensity::{fit_binary_index, ipw_late, loglik_score, Link, DEFAULT_TRIM};
use ivlate::regression::{hat_diagonals, ols, tsls, SeType};

fn hc1(regs: &DMatrix<f64>, e: &DVector<f64>, bread: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = regs.shape();
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..n {
        let r = regs.row(i).transpose() * e[i];
        meat += &r * r.transpose();
    }
    bread * meat * bread * (n as f64 / (n - p) as f64)
}

#[test]
fn ols_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(20..200);
        let k = rng.random_range(1..6);
        let x = random_matrix(&mut rng, n, k);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fit = ols(&y, &x, SeType::Hc1, None).unwrap();
        let bread = dense_inverse(&(x.transpose() * &x));
        let yv = DVector::from_column_slice(&y);
        let b = &bread * x.transpose() * &yv;
        let e = &yv - &x * &b;
        let v = hc1(&x, &e, &bread);
        for j in 0..k {
            assert!(rel_close(fit.coefficients[j], b[j], 1e-8));
            assert!(rel_close(fit.se(j), v[(j, j)].sqrt(), 1e-8));
        }
    }
}

#[test]
fn tsls_matches_projection_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let n = rng.random_range(40..200);
        let kx = rng.random_range(1..4);
        let kz = rng.random_range(1..4);
        let x = random_matrix(&mut rng, n, kx);
        let zi = DMatrix::from_fn(n, kz, |_, _| rng.random_range(-1.0..1.0));
        let d: Vec<f64> = (0..n)
            .map(|i| zi.row(i).sum() + rng.random_range(-1.0..1.0))
            .collect();
        let y: Vec<f64> = (0..n).map(|i| 0.5 * d[i] + rng.random_range(-1.0..1.0)).collect();
        let fit = tsls(&y, &x, &d, &zi, SeType::Hc1, None).unwrap();

        let mut w = DMatrix::zeros(n, kx + kz);
        w.columns_mut(0, kx).copy_from(&x);
        w.columns_mut(kx, kz).copy_from(&zi);
        let pw = &w * dense_inverse(&(w.transpose() * &w)) * w.transpose();
        let mut xd = DMatrix::zeros(n, kx + 1);
        xd.columns_mut(0, kx).copy_from(&x);
        xd.set_column(kx, &DVector::from_column_slice(&d));
        let xh = &pw * &xd;
        let bread = dense_inverse(&(xh.transpose() * &xh));
        let yv = DVector::from_column_slice(&y);
        let b = &bread * xh.transpose() * &yv;
        let e = &yv - &xd * &b;
        let v = hc1(&xh, &e, &bread);
        for j in 0..=kx {
            assert!(rel_close(fit.coefficients[j], b[j], 1e-8));
            assert!(rel_close(fit.se(j), v[(j, j)].sqrt(), 1e-8));
        }
    }
}

#[test]
fn hat_diagonals_match_dense_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let n = rng.random_range(10..120);
        let k = rng.random_range(1..6);
        let x = random_matrix(&mut rng, n, k);
        let h = hat_diagonals(&x).unwrap();
        let p = &x * dense_inverse(&(x.transpose() * &x)) * x.transpose();
        for i in 0..n {
            assert!((h[i] - p[(i, i)]).abs() < 1e-8);
        }
    }
}

fn logit_sample(rng: &mut ChaCha8Rng, n: usize, b: [f64; 2]) -> (Vec<f64>, DMatrix<f64>) {
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z = x
        .iter()
        .map(|&v| (rng.random::<f64>() < 1.0 / (1.0 + (-(b[0] + b[1] * v)).exp())) as u8 as f64)
        .collect();
    (z, DMatrix::from_column_slice(n, 1, &x))
}

#[test]
fn analytic_score_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (z, x1) = logit_sample(&mut rng, 150, [0.3, -0.8]);
    let x = x1.insert_column(0, 1.0);
    for link in [Link::Logit, Link::Probit] {
        for _ in 0..10 {
            let b = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let (_, score) = loglik_score(link, &z, &x, &b);
            for j in 0..2 {
                let h = 1e-6;
                let mut up = b;
                let mut dn = b;
                up[j] += h;
                dn[j] -= h;
                let fd = (loglik_score(link, &z, &x, &up).0 - loglik_score(link, &z, &x, &dn).0)
                    / (2.0 * h);
                assert!(
                    (fd - score[j]).abs() <= 1e-5 * score[j].abs().max(1.0),
                    "{link:?} {fd} {}",
                    score[j]
                );
            }
        }
    }
}

#[test]
fn logit_fit_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (z, x1) = logit_sample(&mut rng, 200, [0.4, 1.1]);
    let fit = fit_binary_index(&z, &x1, Link::Logit).unwrap();
    let x = x1.clone().insert_column(0, 1.0);
    let step = 0.01;
    let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
    for a in 0..=400 {
        for c in 0..=400 {
            let b = [-2.0 + a as f64 * step, -1.0 + c as f64 * step];
            let (ll, _) = loglik_score(Link::Logit, &z, &x, &b);
            if ll > best.0 {
                best = (ll, b);
            }
        }
    }
    for j in 0..2 {
        assert!((fit.coefficients[j] - best.1[j]).abs() <= step, "{:?} {:?}", fit.coefficients, best.1);
    }
    assert!(fit.loglik >= best.0);
}

/// Leave-one-out fitted value by actually refitting without row `i`.
fn refit_loo(w: &DMatrix<f64>, d: &[f64]) -> Vec<f64> {
    let n = d.len();
    (0..n)
        .map(|i| {
            let keep: Vec<usize> = (0..n).filter(|&r| r != i).collect();
            let wi = w.select_rows(keep.iter());
            let di = DVector::from_iterator(n - 1, keep.iter().map(|&r| d[r]));
            let b = dense_inverse(&(wi.transpose() * &wi)) * wi.transpose() * di;
            (w.row(i) * b)[(0, 0)]
        })
        .collect()
}

#[test]
fn jackknife_closed_forms_match_refitting() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..10 {
        let n = rng.random_range(60..200);
        let exog = random_matrix(&mut rng, n, 3);
        let inst = DMatrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0));
        let d: Vec<f64> = (0..n).map(|i| inst.row(i).sum() + rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|i| d[i] + rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<usize> = (0..n).collect();
        let dz = IvDesign {
            y: &y,
            d: &d,
            exog: &exog,
            instruments: &inst,
            cluster: None,
            rows: &rows,
        };
        let mut w = DMatrix::zeros(n, 7);
        w.columns_mut(0, 3).copy_from(&exog);
        w.columns_mut(3, 4).copy_from(&inst);
        let loo_w = refit_loo(&w, &d);
        let loo_x = refit_loo(&exog, &d);
        let col = |v: &[f64]| DMatrix::from_column_slice(n, 1, v);
        let j_oracle = tsls(&y, &exog, &d, &col(&loo_w), SeType::Hc1, None).unwrap().last().0;
        let u_inst: Vec<f64> = loo_w.iter().zip(&loo_x).map(|(a, b)| a - b).collect();
        let u_oracle = tsls(&y, &exog, &d, &col(&u_inst), SeType::Hc1, None).unwrap().last().0;
        assert!((jive_design(&dz, SeType::Hc1).unwrap().estimate - j_oracle).abs() < 1e-6);
        assert!((ujive_design(&dz, SeType::Hc1).unwrap().estimate - u_oracle).abs() < 1e-6);
    }
}

#[test]
fn jackknife_on_cells_matches_refitting() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let spec = random_spec(&mut rng, 4);
    let (ds, _) = generate(&spec, 180, 3).unwrap();
    let ct = build_cells(&ds, 1, 3).unwrap();
    let rd = ct.retained_design(&ds);
    let inst = rd.interactions();
    let m = rd.y.len();
    let mut w = DMatrix::zeros(m, 2 * rd.cells.len());
    w.columns_mut(0, rd.cells.len()).copy_from(&rd.dummies);
    w.columns_mut(rd.cells.len(), rd.cells.len()).copy_from(&inst);
    let loo_w = refit_loo(&w, &rd.d);
    let col = DMatrix::from_column_slice(m, 1, &loo_w);
    let oracle = tsls(&rd.y, &rd.dummies, &rd.d, &col, SeType::Hc1, None).unwrap().last().0;
    assert!((jive(&ds, &ct, SeType::Hc1).unwrap().estimate - oracle).abs() < 1e-6);
    let loo_x = refit_loo(&rd.dummies, &rd.d);
    let u: Vec<f64> = loo_w.iter().zip(&loo_x).map(|(a, b)| a - b).collect();
    let col = DMatrix::from_column_slice(m, 1, &u);
    let oracle = tsls(&rd.y, &rd.dummies, &rd.d, &col, SeType::Hc1, None).unwrap().last().0;
    assert!((ujive(&ds, &ct, SeType::Hc1).unwrap().estimate - oracle).abs() < 1e-6);
}

#[test]
fn ujive_without_covariates_is_close_to_jive() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let n = 4000;
    let z: Vec<f64> = (0..n).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
    let d: Vec<f64> = z
        .iter()
        .map(|&zz| rng.random_bool(0.2 + 0.5 * zz) as u8 as f64)
        .collect();
    let y: Vec<f64> = d.iter().map(|&dd| 2.0 * dd + rng.random_range(-1.0..1.0)).collect();
    let ones = DMatrix::from_element(n, 1, 1.0);
    let zi = DMatrix::from_column_slice(n, 1, &z);
    let rows: Vec<usize> = (0..n).collect();
    let dz = IvDesign {
        y: &y,
        d: &d,
        exog: &ones,
        instruments: &zi,
        cluster: None,
        rows: &rows,
    };
    let j = jive_design(&dz, SeType::Hc1).unwrap();
    let u = ujive_design(&dz, SeType::Hc1).unwrap();
    // the covariate-projection term differs from the mean adjustment by O(1/n)
    assert!((j.estimate - u.estimate).abs() < 10.0 / n as f64, "{} {}", j.estimate, u.estimate);
    assert!(rel_close(j.estimate, 2.0, 0.1));
}

#[test]
fn jive_close_to_tsls_with_one_strong_instrument() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let n = 20000;
    let z: Vec<f64> = (0..n).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
    let d: Vec<f64> = z.iter().map(|&zz| rng.random_bool(0.1 + 0.7 * zz) as u8 as f64).collect();
    let y: Vec<f64> = d.iter().map(|&dd| 1.5 * dd + rng.random_range(-1.0..1.0)).collect();
    let ones = DMatrix::from_element(n, 1, 1.0);
    let zi = DMatrix::from_column_slice(n, 1, &z);
    let rows: Vec<usize> = (0..n).collect();
    let dz = IvDesign {
        y: &y,
        d: &d,
        exog: &ones,
        instruments: &zi,
        cluster: None,
        rows: &rows,
    };
    let t = ivlate::many_iv::tsls_design(&dz, SeType::Hc1).unwrap();
    let j = jive_design(&dz, SeType::Hc1).unwrap();
    assert!((j.estimate - t.estimate).abs() <= 0.01 * t.estimate.abs());
}

#[test]
fn saturated_ipw_equals_cell_late() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for rep in 0..10 {
        let j = rng.random_range(2..6);
        let spec = random_spec(&mut rng, j);
        let (ds, _) = generate(&spec, 1500, rep).unwrap();
        let ct = build_cells(&ds, 1, 1).unwrap();
        assert_eq!(ct.retained().len(), ct.len());
        let x = DMatrix::from_fn(ds.n(), ct.len(), |i, c| (ct.assignments()[i] == c) as u8 as f64);
        let pf = fit_binary_index(ds.z(), &x, Link::Logit).unwrap();
        let ipw = ipw_late(&ds, &pf, DEFAULT_TRIM).unwrap();
        let sat = estimate_beta_late_saturated(&ds, &ct, SeType::Hc1).unwrap();
        assert!((ipw.estimate - sat.estimate).abs() < 1e-8);
    }
}
