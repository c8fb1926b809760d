mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::random_spec;
use ivlate::cells::build_cells;
use ivlate::data::{Covariate, Dataset};
use ivlate::dgp::{generate, CType};
use ivlate::estimators::{
    decompose_weights, estimate_beta_ai, estimate_beta_iv, estimate_beta_late_saturated,
    weights_from_components, WeightFamily,
};
use ivlate::many_iv::{jive, ujive};
use ivlate::propensity::{fit_binary_index, ipw_late, Link};
use ivlate::regression::SeType;
use ivlate::reset::{reset_binary_index, reset_linear, DEFAULT_POWERS};
use ivlate::validity::{bp_test, mw_test, OutcomeSetPartition};

fn instance(seed: u64, j: usize, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_spec(&mut rng, j);
    generate(&spec, n, seed).unwrap().0
}

fn with_y(ds: &Dataset, y: Vec<f64>) -> Dataset {
    Dataset::new(y, ds.d().to_vec(), ds.z().to_vec(), ds.covariates().to_vec(), None).unwrap()
}

fn continuous_x(seed: u64, n: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z = x
        .iter()
        .map(|&v| rng.random_bool(1.0 / (1.0 + (-(0.2 + 0.9 * v)).exp())) as u8 as f64)
        .collect();
    (z, DMatrix::from_column_slice(n, 1, &x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dot_product_identities(seed in 0u64..1_000_000, j in 1usize..8, n in 200usize..800) {
        let ds = instance(seed, j, n);
        let ct = build_cells(&ds, 1, 3).unwrap();
        let wt = decompose_weights(&ct);
        let late = estimate_beta_late_saturated(&ds, &ct, SeType::Hc1).unwrap().estimate;
        let iv = estimate_beta_iv(&ds, &ct, SeType::Hc1).unwrap().estimate;
        let ai = estimate_beta_ai(&ds, &ct, SeType::Hc1).unwrap().estimate;
        prop_assert!((wt.implied(WeightFamily::Late).unwrap() - late).abs() < 1e-8);
        prop_assert!((wt.implied(WeightFamily::Iv).unwrap() - iv).abs() < 1e-8);
        prop_assert!((wt.implied(WeightFamily::Ai).unwrap() - ai).abs() < 1e-8);
        for fam in [WeightFamily::Late, WeightFamily::Iv, WeightFamily::Ai] {
            let s: f64 = wt.weights(fam).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn ai_weights_never_negative(
        comps in prop::collection::vec((0.01f64..1.0, 0.01f64..0.25, -1.0f64..1.0, -5.0f64..5.0), 1..10)
    ) {
        let c: Vec<_> = comps.iter().enumerate().map(|(k, &(p, v, pi, t))| (k, p, v, pi, t)).collect();
        let wt = weights_from_components(&c);
        if let Some(w) = wt.weights(WeightFamily::Ai) {
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }
        if comps.iter().all(|c| c.2 >= 0.0) {
            if let Some(w) = wt.weights(WeightFamily::Late) {
                prop_assert!(w.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn outcome_affine_equivariance(seed in 0u64..1_000_000, a in -3.0f64..3.0, b in -10.0f64..10.0) {
        prop_assume!(a.abs() > 0.1);
        let ds = instance(seed, 3, 400);
        let ds2 = with_y(&ds, ds.y().iter().map(|y| a * y + b).collect());
        let ct = build_cells(&ds, 1, 3).unwrap();
        let ct2 = build_cells(&ds2, 1, 3).unwrap();
        let pairs = [
            (estimate_beta_late_saturated(&ds, &ct, SeType::Hc1).unwrap().estimate,
             estimate_beta_late_saturated(&ds2, &ct2, SeType::Hc1).unwrap().estimate),
            (estimate_beta_iv(&ds, &ct, SeType::Hc1).unwrap().estimate,
             estimate_beta_iv(&ds2, &ct2, SeType::Hc1).unwrap().estimate),
            (estimate_beta_ai(&ds, &ct, SeType::Hc1).unwrap().estimate,
             estimate_beta_ai(&ds2, &ct2, SeType::Hc1).unwrap().estimate),
        ];
        for (e, e2) in pairs {
            prop_assert!((a * e - e2).abs() < 1e-8 * (1.0 + e2.abs()));
        }
    }

    #[test]
    fn homogeneous_effects_collapse(seed in 0u64..1_000_000, c in -4.0f64..4.0) {
        let ds = instance(seed, 4, 500);
        let ct = build_cells(&ds, 1, 3).unwrap();
        // outcome = cell level + c * d, so every cell Wald ratio is exactly c
        let y: Vec<f64> = (0..ds.n())
            .map(|i| ct.assignments()[i] as f64 * 0.7 + c * ds.d()[i])
            .collect();
        let ds = with_y(&ds, y);
        let ct = build_cells(&ds, 1, 3).unwrap();
        let late = estimate_beta_late_saturated(&ds, &ct, SeType::Hc1).unwrap().estimate;
        let iv = estimate_beta_iv(&ds, &ct, SeType::Hc1).unwrap().estimate;
        let ai = estimate_beta_ai(&ds, &ct, SeType::Hc1).unwrap().estimate;
        prop_assert!((late - c).abs() < 1e-10);
        prop_assert!((iv - c).abs() < 1e-10);
        prop_assert!((ai - c).abs() < 1e-10);
    }

    #[test]
    fn cells_are_permutation_invariant(seed in 0u64..1_000_000) {
        let ds = instance(seed, 5, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut rows: Vec<usize> = (0..ds.n()).collect();
        for i in (1..rows.len()).rev() {
            rows.swap(i, rng.random_range(0..=i));
        }
        let a = build_cells(&ds, 1, 3).unwrap();
        let b = build_cells(&ds.subset(&rows), 1, 3).unwrap();
        prop_assert_eq!(a.cells().len(), b.cells().len());
        for (x, y) in a.cells().iter().zip(b.cells()) {
            prop_assert_eq!(&x.key, &y.key);
            prop_assert_eq!(x.n_zd, y.n_zd);
            prop_assert!((x.var_z - y.var_z).abs() < 1e-15);
            prop_assert!((x.mean_y[1].unwrap() - y.mean_y[1].unwrap()).abs() < 1e-12);
        }
        let total: f64 = a.cells().iter().map(|c| c.p).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for c in a.cells() {
            let q = c.n_arm[1] as f64 / c.n as f64;
            prop_assert!((c.var_z - q * (1.0 - q)).abs() < 1e-12);
        }
        prop_assert!((jive(&ds, &a, SeType::Hc1).unwrap().estimate
            - jive(&ds.subset(&rows), &b, SeType::Hc1).unwrap().estimate).abs() < 1e-9);
        prop_assert!((ujive(&ds, &a, SeType::Hc1).unwrap().estimate
            - ujive(&ds.subset(&rows), &b, SeType::Hc1).unwrap().estimate).abs() < 1e-9);
    }

    #[test]
    fn lr_statistic_nonnegative(seed in 0u64..1_000_000) {
        let (z, x) = continuous_x(seed, 300);
        for link in [Link::Logit, Link::Probit] {
            let pf = fit_binary_index(&z, &x, link).unwrap();
            let r = reset_binary_index(&pf, &z, &x, &DEFAULT_POWERS).unwrap();
            prop_assert!(r.statistic >= 0.0);
            if let Some(p) = r.p_value {
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn linear_reset_invariant_to_rescaling(seed in 0u64..1_000_000, a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let (z, x) = continuous_x(seed, 300);
        let r1 = reset_linear(&z, &x, &DEFAULT_POWERS).unwrap();
        let x2 = x.map(|v| a * v + b);
        let r2 = reset_linear(&z, &x2, &DEFAULT_POWERS).unwrap();
        prop_assert!((r1.statistic - r2.statistic).abs() < 1e-8 * (1.0 + r1.statistic));
    }

    #[test]
    fn tighter_trim_never_uses_more_rows(seed in 0u64..1_000_000, lo in 0.0f64..0.3, hi in 0.7f64..1.0, s in 0.0f64..0.15) {
        let (z, x) = continuous_x(seed, 400);
        let ds = Dataset::new(
            z.iter().map(|v| v * 2.0).collect(),
            z.iter().enumerate().map(|(i, v)| if i % 3 == 0 { 1.0 - v } else { *v }).collect(),
            z.clone(),
            vec![Covariate::new("x", x.column(0).iter().copied().collect())],
            None,
        ).unwrap();
        let pf = fit_binary_index(&z, &x, Link::Logit).unwrap();
        let wide = ipw_late(&ds, &pf, (lo, hi));
        let narrow = ipw_late(&ds, &pf, (lo + s, hi - s));
        if let (Ok(w), Ok(n)) = (wide, narrow) {
            prop_assert!(n.n_used <= w.n_used);
        }
    }

    #[test]
    fn refining_cuts_never_lowers_statistic(seed in 0u64..1_000_000, extra in -2.0f64..4.0) {
        let ds = instance(seed, 2, 400);
        let ct = build_cells(&ds, 1, 3).unwrap();
        let base = OutcomeSetPartition::deciles(ds.y()).unwrap();
        let mut cuts = base.cut_points().to_vec();
        if cuts.iter().all(|c| (c - extra).abs() > 1e-9) {
            cuts.push(extra);
            cuts.sort_by(f64::total_cmp);
        }
        let finer = OutcomeSetPartition::new(cuts).unwrap();
        let a = bp_test(&ds, Some(&ct), &base, 9, 1).unwrap();
        let b = bp_test(&ds, Some(&ct), &finer, 9, 1).unwrap();
        prop_assert!(b.statistic >= a.statistic - 1e-12);
        let a = mw_test(&ds, &ct, &base, 9, 1).unwrap();
        let b = mw_test(&ds, &ct, &finer, 9, 1).unwrap();
        prop_assert!(b.statistic >= a.statistic - 1e-12);
    }

    #[test]
    fn exclusion_is_encoded_in_latent_table(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng, 3);
        let (_, lt) = generate(&spec, 300, seed).unwrap();
        for u in &lt.units {
            // with no shift the observed outcome is a function of d alone
            prop_assert_eq!(u.y, if u.d == 1 { u.y1 } else { u.y0 });
            let (d1, d0) = u.ctype.potential_treatments();
            prop_assert_eq!((u.d1, u.d0), (d1, d0));
            prop_assert_eq!(u.ctype == CType::Complier, (d1, d0) == (1, 0));
        }
    }
}

#[test]
fn balke_pearl_differences_identify_complier_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let spec = random_spec(&mut rng, 1);
    let n = 200_000;
    let (ds, lt) = generate(&spec, n, 5).unwrap();
    let a = (-0.5, 1.5);
    let in_a = |v: f64| v >= a.0 && v < a.1;
    let arm = |z: f64, d: f64| {
        let rows: Vec<usize> = (0..n).filter(|&i| ds.z()[i] == z).collect();
        rows.iter().filter(|&&i| ds.d()[i] == d && in_a(ds.y()[i])).count() as f64 / rows.len() as f64
    };
    let delta1 = arm(1.0, 1.0) - arm(0.0, 1.0);
    let delta2 = arm(0.0, 0.0) - arm(1.0, 0.0);
    let comp = |f: &dyn Fn(&ivlate::dgp::SyntheticUnit) -> f64| {
        lt.units.iter().filter(|u| u.ctype == CType::Complier && in_a(f(u))).count() as f64 / n as f64
    };
    let t1 = comp(&|u| u.y1);
    let t0 = comp(&|u| u.y0);
    // binomial standard errors of a difference of proportions at this n are below 0.003
    assert!((delta1 - t1).abs() < 0.01, "{delta1} {t1}");
    assert!((delta2 - t0).abs() < 0.01, "{delta2} {t0}");
}
