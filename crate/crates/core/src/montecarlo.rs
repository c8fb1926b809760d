//! Seeded Monte Carlo replication. Simulation `s` draws from stream `s` of a
//! ChaCha8 generator keyed by the root seed, so results do not depend on
//! thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub fn sim_rng(seed: u64, sim: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sim as u64);
    rng
}

/// Run `f(sim, rng)` for `sims` replications in parallel, results in order.
pub fn replicate<T, F>(sims: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> T + Sync,
{
    (0..sims)
        .into_par_iter()
        .map(|s| f(s, &mut sim_rng(seed, s)))
        .collect()
}

/// Share of p-values strictly below `alpha`; undefined p-values count as non-rejections.
pub fn rejection_rate(p_values: &[Option<f64>], alpha: f64) -> f64 {
    let k = p_values.iter().filter(|p| matches!(p, Some(v) if *v < alpha)).count();
    k as f64 / p_values.len() as f64
}

/// Mean and Monte Carlo standard error of the mean.
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
