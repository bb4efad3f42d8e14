use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sizes for a `(train, val, test)` split of `n` items: floor each share,
/// then hand the remainder out by largest fractional part (earlier split
/// first on ties).
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<[usize; 3]> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|&x| !(x > 0.0) || !x.is_finite()) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {f:?} must be positive and sum to 1"
        )));
    }
    let exact: Vec<f64> = f.iter().map(|x| x * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        // guard against 0.1 * 10 = 0.9999.. style representation error
        *s = (e + 1e-9).floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = n.saturating_sub(sizes.iter().sum());
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    Ok(sizes)
}

/// Patient-level shuffled split, deterministic in `seed`.
pub fn split_cohort<T: Clone>(
    cohort: &[T],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let [n_train, n_val, _] = split_sizes(cohort.len(), fractions)?;
    let mut idx: Vec<usize> = (0..cohort.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: &[usize]| range.iter().map(|&i| cohort[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&idx[..n_train]),
        pick(&idx[n_train..n_train + n_val]),
        pick(&idx[n_train + n_val..]),
    ))
}
