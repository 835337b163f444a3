//! Deterministic summation.

const LEAF: usize = 64;
const PAR_THRESHOLD: usize = 1 << 15;

/// Sums `term(i)` for `i in 0..n` with a fixed binary tree over the index range.
///
/// The tree shape depends only on `n`, so the result is bit-identical whatever
/// the rayon pool size; large ranges split their halves across threads.
pub fn pairwise_sum<F>(n: usize, term: &F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    sum_range(0, n, term)
}

fn sum_range<F>(lo: usize, hi: usize, term: &F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let n = hi - lo;
    if n <= LEAF {
        return (lo..hi).map(term).fold(0.0, |a, b| a + b);
    }
    let mid = lo + n / 2;
    if n >= PAR_THRESHOLD {
        let (a, b) = rayon::join(|| sum_range(lo, mid, term), || sum_range(mid, hi, term));
        a + b
    } else {
        sum_range(lo, mid, term) + sum_range(mid, hi, term)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_exact_integer_sums() {
        for n in [0usize, 1, 63, 64, 65, 1000, 100_000] {
            let s = pairwise_sum(n, &|i| i as f64);
            assert_eq!(s, (n * n.saturating_sub(1) / 2) as f64);
        }
    }

    #[test]
    fn independent_of_pool_size() {
        let term = |i: usize| ((i as f64) * 0.37).sin() * 1e-3;
        let n = 200_000;
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = one.install(|| pairwise_sum(n, &term));
        let b = four.install(|| pairwise_sum(n, &term));
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
