//! Deterministic reductions.
//!
//! All functional quadratures go through pairwise summation over fixed-size
//! chunks so results are bit-identical regardless of the rayon thread count.

use rayon::prelude::*;

/// Chunk length used by the parallel reductions. Fixed so the summation tree
/// does not depend on how work was split across threads.
pub const CHUNK: usize = 4096;

/// Pairwise (cascade) summation of a slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Deterministic parallel sum of `f(i)` for `i in 0..n`.
///
/// Work is split into fixed [`CHUNK`]-sized blocks; each block is summed
/// pairwise, the block results are collected in index order and summed
/// pairwise again. The floating-point result is independent of thread count.
pub fn par_sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let nchunks = n.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let vals: Vec<f64> = (lo..hi).map(&f).collect();
            pairwise_sum(&vals)
        })
        .collect();
    pairwise_sum(&partials)
}

/// Deterministic parallel sum of fixed-width vectors: returns the
/// componentwise sum of `f(i)` for `i in 0..n`.
pub fn par_sum_vec<const K: usize>(n: usize, f: impl Fn(usize) -> [f64; K] + Sync) -> [f64; K] {
    let nchunks = n.div_ceil(CHUNK);
    let partials: Vec<[f64; K]> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(hi - lo); K];
            for i in lo..hi {
                let v = f(i);
                for k in 0..K {
                    cols[k].push(v[k]);
                }
            }
            let mut out = [0.0; K];
            for k in 0..K {
                out[k] = pairwise_sum(&cols[k]);
            }
            out
        })
        .collect();
    let mut out = [0.0; K];
    for k in 0..K {
        let col: Vec<f64> = partials.iter().map(|p| p[k]).collect();
        out[k] = pairwise_sum(&col);
    }
    out
}

/// Deterministic parallel max of `f(i)` over `i in 0..n` (NaN ignored).
pub fn par_max(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let nchunks = n.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut m = f64::NEG_INFINITY;
            for i in lo..hi {
                let v = f(i);
                if v > m {
                    m = v;
                }
            }
            m
        })
        .collect();
    partials.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-12);
    }

    #[test]
    fn par_sum_is_thread_count_independent() {
        let n = 100_000;
        let f = |i: usize| ((i as f64) * 0.7).cos() / (i as f64 + 1.0);
        let a = par_sum(n, f);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| par_sum(n, f));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn par_sum_vec_componentwise() {
        let n = 10_000;
        let v = par_sum_vec(n, |i| [1.0, i as f64]);
        assert_eq!(v[0], n as f64);
        assert_eq!(v[1], (n * (n - 1) / 2) as f64);
    }
}
