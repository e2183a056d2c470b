//! Deterministic parallel helpers.
//!
//! Results must be bitwise independent of the worker count, so parallel work
//! is always split into chunks whose boundaries depend only on the problem
//! size: each chunk is computed sequentially, and any cross-chunk reduction
//! happens in fixed chunk order on one thread.

use rayon::prelude::*;

/// Rows per parallel chunk. Fixed so that chunk boundaries (and therefore
/// summation order) never depend on the machine.
pub const ROW_CHUNK: usize = 8;

/// Initializes the global rayon pool honoring `MGDN_THREADS`. Safe to call
/// more than once; later calls are no-ops.
pub fn init_thread_pool() {
    if let Ok(v) = std::env::var("MGDN_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                // Ignore the error if a pool is already installed.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// Fills `out` by computing disjoint row blocks in parallel.
/// `f(row_range, block)` must write the whole block for `rows[row_range]`.
pub fn par_rows<F>(out: &mut [f64], rows: usize, row_len: usize, f: F)
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    assert_eq!(out.len(), rows * row_len);
    if rows == 0 {
        return;
    }
    out.par_chunks_mut(ROW_CHUNK * row_len)
        .enumerate()
        .for_each(|(i, block)| {
            let r0 = i * ROW_CHUNK;
            let r1 = (r0 + block.len() / row_len).min(rows);
            f(r0..r1, block);
        });
}

/// Sum of per-chunk partial accumulators, reduced sequentially in chunk
/// order. `f(row_range, acc)` adds a chunk's contribution into `acc`.
pub fn par_row_partials<F>(rows: usize, acc_len: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let n_chunks = rows.div_ceil(ROW_CHUNK).max(1);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; acc_len];
            let r0 = i * ROW_CHUNK;
            let r1 = (r0 + ROW_CHUNK).min(rows);
            if r0 < r1 {
                f(r0..r1, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; acc_len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(&p) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_rows_covers_all_rows() {
        let rows = 19;
        let row_len = 3;
        let mut out = vec![0.0; rows * row_len];
        par_rows(&mut out, rows, row_len, |range, block| {
            for (i, r) in range.enumerate() {
                for c in 0..row_len {
                    block[i * row_len + c] = (r * row_len + c) as f64;
                }
            }
        });
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i as f64);
        }
    }

    #[test]
    fn partials_match_sequential_sum() {
        let rows = 37;
        let acc = par_row_partials(rows, 2, |range, acc| {
            for r in range {
                acc[0] += r as f64;
                acc[1] += 1.0;
            }
        });
        assert_eq!(acc[0], (0..rows).sum::<usize>() as f64);
        assert_eq!(acc[1], rows as f64);
    }
}
