//! Deterministic matrix-multiply kernels.
//!
//! Every output element is accumulated by exactly one task in a fixed k
//! order, so results are bit-identical regardless of thread count. The
//! `acc` variants add into the output, which is what backward passes need.

use super::scalar::Scalar;
use rayon::prelude::*;

/// Flop threshold below which we stay single-threaded.
const PAR_FLOP_THRESHOLD: usize = 1 << 18;

/// Row-chunk length for the `a_transpose_b` partial-sum reduction. Fixed so
/// the reduction tree does not depend on the executing thread pool.
const ATB_CHUNK: usize = 4096;

/// `out[M,N] += A[M,K] · B[K,N]`, all row-major.
///
/// B is streamed per output row with the k loop outermost and j innermost,
/// saxpy style, which vectorizes and keeps B cache-resident when it is a
/// weight matrix.
pub fn matmul_acc<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);

    let row = |a_row: &[S], out_row: &mut [S]| {
        for (kk, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[kk * n..kk * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };

    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(out_row, a_row)| row(a_row, out_row));
    } else {
        for (out_row, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(a_row, out_row);
        }
    }
}

/// `out[K,N] += Aᵀ[K,M] · B[M,N]` for row-major `A[M,K]`, `B[M,N]`.
///
/// Both operands are tall, so the m axis is reduced through fixed-size row
/// chunks with private accumulators combined in chunk order.
pub fn a_transpose_b_acc<S: Scalar>(
    a: &[S],
    m: usize,
    k: usize,
    b: &[S],
    n: usize,
    out: &mut [S],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);

    let chunk_into = |rows: std::ops::Range<usize>, acc: &mut [S]| {
        for r in rows {
            let a_row = &a[r * k..r * k + k];
            let b_row = &b[r * n..r * n + n];
            for (kk, &av) in a_row.iter().enumerate() {
                if av == S::zero() {
                    continue;
                }
                let acc_row = &mut acc[kk * n..kk * n + n];
                for (o, &bv) in acc_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    };

    if m * k * n >= PAR_FLOP_THRESHOLD && m > ATB_CHUNK {
        let ranges: Vec<_> = (0..m)
            .step_by(ATB_CHUNK)
            .map(|s| s..(s + ATB_CHUNK).min(m))
            .collect();
        let partials: Vec<Vec<S>> = ranges
            .into_par_iter()
            .map(|r| {
                let mut acc = vec![S::zero(); k * n];
                chunk_into(r, &mut acc);
                acc
            })
            .collect();
        for acc in partials {
            for (o, v) in out.iter_mut().zip(acc) {
                *o += v;
            }
        }
    } else {
        chunk_into(0..m, out);
    }
}

/// Row-major transpose: `[rows, cols]` → `[cols, rows]`.
pub fn transpose<S: Scalar>(src: &[S], rows: usize, cols: usize) -> Vec<S> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut dst = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
    dst
}
