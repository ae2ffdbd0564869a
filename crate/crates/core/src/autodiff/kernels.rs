//! Plain-slice numeric kernels shared by the forward and backward rules.

use rayon::prelude::*;

/// Work (m·k·n) above which row blocks are spread over the thread pool.
/// Each output row is still reduced sequentially in `k` order, so results
/// do not depend on scheduling.
const PAR_WORK: usize = 1 << 16;

/// `out[m×n] = a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// Batched `gemm` over `batch` independent `[m×k]·[k×n]` products.
pub fn gemm_batched(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let run = |bi: usize| gemm(&a[bi * m * k..(bi + 1) * m * k], &b[bi * k * n..(bi + 1) * k * n], m, k, n);
    let parts: Vec<Vec<f64>> = if batch * m * k * n >= PAR_WORK {
        (0..batch).into_par_iter().map(run).collect()
    } else {
        (0..batch).map(run).collect()
    };
    parts.concat()
}

/// Transpose each trailing `[rows×cols]` matrix of a `batch`-stacked buffer.
pub fn transpose_batched(a: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for bi in 0..batch {
        let src = &a[bi * rows * cols..(bi + 1) * rows * cols];
        let dst = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
