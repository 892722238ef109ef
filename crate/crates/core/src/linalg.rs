//! Dense row-major kernels shared by the autodiff tape and the
//! inference paths. Accumulation order within each output cell is fixed,
//! so results are bit-identical whether or not rayon splits the rows.

use rayon::prelude::*;

/// Work threshold (multiply-adds) below which the serial path is used.
const PAR_THRESHOLD: usize = 1 << 16;

/// out = A (m x k) . B (k x n)
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |ai: &[f64], oi: &mut [f64]| {
        oi.fill(0.0);
        for (l, &al) in ai.iter().enumerate() {
            let brow = &b[l * n..l * n + n];
            for (o, &bv) in oi.iter_mut().zip(brow) {
                *o += al * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(oi, ai)| row(ai, oi));
    } else {
        for (oi, ai) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(ai, oi);
        }
    }
}

/// out = A (m x k) . B^T (n x k), i.e. out[i][j] = sum_l a[i][l] * b[j][l]
pub fn matmul_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |ai: &[f64], oi: &mut [f64]| {
        for (j, o) in oi.iter_mut().enumerate() {
            let bj = &b[j * k..j * k + k];
            let mut acc = 0.0;
            for (&av, &bv) in ai.iter().zip(bj) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(oi, ai)| row(ai, oi));
    } else {
        for (oi, ai) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(ai, oi);
        }
    }
}

/// out = A^T (k x m) . B (m x n) for A stored as (m x k),
/// i.e. out[i][j] = sum_l a[l][i] * b[l][j]
pub fn matmul_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |i: usize, oi: &mut [f64]| {
        oi.fill(0.0);
        for l in 0..m {
            let al = a[l * k + i];
            let brow = &b[l * n..l * n + n];
            for (o, &bv) in oi.iter_mut().zip(brow) {
                *o += al * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, oi)| row(i, oi));
    } else {
        for (i, oi) in out.chunks_mut(n).enumerate() {
            row(i, oi);
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for (xi, oi) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mx = xi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in oi.iter_mut().zip(xi) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in oi.iter_mut() {
            *o /= sum;
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
