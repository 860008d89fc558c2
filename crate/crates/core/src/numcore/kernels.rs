//! Slice-level kernels shared by the tape and by eager inference code.

use super::Scalar;

/// Row-norm floor for L2 normalization.
pub const NORM_EPS: f64 = 1e-8;
/// Variance floor for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c[m×n] += a[m×k] · b[k×n]`.
///
/// Rows are processed in groups of four against column panels held in
/// fixed-size accumulators so the compiler keeps them in vector registers;
/// leftovers fall back to a plain i-k-j loop.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let full_rows = m - m % MR;
    let mut j0 = 0;
    for (w, f) in [
        (64, panel::<T, 64> as PanelFn<T>),
        (32, panel::<T, 32>),
        (16, panel::<T, 16>),
        (8, panel::<T, 8>),
    ] {
        while j0 + w <= n {
            let mut i = 0;
            while i < full_rows {
                f(a, b, c, i, j0, k, n);
                i += MR;
            }
            j0 += w;
        }
    }
    // columns j0.. for the blocked rows, then every column of the tail rows
    naive(a, b, c, 0..full_rows, j0..n, k, n);
    naive(a, b, c, full_rows..m, 0..n, k, n);
}

const MR: usize = 4;

type PanelFn<T> = fn(&[T], &[T], &mut [T], usize, usize, usize, usize);

#[inline(always)]
fn panel<T: Scalar, const W: usize>(a: &[T], b: &[T], c: &mut [T], i: usize, j0: usize, k: usize, n: usize) {
    let mut acc = [[T::zero(); W]; MR];
    for p in 0..k {
        let brow: &[T; W] = b[p * n + j0..p * n + j0 + W].try_into().expect("panel width");
        for (r, accr) in acc.iter_mut().enumerate() {
            let av = a[(i + r) * k + p];
            for (x, &bv) in accr.iter_mut().zip(brow) {
                *x = *x + av * bv;
            }
        }
    }
    for (r, accr) in acc.iter().enumerate() {
        let crow = &mut c[(i + r) * n + j0..(i + r) * n + j0 + W];
        for (x, &v) in crow.iter_mut().zip(accr) {
            *x = *x + v;
        }
    }
}

fn naive<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    if cols.is_empty() {
        return;
    }
    for i in rows {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n + cols.start..p * n + cols.end];
            let crow = &mut c[i * n + cols.start..i * n + cols.end];
            for (x, &bv) in crow.iter_mut().zip(brow) {
                *x = *x + av * bv;
            }
        }
    }
}

pub fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_acc(a, b, &mut c, m, k, n);
    c
}

/// Transpose of a row-major `[rows×cols]` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Numerically stable softmax of one row, in place. Entries whose `keep`
/// flag is false get probability exactly zero; a row with nothing kept
/// becomes all zeros.
pub fn softmax_in_place<T: Scalar>(row: &mut [T], keep: Option<&[bool]>) {
    let kept = |j: usize| keep.map_or(true, |k| k[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if kept(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if kept(j) {
            *v = (*v - max).exp();
            sum = sum + *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Returns the divisor used for the row (`max(‖row‖₂, ε)`).
pub fn l2_normalize_in_place<T: Scalar>(row: &mut [T]) -> T {
    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
    let denom = norm.max(T::lit(NORM_EPS));
    for v in row.iter_mut() {
        *v = *v / denom;
    }
    denom
}

/// Affine-free layer normalization; returns `1/sqrt(var + eps)`.
pub fn layer_normalize_in_place<T: Scalar>(row: &mut [T]) -> T {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * inv;
    }
    inv
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
