//! Slice-level kernels shared by the tensor ops and the model.
//!
//! Every output element of a product is accumulated in ascending order of the
//! inner index, starting from zero. Row `i` of a product never depends on any
//! other row of the left operand, so stacking extra rows under a matrix leaves
//! the existing rows' results bit-identical.

use super::Real;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::zero());
    if n == 0 {
        return;
    }
    let mut blocks = out.chunks_exact_mut(4 * n);
    let mut i = 0;
    for block in &mut blocks {
        let (c0, rest) = block.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for (p, b_row) in b.chunks_exact(n).enumerate() {
            let (s0, s1, s2, s3) = (a0[p], a1[p], a2[p], a3[p]);
            for ((((x0, x1), x2), x3), &bv) in c0.iter_mut().zip(c1.iter_mut()).zip(c2.iter_mut()).zip(c3.iter_mut()).zip(b_row) {
                *x0 = *x0 + s0 * bv;
                *x1 = *x1 + s1 * bv;
                *x2 = *x2 + s2 * bv;
                *x3 = *x3 + s3 * bv;
            }
        }
        i += 4;
    }
    for c in blocks.into_remainder().chunks_exact_mut(n) {
        let a_row = &a[i * k..(i + 1) * k];
        for (&s, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (x, &bv) in c.iter_mut().zip(b_row) {
                *x = *x + s * bv;
            }
        }
        i += 1;
    }
}

pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_into(a, b, &mut out, m, k, n);
    out
}

/// `a[m×k] · b[n×k]ᵀ`, via an explicit transpose so accumulation order matches
/// [`matmul_into`].
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let at = transpose(a, k, m);
    matmul(&at, b, m, k, n)
}

pub fn transpose<T: Real>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row-wise RMS normalization; returns the per-row inverse RMS.
pub fn rms_norm_into<T: Real>(x: &[T], weight: &[T], eps: T, out: &mut [T]) -> Vec<T> {
    let d = weight.len();
    let rows = x.len() / d.max(1);
    let mut inv = Vec::with_capacity(rows);
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mut ss = T::zero();
        for &v in xr {
            ss = ss + v * v;
        }
        let r = T::one() / (ss / T::c(d as f64) + eps).sqrt();
        for ((o, &v), &w) in or.iter_mut().zip(xr).zip(weight) {
            *o = v * r * w;
        }
        inv.push(r);
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn blocked_rows_match_naive_order_exactly() {
        // 7 rows exercises both the 4-row block and the remainder path.
        let (m, k, n) = (7, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        assert_eq!(matmul(&a, &b, m, k, n), naive(&a, &b, m, k, n));
    }

    #[test]
    fn nt_and_tn_agree_with_plain_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 7) as f64 * 0.5).collect();
        let plain = matmul(&a, &b, m, k, n);
        let bt = transpose(&b, k, n);
        assert_eq!(matmul_nt(&a, &bt, m, k, n), plain);
        let at = transpose(&a, m, k);
        assert_eq!(matmul_tn(&at, &b, k, m, n), plain);
    }

    #[test]
    fn row_results_do_not_depend_on_stacked_rows() {
        let (k, n) = (6, 4);
        let a: Vec<f32> = (0..5 * k).map(|i| (i as f32 * 0.13).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.7).cos()).collect();
        let full = matmul(&a, &b, 5, k, n);
        let first = matmul(&a[..k], &b, 1, k, n);
        assert_eq!(&full[..n], &first[..]);
    }
}
