//! Rotary position encoding and masked multi-head attention as tape ops.

use crate::error::{Error, Result};
use crate::model::config::ROPE_BASE;
use crate::model::AttnMask;
use crate::numerics::grad_fn;
use crate::numerics::kernels::{matmul, matmul_nt, matmul_tn, transpose};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Cached keys/values visible to every query, ahead of the current rows.
#[derive(Clone, Copy)]
pub(crate) struct Prefix<'a, T> {
    pub keys: &'a [T],
    pub values: &'a [T],
    pub len: usize,
}

fn rope_tables<T: Real>(positions: &[usize], head_dim: usize) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let freq = ROPE_BASE.powf(-(2.0 * i as f64) / head_dim as f64);
            let angle = p as f64 * freq;
            cos.push(T::c(angle.cos()));
            sin.push(T::c(angle.sin()));
        }
    }
    (cos, sin)
}

fn rotate<T: Real>(data: &mut [T], cos: &[T], sin: &[T], d: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    for (r, row) in data.chunks_exact_mut(d).enumerate() {
        let (c_row, s_row) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
        for head in row.chunks_exact_mut(head_dim) {
            for i in 0..half {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                let (c, s) = (c_row[i], if inverse { -s_row[i] } else { s_row[i] });
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Rotates each head's feature pairs by angles set by the row's position id.
pub fn rope<T: Real>(tape: &Tape<T>, x: Var, positions: &[usize], n_heads: usize) -> Result<Var> {
    let xv = tape.value(x);
    let (n, d) = (xv.rows(), xv.cols());
    if xv.rank() != 2 || positions.len() != n || d % n_heads != 0 {
        return Err(Error::shape(
            "rope",
            format!("{:?} with {} positions, {n_heads} heads", xv.shape(), positions.len()),
        ));
    }
    let head_dim = d / n_heads;
    let (cos, sin) = rope_tables::<T>(positions, head_dim);
    let mut out = (*xv).clone();
    rotate(out.data_mut(), &cos, &sin, d, head_dim, false);
    Ok(tape.record(out, &[x], || {
        grad_fn(move |g: &Tensor<T>, _: &[bool]| {
            let mut dx = g.clone();
            rotate(dx.data_mut(), &cos, &sin, d, head_dim, true);
            Ok(vec![Some(dx)])
        })
    }))
}

fn head_slice<T: Real>(src: &[T], rows: usize, d: usize, head: usize, head_dim: usize, dst: &mut Vec<T>) {
    for r in 0..rows {
        dst.extend_from_slice(&src[r * d + head * head_dim..r * d + (head + 1) * head_dim]);
    }
}

/// Scaled dot-product attention. Keys and values are the prefix (if any)
/// followed by the current rows; `mask` selects which of them each query
/// sees. Masked keys get exactly zero weight.
pub(crate) fn attention<T: Real>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<Prefix<'_, T>>,
    mask: &AttnMask,
    n_heads: usize,
) -> Result<Var> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    let (n, d) = (qv.rows(), qv.cols());
    if kv.shape() != qv.shape() || vv.shape() != qv.shape() || d % n_heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
        ));
    }
    let plen = prefix.map_or(0, |p| p.len);
    let cols = plen + n;
    if mask.rows() != n || mask.cols() != cols {
        return Err(Error::shape(
            "attention",
            format!("mask {}×{} for {n} queries over {cols} keys", mask.rows(), mask.cols()),
        ));
    }
    let head_dim = d / n_heads;
    let scale = T::c(1.0 / (head_dim as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    let mut saved = Vec::new();
    let keep = tape.grad_enabled();
    for h in 0..n_heads {
        let mut q_h = Vec::with_capacity(n * head_dim);
        head_slice(qv.data(), n, d, h, head_dim, &mut q_h);
        let mut k_h = Vec::with_capacity(cols * head_dim);
        let mut v_h = Vec::with_capacity(cols * head_dim);
        if let Some(p) = prefix {
            head_slice(p.keys, plen, d, h, head_dim, &mut k_h);
            head_slice(p.values, plen, d, h, head_dim, &mut v_h);
        }
        head_slice(kv.data(), n, d, h, head_dim, &mut k_h);
        head_slice(vv.data(), n, d, h, head_dim, &mut v_h);
        let kt = transpose(&k_h, cols, head_dim);
        let mut probs = matmul(&q_h, &kt, n, head_dim, cols);
        for (r, row) in probs.chunks_exact_mut(cols).enumerate() {
            let allowed = mask.row(r);
            let mut max = T::neg_infinity();
            for (s, &a) in row.iter_mut().zip(allowed) {
                *s = *s * scale;
                if a && *s > max {
                    max = *s;
                }
            }
            let mut sum = T::zero();
            for (s, &a) in row.iter_mut().zip(allowed) {
                if a {
                    *s = (*s - max).exp();
                    sum = sum + *s;
                } else {
                    *s = T::zero();
                }
            }
            for s in row.iter_mut() {
                *s = *s / sum;
            }
        }
        let o_h = matmul(&probs, &v_h, n, cols, head_dim);
        for r in 0..n {
            out[r * d + h * head_dim..r * d + (h + 1) * head_dim].copy_from_slice(&o_h[r * head_dim..(r + 1) * head_dim]);
        }
        if keep {
            saved.push((q_h, k_h, v_h, probs));
        }
    }
    let out = Tensor::matrix(n, d, out)?;
    Ok(tape.record(out, &[q, k, v], move || {
        grad_fn(move |g: &Tensor<T>, _: &[bool]| {
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            for (h, (q_h, k_h, v_h, probs)) in saved.iter().enumerate() {
                let mut do_h = Vec::with_capacity(n * head_dim);
                head_slice(g.data(), n, d, h, head_dim, &mut do_h);
                let mut ds = matmul_nt(&do_h, v_h, n, head_dim, cols);
                for (ds_row, p_row) in ds.chunks_exact_mut(cols).zip(probs.chunks_exact(cols)) {
                    let mut dot = T::zero();
                    for (&x, &p) in ds_row.iter().zip(p_row) {
                        dot = dot + x * p;
                    }
                    for (x, &p) in ds_row.iter_mut().zip(p_row) {
                        *x = p * (*x - dot) * scale;
                    }
                }
                let dq_h = matmul(&ds, k_h, n, cols, head_dim);
                let dk_h = matmul_tn(&ds, q_h, n, cols, head_dim);
                let dv_h = matmul_tn(probs, &do_h, n, cols, head_dim);
                for r in 0..n {
                    let dst = r * d + h * head_dim..r * d + (h + 1) * head_dim;
                    dq[dst.clone()].copy_from_slice(&dq_h[r * head_dim..(r + 1) * head_dim]);
                    let src = (plen + r) * head_dim..(plen + r + 1) * head_dim;
                    dk[dst.clone()].copy_from_slice(&dk_h[src.clone()]);
                    dv[dst].copy_from_slice(&dv_h[src]);
                }
            }
            Ok(vec![
                Some(Tensor::matrix(n, d, dq)?),
                Some(Tensor::matrix(n, d, dk)?),
                Some(Tensor::matrix(n, d, dv)?),
            ])
        })
    }))
}
