use super::{Real, Tensor};
use crate::error::{Error, Result};

const PROB_TOLERANCE: f64 = 1e-5;
const LOG_FLOOR: f64 = 1e-12;

/// In-place softmax of one row, max-subtracted.
pub fn softmax_slice<T: Real>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

/// Log-softmax of one row into `out`.
pub fn log_softmax_slice<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in x {
        sum = sum + (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Softmax over the last axis.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_finite("softmax input")?;
    let mut out = x.clone();
    let cols = out.cols();
    if cols > 0 {
        for row in out.data_mut().chunks_exact_mut(cols) {
            softmax_slice(row);
        }
    }
    Ok(out)
}

fn check_probability<T: Real>(p: &[T], name: &str) -> Result<()> {
    let mut sum = 0.0;
    for &v in p {
        let v = v.f64();
        if !v.is_finite() || v < 0.0 {
            return Err(Error::NotNormalized(format!("{name} has entry {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::NotNormalized(format!("{name} sums to {sum}")));
    }
    Ok(())
}

/// `Σ target · (ln target − ln approx)` with `0·ln 0 = 0` and `approx`
/// floored at 1e-12 before the log.
pub fn kl_divergence<T: Real>(target: &[T], approx: &[T]) -> Result<T> {
    if target.len() != approx.len() {
        return Err(Error::shape("kl_divergence", format!("{} vs {}", target.len(), approx.len())));
    }
    check_probability(target, "target")?;
    check_probability(approx, "approx")?;
    let floor = T::c(LOG_FLOOR);
    let mut acc = T::zero();
    for (&t, &a) in target.iter().zip(approx) {
        if t > T::zero() {
            acc = acc + t * (t.ln() - a.max(floor).ln());
        }
    }
    Ok(acc)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax_token<T: Real>(logits: &[T]) -> Result<u32> {
    let (first, rest) = logits
        .split_first()
        .ok_or_else(|| Error::Invalid("argmax of an empty vector".into()))?;
    let mut best = 0usize;
    let mut best_val = *first;
    for (i, &v) in rest.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i + 1;
        }
    }
    Ok(best as u32)
}

/// Indices of the `k` largest values, highest first, ties by lowest index.
pub fn top_k_indices<T: Real>(values: &[T], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        values[b as usize]
            .partial_cmp(&values[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.f64(), y.f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}
