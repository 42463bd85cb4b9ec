//! Helpers shared by the integration tests.
#![allow(dead_code)]

use hidden_transfer::model::{ModelConfig, ModelWeights};
use hidden_transfer::numerics::{Tape, Tensor, Var};
use hidden_transfer::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Triple-loop product.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn micro_config(n_layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 12,
        vocab_size: 13,
        max_positions: 64,
        seed,
    }
}

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 16,
        n_heads: 2,
        ffn_dim: 24,
        vocab_size: 29,
        max_positions: 96,
        seed,
    }
}

pub fn small_model(seed: u64) -> ModelWeights<f32> {
    ModelWeights::init(&small_config(seed)).unwrap()
}

/// Worst element-wise relative error between analytic and central-difference
/// gradients of `f` for every tensor in `params`. The denominator is floored
/// at 1e-7 so gradients that are both near zero compare absolutely.
pub fn finite_difference_error(params: &[Tensor<f64>], h: f64, f: impl Fn(&Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |ps: &[Tensor<f64>]| {
        let t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = f(&t, &vs).unwrap();
        t.value(l).item()
    };
    let mut worst = 0.0f64;
    for (i, p) in params.iter().enumerate() {
        let zero = Tensor::zeros(p.shape().to_vec());
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        for e in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = params.to_vec();
            minus[i].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    worst
}
