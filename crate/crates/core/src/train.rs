//! Shared training-loop plumbing: window batching, gradient accumulation and
//! the learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyper {
    pub epochs: usize,
    /// Tokens per training window.
    pub context: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup steps before the cosine decay.
    pub warmup_steps: usize,
    pub seed: u64,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 1,
            context: 256,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 0,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.context == 0 || self.batch_size == 0 {
            return Err(Error::Invalid(format!("epochs, context and batch_size must be positive: {self:?}")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    /// Shuffled window start offsets for every epoch, grouped into batches.
    /// Windows of `window` tokens start every `context` tokens.
    pub fn batches(&self, n_tokens: usize, window: usize) -> Vec<Vec<usize>> {
        let starts: Vec<usize> = (0..).map(|i| i * self.context).take_while(|&s| s + window <= n_tokens).collect();
        let mut out = Vec::new();
        for epoch in 0..self.epochs {
            let mut order = starts.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
            out.extend(order.chunks(self.batch_size).map(<[usize]>::to_vec));
        }
        if let Some(max) = self.max_steps {
            out.truncate(max);
        }
        out
    }

    /// Warmup then cosine decay to 10% of the peak rate.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos()))
    }
}

/// Running sum of per-window gradients for a fixed parameter list.
pub(crate) struct GradAccumulator<T: Real> {
    sums: Vec<Tensor<T>>,
    windows: usize,
}

impl<T: Real> GradAccumulator<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Self {
            sums: params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            windows: 0,
        }
    }

    pub fn add(&mut self, slot: usize, g: &Tensor<T>) -> Result<()> {
        self.sums[slot].add_assign(g)
    }

    pub fn finish_window(&mut self) {
        self.windows += 1;
    }

    /// Mean gradients; fails on any non-finite entry.
    pub fn mean(mut self) -> Result<Vec<Tensor<T>>> {
        let inv = T::one() / T::c(self.windows.max(1) as f64);
        for s in &mut self.sums {
            for v in s.data_mut() {
                *v = *v * inv;
            }
            s.check_finite("gradient")?;
        }
        Ok(self.sums)
    }
}
