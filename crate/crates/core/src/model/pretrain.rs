use std::sync::Arc;

use log::info;

use super::{AttnMask, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor};
use crate::train::{GradAccumulator, TrainHyper};

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub hyper: TrainHyper,
    /// Smallest accepted corpus, in tokens (bytes).
    pub min_corpus_tokens: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hyper: TrainHyper {
                epochs: 2,
                context: 256,
                batch_size: 32,
                lr: 3e-3,
                warmup_steps: 20,
                seed: 0,
                max_steps: None,
            },
            min_corpus_tokens: 1_000_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    /// Loss of the first batch, before any update.
    pub initial_loss: f64,
    /// Mean loss over the last tenth of the steps.
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Next-token cross-entropy training of a fresh base model.
pub fn pretrain_base(corpus: &[u32], config: &ModelConfig, pc: &PretrainConfig) -> Result<(ModelWeights<f32>, PretrainReport)> {
    let hyper = &pc.hyper;
    hyper.validate()?;
    if corpus.len() < pc.min_corpus_tokens {
        return Err(Error::Invalid(format!(
            "corpus has {} tokens, need at least {}",
            corpus.len(),
            pc.min_corpus_tokens
        )));
    }
    if hyper.context > config.max_positions {
        return Err(Error::Invalid(format!(
            "context {} exceeds max_positions {}",
            hyper.context, config.max_positions
        )));
    }
    let mut model = ModelWeights::<f32>::init(config)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: hyper.lr,
            ..Default::default()
        },
        model.named().into_iter().map(|(_, t)| t.as_ref()),
    );
    let ctx = hyper.context;
    let batches = hyper.batches(corpus.len(), ctx + 1);
    if batches.is_empty() {
        return Err(Error::Invalid("corpus shorter than one training window".into()));
    }
    let positions: Vec<usize> = (0..ctx).collect();
    let mask = AttnMask::causal(ctx, 0);
    let mut losses = Vec::with_capacity(batches.len());
    for (step, batch) in batches.iter().enumerate() {
        let mut acc = GradAccumulator::new(model.named().into_iter().map(|(_, t)| t.as_ref()));
        let mut batch_loss = 0.0;
        for &start in batch {
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let h = bound.embed(&tape, &corpus[start..start + ctx], &positions)?;
            let mut taps = Default::default();
            let top = bound.run_layers(&tape, h, 0, config.n_layers, &positions, &mask, None, 0, &[], &mut taps)?;
            let logits = bound.lm_head(&tape, bound.final_norm(&tape, top)?)?;
            let loss = tape.cross_entropy(logits, &corpus[start + 1..start + ctx + 1])?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            batch_loss += value;
            let grads = tape.backward(loss)?;
            for (slot, (_, var)) in bound.named_vars().into_iter().enumerate() {
                if let Some(g) = grads.get(var) {
                    acc.add(slot, g)?;
                }
            }
            acc.finish_window();
        }
        let mean_loss = batch_loss / batch.len() as f64;
        losses.push(mean_loss);
        let grads = acc.mean().map_err(|_| Error::Diverged { step, loss: mean_loss })?;
        adam.config.lr = hyper.lr_at(step, batches.len());
        let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
        let mut params: Vec<&mut Tensor<f32>> = model.named_mut().into_iter().map(|(_, t)| Arc::make_mut(t)).collect();
        adam.step(&mut params, &grad_refs)?;
        if step % 50 == 0 || step + 1 == batches.len() {
            info!("pretrain step {step}/{}: loss {mean_loss:.4}", batches.len());
        }
    }
    let tail = (losses.len() / 10).max(1);
    let final_loss = losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64;
    Ok((
        model,
        PretrainReport {
            initial_loss: losses[0],
            final_loss,
            losses,
        },
    ))
}
