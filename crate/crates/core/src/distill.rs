//! Self-distillation against the frozen base: one teacher forward per window,
//! shared by independently trained parameter groups.

use std::collections::BTreeMap;
use std::sync::Arc;

use log::info;

use crate::error::{Error, Result};
use crate::model::{AttnMask, KVCache, ModelWeights};
use crate::numerics::{softmax, AdamConfig, AdamState, Real, Tape, Tensor, Var};
use crate::train::{GradAccumulator, TrainHyper};

/// The frozen model's view of one window.
pub struct TeacherPass<T: Real = f32> {
    pub tokens: Vec<u32>,
    /// Keys/values of every window row at every layer.
    pub cache: KVCache<T>,
    /// Top-layer states after the final norm.
    pub hidden: Tensor<T>,
    /// Next-token distributions of every row.
    pub probs: Tensor<T>,
    /// Residual-stream states at the requested layers.
    pub taps: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> TeacherPass<T> {
    pub fn run(model: &ModelWeights<T>, tokens: &[u32], taps: &[usize]) -> Result<Self> {
        let n = tokens.len();
        let mut cache = KVCache::new(model.config.n_layers, model.config.d_model, n);
        let positions: Vec<usize> = (0..n).collect();
        let out = model.forward(tokens, &positions, &AttnMask::causal(n, 0), Some(&mut cache), taps)?;
        Ok(Self {
            tokens: tokens.to_vec(),
            cache,
            hidden: out.hidden,
            probs: softmax(&out.logits)?,
            taps: out.taps,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tap(&self, layer: usize) -> Result<&Tensor<T>> {
        self.taps
            .get(&layer)
            .ok_or_else(|| Error::Invalid(format!("teacher pass has no state for layer {layer}")))
    }

    /// Teacher distributions for targets `offset..n`, the rows a step-`offset`
    /// student is distilled toward.
    pub fn targets(&self, offset: usize) -> Tensor<T> {
        let idx: Vec<usize> = (offset..self.len()).collect();
        self.probs.select_rows(&idx)
    }
}

/// Loss of one parameter group on one window; the group's tensors arrive as
/// tape variables in the group's order.
pub type GroupLoss<'a, T> = dyn Fn(&Tape<T>, usize, &[Var], &mut TeacherPass<T>) -> Result<Var> + 'a;

/// Trains each group with its own Adam state over shared teacher passes.
/// Returns the per-step mean loss of every group.
pub(crate) fn train_groups(
    model: &ModelWeights<f32>,
    corpus: &[u32],
    hyper: &TrainHyper,
    taps: &[usize],
    groups: &mut [Vec<Arc<Tensor<f32>>>],
    loss: &GroupLoss<'_, f32>,
    label: &str,
) -> Result<Vec<Vec<f64>>> {
    hyper.validate()?;
    check_window(model, hyper.context)?;
    let batches = hyper.batches(corpus.len(), hyper.context);
    if batches.is_empty() {
        return Err(Error::Invalid("corpus shorter than one training window".into()));
    }
    let mut adams: Vec<AdamState<f32>> = groups
        .iter()
        .map(|g| {
            AdamState::new(
                AdamConfig {
                    lr: hyper.lr,
                    ..Default::default()
                },
                g.iter().map(|t| t.as_ref()),
            )
        })
        .collect();
    let mut curves = vec![Vec::with_capacity(batches.len()); groups.len()];
    for (step, batch) in batches.iter().enumerate() {
        let mut accs: Vec<GradAccumulator<f32>> = groups.iter().map(|g| GradAccumulator::new(g.iter().map(|t| t.as_ref()))).collect();
        let mut sums = vec![0.0; groups.len()];
        for &start in batch {
            let mut pass = TeacherPass::run(model, &corpus[start..start + hyper.context], taps)?;
            for (g, params) in groups.iter().enumerate() {
                let tape = Tape::new();
                let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
                let l = loss(&tape, g, &vars, &mut pass)?;
                let value = tape.value(l).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged { step, loss: value });
                }
                sums[g] += value;
                let grads = tape.backward(l)?;
                for (slot, &v) in vars.iter().enumerate() {
                    if let Some(gr) = grads.get(v) {
                        accs[g].add(slot, gr)?;
                    }
                }
                accs[g].finish_window();
            }
        }
        let lr = hyper.lr_at(step, batches.len());
        for (g, acc) in accs.into_iter().enumerate() {
            let mean_loss = sums[g] / batch.len() as f64;
            curves[g].push(mean_loss);
            let grads = acc.mean().map_err(|_| Error::Diverged { step, loss: mean_loss })?;
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            let mut params: Vec<&mut Tensor<f32>> = groups[g].iter_mut().map(Arc::make_mut).collect();
            adams[g].config.lr = lr;
            adams[g].step(&mut params, &grad_refs)?;
        }
        if step % 50 == 0 || step + 1 == batches.len() {
            let last: Vec<String> = curves.iter().map(|c| format!("{:.4}", c[step])).collect();
            info!("{label} step {step}/{}: loss [{}]", batches.len(), last.join(", "));
        }
    }
    Ok(curves)
}

/// Mean loss of every group over fixed windows of `tokens`, without updates.
pub(crate) fn eval_groups<T: Real>(
    model: &ModelWeights<T>,
    tokens: &[u32],
    context: usize,
    max_windows: usize,
    taps: &[usize],
    groups: &[Vec<Arc<Tensor<T>>>],
    loss: &GroupLoss<'_, T>,
) -> Result<Vec<f64>> {
    check_window(model, context)?;
    let starts: Vec<usize> = (0..)
        .map(|i| i * context)
        .take_while(|&s| s + context <= tokens.len())
        .take(max_windows)
        .collect();
    if starts.is_empty() {
        return Err(Error::Invalid("held-out data shorter than one window".into()));
    }
    let mut sums = vec![0.0; groups.len()];
    for &s in &starts {
        let mut pass = TeacherPass::run(model, &tokens[s..s + context], taps)?;
        for (g, params) in groups.iter().enumerate() {
            let tape = Tape::inference();
            let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
            let l = loss(&tape, g, &vars, &mut pass)?;
            sums[g] += tape.value(l).item().f64();
        }
    }
    Ok(sums.into_iter().map(|s| s / starts.len() as f64).collect())
}

fn check_window<T: Real>(model: &ModelWeights<T>, context: usize) -> Result<()> {
    if context > model.config.max_positions {
        return Err(Error::Invalid(format!(
            "context {context} exceeds max_positions {}",
            model.config.max_positions
        )));
    }
    Ok(())
}
