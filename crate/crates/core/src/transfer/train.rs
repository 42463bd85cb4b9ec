use std::sync::Arc;

use log::info;

use super::{MaskMode, TransferBundle, TransferConfig};
use crate::distill::{eval_groups, train_groups, TeacherPass};
use crate::error::{Error, Result};
use crate::model::{AttnMask, ModelWeights, Taps};
use crate::numerics::{KlDirection, Real, Tape, Tensor, Var};
use crate::train::TrainHyper;

/// Mask over `n` real rows followed by one step-`step` pseudo row per source.
///
/// Real rows are plainly causal. The pseudo row for source `j` sees real rows
/// `0..=min(j + step - 1, n - 1)` and itself; pseudo rows never see each other.
pub fn build_training_mask(n: usize, step: usize) -> Result<AttnMask> {
    if step == 0 || n < step + 1 {
        return Err(Error::Invalid(format!("training mask needs n ≥ step + 1 (n = {n}, step = {step})")));
    }
    let mut mask = AttnMask::empty(2 * n, 2 * n);
    for r in 0..n {
        for c in 0..=r {
            mask.allow(r, c);
        }
    }
    for j in 0..n {
        for c in 0..=(j + step - 1).min(n - 1) {
            mask.allow(n + j, c);
        }
        mask.allow(n + j, n + j);
    }
    Ok(mask)
}

/// Pseudo rows for sources `0..m` over a cached window of `n` real rows.
fn pseudo_block(n: usize, m: usize, step: usize, mode: MaskMode) -> AttnMask {
    let mut mask = AttnMask::empty(m, n + m);
    for j in 0..m {
        let last = match mode {
            MaskMode::NoMasked => j + step - 1,
            MaskMode::Masked => j,
        };
        for c in 0..=last.min(n - 1) {
            mask.allow(j, c);
        }
        mask.allow(j, n + j);
    }
    mask
}

pub(crate) fn project<T: Real>(tape: &Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// Mean distillation loss of one step over a teacher window: pseudo rows for
/// every source with a target, distilled toward the teacher `step` rows ahead.
#[allow(clippy::too_many_arguments)]
pub fn transfer_loss<T: Real>(
    model: &ModelWeights<T>,
    tape: &Tape<T>,
    pass: &mut TeacherPass<T>,
    step: usize,
    layer: usize,
    w: Var,
    b: Option<Var>,
    mode: MaskMode,
    direction: KlDirection,
) -> Result<Var> {
    let n = pass.len();
    if step == 0 || n < step + 1 {
        return Err(Error::Invalid(format!("window of {n} rows too short for step {step}")));
    }
    let m = n - step;
    let sources: Vec<usize> = (0..m).collect();
    let src = tape.constant(pass.tap(layer)?.select_rows(&sources));
    let pseudo = project(tape, src, w, b)?;
    let positions: Vec<usize> = sources.iter().map(|&j| j + step).collect();
    debug_assert!(positions.iter().enumerate().all(|(j, &p)| p == j + step));
    let mask = pseudo_block(n, m, step, mode);
    let bound = model.bind(tape, false);
    let mut taps = Taps::new();
    let top = bound.run_layers(
        tape,
        pseudo,
        layer,
        model.config.n_layers,
        &positions,
        &mask,
        Some(&mut pass.cache),
        0,
        &[],
        &mut taps,
    )?;
    let logits = bound.lm_head(tape, bound.final_norm(tape, top)?)?;
    tape.kl_rows(logits, &pass.targets(step), direction)
}

#[derive(Clone, Debug)]
pub struct TransferReport {
    /// Per-optimizer-step mean loss, one curve per transfer step.
    pub curves: Vec<Vec<f64>>,
}

fn group_loss<'a, T: Real>(
    model: &'a ModelWeights<T>,
    config: &'a TransferConfig,
) -> impl Fn(&Tape<T>, usize, &[Var], &mut TeacherPass<T>) -> Result<Var> + 'a {
    move |tape, g, vars, pass| {
        let step = g + 1;
        transfer_loss(
            model,
            tape,
            pass,
            step,
            config.layer(step),
            vars[0],
            vars.get(1).copied(),
            config.train_mask_mode,
            config.kl_direction,
        )
    }
}

/// Trains every step's projection against the frozen `model`. Each step has
/// its own initialization stream, optimizer and loss; they only share the
/// teacher forward of each window.
pub fn transfer_train(
    model: &ModelWeights<f32>,
    corpus: &[u32],
    config: &TransferConfig,
    hyper: &TrainHyper,
) -> Result<(TransferBundle<f32>, TransferReport)> {
    config.validate(model.config.n_layers)?;
    if corpus.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    if hyper.context < config.k + 1 {
        return Err(Error::Invalid(format!("context {} too short for k = {}", hyper.context, config.k)));
    }
    let mut bundle = TransferBundle::init(config.clone(), model.config.d_model, hyper.seed, model.content_hash());
    let mut groups: Vec<Vec<Arc<Tensor<f32>>>> = (1..=config.k).map(|i| bundle.step_params(i)).collect();
    let loss = group_loss(model, config);
    let curves = train_groups(model, corpus, hyper, &config.layers, &mut groups, &loss, "transfer")?;
    for (i, params) in groups.into_iter().enumerate() {
        bundle.set_step_params(i + 1, params);
    }
    for (i, c) in curves.iter().enumerate() {
        info!(
            "transfer step {} (layer {}): loss {:.4} -> {:.4}",
            i + 1,
            config.layer(i + 1),
            c[0],
            c[c.len() - 1]
        );
    }
    Ok((bundle, TransferReport { curves }))
}

/// Mean distillation loss of each step over fixed windows of `tokens`.
pub fn transfer_heldout_kl<T: Real>(
    model: &ModelWeights<T>,
    bundle: &TransferBundle<T>,
    tokens: &[u32],
    context: usize,
    max_windows: usize,
) -> Result<Vec<f64>> {
    bundle.validate(model.config.n_layers, model.config.d_model)?;
    let groups: Vec<Vec<Arc<Tensor<T>>>> = (1..=bundle.config.k).map(|i| bundle.step_params(i)).collect();
    let loss = group_loss(model, &bundle.config);
    eval_groups(model, tokens, context, max_windows, &bundle.config.layers, &groups, &loss)
}
