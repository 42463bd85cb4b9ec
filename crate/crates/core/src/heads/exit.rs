use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::{parse_meta, parse_usize};
use crate::checkpoint::Checkpoint;
use crate::distill::{eval_groups, train_groups, TeacherPass};
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::numerics::{kernels, softmax_slice, KlDirection, Real, Tape, Tensor, Var};
use crate::train::TrainHyper;

const META_RECORD: &str = "exit.meta";
const EPS: f64 = 1e-5;

/// One linear head per step, each reading the RMS-normalized residual state
/// at its own layer.
#[derive(Clone, Debug)]
pub struct ExitHeads<T: Real = f32> {
    /// Layer read by step `i` is `layers[i - 1]`.
    pub layers: Vec<usize>,
    pub weights: Vec<Arc<Tensor<T>>>,
    pub base_hash: String,
}

impl<T: Real> ExitHeads<T> {
    /// Every head starts as the base output layer, `diag(final_norm) · lm_head`.
    pub fn init(model: &ModelWeights<T>, layers: &[usize]) -> Result<Self> {
        if !(1..=4).contains(&layers.len()) {
            return Err(Error::Config(format!("{} exit steps, expected 1..=4", layers.len())));
        }
        if let Some(&t) = layers.iter().find(|&&t| t == 0 || t > model.config.n_layers) {
            return Err(Error::Config(format!("exit layer {t} outside 1..={}", model.config.n_layers)));
        }
        let (d, v) = (model.config.d_model, model.config.vocab_size);
        let mut w = (*model.lm_head).clone();
        for r in 0..d {
            let g = model.final_norm.data()[r];
            for x in w.row_mut(r) {
                *x = *x * g;
            }
        }
        debug_assert_eq!(w.shape(), [d, v]);
        let w = Arc::new(w);
        Ok(Self {
            layers: layers.to_vec(),
            weights: layers.iter().map(|_| w.clone()).collect(),
            base_hash: model.content_hash(),
        })
    }

    pub fn k(&self) -> usize {
        self.layers.len()
    }

    pub fn check_base(&self, model: &ModelWeights<T>) -> Result<()> {
        if model.content_hash() != self.base_hash {
            return Err(Error::ArtifactMismatch("exit heads were trained against a different base".into()));
        }
        let shape = [model.config.d_model, model.config.vocab_size];
        if self.weights.iter().any(|w| w.shape() != shape) || self.layers.iter().any(|&t| t > model.config.n_layers) {
            return Err(Error::shape("ExitHeads", format!("heads do not fit {shape:?}")));
        }
        Ok(())
    }

    pub fn apply(tape: &Tape<T>, h: Var, w: Var) -> Result<Var> {
        let d = tape.shape(h)[1];
        let ones = tape.constant(Tensor::filled(vec![d], T::one()));
        tape.matmul(tape.rms_norm(h, ones, T::c(EPS))?, w)
    }

    /// Step distributions for one row, given the residual states by layer.
    pub fn distributions(&self, states: &BTreeMap<usize, Tensor<T>>, row: usize) -> Result<Vec<Vec<T>>> {
        self.layers
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| {
                let h = states
                    .get(t)
                    .ok_or_else(|| Error::Invalid(format!("no state for exit layer {t}")))?
                    .row(row);
                let d = h.len();
                let ms = h.iter().map(|&x| x * x).sum::<T>() / T::c(d as f64);
                let inv = T::one() / (ms + T::c(EPS)).sqrt();
                let x: Vec<T> = h.iter().map(|&v| v * inv).collect();
                let mut p = kernels::matmul(&x, w.data(), 1, d, w.cols());
                softmax_slice(&mut p);
                Ok(p)
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ExitHeads<U> {
        ExitHeads {
            layers: self.layers.clone(),
            weights: self.weights.iter().map(|w| Arc::new(w.cast())).collect(),
            base_hash: self.base_hash.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let layers: Vec<String> = self.layers.iter().map(usize::to_string).collect();
        let mut ckpt = Checkpoint::new();
        ckpt.push_text(META_RECORD, &format!("layers={}\nbase_hash={}\n", layers.join(","), self.base_hash));
        for (i, (t, w)) in self.layers.iter().zip(&self.weights).enumerate() {
            ckpt.push_tensor(format!("exit.l{t}.step{}.weight", i + 1), w.cast());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut layers = None;
        let mut base_hash = None;
        for (key, v) in parse_meta(ckpt.text(META_RECORD)?, "exit")? {
            match key.as_str() {
                "layers" => layers = Some(v.split(',').map(|x| parse_usize(x, "layers")).collect::<Result<Vec<_>>>()?),
                "base_hash" => base_hash = Some(v),
                _ => return Err(Error::Format(format!("unknown exit record key {key:?}"))),
            }
        }
        let (layers, base_hash) = layers
            .zip(base_hash)
            .ok_or_else(|| Error::Format("exit record needs layers and base_hash".into()))?;
        let weights = layers
            .iter()
            .enumerate()
            .map(|(i, t)| Ok(Arc::new(ckpt.tensor(&format!("exit.l{t}.step{}.weight", i + 1))?.cast())))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            weights,
            base_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Mean distillation loss of the step-`step` head reading layer `layer`.
pub fn exit_loss<T: Real>(tape: &Tape<T>, pass: &TeacherPass<T>, step: usize, layer: usize, w: Var, direction: KlDirection) -> Result<Var> {
    let n = pass.len();
    if step == 0 || n < step + 1 {
        return Err(Error::Invalid(format!("window of {n} rows too short for step {step}")));
    }
    let rows: Vec<usize> = (0..n - step).collect();
    let h = tape.constant(pass.tap(layer)?.select_rows(&rows));
    let logits = ExitHeads::apply(tape, h, w)?;
    tape.kl_rows(logits, &pass.targets(step), direction)
}

/// Trains the head for step `i` on layer `layers[i - 1]`.
pub fn train_early_exit(
    model: &ModelWeights<f32>,
    corpus: &[u32],
    layers: &[usize],
    hyper: &TrainHyper,
) -> Result<(ExitHeads<f32>, Vec<Vec<f64>>)> {
    if corpus.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    let mut heads = ExitHeads::init(model, layers)?;
    let mut groups: Vec<Vec<Arc<Tensor<f32>>>> = heads.weights.iter().map(|w| vec![w.clone()]).collect();
    let loss = |tape: &Tape<f32>, g: usize, vars: &[Var], pass: &mut TeacherPass<f32>| {
        exit_loss(tape, pass, g + 1, layers[g], vars[0], KlDirection::TeacherStudent)
    };
    let curves = train_groups(model, corpus, hyper, layers, &mut groups, &loss, "early-exit")?;
    heads.weights = groups.into_iter().map(|mut g| g.remove(0)).collect();
    Ok((heads, curves))
}

pub fn exit_heldout_kl<T: Real>(
    model: &ModelWeights<T>,
    heads: &ExitHeads<T>,
    tokens: &[u32],
    context: usize,
    max_windows: usize,
) -> Result<Vec<f64>> {
    let groups: Vec<Vec<Arc<Tensor<T>>>> = heads.weights.iter().map(|w| vec![w.clone()]).collect();
    let layers = &heads.layers;
    let loss = |tape: &Tape<T>, g: usize, vars: &[Var], pass: &mut TeacherPass<T>| {
        exit_loss(tape, pass, g + 1, layers[g], vars[0], KlDirection::TeacherStudent)
    };
    eval_groups(model, tokens, context, max_windows, layers, &groups, &loss)
}
