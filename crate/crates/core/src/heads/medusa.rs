use std::path::Path;
use std::sync::Arc;

use super::{parse_meta, parse_usize};
use crate::checkpoint::Checkpoint;
use crate::distill::{eval_groups, train_groups, TeacherPass};
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::numerics::{kernels, softmax_slice, KlDirection, Real, Tape, Tensor, Var};
use crate::train::TrainHyper;

const META_RECORD: &str = "medusa.meta";

/// Per-step heads reading the final-normed last-layer state `h`:
/// `logits = (h + silu(h · W1 + b1)) · P`.
#[derive(Clone, Debug)]
pub struct MedusaHeads<T: Real = f32> {
    pub w1: Vec<Arc<Tensor<T>>>,
    pub b1: Vec<Arc<Tensor<T>>>,
    pub proj: Vec<Arc<Tensor<T>>>,
    pub base_hash: String,
}

impl<T: Real> MedusaHeads<T> {
    /// Zero residual branch and a copy of the base lm_head, so every head
    /// starts as the base next-token predictor.
    pub fn init(model: &ModelWeights<T>, k: usize) -> Result<Self> {
        if !(1..=4).contains(&k) {
            return Err(Error::Config(format!("k = {k} outside 1..=4")));
        }
        let d = model.config.d_model;
        Ok(Self {
            w1: (0..k).map(|_| Arc::new(Tensor::zeros(vec![d, d]))).collect(),
            b1: (0..k).map(|_| Arc::new(Tensor::zeros(vec![d]))).collect(),
            proj: (0..k).map(|_| model.lm_head.clone()).collect(),
            base_hash: model.content_hash(),
        })
    }

    pub fn k(&self) -> usize {
        self.w1.len()
    }

    /// Tensors of 1-based `step`: `W1`, `b1`, `P`.
    pub fn step_params(&self, step: usize) -> Vec<Arc<Tensor<T>>> {
        vec![self.w1[step - 1].clone(), self.b1[step - 1].clone(), self.proj[step - 1].clone()]
    }

    fn set_step_params(&mut self, step: usize, params: Vec<Arc<Tensor<T>>>) {
        let [w1, b1, proj]: [Arc<Tensor<T>>; 3] = params.try_into().expect("three tensors");
        self.w1[step - 1] = w1;
        self.b1[step - 1] = b1;
        self.proj[step - 1] = proj;
    }

    pub fn check_base(&self, model: &ModelWeights<T>) -> Result<()> {
        let hash = model.content_hash();
        if hash != self.base_hash {
            return Err(Error::ArtifactMismatch("Medusa heads were trained against a different base".into()));
        }
        let (d, v) = (model.config.d_model, model.config.vocab_size);
        for i in 0..self.k() {
            if self.w1[i].shape() != [d, d] || self.b1[i].shape() != [d] || self.proj[i].shape() != [d, v] {
                return Err(Error::shape("MedusaHeads", format!("step {} does not fit d = {d}, V = {v}", i + 1)));
            }
        }
        Ok(())
    }

    /// Logits of 1-based `step` for rows `h` on a tape.
    pub fn apply(tape: &Tape<T>, h: Var, vars: &[Var]) -> Result<Var> {
        let z = tape.add_bias(tape.matmul(h, vars[0])?, vars[1])?;
        let x = tape.add(h, tape.silu(z)?)?;
        tape.matmul(x, vars[2])
    }

    /// Logits of 1-based `step` for a single state.
    pub fn step_logits(&self, step: usize, h: &[T]) -> Vec<T> {
        let d = h.len();
        let z = kernels::matmul(h, self.w1[step - 1].data(), 1, d, d);
        let x: Vec<T> = h
            .iter()
            .zip(z.iter().zip(self.b1[step - 1].data()))
            .map(|(&hv, (&zv, &bv))| hv + kernels::silu(zv + bv))
            .collect();
        let v = self.proj[step - 1].cols();
        kernels::matmul(&x, self.proj[step - 1].data(), 1, d, v)
    }

    pub fn cast<U: Real>(&self) -> MedusaHeads<U> {
        let c = |v: &Vec<Arc<Tensor<T>>>| v.iter().map(|t| Arc::new(t.cast())).collect();
        MedusaHeads {
            w1: c(&self.w1),
            b1: c(&self.b1),
            proj: c(&self.proj),
            base_hash: self.base_hash.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.push_text(META_RECORD, &format!("k={}\nbase_hash={}\n", self.k(), self.base_hash));
        for i in 0..self.k() {
            let s = i + 1;
            ckpt.push_tensor(format!("medusa.step{s}.w1"), self.w1[i].cast());
            ckpt.push_tensor(format!("medusa.step{s}.b1"), self.b1[i].cast());
            ckpt.push_tensor(format!("medusa.step{s}.proj"), self.proj[i].cast());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut k = None;
        let mut base_hash = None;
        for (key, v) in parse_meta(ckpt.text(META_RECORD)?, "medusa")? {
            match key.as_str() {
                "k" => k = Some(parse_usize(&v, &key)?),
                "base_hash" => base_hash = Some(v),
                _ => return Err(Error::Format(format!("unknown medusa record key {key:?}"))),
            }
        }
        let (k, base_hash) = k
            .zip(base_hash)
            .ok_or_else(|| Error::Format("medusa record needs k and base_hash".into()))?;
        let get = |name: String| -> Result<Arc<Tensor<T>>> { Ok(Arc::new(ckpt.tensor(&name)?.cast())) };
        Ok(Self {
            w1: (1..=k).map(|s| get(format!("medusa.step{s}.w1"))).collect::<Result<_>>()?,
            b1: (1..=k).map(|s| get(format!("medusa.step{s}.b1"))).collect::<Result<_>>()?,
            proj: (1..=k).map(|s| get(format!("medusa.step{s}.proj"))).collect::<Result<_>>()?,
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

/// Step distributions from one final-normed last-layer state.
pub fn medusa_draft_distributions<T: Real>(hidden: &[T], heads: &MedusaHeads<T>) -> Vec<Vec<T>> {
    (1..=heads.k())
        .map(|s| {
            let mut p = heads.step_logits(s, hidden);
            softmax_slice(&mut p);
            p
        })
        .collect()
}

/// Mean distillation loss of head `step` over a teacher window.
pub fn medusa_loss<T: Real>(tape: &Tape<T>, pass: &TeacherPass<T>, step: usize, vars: &[Var], direction: KlDirection) -> Result<Var> {
    let n = pass.len();
    if step == 0 || n < step + 1 {
        return Err(Error::Invalid(format!("window of {n} rows too short for step {step}")));
    }
    let rows: Vec<usize> = (0..n - step).collect();
    let h = tape.constant(pass.hidden.select_rows(&rows));
    let logits = MedusaHeads::apply(tape, h, vars)?;
    tape.kl_rows(logits, &pass.targets(step), direction)
}

pub fn train_medusa(model: &ModelWeights<f32>, corpus: &[u32], k: usize, hyper: &TrainHyper) -> Result<(MedusaHeads<f32>, Vec<Vec<f64>>)> {
    if corpus.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    let mut heads = MedusaHeads::init(model, k)?;
    let mut groups: Vec<Vec<Arc<Tensor<f32>>>> = (1..=k).map(|s| heads.step_params(s)).collect();
    let loss = |tape: &Tape<f32>, g: usize, vars: &[Var], pass: &mut TeacherPass<f32>| {
        medusa_loss(tape, pass, g + 1, vars, KlDirection::TeacherStudent)
    };
    let curves = train_groups(model, corpus, hyper, &[], &mut groups, &loss, "medusa")?;
    for (i, params) in groups.into_iter().enumerate() {
        heads.set_step_params(i + 1, params);
    }
    Ok((heads, curves))
}

pub fn medusa_heldout_kl<T: Real>(
    model: &ModelWeights<T>,
    heads: &MedusaHeads<T>,
    tokens: &[u32],
    context: usize,
    max_windows: usize,
) -> Result<Vec<f64>> {
    let groups: Vec<Vec<Arc<Tensor<T>>>> = (1..=heads.k()).map(|s| heads.step_params(s)).collect();
    let loss = |tape: &Tape<T>, g: usize, vars: &[Var], pass: &mut TeacherPass<T>| {
        medusa_loss(tape, pass, g + 1, vars, KlDirection::TeacherStudent)
    };
    eval_groups(model, tokens, context, max_windows, &[], &groups, &loss)
}
