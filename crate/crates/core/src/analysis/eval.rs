use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::{medusa_draft_distributions, ExitHeads, MedusaHeads};
use crate::model::{AttnMask, KVCache, ModelWeights};
use crate::numerics::{argmax_token, cosine_similarity, top_k_indices, Real};
use crate::transfer::{AttachedTransfer, MaskMode, TransferBundle};

/// How split points are sampled from held-out text.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_seq: usize,
    pub n_splits: usize,
    /// Length of each sampled sequence.
    pub seq_len: usize,
    /// Smallest split position.
    pub min_split: usize,
    /// Draft steps evaluated.
    pub steps: usize,
    pub top_k: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_seq: 100,
            n_splits: 50,
            seq_len: 128,
            min_split: 32,
            steps: 3,
            top_k: vec![1, 3, 5, 10],
            seeds: (0..5).collect(),
        }
    }
}

impl EvalOptions {
    fn validate(&self, max_positions: usize, n_tokens: usize) -> Result<()> {
        if self.n_seq == 0 || self.n_splits == 0 || self.steps == 0 || self.seeds.is_empty() || self.top_k.is_empty() {
            return Err(Error::Config(format!("empty evaluation: {self:?}")));
        }
        if self.seq_len < self.min_split + self.n_splits {
            return Err(Error::Config(format!(
                "{} splits do not fit positions {}..{}",
                self.n_splits, self.min_split, self.seq_len
            )));
        }
        if self.seq_len + self.steps >= max_positions {
            return Err(Error::Config(format!(
                "sequences of {} plus {} steps exceed max_positions {max_positions}",
                self.seq_len, self.steps
            )));
        }
        if n_tokens < self.seq_len {
            return Err(Error::Invalid(format!("{n_tokens} evaluation tokens, need {}", self.seq_len)));
        }
        Ok(())
    }
}

/// A drafter under evaluation.
#[derive(Clone, Copy)]
pub enum Method<'a, T: Real = f32> {
    Transfer(&'a TransferBundle<T>, MaskMode),
    Medusa(&'a MedusaHeads<T>),
    EarlyExit(&'a ExitHeads<T>),
    /// Uniformly random ranking; the chance-level control.
    Random,
}

impl<T: Real> Method<'_, T> {
    pub fn label(&self) -> String {
        match self {
            Method::Transfer(_, MaskMode::NoMasked) => "transfer".into(),
            Method::Transfer(_, MaskMode::Masked) => "transfer_masked".into(),
            Method::Medusa(_) => "medusa".into(),
            Method::EarlyExit(_) => "early_exit".into(),
            Method::Random => "random".into(),
        }
    }

    fn steps(&self) -> usize {
        match self {
            Method::Transfer(b, _) => b.config.k,
            Method::Medusa(h) => h.k(),
            Method::EarlyExit(h) => h.k(),
            Method::Random => usize::MAX,
        }
    }
}

/// Top-K draft hit rates against the model's own greedy continuation.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub methods: Vec<String>,
    pub steps: usize,
    pub top_k: Vec<usize>,
    /// `hits[m][i - 1][j]`: splits where method `m`'s step-`i` top-`top_k[j]`
    /// set contained the greedy token.
    pub hits: Vec<Vec<Vec<u64>>>,
    pub samples: u64,
    pub seeds: Vec<u64>,
}

impl AccuracyReport {
    pub fn method_index(&self, label: &str) -> Option<usize> {
        self.methods.iter().position(|m| m == label)
    }

    pub fn rate(&self, method: usize, step: usize, k_index: usize) -> f64 {
        self.hits[method][step - 1][k_index] as f64 / self.samples.max(1) as f64
    }

    /// Binomial standard error of [`AccuracyReport::rate`].
    pub fn stderr(&self, method: usize, step: usize, k_index: usize) -> f64 {
        let p = self.rate(method, step, k_index);
        (p * (1.0 - p) / self.samples.max(1) as f64).sqrt()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "step", "top_k", "hits", "samples", "accuracy", "stderr"])
            .map_err(csv_err)?;
        for (m, label) in self.methods.iter().enumerate() {
            for step in 1..=self.steps {
                for (j, k) in self.top_k.iter().enumerate() {
                    w.write_record([
                        label.clone(),
                        step.to_string(),
                        k.to_string(),
                        self.hits[m][step - 1][j].to_string(),
                        self.samples.to_string(),
                        format!("{:.6}", self.rate(m, step, j)),
                        format!("{:.6}", self.stderr(m, step, j)),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean cosine similarity between pseudo and real states, by step and layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTrace {
    /// Transfer layer of each step; step `i` is traced from `step_layers[i-1]`.
    pub step_layers: Vec<usize>,
    pub n_layers: usize,
    /// `sums[i - 1][t]`: summed cosine at layer `t`.
    pub sums: Vec<Vec<f64>>,
    pub samples: u64,
}

impl SimilarityTrace {
    pub fn mean(&self, step: usize, layer: usize) -> Option<f64> {
        let first = *self.step_layers.get(step - 1)?;
        (layer >= first && layer <= self.n_layers && self.samples > 0).then(|| self.sums[step - 1][layer] / self.samples as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "layer", "mean_cosine", "samples"]).map_err(csv_err)?;
        for step in 1..=self.step_layers.len() {
            for layer in self.step_layers[step - 1]..=self.n_layers {
                let mean = self.mean(step, layer).unwrap_or(f64::NAN);
                w.write_record([step.to_string(), layer.to_string(), format!("{mean:.6}"), self.samples.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Calls `visit(sequence, split, cache)` for every sampled split with the
/// cache holding the sequence's rows before the split. Returns the number
/// of splits visited.
pub(crate) fn for_each_split<T: Real>(
    model: &ModelWeights<T>,
    tokens: &[u32],
    opts: &EvalOptions,
    mut visit: impl FnMut(&[u32], usize, &mut KVCache<T>) -> Result<()>,
) -> Result<u64> {
    let cfg = &model.config;
    opts.validate(cfg.max_positions, tokens.len())?;
    let mut visited = 0;
    for &seed in &opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..opts.n_seq {
            let start = rng.random_range(0..=tokens.len() - opts.seq_len);
            let seq = &tokens[start..start + opts.seq_len];
            let mut splits: Vec<usize> = index::sample(&mut rng, opts.seq_len - opts.min_split, opts.n_splits)
                .into_iter()
                .map(|i| i + opts.min_split)
                .collect();
            splits.sort_unstable();
            let mut cache = KVCache::new(cfg.n_layers, cfg.d_model, cfg.max_positions);
            for s in splits {
                let have = cache.len();
                if have < s {
                    let positions: Vec<usize> = (have..s).collect();
                    model.forward(&seq[have..s], &positions, &AttnMask::causal(s - have, have), Some(&mut cache), &[])?;
                }
                visit(seq, s, &mut cache)?;
                cache.truncate(s);
                visited += 1;
            }
        }
    }
    Ok(visited)
}

struct SplitResult<T: Real> {
    /// `targets[i]`: greedy token `i + 1` positions after the split row.
    targets: Vec<u32>,
    /// Per method, per step.
    drafts: Vec<Vec<Vec<T>>>,
}

/// Evaluates every method at every split; with `trace`, also records the
/// cosine trace of the given transfer method.
fn evaluate<T: Real>(
    model: &ModelWeights<T>,
    tokens: &[u32],
    methods: &[Method<'_, T>],
    opts: &EvalOptions,
    trace: Option<usize>,
    mut on_split: impl FnMut(&SplitResult<T>),
) -> Result<(u64, Option<SimilarityTrace>)> {
    let n_layers = model.config.n_layers;
    let all_layers: Vec<usize> = (0..=n_layers).collect();
    let mut attached = Vec::with_capacity(methods.len());
    for m in methods {
        if m.steps() < opts.steps {
            return Err(Error::Invalid(format!(
                "{} drafts {} steps, {} requested",
                m.label(),
                m.steps(),
                opts.steps
            )));
        }
        attached.push(match m {
            Method::Transfer(b, _) => Some(AttachedTransfer::new(model, b)?),
            Method::Medusa(h) => {
                h.check_base(model)?;
                None
            }
            Method::EarlyExit(h) => {
                h.check_base(model)?;
                None
            }
            Method::Random => None,
        });
    }
    let mut similarity = match trace.map(|m| methods[m]) {
        None => None,
        Some(Method::Transfer(b, _)) => Some(SimilarityTrace {
            step_layers: b.config.layers[..opts.steps].to_vec(),
            n_layers,
            sums: vec![vec![0.0; n_layers + 1]; opts.steps],
            samples: 0,
        }),
        Some(_) => return Err(Error::Invalid("cosine trace needs a transfer method".into())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seeds[0] ^ 0x5eed);
    let vocab = model.config.vocab_size;

    let visited = for_each_split(model, tokens, opts, |seq, s, cache| {
        let row = [seq[s]];
        let causal = AttnMask::causal(1, s);
        let mut drafts = vec![Vec::new(); methods.len()];
        let mut pseudo_states = None;
        for (m, method) in methods.iter().enumerate() {
            if let (Method::Transfer(_, mode), Some(t)) = (method, &attached[m]) {
                let want: &[usize] = if trace == Some(m) { &all_layers } else { &[] };
                let out = t.forward(&row, &[s], &causal, Some(cache), &[0], *mode, want)?;
                cache.truncate(s);
                if trace == Some(m) {
                    pseudo_states = Some((out.taps.clone(), out.pseudo_rows[0].clone()));
                }
                drafts[m] = out.drafts.into_iter().next().unwrap_or_default();
            }
        }
        let base = model.forward(&row, &[s], &causal, Some(cache), &all_layers)?;
        for (m, method) in methods.iter().enumerate() {
            match method {
                Method::Medusa(h) => drafts[m] = medusa_draft_distributions(base.hidden.row(0), h),
                Method::EarlyExit(h) => drafts[m] = h.distributions(&base.taps, 0)?,
                Method::Random => {
                    drafts[m] = (0..opts.steps)
                        .map(|_| (0..vocab).map(|_| T::c(rng.random::<f64>())).collect())
                        .collect()
                }
                Method::Transfer(..) => {}
            }
        }
        let mut targets = vec![argmax_token(base.logits.row(0))?];
        let mut real_states = Vec::with_capacity(opts.steps);
        for j in 1..=opts.steps {
            let p = s + j;
            let out = model.forward(&[targets[j - 1]], &[p], &AttnMask::causal(1, p), Some(cache), &all_layers)?;
            targets.push(argmax_token(out.logits.row(0))?);
            real_states.push(out.taps);
        }
        if let (Some(sim), Some((taps, rows))) = (similarity.as_mut(), pseudo_states) {
            for step in 1..=opts.steps {
                let Some(&prow) = rows.get(step - 1) else { continue };
                for t in sim.step_layers[step - 1]..=n_layers {
                    let pseudo = taps[&t].row(prow);
                    let real = real_states[step - 1][&t].row(0);
                    sim.sums[step - 1][t] += cosine_similarity(pseudo, real);
                }
            }
            sim.samples += 1;
        }
        on_split(&SplitResult { targets, drafts });
        Ok(())
    })?;
    Ok((visited, similarity))
}

/// Top-K hit rates of each method's step drafts against the frozen model's
/// greedy continuation at sampled split points.
pub fn eval_draft_accuracy<T: Real>(
    model: &ModelWeights<T>,
    tokens: &[u32],
    methods: &[Method<'_, T>],
    opts: &EvalOptions,
) -> Result<AccuracyReport> {
    let kmax = opts.top_k.iter().copied().max().unwrap_or(0);
    let mut hits = vec![vec![vec![0u64; opts.top_k.len()]; opts.steps]; methods.len()];
    let (samples, _) = evaluate(model, tokens, methods, opts, None, |r| {
        for (m, drafts) in r.drafts.iter().enumerate() {
            for step in 1..=opts.steps {
                let Some(dist) = drafts.get(step - 1) else { continue };
                let ranked = top_k_indices(dist, kmax);
                let target = r.targets[step];
                if let Some(pos) = ranked.iter().position(|&t| t == target) {
                    for (j, &k) in opts.top_k.iter().enumerate() {
                        if pos < k {
                            hits[m][step - 1][j] += 1;
                        }
                    }
                }
            }
        }
    })?;
    Ok(AccuracyReport {
        methods: methods.iter().map(Method::label).collect(),
        steps: opts.steps,
        top_k: opts.top_k.clone(),
        hits,
        samples,
        seeds: opts.seeds.clone(),
    })
}

/// Cosine similarity between each step's pseudo state and the real state of
/// the greedy token at its position, at every layer from the step's transfer
/// layer to the top.
pub fn cosine_trace<T: Real>(
    model: &ModelWeights<T>,
    bundle: &TransferBundle<T>,
    tokens: &[u32],
    opts: &EvalOptions,
) -> Result<SimilarityTrace> {
    let opts = EvalOptions {
        steps: opts.steps.min(bundle.config.k),
        ..opts.clone()
    };
    let methods = [Method::Transfer(bundle, bundle.config.mask_mode)];
    let (_, trace) = evaluate(model, tokens, &methods, &opts, Some(0), |_| {})?;
    Ok(trace.expect("trace requested"))
}

/// Step drafts of two methods compared split by split: the largest absolute
/// difference per step.
pub(crate) fn max_draft_diff<T: Real>(
    model: &ModelWeights<T>,
    tokens: &[u32],
    a: Method<'_, T>,
    b: Method<'_, T>,
    opts: &EvalOptions,
) -> Result<Vec<f64>> {
    let mut diffs = vec![0.0f64; opts.steps];
    evaluate(model, tokens, &[a, b], opts, None, |r| {
        for (step, d) in diffs.iter_mut().enumerate() {
            if let (Some(x), Some(y)) = (r.drafts[0].get(step), r.drafts[1].get(step)) {
                for (p, q) in x.iter().zip(y) {
                    *d = d.max((p.f64() - q.f64()).abs());
                }
            }
        }
    })?;
    Ok(diffs)
}
