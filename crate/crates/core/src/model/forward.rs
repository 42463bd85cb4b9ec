use std::collections::BTreeMap;

use super::attention::{attention, rope, Prefix};
use super::config::NORM_EPS;
use super::{AttnMask, KVCache, ModelWeights};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// A model's tensors registered on one tape.
pub struct BoundModel<'m, T: Real = f32> {
    pub weights: &'m ModelWeights<T>,
    pub embedding: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub lm_head: Var,
}

/// Rows synthesized from existing rows' states at some layer and appended to
/// the sequence from that layer upward.
pub struct Injection<'a, T: Real> {
    /// Number of blocks already applied when the rows are created.
    pub layer: usize,
    /// Row index (among rows existing at `layer`) feeding each new row.
    pub sources: Vec<usize>,
    pub positions: Vec<usize>,
    pub project: &'a dyn Fn(&Tape<T>, Var) -> Result<Var>,
}

/// Tapped states keyed by layer (`t` = after `t` blocks, 0 = embedding).
pub type Taps = BTreeMap<usize, Var>;

/// Output of a plain inference forward.
#[derive(Clone, Debug)]
pub struct ForwardResult<T: Real = f32> {
    /// Top-layer states after the final norm.
    pub hidden: Tensor<T>,
    pub logits: Tensor<T>,
    /// Residual-stream states at the requested layers.
    pub taps: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> ModelWeights<T> {
    /// Registers every tensor on `tape`, trainable or frozen.
    pub fn bind<'m>(&'m self, tape: &Tape<T>, trainable: bool) -> BoundModel<'m, T> {
        let reg = |t: &std::sync::Arc<Tensor<T>>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundModel {
            weights: self,
            embedding: reg(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    attn_norm: reg(&l.attn_norm),
                    wq: reg(&l.wq),
                    wk: reg(&l.wk),
                    wv: reg(&l.wv),
                    wo: reg(&l.wo),
                    mlp_norm: reg(&l.mlp_norm),
                    w_gate: reg(&l.w_gate),
                    w_up: reg(&l.w_up),
                    w_down: reg(&l.w_down),
                })
                .collect(),
            final_norm: reg(&self.final_norm),
            lm_head: reg(&self.lm_head),
        }
    }

    /// Inference forward over `tokens` (optionally continuing `cache`),
    /// returning logits for every row.
    pub fn forward(
        &self,
        tokens: &[u32],
        positions: &[usize],
        mask: &AttnMask,
        cache: Option<&mut KVCache<T>>,
        taps: &[usize],
    ) -> Result<ForwardResult<T>> {
        let tape = Tape::inference();
        let bound = self.bind(&tape, false);
        let h = bound.embed(&tape, tokens, positions)?;
        let mut tapped = Taps::new();
        let top = bound.run_layers(
            &tape,
            h,
            0,
            self.config.n_layers,
            positions,
            mask,
            cache,
            tokens.len(),
            taps,
            &mut tapped,
        )?;
        let hidden = bound.final_norm(&tape, top)?;
        let logits = bound.lm_head(&tape, hidden)?;
        Ok(ForwardResult {
            hidden: (*tape.value(hidden)).clone(),
            logits: (*tape.value(logits)).clone(),
            taps: tapped.into_iter().map(|(l, v)| (l, (*tape.value(v)).clone())).collect(),
        })
    }

    /// Causal forward of a whole sequence from scratch.
    pub fn forward_causal(&self, tokens: &[u32]) -> Result<ForwardResult<T>> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        self.forward(tokens, &positions, &AttnMask::causal(tokens.len(), 0), None, &[])
    }
}

impl<'m, T: Real> BoundModel<'m, T> {
    /// All bound tensors with their checkpoint names.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = vec![("tok_embedding".to_string(), self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            let pairs = [
                ("attn_norm", l.attn_norm),
                ("wq", l.wq),
                ("wk", l.wk),
                ("wv", l.wv),
                ("wo", l.wo),
                ("mlp_norm", l.mlp_norm),
                ("w_gate", l.w_gate),
                ("w_up", l.w_up),
                ("w_down", l.w_down),
            ];
            for (n, v) in pairs {
                out.push((format!("layers.{i}.{n}"), v));
            }
        }
        out.push(("final_norm".into(), self.final_norm));
        out.push(("lm_head".into(), self.lm_head));
        out
    }

    fn check_positions(&self, positions: &[usize]) -> Result<()> {
        let max = self.weights.config.max_positions;
        if let Some(&p) = positions.iter().find(|&&p| p >= max) {
            return Err(Error::Invalid(format!("position {p} ≥ max_positions {max}")));
        }
        Ok(())
    }

    /// Token embedding rows. Positions only enter through attention, so they
    /// are validated here but do not change the rows.
    pub fn embed(&self, tape: &Tape<T>, tokens: &[u32], positions: &[usize]) -> Result<Var> {
        if tokens.len() != positions.len() {
            return Err(Error::shape(
                "embed",
                format!("{} tokens, {} positions", tokens.len(), positions.len()),
            ));
        }
        self.check_positions(positions)?;
        tape.embedding(self.embedding, tokens)
    }

    /// Applies blocks `from..to`. With a cache, each block attends over the
    /// cached prefix plus the current rows and stages the first `commit`
    /// rows' keys/values; a call that runs the top block commits them.
    #[allow(clippy::too_many_arguments)]
    pub fn run_layers(
        &self,
        tape: &Tape<T>,
        h: Var,
        from: usize,
        to: usize,
        positions: &[usize],
        mask: &AttnMask,
        mut cache: Option<&mut KVCache<T>>,
        commit: usize,
        want_taps: &[usize],
        taps: &mut Taps,
    ) -> Result<Var> {
        let cfg = &self.weights.config;
        if from > to || to > cfg.n_layers {
            return Err(Error::Invalid(format!("layer range {from}..{to} outside 0..={}", cfg.n_layers)));
        }
        let rows = tape.shape(h)[0];
        let prefix = cache.as_ref().map_or(0, |c| c.len());
        if positions.len() != rows || mask.rows() != rows || mask.cols() != prefix + rows {
            return Err(Error::shape(
                "run_layers",
                format!(
                    "{rows} rows, {} positions, mask {}×{} with {prefix} cached",
                    positions.len(),
                    mask.rows(),
                    mask.cols()
                ),
            ));
        }
        mask.validate()?;
        self.check_positions(positions)?;
        if let Some(c) = cache.as_ref() {
            if commit > rows {
                return Err(Error::Invalid(format!("cannot commit {commit} of {rows} rows")));
            }
            c.check_room(commit)?;
        }
        if rows == 0 {
            return Ok(h);
        }
        let mut h = h;
        if want_taps.contains(&from) {
            taps.insert(from, h);
        }
        for layer in from..to {
            let result = self.block(tape, layer, h, positions, mask, cache.as_deref_mut(), commit);
            h = match result {
                Ok(h) => h,
                Err(e) => {
                    if let Some(c) = cache.as_deref_mut() {
                        c.discard_staged();
                    }
                    return Err(e);
                }
            };
            if want_taps.contains(&(layer + 1)) {
                taps.insert(layer + 1, h);
            }
        }
        if to == cfg.n_layers && from < to {
            if let Some(c) = cache {
                c.commit_positions(&positions[..commit])?;
            }
        }
        Ok(h)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &Tape<T>,
        layer: usize,
        h: Var,
        positions: &[usize],
        mask: &AttnMask,
        cache: Option<&mut KVCache<T>>,
        commit: usize,
    ) -> Result<Var> {
        let w = &self.layers[layer];
        let n_heads = self.weights.config.n_heads;
        let eps = T::c(NORM_EPS);
        let x = tape.rms_norm(h, w.attn_norm, eps)?;
        let q = rope(tape, tape.matmul(x, w.wq)?, positions, n_heads)?;
        let k = rope(tape, tape.matmul(x, w.wk)?, positions, n_heads)?;
        let v = tape.matmul(x, w.wv)?;
        let attn = match cache {
            Some(c) => {
                let prefix = Prefix {
                    keys: c.keys(layer),
                    values: c.values(layer),
                    len: c.len(),
                };
                let out = attention(tape, q, k, v, Some(prefix), mask, n_heads)?;
                let d = self.weights.config.d_model;
                let (kv, vv) = (tape.value(k), tape.value(v));
                c.stage(layer, &kv.data()[..commit * d], &vv.data()[..commit * d]);
                out
            }
            None => attention(tape, q, k, v, None, mask, n_heads)?,
        };
        let h = tape.add(h, tape.matmul(attn, w.wo)?)?;
        let x = tape.rms_norm(h, w.mlp_norm, eps)?;
        let gate = tape.silu(tape.matmul(x, w.w_gate)?)?;
        let up = tape.matmul(x, w.w_up)?;
        let mlp = tape.matmul(tape.mul(gate, up)?, w.w_down)?;
        tape.add(h, mlp)
    }

    pub fn final_norm(&self, tape: &Tape<T>, h: Var) -> Result<Var> {
        tape.rms_norm(h, self.final_norm, T::c(NORM_EPS))
    }

    /// Projects final-normed states to vocabulary logits.
    pub fn lm_head(&self, tape: &Tape<T>, h: Var) -> Result<Var> {
        tape.matmul(h, self.lm_head)
    }

    /// Forward in which extra rows are created mid-stack by `injections`
    /// (ordered by layer). `mask` covers every row: real rows first, then each
    /// injection's rows in order. Only the real rows are committed to `cache`.
    /// Returns the top-layer residual states of all rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_injected(
        &self,
        tape: &Tape<T>,
        tokens: &[u32],
        positions: &[usize],
        mask: &AttnMask,
        mut cache: Option<&mut KVCache<T>>,
        injections: &[Injection<'_, T>],
        want_taps: &[usize],
        taps: &mut Taps,
    ) -> Result<Var> {
        let n_layers = self.weights.config.n_layers;
        let n_real = tokens.len();
        let total = n_real + injections.iter().map(|i| i.sources.len()).sum::<usize>();
        if mask.rows() != total {
            return Err(Error::shape(
                "forward_injected",
                format!("mask has {} rows for {total}", mask.rows()),
            ));
        }
        if injections.windows(2).any(|w| w[0].layer > w[1].layer) {
            return Err(Error::Invalid("injections must be ordered by layer".into()));
        }
        let mut all_positions = positions.to_vec();
        let mut h = self.embed(tape, tokens, positions)?;
        let mut layer = 0;
        for inj in injections {
            if inj.layer > n_layers || inj.sources.len() != inj.positions.len() {
                return Err(Error::Invalid(format!(
                    "injection at layer {} with {} sources / {} positions",
                    inj.layer,
                    inj.sources.len(),
                    inj.positions.len()
                )));
            }
            let rows = all_positions.len();
            if inj.layer > layer {
                h = self.run_layers(
                    tape,
                    h,
                    layer,
                    inj.layer,
                    &all_positions,
                    &mask.leading(rows),
                    cache.as_deref_mut(),
                    n_real,
                    want_taps,
                    taps,
                )?;
            }
            layer = inj.layer;
            if inj.sources.is_empty() {
                continue;
            }
            let src = tape.gather_rows(h, &inj.sources)?;
            let pseudo = (inj.project)(tape, src)?;
            h = tape.concat_rows(h, pseudo)?;
            all_positions.extend_from_slice(&inj.positions);
            if want_taps.contains(&layer) {
                taps.insert(layer, h);
            }
        }
        if layer == n_layers {
            // Rows injected at the top have no blocks left to pass through.
            return Ok(h);
        }
        let rows = all_positions.len();
        self.run_layers(
            tape,
            h,
            layer,
            n_layers,
            &all_positions,
            &mask.leading(rows),
            cache,
            n_real,
            want_taps,
            taps,
        )
    }
}
