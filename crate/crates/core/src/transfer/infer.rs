use std::collections::BTreeMap;

use super::train::project;
use super::{MaskMode, TransferBundle};
use crate::error::{Error, Result};
use crate::model::{AttnMask, Injection, KVCache, ModelWeights, Taps};
use crate::numerics::{kernels, softmax, Real, Tape, Tensor, Var};

type Projection<T> = Box<dyn Fn(&Tape<T>, Var) -> Result<Var>>;

/// `h · W (+ b)` for the rows of `h_rows`, using step `step`'s projection.
pub fn synthesize_pseudo<T: Real>(h_rows: &Tensor<T>, step: usize, bundle: &TransferBundle<T>) -> Result<Tensor<T>> {
    if step == 0 || step > bundle.config.k {
        return Err(Error::Invalid(format!("step {step} outside 1..={}", bundle.config.k)));
    }
    let w = &bundle.weights[step - 1];
    let d = w.rows();
    if h_rows.rank() != 2 || h_rows.cols() != d {
        return Err(Error::shape("synthesize_pseudo", format!("rows {:?} for d = {d}", h_rows.shape())));
    }
    let m = h_rows.rows();
    let mut out = kernels::matmul(h_rows.data(), w.data(), m, d, d);
    if let Some(b) = &bundle.biases[step - 1] {
        for row in out.chunks_exact_mut(d) {
            for (x, &bv) in row.iter_mut().zip(b.data()) {
                *x = *x + bv;
            }
        }
    }
    Tensor::matrix(m, d, out)
}

/// A bundle checked against its base model.
pub struct AttachedTransfer<'a, T: Real = f32> {
    pub model: &'a ModelWeights<T>,
    pub bundle: &'a TransferBundle<T>,
}

/// Result of a forward with pseudo rows.
#[derive(Clone, Debug)]
pub struct PseudoOutput<T: Real = f32> {
    /// Logits of the real rows, exactly as without pseudo rows.
    pub logits: Tensor<T>,
    /// Final-normed top states of the real rows.
    pub hidden: Tensor<T>,
    /// `drafts[s][i - 1]`: step-`i` distribution of the `s`-th source. Steps
    /// whose position would pass `max_positions` are omitted.
    pub drafts: Vec<Vec<Vec<T>>>,
    /// `pseudo_rows[s][i - 1]`: row of that pseudo state in `taps`.
    pub pseudo_rows: Vec<Vec<usize>>,
    /// States of all rows (real, then pseudo) at requested layers. Rows not
    /// yet created at a layer are absent from its tensor.
    pub taps: BTreeMap<usize, Tensor<T>>,
}

impl<'a, T: Real> AttachedTransfer<'a, T> {
    pub fn new(model: &'a ModelWeights<T>, bundle: &'a TransferBundle<T>) -> Result<Self> {
        bundle.check_base(model)?;
        Ok(Self { model, bundle })
    }

    /// One forward over real rows `tokens` (masked by `mask` over the cache)
    /// that also synthesizes pseudo rows for each row in `sources`. Real rows
    /// are committed to `cache`; pseudo rows never are.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tokens: &[u32],
        positions: &[usize],
        mask: &AttnMask,
        cache: Option<&mut KVCache<T>>,
        sources: &[usize],
        mode: MaskMode,
        want_taps: &[usize],
    ) -> Result<PseudoOutput<T>> {
        let config = &self.bundle.config;
        let max_pos = self.model.config.max_positions;
        let r = tokens.len();
        if positions.len() != r || mask.rows() != r {
            return Err(Error::shape(
                "transfer forward",
                format!("{r} tokens, {} positions, {} mask rows", positions.len(), mask.rows()),
            ));
        }
        if let Some(&bad) = sources.iter().find(|&&s| s >= r) {
            return Err(Error::Invalid(format!("source row {bad} of {r}")));
        }
        let prefix = mask.prefix_len();
        // Steps available per source; positions grow with the step, so the
        // valid steps form a prefix.
        let steps: Vec<usize> = sources
            .iter()
            .map(|&s| (1..=config.k).take_while(|i| positions[s] + i < max_pos).count())
            .collect();
        let mut pseudo_rows = vec![Vec::new(); sources.len()];
        let mut blocks = Vec::new();
        let mut next = r;
        for i in 1..=config.k {
            let members: Vec<usize> = (0..sources.len()).filter(|&s| steps[s] >= i).collect();
            for &s in &members {
                pseudo_rows[s].push(next);
                next += 1;
            }
            blocks.push(members);
        }
        let total = next;
        let mut full = AttnMask::empty(total, prefix + total);
        for row in 0..r {
            for c in mask.permitted(row) {
                full.allow(row, c);
            }
        }
        for (s, rows) in pseudo_rows.iter().enumerate() {
            let src_cols = mask.permitted(sources[s]);
            for (i, &row) in rows.iter().enumerate() {
                for &c in &src_cols {
                    full.allow(row, c);
                }
                if mode == MaskMode::NoMasked {
                    for &lower in &rows[..i] {
                        full.allow(row, prefix + lower);
                    }
                }
                full.allow(row, prefix + row);
            }
        }

        let tape = Tape::inference();
        let bound = self.model.bind(&tape, false);
        let params: Vec<(Var, Option<Var>)> = (0..config.k)
            .map(|i| {
                (
                    tape.constant(self.bundle.weights[i].clone()),
                    self.bundle.biases[i].as_ref().map(|b| tape.constant(b.clone())),
                )
            })
            .collect();
        let projections: Vec<Projection<T>> = params
            .iter()
            .map(|&(w, b)| Box::new(move |t: &Tape<T>, x: Var| project(t, x, w, b)) as Projection<T>)
            .collect();
        let injections: Vec<Injection<'_, T>> = blocks
            .iter()
            .enumerate()
            .map(|(i, members)| Injection {
                layer: config.layers[i],
                sources: members.iter().map(|&s| sources[s]).collect(),
                positions: members.iter().map(|&s| positions[sources[s]] + i + 1).collect(),
                project: projections[i].as_ref(),
            })
            .collect();
        let mut taps = Taps::new();
        let top = bound.forward_injected(&tape, tokens, positions, &full, cache, &injections, want_taps, &mut taps)?;
        let hidden = bound.final_norm(&tape, top)?;
        let logits = bound.lm_head(&tape, hidden)?;
        let hidden = tape.value(hidden);
        let logits = tape.value(logits);
        let real: Vec<usize> = (0..r).collect();
        let probs = softmax(&logits.select_rows(&(r..total).collect::<Vec<_>>()))?;
        let drafts = pseudo_rows
            .iter()
            .map(|rows| rows.iter().map(|&row| probs.row(row - r).to_vec()).collect())
            .collect();
        Ok(PseudoOutput {
            logits: logits.select_rows(&real),
            hidden: hidden.select_rows(&real),
            drafts,
            pseudo_rows,
            taps: taps.into_iter().map(|(l, v)| (l, (*tape.value(v)).clone())).collect(),
        })
    }

    /// Appends `tokens` causally after `cache` and returns their logits plus
    /// the step distributions drafted from the last of them.
    pub fn draft_distributions(&self, tokens: &[u32], cache: &mut KVCache<T>, mode: MaskMode) -> Result<(Tensor<T>, Vec<Vec<T>>)> {
        if tokens.is_empty() {
            return Err(Error::Invalid("no tokens to draft from".into()));
        }
        let start = cache.len();
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let mask = AttnMask::causal(tokens.len(), start);
        let out = self.forward(tokens, &positions, &mask, Some(cache), &[tokens.len() - 1], mode, &[])?;
        let drafts = out.drafts.into_iter().next().unwrap_or_default();
        Ok((out.logits, drafts))
    }
}
