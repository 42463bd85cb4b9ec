use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use super::stats::DecodeStats;
use super::tree::{build_candidates, flatten_tree, DraftTree, TreeSpec};
use crate::error::{Error, Result};
use crate::heads::{medusa_draft_distributions, MedusaHeads};
use crate::model::{AttnMask, KVCache, ModelWeights};
use crate::numerics::{argmax_token, Real, Tensor};
use crate::transfer::{AttachedTransfer, MaskMode, TransferBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecodeMode {
    Autoregressive,
    /// One forward verifies the tree and drafts the next round.
    TransferTree,
    /// Verification and drafting in separate forwards.
    TransferTwoPass,
    MedusaTree,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 4] = [
        DecodeMode::Autoregressive,
        DecodeMode::TransferTree,
        DecodeMode::TransferTwoPass,
        DecodeMode::MedusaTree,
    ];
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Autoregressive => "autoregressive",
            DecodeMode::TransferTree => "transfer_tree",
            DecodeMode::TransferTwoPass => "transfer_two_pass",
            DecodeMode::MedusaTree => "medusa_tree",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown mode {s:?} (autoregressive | transfer_tree | transfer_two_pass | medusa_tree)"
            ))
        })
    }
}

/// Result of one verification round.
#[derive(Clone, Debug)]
pub struct VerifyOutcome<T: Real = f32> {
    /// Accepted draft nodes from the root down (root excluded).
    pub path: Vec<usize>,
    /// Node whose verified logits produced the bonus token.
    pub stop: usize,
    /// Accepted draft tokens followed by the bonus token.
    pub tokens: Vec<u32>,
    pub bonus: u32,
    /// Step distributions for the next round.
    pub drafts: Vec<Vec<T>>,
    pub forwards: usize,
}

impl<T: Real> VerifyOutcome<T> {
    pub fn accepted(&self) -> usize {
        self.path.len()
    }
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub stats: DecodeStats,
}

/// Frozen model plus optional drafters, shared read-only by sessions.
pub struct Decoder<'a, T: Real = f32> {
    pub model: &'a ModelWeights<T>,
    transfer: Option<AttachedTransfer<'a, T>>,
    medusa: Option<&'a MedusaHeads<T>>,
    pub spec: TreeSpec,
    pub mask_mode: MaskMode,
}

impl<'a, T: Real> Decoder<'a, T> {
    /// Autoregressive-only decoder with the default (3, 2, 2) tree.
    pub fn new(model: &'a ModelWeights<T>) -> Self {
        Self {
            model,
            transfer: None,
            medusa: None,
            spec: TreeSpec::full(&[3, 2, 2]),
            mask_mode: MaskMode::default(),
        }
    }

    pub fn with_transfer(mut self, bundle: &'a TransferBundle<T>) -> Result<Self> {
        self.transfer = Some(AttachedTransfer::new(self.model, bundle)?);
        self.mask_mode = bundle.config.mask_mode;
        Ok(self)
    }

    pub fn with_medusa(mut self, heads: &'a MedusaHeads<T>) -> Result<Self> {
        heads.check_base(self.model)?;
        self.medusa = Some(heads);
        Ok(self)
    }

    pub fn with_spec(mut self, spec: TreeSpec) -> Self {
        self.spec = spec;
        self
    }

    pub fn with_mask_mode(mut self, mode: MaskMode) -> Self {
        self.mask_mode = mode;
        self
    }

    pub fn session(&self, mode: DecodeMode) -> Result<Session<'_, 'a, T>> {
        let k = match mode {
            DecodeMode::Autoregressive => usize::MAX,
            DecodeMode::TransferTree | DecodeMode::TransferTwoPass => {
                self.transfer
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("{mode} needs a transfer bundle")))?
                    .bundle
                    .config
                    .k
            }
            DecodeMode::MedusaTree => self.medusa.ok_or_else(|| Error::Invalid(format!("{mode} needs Medusa heads")))?.k(),
        };
        if mode != DecodeMode::Autoregressive && self.spec.depth() > k {
            return Err(Error::Invalid(format!(
                "tree depth {} exceeds the drafter's {k} steps",
                self.spec.depth()
            )));
        }
        let cfg = &self.model.config;
        Ok(Session {
            dec: self,
            mode,
            cache: KVCache::new(cfg.n_layers, cfg.d_model, cfg.max_positions + self.spec.len()),
            root: None,
            drafts: Vec::new(),
        })
    }

    /// Greedy decoding of up to `max_tokens` tokens after `prompt`.
    pub fn decode(&self, prompt: &[u32], max_tokens: usize, mode: DecodeMode) -> Result<DecodeOutput> {
        let start = Instant::now();
        let mut stats = DecodeStats::default();
        let mut tokens = Vec::new();
        if max_tokens == 0 {
            return Ok(DecodeOutput { tokens, stats });
        }
        let mut session = self.session(mode)?;
        tokens.push(session.prefill(prompt)?);
        stats.record(1, 1);
        while tokens.len() < max_tokens {
            let Some(tree) = session.next_tree()? else {
                stats.truncated = true;
                break;
            };
            let outcome = session.verify_and_extend(&tree)?;
            let take = outcome.tokens.len().min(max_tokens - tokens.len());
            tokens.extend_from_slice(&outcome.tokens[..take]);
            stats.record(outcome.forwards, take);
            if mode != DecodeMode::Autoregressive {
                stats.record_acceptance(outcome.accepted());
            }
        }
        stats.wall = start.elapsed();
        Ok(DecodeOutput { tokens, stats })
    }
}

/// Decoding state: the verified prefix in the cache plus the pending root
/// token (emitted but not yet fed) and its drafts.
pub struct Session<'d, 'a, T: Real = f32> {
    dec: &'d Decoder<'a, T>,
    mode: DecodeMode,
    cache: KVCache<T>,
    root: Option<u32>,
    drafts: Vec<Vec<T>>,
}

impl<T: Real> Session<'_, '_, T> {
    pub fn cache(&self) -> &KVCache<T> {
        &self.cache
    }

    pub fn root(&self) -> Option<u32> {
        self.root
    }

    pub fn drafts(&self) -> &[Vec<T>] {
        &self.drafts
    }

    /// Feeds the prompt and returns the first generated token.
    pub fn prefill(&mut self, prompt: &[u32]) -> Result<u32> {
        let max = self.dec.model.config.max_positions;
        if prompt.is_empty() || prompt.len() > max {
            return Err(Error::Invalid(format!(
                "prompt of {} tokens must be within 1..={max}",
                prompt.len()
            )));
        }
        if self.root.is_some() || !self.cache.is_empty() {
            return Err(Error::Invalid("session already started".into()));
        }
        let n = prompt.len();
        let logits = match self.mode {
            DecodeMode::TransferTree | DecodeMode::TransferTwoPass => {
                let t = self.dec.transfer.as_ref().expect("checked at session start");
                let positions: Vec<usize> = (0..n).collect();
                let out = t.forward(
                    prompt,
                    &positions,
                    &AttnMask::causal(n, 0),
                    Some(&mut self.cache),
                    &[n - 1],
                    self.dec.mask_mode,
                    &[],
                )?;
                self.drafts = out.drafts.into_iter().next().unwrap_or_default();
                out.logits
            }
            DecodeMode::Autoregressive | DecodeMode::MedusaTree => {
                let positions: Vec<usize> = (0..n).collect();
                let out = self
                    .dec
                    .model
                    .forward(prompt, &positions, &AttnMask::causal(n, 0), Some(&mut self.cache), &[])?;
                if let Some(heads) = self.dec.medusa.filter(|_| self.mode == DecodeMode::MedusaTree) {
                    self.drafts = medusa_draft_distributions(out.hidden.row(n - 1), heads);
                }
                out.logits
            }
        };
        let first = argmax_token(logits.row(n - 1))?;
        self.root = Some(first);
        Ok(first)
    }

    /// Candidate tree for the next round, pruned to the available drafts and
    /// the position limit; `None` once the root itself cannot be fed.
    pub fn next_tree(&self) -> Result<Option<DraftTree>> {
        let root = self.root.ok_or_else(|| Error::Invalid("prefill first".into()))?;
        let pos = self.cache.len();
        let max = self.dec.model.config.max_positions;
        if pos >= max {
            return Ok(None);
        }
        let depth = match self.mode {
            DecodeMode::Autoregressive => 0,
            _ => self.dec.spec.depth().min(self.drafts.len()).min(max - 1 - pos),
        };
        let spec = if depth == self.dec.spec.depth() {
            self.dec.spec.clone()
        } else {
            self.dec.spec.truncated(depth)
        };
        build_candidates(&self.drafts, &spec, root, pos).map(Some)
    }

    /// One verification round over `tree`: accepts the longest root path
    /// matching the model's greedy choices, emits the bonus token, keeps only
    /// the accepted path in the cache and refreshes the drafts.
    pub fn verify_and_extend(&mut self, tree: &DraftTree) -> Result<VerifyOutcome<T>> {
        let l = self.cache.len();
        if self.root != tree.tokens.first().copied() || tree.positions.first() != Some(&l) {
            return Err(Error::Invalid(format!(
                "tree rooted at {:?}/{:?} does not continue a cache of {l} with root {:?}",
                tree.tokens.first(),
                tree.positions.first(),
                self.root
            )));
        }
        let model = self.dec.model;
        let flat = flatten_tree(tree, l, model.config.max_positions)?;
        let n = tree.spec.len();
        let (logits, hidden, tree_drafts) = match self.mode {
            DecodeMode::TransferTree => {
                let t = self.dec.transfer.as_ref().expect("checked at session start");
                let sources: Vec<usize> = (0..n).collect();
                let out = t.forward(
                    &flat.tokens,
                    &flat.positions,
                    &flat.mask,
                    Some(&mut self.cache),
                    &sources,
                    self.dec.mask_mode,
                    &[],
                )?;
                (out.logits, out.hidden, Some(out.drafts))
            }
            _ => {
                let out = model.forward(&flat.tokens, &flat.positions, &flat.mask, Some(&mut self.cache), &[])?;
                (out.logits, out.hidden, None)
            }
        };
        let (path, stop, bonus) = walk(tree, &logits)?;
        let mut keep: Vec<usize> = (0..l).collect();
        keep.push(l);
        keep.extend(path.iter().map(|&p| l + p));
        let mut forwards = 1;
        let drafts = match self.mode {
            DecodeMode::TransferTree => tree_drafts.expect("transfer forward").swap_remove(stop),
            DecodeMode::MedusaTree => {
                self.cache.compact(&keep)?;
                medusa_draft_distributions(hidden.row(stop), self.dec.medusa.expect("checked"))
            }
            DecodeMode::TransferTwoPass => {
                keep.pop();
                self.cache.compact(&keep)?;
                let t = self.dec.transfer.as_ref().expect("checked at session start");
                let (_, drafts) = t.draft_distributions(&[tree.tokens[stop]], &mut self.cache, self.dec.mask_mode)?;
                forwards = 2;
                drafts
            }
            DecodeMode::Autoregressive => Vec::new(),
        };
        if matches!(self.mode, DecodeMode::TransferTree | DecodeMode::Autoregressive) {
            self.cache.compact(&keep)?;
        }
        let mut tokens: Vec<u32> = path.iter().map(|&p| tree.tokens[p]).collect();
        tokens.push(bonus);
        self.root = Some(bonus);
        self.drafts = drafts.clone();
        Ok(VerifyOutcome {
            path,
            stop,
            tokens,
            bonus,
            drafts,
            forwards,
        })
    }
}

/// Greedy walk from the root: descend into the child carrying the verified
/// argmax until none does.
fn walk<T: Real>(tree: &DraftTree, logits: &Tensor<T>) -> Result<(Vec<usize>, usize, u32)> {
    let mut cur = 0;
    let mut path = Vec::new();
    loop {
        let truth = argmax_token(logits.row(cur))?;
        match tree.spec.children(cur).find(|&c| tree.tokens[c] == truth) {
            Some(c) => {
                path.push(c);
                cur = c;
            }
            None => return Ok((path, cur, truth)),
        }
    }
}
