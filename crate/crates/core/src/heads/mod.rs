//! Baseline drafters: Medusa-style heads on the last-layer state and
//! early-exit heads on intermediate states.

mod exit;
mod medusa;

pub use exit::{exit_heldout_kl, exit_loss, train_early_exit, ExitHeads};
pub use medusa::{medusa_draft_distributions, medusa_heldout_kl, medusa_loss, train_medusa, MedusaHeads};

use crate::error::{Error, Result};

fn parse_meta(text: &str, kind: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("bad {kind} record line {line:?}")))
        })
        .collect()
}

fn parse_usize(v: &str, key: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Format(format!("bad number {v:?} for {key}")))
}
