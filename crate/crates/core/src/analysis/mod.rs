//! Measurements on trained artifacts: draft accuracy, the pseudo-state
//! similarity trace, transfer-layer sweeps, the masked/unmasked ablation and
//! the forward-time microbenchmark. None of them modify their inputs.

mod bench;
mod eval;

use std::io::Write;

pub use bench::{forward_microbench, width_ratio, write_bench_csv, BenchRow};
pub use eval::{cosine_trace, eval_draft_accuracy, AccuracyReport, EvalOptions, Method, SimilarityTrace};

use eval::{csv_err, max_draft_diff};

use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::train::TrainHyper;
use crate::transfer::{transfer_train, MaskMode, TransferBundle, TransferConfig};
use crate::treedec::{DecodeMode, DecodeStats, Decoder, TreeSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub layer: usize,
    /// Accuracy of the swept step at each `top_k`.
    pub accuracy: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: u64,
    /// Mean training loss over the last tenth of the steps.
    pub final_loss: f64,
}

/// Trains one bundle per candidate layer for `step` (1 or 2; step 2 keeps
/// step 1 at `fixed_lower`) and reports that step's draft accuracy.
#[allow(clippy::too_many_arguments)]
pub fn layer_sweep(
    model: &ModelWeights<f32>,
    corpus: &[u32],
    heldout: &[u32],
    step: usize,
    candidates: &[usize],
    fixed_lower: Option<usize>,
    template: &TransferConfig,
    hyper: &TrainHyper,
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    let n_layers = model.config.n_layers;
    let mut rows = Vec::with_capacity(candidates.len());
    for &layer in candidates {
        let layers = match (step, fixed_lower) {
            (1, _) => vec![layer],
            (2, Some(lower)) => vec![lower, layer],
            (2, None) => return Err(Error::Config("a step-2 sweep needs the fixed step-1 layer".into())),
            _ => return Err(Error::Config(format!("sweeps cover step 1 or 2, not {step}"))),
        };
        if layer == 0 || layer > n_layers {
            return Err(Error::Config(format!("sweep layer {layer} outside 1..={n_layers}")));
        }
        let config = TransferConfig {
            k: step,
            layers,
            ..template.clone()
        };
        let (bundle, report) = transfer_train(model, corpus, &config, hyper)?;
        let curve = &report.curves[step - 1];
        let tail = (curve.len() / 10).max(1);
        let final_loss = curve[curve.len() - tail..].iter().sum::<f64>() / tail as f64;
        let acc = eval_draft_accuracy(
            model,
            heldout,
            &[Method::Transfer(&bundle, config.mask_mode)],
            &EvalOptions {
                steps: step,
                ..opts.clone()
            },
        )?;
        rows.push(SweepRow {
            layer,
            accuracy: (0..opts.top_k.len()).map(|j| acc.rate(0, step, j)).collect(),
            stderr: (0..opts.top_k.len()).map(|j| acc.stderr(0, step, j)).collect(),
            samples: acc.samples,
            final_loss,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], top_k: &[usize], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "top_k", "accuracy", "stderr", "samples", "final_loss"])
        .map_err(csv_err)?;
    for r in rows {
        for (j, k) in top_k.iter().enumerate() {
            w.write_record([
                r.layer.to_string(),
                k.to_string(),
                format!("{:.6}", r.accuracy[j]),
                format!("{:.6}", r.stderr[j]),
                r.samples.to_string(),
                format!("{:.6}", r.final_loss),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inference-time cross-step masking compared on one bundle.
#[derive(Clone, Debug)]
pub struct AblationReport {
    /// Methods `transfer` (no_masked) and `transfer_masked`.
    pub accuracy: AccuracyReport,
    pub decode: Vec<(MaskMode, DecodeStats)>,
    /// Largest step-1 probability difference between the modes over all
    /// evaluated splits.
    pub step1_max_diff: f64,
}

impl AblationReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["mask_mode".to_string()];
        header.extend((1..=self.accuracy.steps).map(|s| format!("step{s}_top1")));
        header.extend([
            "tokens_per_forward".into(),
            "mean_accepted".into(),
            "forwards".into(),
            "emitted".into(),
        ]);
        w.write_record(&header).map_err(csv_err)?;
        for (m, (mode, stats)) in self.decode.iter().enumerate() {
            let mut rec = vec![mode.to_string()];
            rec.extend((1..=self.accuracy.steps).map(|s| format!("{:.6}", self.accuracy.rate(m, s, 0))));
            rec.extend([
                format!("{:.4}", stats.tokens_per_forward()),
                format!("{:.4}", stats.mean_acceptance()),
                stats.forwards.to_string(),
                stats.emitted.to_string(),
            ]);
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs draft accuracy and tree decoding under both inference masks.
pub fn ablation(
    model: &ModelWeights<f32>,
    bundle: &TransferBundle<f32>,
    heldout: &[u32],
    prompts: &[Vec<u32>],
    max_tokens: usize,
    spec: &TreeSpec,
    opts: &EvalOptions,
) -> Result<AblationReport> {
    let opts = EvalOptions {
        steps: opts.steps.min(bundle.config.k),
        top_k: vec![1],
        ..opts.clone()
    };
    let modes = [MaskMode::NoMasked, MaskMode::Masked];
    let methods = modes.map(|m| Method::Transfer(bundle, m));
    let accuracy = eval_draft_accuracy(model, heldout, &methods, &opts)?;
    let diffs = max_draft_diff(model, heldout, methods[0], methods[1], &EvalOptions { steps: 1, ..opts.clone() })?;
    let mut decode = Vec::new();
    for mode in modes {
        let dec = Decoder::new(model)
            .with_transfer(bundle)?
            .with_spec(spec.clone())
            .with_mask_mode(mode);
        let mut total = DecodeStats::default();
        for p in prompts {
            total.merge(&dec.decode(p, max_tokens, DecodeMode::TransferTree)?.stats);
        }
        decode.push((mode, total));
    }
    Ok(AblationReport {
        accuracy,
        decode,
        step1_max_diff: diffs[0],
    })
}
