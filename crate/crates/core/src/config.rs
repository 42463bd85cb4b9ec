//! Flat `key = value` run configuration shared by every command.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::EvalOptions;
use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PretrainConfig};
use crate::numerics::KlDirection;
use crate::train::TrainHyper;
use crate::transfer::{kl_direction_name, parse_kl_direction, MaskMode, TransferConfig};
use crate::treedec::TreeSpec;

/// Prefix of environment overrides: `HTD_D_MODEL=64` sets `d_model`.
pub const ENV_PREFIX: &str = "HTD_";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    /// Directory of plain-text files; empty selects the bundled corpus.
    pub corpus_dir: String,
    pub heldout_fraction: f64,
    pub context: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Optimizer-step cap shared by all training runs; 0 means no cap.
    pub max_steps: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub min_corpus_tokens: usize,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub k: usize,
    /// Transfer layer per step; empty derives them from the depth.
    pub transfer_layers: Vec<usize>,
    pub mask_mode: MaskMode,
    pub train_mask_mode: MaskMode,
    pub bias: bool,
    pub kl_direction: KlDirection,
    /// Tree file; empty selects the full (3, 2, 2) tree cut to `k` levels.
    pub tree_spec: String,
    pub max_tokens: usize,
    /// One prompt per line. This and every path below are relative to the
    /// output directory unless absolute.
    pub prompt_file: String,
    pub base_path: String,
    pub transfer_path: String,
    pub medusa_path: String,
    pub exit_path: String,
    pub n_seq: usize,
    pub n_splits: usize,
    pub seq_len: usize,
    pub min_split: usize,
    pub eval_steps: usize,
    pub top_k: Vec<usize>,
    pub eval_seeds: Vec<u64>,
    pub sweep_step: usize,
    /// Candidate layers of a sweep; empty means every layer.
    pub sweep_layers: Vec<usize>,
    pub bench_cache_lengths: Vec<usize>,
    pub bench_widths: Vec<usize>,
    pub bench_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvalOptions::default();
        Self {
            seed: 0,
            n_layers: 6,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            max_positions: 320,
            corpus_dir: String::new(),
            heldout_fraction: 0.05,
            context: 64,
            batch_size: 16,
            warmup_steps: 10,
            max_steps: 0,
            pretrain_epochs: 1,
            pretrain_lr: 3e-3,
            min_corpus_tokens: 0,
            train_epochs: 1,
            train_lr: 1e-3,
            k: 3,
            transfer_layers: Vec::new(),
            mask_mode: MaskMode::NoMasked,
            train_mask_mode: MaskMode::NoMasked,
            bias: false,
            kl_direction: KlDirection::TeacherStudent,
            tree_spec: String::new(),
            max_tokens: 128,
            prompt_file: String::new(),
            base_path: "base.htc".into(),
            transfer_path: "transfer.htc".into(),
            medusa_path: "medusa.htc".into(),
            exit_path: "exit.htc".into(),
            n_seq: eval.n_seq,
            n_splits: eval.n_splits,
            seq_len: eval.seq_len,
            min_split: eval.min_split,
            eval_steps: eval.steps,
            top_k: eval.top_k,
            eval_seeds: eval.seeds,
            sweep_step: 1,
            sweep_layers: Vec::new(),
            bench_cache_lengths: vec![0, 128, 256],
            bench_widths: vec![1, 2, 4, 8, 16],
            bench_trials: 100,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>>
where
    V::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn list<V: ToString>(values: &[V]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "n_layers",
        "d_model",
        "n_heads",
        "ffn_dim",
        "max_positions",
        "corpus_dir",
        "heldout_fraction",
        "context",
        "batch_size",
        "warmup_steps",
        "max_steps",
        "pretrain_epochs",
        "pretrain_lr",
        "min_corpus_tokens",
        "train_epochs",
        "train_lr",
        "k",
        "transfer_layers",
        "mask_mode",
        "train_mask_mode",
        "bias",
        "kl_direction",
        "tree_spec",
        "max_tokens",
        "prompt_file",
        "base_path",
        "transfer_path",
        "medusa_path",
        "exit_path",
        "n_seq",
        "n_splits",
        "seq_len",
        "min_split",
        "eval_steps",
        "top_k",
        "eval_seeds",
        "sweep_step",
        "sweep_layers",
        "bench_cache_lengths",
        "bench_widths",
        "bench_trials",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "ffn_dim" => self.ffn_dim = parse(key, v)?,
            "max_positions" => self.max_positions = parse(key, v)?,
            "corpus_dir" => self.corpus_dir = v.into(),
            "heldout_fraction" => self.heldout_fraction = parse(key, v)?,
            "context" => self.context = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "min_corpus_tokens" => self.min_corpus_tokens = parse(key, v)?,
            "train_epochs" => self.train_epochs = parse(key, v)?,
            "train_lr" => self.train_lr = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "transfer_layers" => self.transfer_layers = parse_list(key, v)?,
            "mask_mode" => self.mask_mode = parse(key, v)?,
            "train_mask_mode" => self.train_mask_mode = parse(key, v)?,
            "bias" => self.bias = parse(key, v)?,
            "kl_direction" => self.kl_direction = parse_kl_direction(v)?,
            "tree_spec" => self.tree_spec = v.into(),
            "max_tokens" => self.max_tokens = parse(key, v)?,
            "prompt_file" => self.prompt_file = v.into(),
            "base_path" => self.base_path = v.into(),
            "transfer_path" => self.transfer_path = v.into(),
            "medusa_path" => self.medusa_path = v.into(),
            "exit_path" => self.exit_path = v.into(),
            "n_seq" => self.n_seq = parse(key, v)?,
            "n_splits" => self.n_splits = parse(key, v)?,
            "seq_len" => self.seq_len = parse(key, v)?,
            "min_split" => self.min_split = parse(key, v)?,
            "eval_steps" => self.eval_steps = parse(key, v)?,
            "top_k" => self.top_k = parse_list(key, v)?,
            "eval_seeds" => self.eval_seeds = parse_list(key, v)?,
            "sweep_step" => self.sweep_step = parse(key, v)?,
            "sweep_layers" => self.sweep_layers = parse_list(key, v)?,
            "bench_cache_lengths" => self.bench_cache_lengths = parse_list(key, v)?,
            "bench_widths" => self.bench_widths = parse_list(key, v)?,
            "bench_trials" => self.bench_trials = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "max_positions" => self.max_positions.to_string(),
            "corpus_dir" => self.corpus_dir.clone(),
            "heldout_fraction" => self.heldout_fraction.to_string(),
            "context" => self.context.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "min_corpus_tokens" => self.min_corpus_tokens.to_string(),
            "train_epochs" => self.train_epochs.to_string(),
            "train_lr" => self.train_lr.to_string(),
            "k" => self.k.to_string(),
            "transfer_layers" => list(&self.transfer_layers),
            "mask_mode" => self.mask_mode.to_string(),
            "train_mask_mode" => self.train_mask_mode.to_string(),
            "bias" => self.bias.to_string(),
            "kl_direction" => kl_direction_name(self.kl_direction).into(),
            "tree_spec" => self.tree_spec.clone(),
            "max_tokens" => self.max_tokens.to_string(),
            "prompt_file" => self.prompt_file.clone(),
            "base_path" => self.base_path.clone(),
            "transfer_path" => self.transfer_path.clone(),
            "medusa_path" => self.medusa_path.clone(),
            "exit_path" => self.exit_path.clone(),
            "n_seq" => self.n_seq.to_string(),
            "n_splits" => self.n_splits.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "min_split" => self.min_split.to_string(),
            "eval_steps" => self.eval_steps.to_string(),
            "top_k" => list(&self.top_k),
            "eval_seeds" => list(&self.eval_seeds),
            "sweep_step" => self.sweep_step.to_string(),
            "sweep_layers" => list(&self.sweep_layers),
            "bench_cache_lengths" => list(&self.bench_cache_lengths),
            "bench_widths" => list(&self.bench_widths),
            "bench_trials" => self.bench_trials.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines over `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::from_text(&text)
    }

    /// Applies every `HTD_<KEY>` variable in `vars`. Other variables with the
    /// prefix are rejected as unknown keys.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                self.set(&key.to_ascii_lowercase(), &value)?;
            }
        }
        Ok(())
    }

    /// Canonical text: every key, in a fixed order.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Short hash of the canonical text.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())[..16].to_string()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_positions: self.max_positions,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    fn hyper(&self, epochs: usize, lr: f64) -> TrainHyper {
        TrainHyper {
            epochs,
            context: self.context,
            batch_size: self.batch_size,
            lr,
            warmup_steps: self.warmup_steps,
            seed: self.seed,
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            hyper: self.hyper(self.pretrain_epochs, self.pretrain_lr),
            min_corpus_tokens: self.min_corpus_tokens,
        }
    }

    /// Hyperparameters of transfer, Medusa and early-exit training.
    pub fn train_hyper(&self) -> TrainHyper {
        self.hyper(self.train_epochs, self.train_lr)
    }

    pub fn transfer_config(&self) -> Result<TransferConfig> {
        let mut c = TransferConfig::for_depth(self.n_layers, self.k)?;
        if !self.transfer_layers.is_empty() {
            c.layers = self.transfer_layers.clone();
        }
        c.mask_mode = self.mask_mode;
        c.train_mask_mode = self.train_mask_mode;
        c.bias = self.bias;
        c.kl_direction = self.kl_direction;
        c.validate(self.n_layers)?;
        Ok(c)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_seq: self.n_seq,
            n_splits: self.n_splits,
            seq_len: self.seq_len,
            min_split: self.min_split,
            steps: self.eval_steps,
            top_k: self.top_k.clone(),
            seeds: self.eval_seeds.clone(),
        }
    }

    /// The configured tree, resolved against `base` when relative. The
    /// default (3, 2, 2) tree is cut to `k` levels.
    pub fn tree(&self, base: &Path) -> Result<TreeSpec> {
        if self.tree_spec.is_empty() {
            return Ok(TreeSpec::full(&[3, 2, 2][..self.k.clamp(1, 3)]));
        }
        let path = resolve(base, &self.tree_spec);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::path(&path, e))?;
        TreeSpec::parse(&text)
    }
}

/// `path` joined onto `base` unless already absolute.
pub fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
