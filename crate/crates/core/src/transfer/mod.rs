//! Hidden transfer: learned per-step projections that turn a context row's
//! intermediate state into a pseudo state for a future position, refined by
//! the remaining blocks of the frozen model.

mod infer;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::numerics::{KlDirection, Real, Tensor};

pub use infer::{synthesize_pseudo, AttachedTransfer, PseudoOutput};
pub use train::{build_training_mask, transfer_heldout_kl, transfer_loss, transfer_train, TransferReport};

/// Cross-step attention of pseudo rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MaskMode {
    /// A step-`i` pseudo row also sees the lower-step rows of its source
    /// (at inference) or the real rows they stand in for (in training).
    #[default]
    NoMasked,
    /// Only real ancestors up to the source, plus itself.
    Masked,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::NoMasked => "no_masked",
            MaskMode::Masked => "masked",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_masked" => Ok(MaskMode::NoMasked),
            "masked" => Ok(MaskMode::Masked),
            _ => Err(Error::Config(format!("unknown mask mode {s:?} (no_masked | masked)"))),
        }
    }
}

pub(crate) fn kl_direction_name(d: KlDirection) -> &'static str {
    match d {
        KlDirection::TeacherStudent => "teacher_student",
        KlDirection::StudentTeacher => "student_teacher",
    }
}

pub(crate) fn parse_kl_direction(s: &str) -> Result<KlDirection> {
    match s {
        "teacher_student" => Ok(KlDirection::TeacherStudent),
        "student_teacher" => Ok(KlDirection::StudentTeacher),
        _ => Err(Error::Config(format!(
            "unknown kl_direction {s:?} (teacher_student | student_teacher)"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferConfig {
    pub k: usize,
    /// Layer of each step's projection, strictly increasing.
    pub layers: Vec<usize>,
    /// Cross-step attention at inference.
    pub mask_mode: MaskMode,
    /// Cross-step attention in training.
    pub train_mask_mode: MaskMode,
    pub bias: bool,
    pub kl_direction: KlDirection,
}

impl TransferConfig {
    /// `k` steps on consecutive layers starting at the middle of the stack.
    pub fn for_depth(n_layers: usize, k: usize) -> Result<Self> {
        let config = Self {
            k,
            layers: (0..k).map(|i| n_layers / 2 + i).collect(),
            mask_mode: MaskMode::default(),
            train_mask_mode: MaskMode::default(),
            bias: false,
            kl_direction: KlDirection::default(),
        };
        config.validate(n_layers)?;
        Ok(config)
    }

    /// Layer `n_layers` (after the last block) is accepted so that sweeps can
    /// include the degenerate top layer.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(1..=4).contains(&self.k) {
            return Err(Error::Config(format!("k = {} outside 1..=4", self.k)));
        }
        if self.layers.len() != self.k {
            return Err(Error::Config(format!("{} transfer layers for k = {}", self.layers.len(), self.k)));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("transfer layers {:?} must increase", self.layers)));
        }
        if let Some(&t) = self.layers.iter().find(|&&t| t == 0 || t > n_layers) {
            return Err(Error::Config(format!("transfer layer {t} outside 1..={n_layers}")));
        }
        Ok(())
    }

    /// Layer of 1-based `step`.
    pub fn layer(&self, step: usize) -> usize {
        self.layers[step - 1]
    }

    fn to_record(&self, base_hash: &str) -> String {
        let layers: Vec<String> = self.layers.iter().map(usize::to_string).collect();
        format!(
            "k={}\nlayers={}\nmask_mode={}\ntrain_mask_mode={}\nbias={}\nkl_direction={}\nbase_hash={base_hash}\n",
            self.k,
            layers.join(","),
            self.mask_mode,
            self.train_mask_mode,
            self.bias,
            kl_direction_name(self.kl_direction),
        )
    }

    fn from_record(text: &str) -> Result<(Self, String)> {
        let mut config = Self {
            k: 0,
            layers: Vec::new(),
            mask_mode: MaskMode::default(),
            train_mask_mode: MaskMode::default(),
            bias: false,
            kl_direction: KlDirection::default(),
        };
        let mut hash = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad transfer record line {line:?}")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| Error::Format(format!("bad number {v:?} for {key}")));
            match key {
                "k" => config.k = num(value)?,
                "layers" => config.layers = value.split(',').map(num).collect::<Result<_>>()?,
                "mask_mode" => config.mask_mode = value.parse()?,
                "train_mask_mode" => config.train_mask_mode = value.parse()?,
                "bias" => config.bias = value.parse().map_err(|_| Error::Format(format!("bad bias flag {value:?}")))?,
                "kl_direction" => config.kl_direction = parse_kl_direction(value)?,
                "base_hash" => hash = Some(value.to_string()),
                _ => return Err(Error::Format(format!("unknown transfer record key {key:?}"))),
            }
        }
        let hash = hash.ok_or_else(|| Error::Format("transfer record lacks base_hash".into()))?;
        Ok((config, hash))
    }
}

const META_RECORD: &str = "transfer.meta";

/// Trained projections for every step, tied to one base model.
#[derive(Clone, Debug)]
pub struct TransferBundle<T: Real = f32> {
    pub config: TransferConfig,
    /// `weights[i - 1]` maps step-`i` sources: `h̃ = h · W (+ b)`.
    pub weights: Vec<Arc<Tensor<T>>>,
    pub biases: Vec<Option<Arc<Tensor<T>>>>,
    /// Content hash of the base checkpoint.
    pub base_hash: String,
}

impl<T: Real> TransferBundle<T> {
    /// Identity projections with zero bias.
    pub fn identity(config: TransferConfig, d_model: usize, base_hash: impl Into<String>) -> Self {
        let k = config.k;
        let bias = config.bias;
        Self {
            config,
            weights: (0..k).map(|_| Arc::new(Tensor::identity(d_model))).collect(),
            biases: (0..k).map(|_| bias.then(|| Arc::new(Tensor::zeros(vec![d_model])))).collect(),
            base_hash: base_hash.into(),
        }
    }

    /// Identity plus `N(0, 0.01²)` noise; step `i` draws from its own stream.
    pub fn init(config: TransferConfig, d_model: usize, seed: u64, base_hash: impl Into<String>) -> Self {
        let mut bundle = Self::identity(config, d_model, base_hash);
        let noise = Normal::new(0.0, 0.01).expect("valid normal");
        for (i, w) in bundle.weights.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 + i as u64));
            for v in Arc::make_mut(w).data_mut() {
                *v = *v + T::c(noise.sample(&mut rng));
            }
        }
        bundle
    }

    pub fn d_model(&self) -> usize {
        self.weights.first().map_or(0, |w| w.rows())
    }

    /// Trainable tensors of 1-based `step`: the matrix, then the bias if any.
    pub fn step_params(&self, step: usize) -> Vec<Arc<Tensor<T>>> {
        let mut out = vec![self.weights[step - 1].clone()];
        out.extend(self.biases[step - 1].clone());
        out
    }

    pub(crate) fn set_step_params(&mut self, step: usize, params: Vec<Arc<Tensor<T>>>) {
        let mut it = params.into_iter();
        self.weights[step - 1] = it.next().expect("matrix");
        if self.biases[step - 1].is_some() {
            self.biases[step - 1] = it.next();
        }
    }

    pub fn validate(&self, n_layers: usize, d_model: usize) -> Result<()> {
        self.config.validate(n_layers)?;
        if self.weights.len() != self.config.k || self.biases.len() != self.config.k {
            return Err(Error::Format(format!(
                "bundle holds {} steps for k = {}",
                self.weights.len(),
                self.config.k
            )));
        }
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.shape() != [d_model, d_model] {
                return Err(Error::shape(
                    "TransferBundle",
                    format!("step {} matrix {:?} for d = {d_model}", i + 1, w.shape()),
                ));
            }
            if b.is_some() != self.config.bias || b.as_ref().is_some_and(|b| b.shape() != [d_model]) {
                return Err(Error::shape("TransferBundle", format!("step {} bias does not match config", i + 1)));
            }
        }
        Ok(())
    }

    /// Fails unless `model` is the base this bundle was trained against.
    pub fn check_base(&self, model: &ModelWeights<T>) -> Result<()> {
        let hash = model.content_hash();
        if hash != self.base_hash {
            return Err(Error::ArtifactMismatch(format!(
                "transfer bundle expects base {}, got {}",
                short(&self.base_hash),
                short(&hash)
            )));
        }
        self.validate(model.config.n_layers, model.config.d_model)
    }

    pub fn cast<U: Real>(&self) -> TransferBundle<U> {
        TransferBundle {
            config: self.config.clone(),
            weights: self.weights.iter().map(|w| Arc::new(w.cast())).collect(),
            biases: self.biases.iter().map(|b| b.as_ref().map(|b| Arc::new(b.cast()))).collect(),
            base_hash: self.base_hash.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.push_text(META_RECORD, &self.config.to_record(&self.base_hash));
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            ckpt.push_tensor(format!("transfer.step{}.weight", i + 1), w.cast());
            if let Some(b) = b {
                ckpt.push_tensor(format!("transfer.step{}.bias", i + 1), b.cast());
            }
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (config, base_hash) = TransferConfig::from_record(ckpt.text(META_RECORD)?)?;
        let mut weights = Vec::with_capacity(config.k);
        let mut biases = Vec::with_capacity(config.k);
        for i in 1..=config.k {
            weights.push(Arc::new(ckpt.tensor(&format!("transfer.step{i}.weight"))?.cast()));
            biases.push(if config.bias {
                Some(Arc::new(ckpt.tensor(&format!("transfer.step{i}.bias"))?.cast()))
            } else {
                None
            });
        }
        let bundle = Self {
            config,
            weights,
            biases,
            base_hash,
        };
        let d = bundle.d_model();
        bundle.validate(usize::MAX, d)?;
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub(crate) fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
