use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

const CONFIG_RECORD: &str = "model.config";

/// One pre-norm block. Projection matrices are stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct LayerWeights<T: Real = f32> {
    pub attn_norm: Arc<Tensor<T>>,
    pub wq: Arc<Tensor<T>>,
    pub wk: Arc<Tensor<T>>,
    pub wv: Arc<Tensor<T>>,
    pub wo: Arc<Tensor<T>>,
    pub mlp_norm: Arc<Tensor<T>>,
    pub w_gate: Arc<Tensor<T>>,
    pub w_up: Arc<Tensor<T>>,
    pub w_down: Arc<Tensor<T>>,
}

/// Frozen base model: token embedding, blocks, final norm, untied head.
#[derive(Clone, Debug)]
pub struct ModelWeights<T: Real = f32> {
    pub config: ModelConfig,
    pub embedding: Arc<Tensor<T>>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Arc<Tensor<T>>,
    pub lm_head: Arc<Tensor<T>>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Real>(&mut self, shape: Vec<usize>, std: f64) -> Arc<Tensor<T>> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(dist.sample(&mut self.rng))).collect();
        Arc::new(Tensor::new(shape, data).expect("shape matches"))
    }
}

fn ones<T: Real>(d: usize) -> Arc<Tensor<T>> {
    Arc::new(Tensor::filled(vec![d], T::one()))
}

impl<T: Real> ModelWeights<T> {
    /// Seeded scaled-normal initialization. The draw order is fixed, so f32
    /// and f64 models from one seed agree up to rounding.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, f, l) = (config.vocab_size, config.d_model, config.ffn_dim, config.n_layers);
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let fan_in = |n: usize| 1.0 / (n as f64).sqrt();
        let residual = 1.0 / ((2 * l) as f64).sqrt();
        let embedding = init.normal(vec![v, d], 1.0);
        let layers = (0..l)
            .map(|_| LayerWeights {
                attn_norm: ones(d),
                wq: init.normal(vec![d, d], fan_in(d)),
                wk: init.normal(vec![d, d], fan_in(d)),
                wv: init.normal(vec![d, d], fan_in(d)),
                wo: init.normal(vec![d, d], fan_in(d) * residual),
                mlp_norm: ones(d),
                w_gate: init.normal(vec![d, f], fan_in(d)),
                w_up: init.normal(vec![d, f], fan_in(d)),
                w_down: init.normal(vec![f, d], fan_in(f) * residual),
            })
            .collect();
        let final_norm = ones(d);
        let lm_head = init.normal(vec![d, v], fan_in(d));
        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Tensors in canonical (checkpoint) order.
    pub fn named(&self) -> Vec<(String, &Arc<Tensor<T>>)> {
        let mut out = vec![("tok_embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in l.tensors() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Arc<Tensor<T>>)> {
        let mut out = vec![("tok_embedding".to_string(), &mut self.embedding)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in l.tensors_mut() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        let c = |t: &Arc<Tensor<T>>| Arc::new(t.cast::<U>());
        ModelWeights {
            config: self.config.clone(),
            embedding: c(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: c(&l.attn_norm),
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    mlp_norm: c(&l.mlp_norm),
                    w_gate: c(&l.w_gate),
                    w_up: c(&l.w_up),
                    w_down: c(&l.w_down),
                })
                .collect(),
            final_norm: c(&self.final_norm),
            lm_head: c(&self.lm_head),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.push_text(CONFIG_RECORD, &self.config.to_record());
        for (name, t) in self.named() {
            ckpt.push_tensor(name, t.cast::<f32>());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_record(ckpt.text(CONFIG_RECORD)?)?;
        let mut model = Self::init(&ModelConfig { seed: 0, ..config.clone() })?;
        model.config = config;
        for (name, slot) in model.named_mut() {
            let t = ckpt.tensor(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name}: shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Arc::new(t.cast::<T>());
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Identity of the frozen base; bundles and heads record it.
    pub fn content_hash(&self) -> String {
        self.to_checkpoint().content_hash()
    }
}

impl<T: Real> LayerWeights<T> {
    fn tensors(&self) -> [(&'static str, &Arc<Tensor<T>>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Arc<Tensor<T>>); 9] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("mlp_norm", &mut self.mlp_norm),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}
