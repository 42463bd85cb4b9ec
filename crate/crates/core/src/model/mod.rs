//! Small decoder-only transformer: explicit position ids, arbitrary attention
//! masks, layer-segmented forwards and a key/value cache.

mod attention;
mod cache;
mod config;
mod forward;
mod mask;
mod pretrain;
mod weights;

pub use cache::KVCache;
pub use config::ModelConfig;
pub use forward::{BoundLayer, BoundModel, ForwardResult, Injection, Taps};
pub use mask::AttnMask;
pub use pretrain::{pretrain_base, PretrainConfig, PretrainReport};
pub use weights::{LayerWeights, ModelWeights};
