use crate::corpus::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Shape of the frozen decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 256,
            n_heads: 8,
            ffn_dim: 512,
            vocab_size: VOCAB_SIZE,
            max_positions: 512,
            seed: 0,
        }
    }
}

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const ROPE_BASE: f64 = 10_000.0;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad(format!("all model dimensions must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dimension {} must be even for rotary positions", self.head_dim()));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return bad("vocab_size and max_positions must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, f, l) = (self.vocab_size, self.d_model, self.ffn_dim, self.n_layers);
        let per_layer = 2 * d + 4 * d * d + 3 * d * f;
        v * d + l * per_layer + d + d * v
    }

    /// Serialized as `key=value` lines for checkpoint metadata.
    pub fn to_record(&self) -> String {
        format!(
            "n_layers={}\nd_model={}\nn_heads={}\nffn_dim={}\nvocab_size={}\nmax_positions={}\nseed={}\n",
            self.n_layers, self.d_model, self.n_heads, self.ffn_dim, self.vocab_size, self.max_positions, self.seed
        )
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad model config line {line:?}")))?;
            let parse = |v: &str| v.parse::<u64>().map_err(|_| Error::Format(format!("bad value for {k}: {v:?}")));
            let n = parse(v)?;
            match k {
                "n_layers" => cfg.n_layers = n as usize,
                "d_model" => cfg.d_model = n as usize,
                "n_heads" => cfg.n_heads = n as usize,
                "ffn_dim" => cfg.ffn_dim = n as usize,
                "vocab_size" => cfg.vocab_size = n as usize,
                "max_positions" => cfg.max_positions = n as usize,
                "seed" => cfg.seed = n,
                other => return Err(Error::Format(format!("unknown model config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility_is_checked() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn record_round_trip() {
        let cfg = ModelConfig {
            n_layers: 3,
            seed: 99,
            ..Default::default()
        };
        assert_eq!(ModelConfig::from_record(&cfg.to_record()).unwrap(), cfg);
    }
}
