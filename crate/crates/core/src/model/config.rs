use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_rms_eps() -> f32 {
    1e-5
}

/// Architecture hyperparameters of a pre-norm decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_theta: f32,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f32,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Small default used for the desk-scale Months model.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size,
            rope_theta: 10_000.0,
            rms_eps: 1e-5,
            max_seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if !(self.rms_eps > 0.0 && self.rms_eps.is_finite()) {
            return Err(Error::Config(format!("rms_eps must be > 0, got {}", self.rms_eps)));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(Error::Config(format!(
                "rope_theta must be > 0, got {}",
                self.rope_theta
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::toy(10);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_zero_counts_and_bad_eps() {
        let mut c = ModelConfig::toy(10);
        c.n_layers = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(10);
        c.rms_eps = 0.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::toy(10).validate().is_ok());
    }
}
