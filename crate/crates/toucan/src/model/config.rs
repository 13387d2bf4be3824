use crate::error::{Error, Result};

/// Architecture and boundary-training hyperparameters.
///
/// `layers` is the (a, b, c) triple: tokenizer, token model, and character
/// decoder depth. The output vocabulary is always `char_vocab_size + 1`; the
/// extra symbol marks end-of-token.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub char_vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub layers: (usize, usize, usize),
    /// Target boundary rate in (0, 1); lower means longer tokens.
    pub boundary_prior: f64,
    pub gumbel_temperature: f64,
    pub prior_loss_weight: f64,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            char_vocab_size: 27,
            d_model: 128,
            n_heads: 4,
            layers: (2, 8, 2),
            boundary_prior: 0.2,
            gumbel_temperature: 1.0,
            prior_loss_weight: 1.0,
            max_seq_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.layers;
        if a < 1 || b < 1 || c < 1 {
            return Err(Error::Config(format!(
                "layer counts must all be >= 1, got ({a}, {b}, {c})"
            )));
        }
        if !(0.0 < self.boundary_prior && self.boundary_prior < 1.0) {
            return Err(Error::Config(format!(
                "boundary_prior must lie in (0,1), got {}",
                self.boundary_prior
            )));
        }
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.gumbel_temperature <= 0.0 {
            return Err(Error::Config(format!(
                "gumbel_temperature must be positive, got {}",
                self.gumbel_temperature
            )));
        }
        if self.prior_loss_weight < 0.0 {
            return Err(Error::Config(format!(
                "prior_loss_weight must be nonnegative, got {}",
                self.prior_loss_weight
            )));
        }
        if self.char_vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "char_vocab_size and max_seq_len must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Label index of the end-of-token symbol.
    pub fn eot_id(&self) -> usize {
        self.char_vocab_size
    }

    /// Width of the output logits: characters plus the EOT symbol.
    pub fn logit_width(&self) -> usize {
        self.char_vocab_size + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_with_paper_layout() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.layers, (2, 8, 2));
        assert_eq!(cfg.logit_width(), 28);
    }

    #[test]
    fn rejects_bad_prior_and_heads() {
        let mut cfg = ModelConfig::default();
        cfg.boundary_prior = 1.0;
        assert!(cfg.validate().is_err());
        cfg.boundary_prior = 0.2;
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
    }
}
