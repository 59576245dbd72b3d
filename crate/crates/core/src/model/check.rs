//! Finite-difference check of whole-model gradients on small random models.

use super::{check_model_gradients, JamCross, JamCrossConfig, Result, Transformer, TransformerConfig};
use crate::tensor::GradCheckReport;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedModel {
    Dense,
    /// Two towers with a cross block (including feed-forward) after every layer.
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSetup {
    pub model: CheckedModel,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub n_tokens: usize,
    pub seed: u64,
    /// Larger than the training init so activations are not vanishingly small.
    pub init_std: f64,
    pub step: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            model: CheckedModel::Dense,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: 103,
            n_tokens: 10,
            seed: 0,
            init_std: 0.1,
            step: 1e-5,
        }
    }
}

impl GradCheckSetup {
    pub fn config(&self) -> TransformerConfig {
        TransformerConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: 4 * self.d_model,
            vocab_size: self.vocab_size,
            max_seq_len: self.n_tokens.max(2),
            ..TransformerConfig::toy(self.vocab_size)
        }
    }

    /// Builds the model and a random token sequence, then compares gradients.
    pub fn run(&self) -> Result<GradCheckReport> {
        let cfg = self.config();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7a11);
        let tokens: Vec<usize> = (0..self.n_tokens).map(|_| rng.random_range(0..self.vocab_size)).collect();
        match self.model {
            CheckedModel::Dense => {
                let m = Transformer::init_with_std(cfg, self.seed, self.init_std)?;
                check_model_gradients(&m, &tokens, self.step)
            }
            CheckedModel::Cross => {
                let xc = JamCrossConfig {
                    cross_ffn: true,
                    cross_init_std: self.init_std,
                    ..JamCrossConfig::new(cfg, 1)
                };
                let m = JamCross::init_with_std(xc, self.seed, self.init_std)?;
                check_model_gradients(&m, &tokens, self.step)
            }
        }
    }
}
