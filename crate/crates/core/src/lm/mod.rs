// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small decoder-only transformer with a hook after every MLP sublayer.
//!
//! Tokens are raw bytes. Two byte values are reserved as control tokens:
//! [`BOS`] starts every sequence and [`EOT`] terminates a response.

mod checkpoint;
mod generate;
pub mod graph;
mod infer;
mod params;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, LmCheckpoint, TrainingMeta};
pub use generate::{generate, generate_tokens, SamplingParams};
pub use infer::{forward, ForwardOutput, Session};
pub use params::{BlockParams, LmParams, LmWeights};
pub use train::{continue_training, train_memorize, TextGroup, TrainOptions, TrainingReport, TrainingSet};

/// Start-of-sequence control byte.
pub const BOS: usize = 0x02;
/// End-of-text control byte; generation stops when it is sampled.
pub const EOT: usize = 0x03;

/// Byte-level encoding of `text`.
pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// `[BOS] + bytes(text)`.
pub fn encode_with_bos(text: &str) -> Vec<usize> {
    std::iter::once(BOS).chain(text.bytes().map(usize::from)).collect()
}

/// Lossy UTF-8 decoding of byte tokens.
pub fn decode(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Transformer hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            n_layers: 6,
            d_model: 128,
            n_heads: 4,
            d_mlp: 512,
            vocab_size: 256,
            context_length: 256,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_mlp,
            self.vocab_size,
            self.context_length,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("all LM dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.vocab_size <= EOT {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the control bytes",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Early / middle / late hook layers at fractional depths 0.25, 0.5 and
    /// 0.9 (rounded down), deduplicated for very shallow models.
    pub fn default_layer_set(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = [0.25, 0.5, 0.9]
            .iter()
            .map(|f| ((self.n_layers as f64 * f).floor() as usize).min(self.n_layers - 1))
            .collect();
        layers.dedup();
        layers
    }
}

/// Residual stream immediately after the MLP output of `layer` has been added.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookSite {
    pub layer: usize,
}

impl HookSite {
    pub fn new(layer: usize) -> Self {
        HookSite { layer }
    }

    pub fn check(&self, config: &LmConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(Error::Range {
                what: "hook layer",
                value: self.layer,
                bound: config.n_layers,
            });
        }
        Ok(())
    }
}

/// Which sequence positions receive the steering delta.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    /// Prompt and generated positions alike.
    #[default]
    AllPositions,
    /// Only positions whose output is a generated token: the last prompt
    /// position and everything after it.
    GeneratedOnly,
}

/// Additive edit to the residual stream at a hook site.
#[derive(Clone, Debug, PartialEq)]
pub struct Intervention {
    pub site: HookSite,
    pub delta: Tensor,
    pub policy: PositionPolicy,
}

impl Intervention {
    pub fn new(site: HookSite, delta: Tensor, policy: PositionPolicy) -> Self {
        Intervention {
            site,
            delta,
            policy,
        }
    }

    pub fn check(&self, config: &LmConfig) -> Result<()> {
        self.site.check(config)?;
        if self.delta.len() != config.d_model {
            return Err(Error::dims("intervention delta", self.delta.shape(), &[config.d_model]));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layer_set_maps_fractional_depths() {
        assert_eq!(LmConfig::default().default_layer_set(), vec![1, 3, 5]);
        let tiny = LmConfig {
            n_layers: 2,
            ..LmConfig::default()
        };
        assert_eq!(tiny.default_layer_set(), vec![0, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(LmConfig::default().validate().is_ok());
        let bad = LmConfig {
            n_heads: 5,
            ..LmConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn byte_round_trip() {
        let s = "Call me Ishmael.\n";
        assert_eq!(decode(&encode(s)), s);
        assert_eq!(encode_with_bos("a"), vec![BOS, 97]);
    }
}
