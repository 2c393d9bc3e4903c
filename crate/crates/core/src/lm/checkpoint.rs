// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorfile::{self, ByteWriter};

use super::params::{param_shapes, LmWeights};
use super::LmConfig;

const MAGIC: &[u8; 4] = b"STLB";

/// Summary of the training run that produced a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: u64,
    pub final_loss: f32,
}

/// A trained (or freshly initialized) model.
#[derive(Clone, Debug, PartialEq)]
pub struct LmCheckpoint {
    pub config: LmConfig,
    pub weights: LmWeights,
    pub meta: TrainingMeta,
}

impl LmCheckpoint {
    /// Untrained model with seeded initialization.
    pub fn init(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let weights = LmWeights::init(&config);
        Ok(LmCheckpoint {
            config,
            weights,
            meta: TrainingMeta::default(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = ByteWriter::new();
        for v in [
            c.n_layers,
            c.d_model,
            c.n_heads,
            c.d_mlp,
            c.vocab_size,
            c.context_length,
        ] {
            w.u32(v as u32);
        }
        w.u64(c.seed);
        w.u64(self.meta.steps);
        w.f32(self.meta.final_loss);
        let names = LmWeights::<f32>::names(c.n_layers);
        let tensors: Vec<(&str, &crate::numerics::Tensor)> = names
            .iter()
            .map(String::as_str)
            .zip(self.weights.iter())
            .collect();
        tensorfile::encode(MAGIC, &w.into_inner(), &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut file = tensorfile::decode(MAGIC, bytes)?;
        let r = &mut file.config;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32("config dimension")? as usize;
        }
        let config = LmConfig {
            n_layers: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            d_mlp: dims[3],
            vocab_size: dims[4],
            context_length: dims[5],
            seed: r.u64("seed")?,
        };
        let meta = TrainingMeta {
            steps: r.u64("training steps")?,
            final_loss: r.f32("final loss")?,
        };
        if !r.is_done() {
            return Err(r.fail("unexpected bytes in config block"));
        }
        config.validate().map_err(|e| Error::Format {
            offset: 10,
            message: e.to_string(),
        })?;
        let names = LmWeights::<f32>::names(config.n_layers);
        let mut items = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(param_shapes(&config)) {
            items.push(tensorfile::take_tensor(&mut file.tensors, name, &shape)?);
        }
        if let Some((extra, _)) = file.tensors.first() {
            return Err(Error::Format {
                offset: 0,
                message: format!("unexpected tensor {extra}"),
            });
        }
        Ok(LmCheckpoint {
            weights: LmWeights::from_flat(config.n_layers, items),
            config,
            meta,
        })
    }
}

pub fn save_checkpoint(ckpt: &LmCheckpoint, path: &Path) -> Result<()> {
    tensorfile::write_file(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<LmCheckpoint> {
    LmCheckpoint::from_bytes(&tensorfile::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LmCheckpoint {
        LmCheckpoint::init(LmConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 16,
            vocab_size: 16,
            context_length: 12,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut c = tiny();
        c.meta = TrainingMeta {
            steps: 17,
            final_loss: 0.125,
        };
        let back = LmCheckpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.config, c.config);
        assert_eq!(back.meta, c.meta);
        for (a, b) in back.weights.iter().into_iter().zip(c.weights.iter()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = tiny().to_bytes();
        for cut in [0, 6, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(LmCheckpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = tiny().to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            LmCheckpoint::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }
}
