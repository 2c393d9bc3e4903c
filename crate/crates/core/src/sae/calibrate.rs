// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-feature activation statistics over a calibration corpus.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::LmCheckpoint;

use super::activations::text_activations;
use super::SaeModel;

/// Scale used for features that never fire on the calibration corpus.
pub const DEAD_FEATURE_ALPHA: f32 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStat {
    pub feature_id: usize,
    /// Maximum activation seen, or [`DEAD_FEATURE_ALPHA`] when dead.
    pub alpha: f32,
    /// Fraction of positions where the feature is active.
    pub frequency: f64,
    pub dead: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    /// Hash of the calibration texts.
    pub corpus_id: String,
    pub layer: usize,
    pub positions: usize,
    pub features: Vec<FeatureStat>,
}

impl FeatureStats {
    pub fn get(&self, feature: usize) -> Result<&FeatureStat> {
        self.features.get(feature).ok_or(Error::Range {
            what: "feature index",
            value: feature,
            bound: self.features.len(),
        })
    }

    pub fn dead_count(&self) -> usize {
        self.features.iter().filter(|f| f.dead).count()
    }
}

pub fn corpus_id(texts: &[String]) -> String {
    let mut h = Sha256::new();
    for t in texts {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Maximum activation of every feature over every text position of
/// `texts` at the SAE's hook site.
pub fn calibrate_alpha(sae: &SaeModel, ckpt: &LmCheckpoint, texts: &[String]) -> Result<FeatureStats> {
    if sae.d_in() != ckpt.config.d_model {
        return Err(Error::dims(
            "calibrate_alpha",
            &[sae.d_in()],
            &[ckpt.config.d_model],
        ));
    }
    let f = sae.n_features();
    let mut max = vec![0.0f32; f];
    let mut active = vec![0usize; f];
    let mut positions = 0usize;
    for text in texts {
        let acts = text_activations(ckpt, sae.site, text)?;
        if acts.rows() == 0 {
            continue;
        }
        positions += acts.rows();
        let codes = sae.encode_batch(&acts)?;
        for row in codes.data().chunks(f) {
            for ((m, c), v) in max.iter_mut().zip(active.iter_mut()).zip(row) {
                if *v > 0.0 {
                    *c += 1;
                    *m = m.max(*v);
                }
            }
        }
    }
    if positions == 0 {
        return Err(Error::contract("calibration corpus has no text positions"));
    }
    let features = (0..f)
        .map(|i| {
            let dead = active[i] == 0;
            FeatureStat {
                feature_id: i,
                alpha: if dead { DEAD_FEATURE_ALPHA } else { max[i] },
                frequency: active[i] as f64 / positions as f64,
                dead,
            }
        })
        .collect();
    Ok(FeatureStats {
        corpus_id: corpus_id(texts),
        layer: sae.site.layer,
        positions,
        features,
    })
}

pub fn save_feature_stats(stats: &FeatureStats, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(stats)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_feature_stats(path: &Path) -> Result<FeatureStats> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
