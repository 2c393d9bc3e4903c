// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-feature inspection: top-activating corpus snippets, a unigram
//! divergence proxy for how much steering shifts output style, and an
//! optional client for an external labeling service.

mod label;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LmCheckpoint, SamplingParams};
use crate::sae::{FeatureStats, SaeModel};
use crate::steering::{SteeringBackend, SteeringSpec};

pub use label::{label_feature, label_prompt, LabelClient, UNLABELED};

/// Bytes of context kept on each side of an activating position.
pub const SNIPPET_RADIUS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub text_index: usize,
    /// Byte offset of the activating token within its text.
    pub position: usize,
    pub activation: f32,
    pub window: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDossier {
    pub feature_id: usize,
    pub layer: usize,
    pub alpha: f32,
    pub frequency: f64,
    pub dead: bool,
    /// Descending by activation.
    pub snippets: Vec<Snippet>,
    pub label: Option<String>,
    /// Symmetrized unigram KL between steered and default generations.
    pub footprint_proxy: Option<f64>,
}

fn window(text: &str, pos: usize) -> String {
    let bytes = text.as_bytes();
    let lo = pos.saturating_sub(SNIPPET_RADIUS);
    let hi = (pos + SNIPPET_RADIUS + 1).min(bytes.len());
    String::from_utf8_lossy(&bytes[lo..hi]).into_owned()
}

/// The `k` highest-activating text positions of `feature_id` over `corpus`,
/// sorted by activation (ties by text, then position). Dead features yield
/// no snippets.
pub fn feature_top_examples(
    sae: &SaeModel,
    stats: &FeatureStats,
    ckpt: &LmCheckpoint,
    corpus: &[String],
    feature_id: usize,
    k: usize,
) -> Result<FeatureDossier> {
    let stat = stats.get(feature_id)?;
    if feature_id >= sae.n_features() {
        return Err(Error::Range {
            what: "feature index",
            value: feature_id,
            bound: sae.n_features(),
        });
    }
    if corpus.is_empty() {
        return Err(Error::contract("empty corpus"));
    }
    let mut dossier = FeatureDossier {
        feature_id,
        layer: sae.site.layer,
        alpha: stat.alpha,
        frequency: stat.frequency,
        dead: stat.dead,
        snippets: Vec::new(),
        label: None,
        footprint_proxy: None,
    };
    if stat.dead {
        return Ok(dossier);
    }
    let f = sae.n_features();
    let mut hits: Vec<(f32, usize, usize)> = Vec::new();
    for (t, text) in corpus.iter().enumerate() {
        let acts = crate::sae::text_activations(ckpt, sae.site, text)?;
        if acts.rows() == 0 {
            continue;
        }
        let codes = sae.encode_batch(&acts)?;
        for (pos, row) in codes.data().chunks(f).enumerate() {
            hits.push((row[feature_id], t, pos));
        }
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    hits.truncate(k);
    dossier.snippets = hits
        .into_iter()
        .map(|(activation, t, pos)| Snippet {
            text_index: t,
            position: pos,
            activation,
            window: window(&corpus[t], pos),
        })
        .collect();
    Ok(dossier)
}

/// `KL(p || q) + KL(q || p)` between add-one-smoothed byte unigram
/// distributions of two text sets.
pub fn unigram_divergence<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> f64 {
    let counts = |texts: &mut dyn Iterator<Item = &[u8]>| {
        let mut c = [0u64; 256];
        for t in texts {
            for &byte in t {
                c[byte as usize] += 1;
            }
        }
        c
    };
    let ca = counts(&mut a.iter().map(|t| t.as_ref().as_bytes()));
    let cb = counts(&mut b.iter().map(|t| t.as_ref().as_bytes()));
    let dist = |c: &[u64; 256]| {
        let total = c.iter().sum::<u64>() as f64 + 256.0;
        c.map(|n| (n as f64 + 1.0) / total)
    };
    let (p, q) = (dist(&ca), dist(&cb));
    p.iter()
        .zip(&q)
        .map(|(p, q)| (p - q) * (p / q).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Minimum number of probe prompts for a footprint estimate.
pub const MIN_FOOTPRINT_PROBES: usize = 5;

/// Generates every probe with and without `spec` and measures how far the
/// steered byte distribution moves from the default one.
pub fn footprint_score(
    backend: &dyn SteeringBackend,
    spec: &SteeringSpec,
    probes: &[String],
    sampling: &SamplingParams,
) -> Result<f64> {
    if probes.len() < MIN_FOOTPRINT_PROBES {
        return Err(Error::contract(format!(
            "footprint needs at least {MIN_FOOTPRINT_PROBES} probes, got {}",
            probes.len()
        )));
    }
    let mut steered = Vec::with_capacity(probes.len());
    let mut default = Vec::with_capacity(probes.len());
    for (i, p) in probes.iter().enumerate() {
        let s = SamplingParams {
            seed: crate::harness::mix_seed(sampling.seed, i as u64),
            ..*sampling
        };
        let out = backend.paired_generate(p, spec, &s)?;
        steered.push(out.steered_text);
        default.push(out.default_text);
    }
    Ok(unigram_divergence(&steered, &default))
}
