// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lm::{generate, LmCheckpoint, SamplingParams};
use crate::sae::{FeatureStats, SaeModel};

use super::{
    make_intervention, BackendCapabilities, BackendError, BackendErrorKind, PairedOutput,
    SteeringBackend, SteeringSpec,
};

/// Steers the in-process model. Read-only after construction, so one
/// backend can serve many threads.
pub struct LocalBackend {
    ckpt: LmCheckpoint,
    saes: BTreeMap<usize, (SaeModel, Option<FeatureStats>)>,
    caps: BackendCapabilities,
}

impl LocalBackend {
    /// `saes` must be non-empty, agree with the model width and share one
    /// feature count.
    pub fn new(ckpt: LmCheckpoint, saes: Vec<(SaeModel, Option<FeatureStats>)>) -> Result<Self> {
        let n_features = saes
            .first()
            .map(|(s, _)| s.n_features())
            .ok_or_else(|| Error::Config("local backend needs at least one SAE".into()))?;
        let mut map = BTreeMap::new();
        for (sae, stats) in saes {
            sae.site.check(&ckpt.config)?;
            if sae.d_in() != ckpt.config.d_model {
                return Err(Error::dims("local backend SAE", &[sae.d_in()], &[ckpt.config.d_model]));
            }
            if sae.n_features() != n_features {
                return Err(Error::Config("SAEs disagree on feature count".into()));
            }
            if let Some(st) = &stats {
                if st.layer != sae.site.layer || st.features.len() != n_features {
                    return Err(Error::Config(format!(
                        "feature stats for layer {} do not match the SAE for layer {}",
                        st.layer, sae.site.layer
                    )));
                }
            }
            let layer = sae.site.layer;
            if map.insert(layer, (sae, stats)).is_some() {
                return Err(Error::Config(format!("two SAEs for layer {layer}")));
            }
        }
        let caps = BackendCapabilities {
            layers: map.keys().copied().collect(),
            n_features,
            max_new_tokens: ckpt.config.context_length - 1,
        };
        Ok(LocalBackend {
            ckpt,
            saes: map,
            caps,
        })
    }

    pub fn checkpoint(&self) -> &LmCheckpoint {
        &self.ckpt
    }

    pub fn sae(&self, layer: usize) -> Option<(&SaeModel, Option<&FeatureStats>)> {
        self.saes.get(&layer).map(|(s, st)| (s, st.as_ref()))
    }

    fn run(&self, prompt: &str, spec: &SteeringSpec, sampling: &SamplingParams) -> Result<PairedOutput> {
        self.caps.supports(spec)?;
        let (sae, stats) = &self.saes[&spec.layer];
        let delta = make_intervention(spec, sae, stats.as_ref())?;
        let steered_text = generate(&self.ckpt, prompt, sampling, Some(&delta.intervention))?;
        let default_text = generate(&self.ckpt, prompt, sampling, None)?;
        Ok(PairedOutput {
            steered_text,
            default_text,
            paired: true,
            dead_feature: delta.dead_feature,
            alpha: Some(delta.alpha),
            attempts: 1,
        })
    }
}

impl SteeringBackend for LocalBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn paired_generate(
        &self,
        prompt: &str,
        spec: &SteeringSpec,
        sampling: &SamplingParams,
    ) -> std::result::Result<PairedOutput, BackendError> {
        self.run(prompt, spec, sampling).map_err(|e| {
            let kind = match e {
                Error::Config(_) | Error::Range { .. } => BackendErrorKind::Unsupported,
                _ => BackendErrorKind::Model,
            };
            BackendError::new(kind, e.to_string())
        })
    }
}
