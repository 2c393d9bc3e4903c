// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature steering: `a_steered = a + alpha * beta * v_i`, where `v_i` is
//! the decoder direction of SAE feature `i` and `alpha` is that feature's calibrated maximum
//! activation.

mod local;
mod remote;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Intervention, PositionPolicy, SamplingParams};
use crate::numerics::Tensor;
use crate::sae::{FeatureStats, SaeModel};

pub use local::LocalBackend;
pub use remote::{RemoteBackend, RetryPolicy, TOKEN_ENV};

/// Largest steering strength magnitude accepted.
pub const BETA_LIMIT: f32 = 100.0;

/// Where the feature scale `alpha` comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSource {
    #[default]
    Calibrated,
    Override(f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub layer: usize,
    pub feature_id: usize,
    pub beta: f32,
    #[serde(default)]
    pub alpha: AlphaSource,
    #[serde(default)]
    pub policy: PositionPolicy,
}

impl SteeringSpec {
    pub fn new(layer: usize, feature_id: usize, beta: f32) -> Self {
        SteeringSpec {
            layer,
            feature_id,
            beta,
            alpha: AlphaSource::Calibrated,
            policy: PositionPolicy::AllPositions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta.abs() > BETA_LIMIT {
            return Err(Error::Config(format!(
                "beta {} outside [-{BETA_LIMIT}, {BETA_LIMIT}]",
                self.beta
            )));
        }
        if let AlphaSource::Override(a) = self.alpha {
            if !a.is_finite() {
                return Err(Error::Config(format!("alpha override {a} is not finite")));
            }
        }
        Ok(())
    }
}

/// The scale used for a spec, and whether it is the dead-feature fallback.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedAlpha {
    pub alpha: f32,
    pub dead: bool,
}

pub fn resolve_alpha(spec: &SteeringSpec, stats: Option<&FeatureStats>) -> Result<ResolvedAlpha> {
    match spec.alpha {
        AlphaSource::Override(alpha) => Ok(ResolvedAlpha { alpha, dead: false }),
        AlphaSource::Calibrated => {
            let stats = stats.ok_or_else(|| {
                Error::Config(format!(
                    "no calibration for layer {} and no alpha override",
                    spec.layer
                ))
            })?;
            if stats.layer != spec.layer {
                return Err(Error::Config(format!(
                    "calibration is for layer {}, spec targets layer {}",
                    stats.layer, spec.layer
                )));
            }
            let f = stats.get(spec.feature_id)?;
            Ok(ResolvedAlpha {
                alpha: f.alpha,
                dead: f.dead,
            })
        }
    }
}

fn check_against(spec: &SteeringSpec, sae: &SaeModel) -> Result<()> {
    spec.validate()?;
    if sae.site.layer != spec.layer {
        return Err(Error::Config(format!(
            "SAE is for layer {}, spec targets layer {}",
            sae.site.layer, spec.layer
        )));
    }
    if spec.feature_id >= sae.n_features() {
        return Err(Error::Range {
            what: "feature index",
            value: spec.feature_id,
            bound: sae.n_features(),
        });
    }
    Ok(())
}

/// `a + (alpha * beta) * v`, elementwise. The product `alpha * beta` is formed
/// first so that `(alpha, 2 beta)` and `(2 alpha, beta)` agree exactly.
pub fn steer_vector(a: &[f32], v: &[f32], alpha: f32, beta: f32) -> Result<Tensor> {
    if a.len() != v.len() {
        return Err(Error::dims("steer", &[a.len()], &[v.len()]));
    }
    let scale = alpha * beta;
    Ok(Tensor::from_vec(
        a.iter().zip(v).map(|(x, d)| x + scale * d).collect(),
    ))
}

/// Applies the steering update to one activation vector.
pub fn apply(
    a: &Tensor,
    spec: &SteeringSpec,
    sae: &SaeModel,
    stats: Option<&FeatureStats>,
) -> Result<Tensor> {
    check_against(spec, sae)?;
    let r = resolve_alpha(spec, stats)?;
    steer_vector(a.data(), sae.feature_vector(spec.feature_id)?.data(), r.alpha, spec.beta)
}

/// A residual-stream edit together with the scale that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringDelta {
    pub intervention: Intervention,
    pub alpha: f32,
    /// `alpha` is the fallback for a feature that never fired.
    pub dead_feature: bool,
}

pub fn make_intervention(
    spec: &SteeringSpec,
    sae: &SaeModel,
    stats: Option<&FeatureStats>,
) -> Result<SteeringDelta> {
    check_against(spec, sae)?;
    let r = resolve_alpha(spec, stats)?;
    let zeros = vec![0.0f32; sae.d_in()];
    let delta = steer_vector(&zeros, sae.feature_vector(spec.feature_id)?.data(), r.alpha, spec.beta)?;
    Ok(SteeringDelta {
        intervention: Intervention::new(sae.site, delta, spec.policy),
        alpha: r.alpha,
        dead_feature: r.dead,
    })
}

/// What a backend can steer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub layers: Vec<usize>,
    pub n_features: usize,
    pub max_new_tokens: usize,
}

impl BackendCapabilities {
    pub fn supports(&self, spec: &SteeringSpec) -> Result<()> {
        spec.validate()?;
        if !self.layers.contains(&spec.layer) {
            return Err(Error::Config(format!(
                "layer {} not steerable (available: {:?})",
                spec.layer, self.layers
            )));
        }
        if spec.feature_id >= self.n_features {
            return Err(Error::Range {
                what: "feature index",
                value: spec.feature_id,
                bound: self.n_features,
            });
        }
        Ok(())
    }
}

/// One steered generation and its unsteered control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedOutput {
    pub steered_text: String,
    pub default_text: String,
    /// False when the two arms are not guaranteed to share sampling noise.
    pub paired: bool,
    pub dead_feature: bool,
    /// Scale used, when the backend reports it.
    pub alpha: Option<f32>,
    pub attempts: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendErrorKind {
    /// The spec is not valid for this backend.
    Unsupported,
    /// The local model failed.
    Model,
    /// Connection, timeout or other transport failure.
    Transport,
    /// Non-success HTTP status.
    Http(u16),
    /// The response did not follow the wire protocol.
    Protocol,
}

impl BackendErrorKind {
    /// Worth retrying.
    pub fn is_transient(self) -> bool {
        match self {
            BackendErrorKind::Transport => true,
            BackendErrorKind::Http(s) => s == 429 || s >= 500,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("steering backend failed ({kind:?}) after {attempts} attempt(s): {message}")]
pub struct BackendError {
    pub kind: BackendErrorKind,
    pub attempts: u32,
    pub message: String,
}

impl BackendError {
    pub fn new(kind: BackendErrorKind, message: impl Into<String>) -> Self {
        BackendError {
            kind,
            attempts: 1,
            message: message.into(),
        }
    }
}

/// Anything that can produce steered/default generation pairs.
pub trait SteeringBackend: Send + Sync {
    fn capabilities(&self) -> &BackendCapabilities;

    /// Generates `prompt` twice with identical sampling settings, once with
    /// `spec` applied and once without intervention.
    fn paired_generate(
        &self,
        prompt: &str,
        spec: &SteeringSpec,
        sampling: &SamplingParams,
    ) -> std::result::Result<PairedOutput, BackendError>;
}
