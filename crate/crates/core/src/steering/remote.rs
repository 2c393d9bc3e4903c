// SPDX-License-Identifier: MIT OR Apache-2.0

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::lm::SamplingParams;

use super::{
    AlphaSource, BackendCapabilities, BackendError, BackendErrorKind, PairedOutput,
    SteeringBackend, SteeringSpec,
};

/// Environment variable holding the bearer token.
pub const TOKEN_ENV: &str = "STEERLAB_API_TOKEN";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    layer: usize,
    feature_id: usize,
    beta: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f32>,
    temperature: f32,
    seed: u64,
    max_new_tokens: usize,
}

#[derive(Deserialize)]
struct WireResponse {
    steered_text: Option<String>,
    default_text: Option<String>,
    /// The service applied the seed to both arms.
    #[serde(default)]
    seeded: bool,
    #[serde(default)]
    alpha: Option<f32>,
    #[serde(default)]
    dead_feature: bool,
}

/// JSON-over-HTTP steering service client.
pub struct RemoteBackend {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
    retry: RetryPolicy,
    caps: BackendCapabilities,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.endpoint)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .field("retry", &self.retry)
            .finish()
    }
}

impl RemoteBackend {
    pub fn new(
        endpoint: impl Into<String>,
        token: Option<String>,
        caps: BackendCapabilities,
        retry: RetryPolicy,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(retry.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend {
            endpoint: endpoint.into(),
            token,
            agent,
            retry,
            caps,
        }
    }

    /// Reads the bearer token from [`TOKEN_ENV`].
    pub fn from_env(endpoint: impl Into<String>, caps: BackendCapabilities) -> Self {
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Self::new(endpoint, token, caps, RetryPolicy::default())
    }

    fn attempt(&self, body: &str) -> Result<PairedOutput, BackendError> {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req
            .send(body)
            .map_err(|e| BackendError::new(BackendErrorKind::Transport, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::new(BackendErrorKind::Transport, e.to_string()))?;
        if !(200..300).contains(&status) {
            let mut snippet: String = text.chars().take(200).collect();
            if snippet.is_empty() {
                snippet = "empty body".into();
            }
            return Err(BackendError::new(BackendErrorKind::Http(status), snippet));
        }
        let wire: WireResponse = serde_json::from_str(&text).map_err(|e| {
            BackendError::new(BackendErrorKind::Protocol, format!("bad response JSON: {e}"))
        })?;
        let missing = |field: &str| {
            BackendError::new(BackendErrorKind::Protocol, format!("response lacks {field}"))
        };
        Ok(PairedOutput {
            steered_text: wire.steered_text.ok_or_else(|| missing("steered_text"))?,
            default_text: wire.default_text.ok_or_else(|| missing("default_text"))?,
            paired: wire.seeded,
            dead_feature: wire.dead_feature,
            alpha: wire.alpha,
            attempts: 1,
        })
    }
}

impl SteeringBackend for RemoteBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn paired_generate(
        &self,
        prompt: &str,
        spec: &SteeringSpec,
        sampling: &SamplingParams,
    ) -> Result<PairedOutput, BackendError> {
        self.caps
            .supports(spec)
            .map_err(|e| BackendError::new(BackendErrorKind::Unsupported, e.to_string()))?;
        let body = serde_json::to_string(&WireRequest {
            prompt,
            layer: spec.layer,
            feature_id: spec.feature_id,
            beta: spec.beta,
            alpha: match spec.alpha {
                AlphaSource::Override(a) => Some(a),
                AlphaSource::Calibrated => None,
            },
            temperature: sampling.temperature,
            seed: sampling.seed,
            max_new_tokens: sampling.max_new_tokens,
        })
        .expect("plain struct");
        let mut delay = self.retry.base_delay;
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.attempt(&body) {
                Ok(mut out) => {
                    out.attempts = attempt;
                    log::debug!("remote generation succeeded on attempt {attempt}");
                    return Ok(out);
                }
                Err(mut e) => {
                    e.attempts = attempt;
                    log::warn!("remote attempt {attempt}/{max} failed: {e}");
                    if attempt >= max || !e.kind.is_transient() {
                        return Err(e);
                    }
                }
            }
            std::thread::sleep(delay);
            delay *= 2;
            attempt += 1;
        }
    }
}
