// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write;
use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::FeatureDossier;

/// Label returned when no labeling service is configured.
pub const UNLABELED: &str = "unlabeled";

/// Source of one-line feature descriptions.
pub enum LabelClient {
    Offline,
    /// Completion service reached with `POST {"prompt": ...}`, answering
    /// `{"label": ...}`.
    Remote {
        endpoint: String,
        token: Option<String>,
        timeout: Duration,
    },
}

impl std::fmt::Debug for LabelClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelClient::Offline => f.write_str("Offline"),
            LabelClient::Remote { endpoint, .. } => {
                f.debug_struct("Remote").field("endpoint", endpoint).finish_non_exhaustive()
            }
        }
    }
}

/// Fixed instruction followed by the snippets, strongest first.
pub fn label_prompt(dossier: &FeatureDossier) -> String {
    let mut p = String::from(
        "Below are text excerpts where one feature of a language model activates most strongly. \
         The activating character is the center of each excerpt. \
         Reply with a single short line describing what the feature detects.\n\n",
    );
    for (i, s) in dossier.snippets.iter().enumerate() {
        let _ = writeln!(p, "{}. [{:.3}] {:?}", i + 1, s.activation, s.window);
    }
    p
}

#[derive(Deserialize)]
struct LabelResponse {
    label: Option<String>,
}

/// Asks `client` for a label of `dossier`.
pub fn label_feature(dossier: &FeatureDossier, client: &LabelClient) -> Result<String> {
    if dossier.snippets.is_empty() {
        return Err(Error::contract(format!(
            "feature {} has no snippets to label",
            dossier.feature_id
        )));
    }
    let (endpoint, token, timeout) = match client {
        LabelClient::Offline => return Ok(UNLABELED.to_string()),
        LabelClient::Remote {
            endpoint,
            token,
            timeout,
        } => (endpoint, token, *timeout),
    };
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let body = serde_json::json!({ "prompt": label_prompt(dossier) }).to_string();
    let mut req = agent.post(endpoint).header("Content-Type", "application/json");
    if let Some(t) = token {
        req = req.header("Authorization", format!("Bearer {t}"));
    }
    let mut resp = req.send(body).map_err(|e| Error::Label(e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| Error::Label(e.to_string()))?;
    if !(200..300).contains(&status) {
        return Err(Error::Label(format!("HTTP {status}")));
    }
    let parsed: LabelResponse =
        serde_json::from_str(&text).map_err(|e| Error::Label(format!("bad response JSON: {e}")))?;
    let label = parsed
        .label
        .as_deref()
        .and_then(|l| l.lines().map(str::trim).find(|l| !l.is_empty()))
        .ok_or_else(|| Error::Label("response has no label".into()))?;
    Ok(label.to_string())
}
