// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::ScoreReport;
use crate::steering::SteeringSpec;

pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

/// One line of a sweep's record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub v: u32,
    pub run_id: String,
    pub index: usize,
    pub master_seed: u64,
    pub run_seed: u64,
    pub config_fingerprint: String,
    pub spec: SteeringSpec,
    /// Feature scale used, when known.
    pub alpha: Option<f32>,
    /// The feature never fired during calibration; alpha is the fallback.
    pub dead_feature: bool,
    /// Both arms shared sampling seeds for every generation.
    pub paired: bool,
    pub status: RunStatus,
    pub error: Option<String>,
    pub scores: Option<ScoreReport>,
    /// Digest of all steered-arm generations, in evaluation order.
    pub steered_digest: Option<String>,
    pub default_digest: Option<String>,
    /// Unix time in seconds.
    pub started_at: f64,
    pub elapsed_secs: f64,
}

impl RunRecord {
    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(format!("record {}: {m}", self.run_id)));
        if self.v != RECORD_VERSION {
            return bad(format!("schema version {} (expected {RECORD_VERSION})", self.v));
        }
        self.spec.validate()?;
        match self.status {
            RunStatus::Complete => {
                let Some(scores) = &self.scores else {
                    return bad("complete record without scores".into());
                };
                scores.validate()?;
                if self.error.is_some() {
                    return bad("complete record carries an error".into());
                }
                match (&self.steered_digest, &self.default_digest) {
                    (Some(s), Some(d)) => {
                        if self.spec.beta == 0.0 && self.paired && s != d {
                            return bad("beta = 0 but steered and default texts differ".into());
                        }
                    }
                    _ => return bad("complete record without text digests".into()),
                }
            }
            RunStatus::Failed => {
                if self.error.is_none() {
                    return bad("failed record without a cause".into());
                }
                if self.scores.is_some() {
                    return bad("failed record carries scores".into());
                }
            }
        }
        Ok(())
    }

    /// Copy with wall-clock fields zeroed, for comparing reruns.
    pub fn without_timing(&self) -> RunRecord {
        RunRecord {
            started_at: 0.0,
            elapsed_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct") + "\n"
    }
}

/// Length-prefixed SHA-256 over a list of texts, hex encoded.
pub fn text_digest<S: AsRef<str>>(texts: &[S]) -> String {
    let mut h = Sha256::new();
    for t in texts {
        let t = t.as_ref();
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Parses a record file. A final line without its newline is a torn write
/// and is dropped; the second value is the byte length of the intact
/// prefix. Any other malformed line is an error.
pub fn read_records(path: &Path) -> Result<(Vec<RunRecord>, usize)> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut records = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if !line.ends_with('\n') {
            log::warn!("{}: dropping torn final line", path.display());
            break;
        }
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok((records, offset))
}
