// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::checkpoint::LmCheckpoint;
use super::infer::Session;
use super::{decode, encode_with_bos, Intervention, PositionPolicy, EOT};

/// Decoding settings. Temperature 0 is greedy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub max_new_tokens: usize,
    pub temperature: f32,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            max_new_tokens: 160,
            temperature: 0.5,
            seed: 0,
        }
    }
}

/// Index of the largest logit; ties go to the lowest index.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(row: &[f32], temperature: f32, rng: &mut ChaCha8Rng) -> usize {
    let t = f64::from(temperature);
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = row.iter().map(|&v| ((v as f64 - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // Rounding left `u` past the last bucket.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Autoregressive continuation of `prompt` (token ids, `BOS` included).
/// Returns only the new tokens, without the terminating `EOT`.
pub fn generate_tokens(
    ckpt: &LmCheckpoint,
    prompt: &[usize],
    params: &SamplingParams,
    intervention: Option<&Intervention>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::contract("empty prompt"));
    }
    if !(params.temperature >= 0.0) || !params.temperature.is_finite() {
        return Err(Error::contract(format!(
            "temperature must be finite and >= 0, got {}",
            params.temperature
        )));
    }
    let ctx = ckpt.config.context_length;
    if prompt.len() > ctx {
        return Err(Error::contract(format!(
            "prompt of {} tokens exceeds context length {ctx}",
            prompt.len()
        )));
    }
    let mut session = Session::new(ckpt);
    if let Some(iv) = intervention {
        let from = match iv.policy {
            PositionPolicy::AllPositions => 0,
            PositionPolicy::GeneratedOnly => prompt.len() - 1,
        };
        session = session.with_intervention(iv, from)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let logits = session.extend(prompt)?;
    let mut last = logits.row(logits.rows() - 1).to_vec();
    let mut out = Vec::new();
    while out.len() < params.max_new_tokens {
        let next = if params.temperature == 0.0 {
            argmax(&last)
        } else {
            sample(&last, params.temperature, &mut rng)
        };
        if next == EOT {
            break;
        }
        out.push(next);
        if session.len() == ctx || out.len() == params.max_new_tokens {
            break;
        }
        last = session.extend(&[next])?.into_data();
    }
    Ok(out)
}

/// Text continuation of `prompt`. A `BOS` token is prepended.
pub fn generate(
    ckpt: &LmCheckpoint,
    prompt: &str,
    params: &SamplingParams,
    intervention: Option<&Intervention>,
) -> Result<String> {
    if prompt.is_empty() {
        return Err(Error::contract("empty prompt"));
    }
    let tokens = generate_tokens(ckpt, &encode_with_bos(prompt), params, intervention)?;
    Ok(decode(&tokens))
}
