// SPDX-License-Identifier: MIT OR Apache-2.0

//! Memorization, fluency and capability scores.

mod meteor;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, LmCheckpoint, BOS, EOT};
use crate::numerics::ops::log_softmax_row;

pub use meteor::{meteor_alignment, meteor_exact, MeteorAlignment};

/// Length of the longest common (not necessarily contiguous) subsequence.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Length of the longest common contiguous run.
pub fn longest_common_substring<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut best = 0;
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Granularity at which ANLCS compares texts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnlcsUnit {
    #[default]
    Char,
    Word,
}

impl AnlcsUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            AnlcsUnit::Char => "char",
            AnlcsUnit::Word => "word",
        }
    }
}

/// Removes a verbatim echo of `prompt` (and any whitespace after it) from the
/// start of `output`.
pub fn strip_prompt_echo<'a>(output: &'a str, prompt: &str) -> &'a str {
    let prompt = prompt.trim_end();
    if prompt.is_empty() {
        return output;
    }
    match output.strip_prefix(prompt) {
        Some(rest) => rest.trim_start(),
        None => output,
    }
}

/// `lcs(truth, output) / len(truth)` for one pair.
pub fn normalized_lcs(truth: &str, output: &str, unit: AnlcsUnit) -> Result<f64> {
    let (num, den) = match unit {
        AnlcsUnit::Char => {
            let t: Vec<char> = truth.chars().collect();
            let o: Vec<char> = output.chars().collect();
            (lcs_length(&t, &o), t.len())
        }
        AnlcsUnit::Word => {
            let t: Vec<&str> = truth.split_whitespace().collect();
            let o: Vec<&str> = output.split_whitespace().collect();
            (lcs_length(&t, &o), t.len())
        }
    };
    if den == 0 {
        return Err(Error::contract("empty ground truth"));
    }
    Ok(num.min(den) as f64 / den as f64)
}

/// Average normalized LCS over `(ground_truth, model_output)` pairs.
pub fn anlcs(pairs: &[(&str, &str)], unit: AnlcsUnit) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("anlcs over no pairs"));
    }
    let mut total = 0.0;
    for (truth, output) in pairs {
        total += normalized_lcs(truth, output, unit)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Summed next-token negative log-likelihood (nats) of `tokens[1..]` given
/// the preceding tokens, and the number of scored tokens. Sequences longer
/// than the context are scored in windows advancing by half a context;
/// every target is scored exactly once, by the first window containing it.
pub fn sequence_nll(scorer: &LmCheckpoint, tokens: &[usize]) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Err(Error::contract("need at least one token to score"));
    }
    let ctx = scorer.config.context_length;
    let stride = (ctx / 2).max(1);
    let last = tokens.len() - 1;
    let mut scored_to = 0; // highest target index already scored
    let mut start = 0;
    let mut total = 0.0;
    while scored_to < last {
        let end = (start + ctx).min(last); // inputs start..end predict start+1..=end
        let out = lm::forward(scorer, &tokens[start..end], None, None)?;
        for target in (scored_to + 1)..=end {
            let row = out.logits.row(target - 1 - start);
            let row64: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            total -= log_softmax_row(&row64)[tokens[target]];
        }
        scored_to = end;
        start += stride;
    }
    Ok((total, last))
}

/// `exp(mean NLL)` of `text` under `scorer`, with `BOS` prepended.
pub fn perplexity(scorer: &LmCheckpoint, text: &str) -> Result<f64> {
    if text.is_empty() {
        return Err(Error::contract("perplexity of empty text"));
    }
    let (nll, n) = sequence_nll(scorer, &lm::encode_with_bos(text))?;
    Ok((nll / n as f64).exp())
}

/// Pooled perplexity of generated responses: each is scored as
/// `[BOS] + bytes + [EOT]`, so empty responses still contribute the
/// probability of stopping immediately.
pub fn response_perplexity(scorer: &LmCheckpoint, responses: &[String]) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::contract("no responses to score"));
    }
    let mut total = 0.0;
    let mut count = 0;
    for r in responses {
        let mut tokens = vec![BOS];
        tokens.extend(lm::encode(r));
        tokens.push(EOT);
        let (nll, n) = sequence_nll(scorer, &tokens)?;
        total += nll;
        count += n;
    }
    Ok((total / count as f64).exp())
}

/// `perplexity(steered) / perplexity(default)`.
pub fn ppl_ratio(scorer: &LmCheckpoint, steered: &str, default: &str) -> Result<f64> {
    Ok(perplexity(scorer, steered)? / perplexity(scorer, default)?)
}

/// Trim, lowercase, drop punctuation, keep the first word.
pub fn normalize_answer(answer: &str) -> String {
    let cleaned: String = answer
        .trim()
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    cleaned.split_whitespace().next().unwrap_or("").to_string()
}

/// Exact-match accuracy after [`normalize_answer`].
pub fn task_accuracy<S: AsRef<str>, T: AsRef<str>>(golds: &[S], answers: &[T]) -> Result<f64> {
    if golds.len() != answers.len() {
        return Err(Error::contract(format!(
            "{} gold answers but {} model answers",
            golds.len(),
            answers.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::contract("task accuracy over no items"));
    }
    let correct = golds
        .iter()
        .zip(answers)
        .filter(|(g, a)| {
            let a = normalize_answer(a.as_ref());
            !a.is_empty() && a == normalize_answer(g.as_ref())
        })
        .count();
    Ok(correct as f64 / golds.len() as f64)
}

/// Scores of one paired run. Fields are `None` when the corresponding
/// benchmark was disabled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub anlcs_unit: AnlcsUnit,
    pub anlcs_steered: Option<f64>,
    pub anlcs_default: Option<f64>,
    pub perplexity_steered: Option<f64>,
    pub perplexity_default: Option<f64>,
    pub ppl_ratio: Option<f64>,
    pub meteor_exact_steered: Option<f64>,
    pub meteor_exact_default: Option<f64>,
    /// Task kind name to accuracy.
    pub task_steered: BTreeMap<String, f64>,
    pub task_default: BTreeMap<String, f64>,
}

impl ScoreReport {
    /// Range checks and the ratio identity.
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("anlcs_steered", self.anlcs_steered),
            ("anlcs_default", self.anlcs_default),
            ("meteor_exact_steered", self.meteor_exact_steered),
            ("meteor_exact_default", self.meteor_exact_default),
        ];
        for (name, v) in unit {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::contract(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        for (kind, v) in self.task_steered.iter().chain(&self.task_default) {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::contract(format!("task {kind} accuracy {v} outside [0, 1]")));
            }
        }
        match (self.perplexity_steered, self.perplexity_default, self.ppl_ratio) {
            (Some(s), Some(d), Some(r)) => {
                if !(s > 0.0 && d > 0.0 && r > 0.0) {
                    return Err(Error::contract("perplexities must be positive"));
                }
                if (r - s / d).abs() > 1e-9 * r.max(1.0) {
                    return Err(Error::contract(format!("ppl_ratio {r} != {s} / {d}")));
                }
            }
            (None, None, None) => {}
            _ => return Err(Error::contract("perplexity fields partially present")),
        }
        Ok(())
    }

    /// Mean task accuracy over kinds for one arm.
    pub fn mean_task(map: &BTreeMap<String, f64>) -> Option<f64> {
        (!map.is_empty()).then(|| map.values().sum::<f64>() / map.len() as f64)
    }
}
