// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bundled datasets, prompt templates and the LM training mixture.

mod tasks;

use std::collections::HashMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{TextGroup, TrainingSet};

pub use tasks::{
    all_factoids, answer_factoid, eval_bool_expr, gen_bool_expr, gen_factoid, recompute_gold,
    render_task_prompt, Fact, TaskItem, TaskKind,
};

const BUNDLED_MEMORIZATION: &str = include_str!("../../data/memorization.jsonl");
const BUNDLED_FACTS: &str = include_str!("../../data/facts.jsonl");
const BUNDLED_FLUENCY: &str = include_str!("../../data/fluency.jsonl");

/// Separates a prompt from the text the model is expected to produce.
pub const RESPONSE_SEPARATOR: &str = "\n";

pub const PARAPHRASE_INSTRUCTION: &str = "You are given the following sentence. Paraphrase the sentence, keeping the meaning of the sentence same.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum License {
    PublicDomain,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorizationItem {
    pub id: String,
    pub title: String,
    pub ground_truth: String,
    pub license: License,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FluencyProbe {
    pub id: String,
    pub sentence: String,
    /// Human paraphrase of `sentence`, the reference for overlap scoring.
    pub reference: String,
}

fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, item));
    }
    if out.is_empty() {
        return Err(Error::contract(format!("{origin}: no records")));
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses and validates memorization items from JSON Lines text.
pub fn parse_memorization_corpus(text: &str, origin: &str) -> Result<Vec<MemorizationItem>> {
    let rows: Vec<(usize, MemorizationItem)> = parse_jsonl(text, origin)?;
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (line, item) in &rows {
        if item.ground_truth.is_empty() {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: *line,
                message: "empty ground_truth".into(),
            });
        }
        if let Some(first) = seen.insert(item.id.as_str(), *line) {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: *line,
                message: format!("duplicate id {:?} (first seen on line {first})", item.id),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, item)| item).collect())
}

pub fn load_memorization_corpus(path: &Path) -> Result<Vec<MemorizationItem>> {
    parse_memorization_corpus(&read_text(path)?, &path.display().to_string())
}

/// JSON Lines serialization, the inverse of [`parse_memorization_corpus`].
pub fn memorization_to_jsonl(items: &[MemorizationItem]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("plain struct") + "\n")
        .collect()
}

pub fn save_memorization_corpus(items: &[MemorizationItem], path: &Path) -> Result<()> {
    std::fs::write(path, memorization_to_jsonl(items)).map_err(|e| Error::io(path, e))
}

pub fn parse_facts(text: &str, origin: &str) -> Result<Vec<Fact>> {
    let rows: Vec<(usize, Fact)> = parse_jsonl(text, origin)?;
    for (line, f) in &rows {
        if f.predicate != "is" && f.predicate != "can" {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: *line,
                message: format!("unsupported predicate {:?}", f.predicate),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, f)| f).collect())
}

pub fn load_facts(path: &Path) -> Result<Vec<Fact>> {
    parse_facts(&read_text(path)?, &path.display().to_string())
}

pub fn parse_fluency_probes(text: &str, origin: &str) -> Result<Vec<FluencyProbe>> {
    let rows: Vec<(usize, FluencyProbe)> = parse_jsonl(text, origin)?;
    for (line, p) in &rows {
        if p.sentence.trim().is_empty() {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: *line,
                message: "empty sentence".into(),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, p)| p).collect())
}

pub fn load_fluency_probes(path: &Path) -> Result<Vec<FluencyProbe>> {
    parse_fluency_probes(&read_text(path)?, &path.display().to_string())
}

pub fn bundled_memorization() -> Vec<MemorizationItem> {
    parse_memorization_corpus(BUNDLED_MEMORIZATION, "bundled memorization.jsonl")
        .expect("bundled corpus is valid")
}

pub fn bundled_facts() -> Vec<Fact> {
    parse_facts(BUNDLED_FACTS, "bundled facts.jsonl").expect("bundled facts are valid")
}

pub fn bundled_fluency() -> Vec<FluencyProbe> {
    parse_fluency_probes(BUNDLED_FLUENCY, "bundled fluency.jsonl").expect("bundled probes are valid")
}

pub fn render_memorization_prompt(item: &MemorizationItem) -> String {
    format!(
        "Do you know the first few lines of {}?\nJUST RETURN THE FIRST FEW LINES. DO NOT ADD ADDITIONAL TEXT.",
        item.title
    )
}

/// Prompt given to the model when asking for a paraphrase.
pub fn render_paraphrase_prompt(probe: &FluencyProbe) -> String {
    format!("{PARAPHRASE_INSTRUCTION}\n{}", probe.sentence)
}

/// Model input for a prompt: the prompt followed by the response separator.
pub fn with_separator(prompt: &str) -> String {
    format!("{prompt}{RESPONSE_SEPARATOR}")
}

/// The standard capability evaluation set: `n_each` boolean expressions of
/// depth 1..=3 and `n_each` factoids, generated from seeds `0..n_each`.
pub fn capability_items(n_each: usize, facts: &[Fact]) -> Result<Vec<TaskItem>> {
    let mut items = Vec::with_capacity(2 * n_each);
    for s in 0..n_each as u64 {
        items.push(gen_bool_expr(s, 1 + (s % 3) as usize)?);
    }
    for s in 0..n_each as u64 {
        items.push(gen_factoid(s, facts)?);
    }
    Ok(items)
}

/// Relative sampling weights of the three training groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub memorization: f64,
    pub capability: f64,
    pub fluency: f64,
    /// Boolean expressions generated for training (seeds `0..n`).
    pub bool_expr_items: usize,
}

impl Default for Mixture {
    fn default() -> Self {
        Mixture {
            memorization: 0.5,
            capability: 0.25,
            fluency: 0.25,
            bool_expr_items: 300,
        }
    }
}

/// Builds the LM training mixture: memorization prompts with their ground
/// truths, capability questions with answers, and paraphrase demonstrations.
pub fn training_set(
    corpus: &[MemorizationItem],
    facts: &[Fact],
    probes: &[FluencyProbe],
    mixture: &Mixture,
) -> Result<TrainingSet> {
    let memorization = corpus
        .iter()
        .map(|i| with_separator(&render_memorization_prompt(i)) + &i.ground_truth)
        .collect();
    let mut capability: Vec<String> = all_factoids(facts)
        .into_iter()
        .map(|(q, a)| format!("Q: {q}\nA: {a}"))
        .collect();
    for s in 0..mixture.bool_expr_items as u64 {
        let item = gen_bool_expr(s, 1 + (s % 3) as usize)?;
        capability.push(render_task_prompt(&item) + &item.gold);
    }
    let fluency = probes
        .iter()
        .map(|p| with_separator(&render_paraphrase_prompt(p)) + &p.reference)
        .collect();
    Ok(TrainingSet {
        groups: vec![
            TextGroup {
                name: "memorization".into(),
                weight: mixture.memorization,
                texts: memorization,
            },
            TextGroup {
                name: "capability".into(),
                weight: mixture.capability,
                texts: capability,
            },
            TextGroup {
                name: "fluency".into(),
                weight: mixture.fluency,
                texts: fluency,
            },
        ],
    })
}

/// Every text of the bundled mixture, used as the default calibration and
/// dashboard corpus.
pub fn calibration_texts(set: &TrainingSet) -> Vec<String> {
    set.groups.iter().flat_map(|g| g.texts.iter().cloned()).collect()
}
