// SPDX-License-Identifier: MIT OR Apache-2.0

//! The default end-to-end recipe (train LM, capture activations, train and
//! calibrate SAEs, sweep) and the artifact layout shared by the CLI and the
//! acceptance suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::KeyValues;
use crate::corpus::{
    bundled_facts, bundled_fluency, bundled_memorization, calibration_texts, capability_items,
    load_facts, load_fluency_probes, load_memorization_corpus, render_memorization_prompt,
    render_task_prompt, training_set, with_separator, Fact, FluencyProbe, MemorizationItem,
    Mixture, TaskItem,
};
use crate::error::{Error, Result};
use crate::harness::{Benchmarks, BenchmarkToggles, SweepConfig};
use crate::lm::{
    generate, train_memorize, HookSite, LmCheckpoint, LmConfig, PositionPolicy, SamplingParams,
    TrainOptions, TrainingReport, TrainingSet,
};
use crate::metrics::{anlcs, response_perplexity, strip_prompt_echo, task_accuracy, AnlcsUnit};
use crate::sae::{
    calibrate_alpha, capture_activations, train_sae, FeatureStats, SaeConfig, SaeModel,
    SaeTrainOptions, SaeTrainingReport,
};

/// Every tunable of the recipe. Keys accepted by [`PipelineConfig::apply`]
/// are listed in [`PipelineConfig::KEYS`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub lm: LmConfig,
    pub train: TrainOptions,
    pub mixture: Mixture,
    /// `None` means the LM's early / middle / late layers.
    pub sae_layers: Option<Vec<usize>>,
    pub sae_features: usize,
    pub sae_l1: f32,
    pub sae: SaeTrainOptions,
    pub tasks_per_kind: usize,
    pub sweep_runs: usize,
    pub temperature: f32,
    pub max_new_tokens: usize,
    pub task_max_new_tokens: usize,
    pub mem_items_per_run: Option<usize>,
    pub fluency_probes_per_run: Option<usize>,
    pub benchmarks: BenchmarkToggles,
    pub anlcs_unit: AnlcsUnit,
    pub policy: PositionPolicy,
    pub jobs: usize,
    pub memorization_path: Option<PathBuf>,
    pub facts_path: Option<PathBuf>,
    pub fluency_path: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            lm: LmConfig::default(),
            train: TrainOptions::default(),
            mixture: Mixture::default(),
            sae_layers: None,
            sae_features: 1024,
            // LM residual norms are an order of magnitude above the unit-scale
            // synthetic benchmark, so the penalty is larger than SaeConfig's.
            sae_l1: 1.0,
            sae: SaeTrainOptions {
                epochs: 5,
                ..SaeTrainOptions::default()
            },
            tasks_per_kind: 30,
            sweep_runs: 100,
            temperature: 0.5,
            max_new_tokens: 160,
            task_max_new_tokens: 8,
            mem_items_per_run: None,
            fluency_probes_per_run: None,
            benchmarks: BenchmarkToggles::default(),
            anlcs_unit: AnlcsUnit::Char,
            policy: PositionPolicy::AllPositions,
            jobs: 1,
            memorization_path: None,
            facts_path: None,
            fluency_path: None,
        }
    }
}

fn parse_flag(kv: &KeyValues, key: &str) -> Result<Option<bool>> {
    kv.get::<bool>(key)
}

fn parse_optional_count(kv: &KeyValues, key: &str) -> Result<Option<Option<usize>>> {
    match kv.raw(key) {
        None => Ok(None),
        Some("all") => Ok(Some(None)),
        Some(_) => Ok(Some(kv.get::<usize>(key)?)),
    }
}

fn config_err(kv: &KeyValues, key: &str, message: String) -> Error {
    Error::Config(format!("{}: {key}: {message}", kv.origin()))
}

impl PipelineConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "lm.n_layers",
        "lm.d_model",
        "lm.n_heads",
        "lm.d_mlp",
        "lm.context_length",
        "train.steps",
        "train.batch_size",
        "train.lr",
        "train.warmup_steps",
        "train.grad_clip",
        "train.log_every",
        "mixture.memorization",
        "mixture.capability",
        "mixture.fluency",
        "mixture.bool_expr_items",
        "sae.layers",
        "sae.n_features",
        "sae.l1",
        "sae.epochs",
        "sae.batch_size",
        "sae.lr",
        "sae.unit_norm_decoder",
        "tasks.per_kind",
        "sweep.n_runs",
        "sweep.temperature",
        "sweep.max_new_tokens",
        "sweep.task_max_new_tokens",
        "sweep.mem_items_per_run",
        "sweep.fluency_probes_per_run",
        "sweep.memorization",
        "sweep.fluency",
        "sweep.tasks",
        "sweep.anlcs_unit",
        "sweep.policy",
        "sweep.jobs",
        "corpus.memorization",
        "corpus.facts",
        "corpus.fluency",
    ];

    /// Overrides fields from a parsed config file. Unknown keys are errors.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.reject_unknown(Self::KEYS)?;
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        set!("seed", self.seed);
        set!("lm.n_layers", self.lm.n_layers);
        set!("lm.d_model", self.lm.d_model);
        set!("lm.n_heads", self.lm.n_heads);
        set!("lm.d_mlp", self.lm.d_mlp);
        set!("lm.context_length", self.lm.context_length);
        set!("train.steps", self.train.steps);
        set!("train.batch_size", self.train.batch_size);
        set!("train.lr", self.train.adam.lr);
        set!("train.warmup_steps", self.train.warmup_steps);
        set!("train.grad_clip", self.train.grad_clip);
        set!("train.log_every", self.train.log_every);
        set!("mixture.memorization", self.mixture.memorization);
        set!("mixture.capability", self.mixture.capability);
        set!("mixture.fluency", self.mixture.fluency);
        set!("mixture.bool_expr_items", self.mixture.bool_expr_items);
        if let Some(layers) = kv.get_list::<usize>("sae.layers")? {
            self.sae_layers = Some(layers);
        }
        set!("sae.n_features", self.sae_features);
        set!("sae.l1", self.sae_l1);
        set!("sae.epochs", self.sae.epochs);
        set!("sae.batch_size", self.sae.batch_size);
        set!("sae.lr", self.sae.adam.lr);
        if let Some(v) = parse_flag(kv, "sae.unit_norm_decoder")? {
            self.sae.unit_norm_decoder = v;
        }
        set!("tasks.per_kind", self.tasks_per_kind);
        set!("sweep.n_runs", self.sweep_runs);
        set!("sweep.temperature", self.temperature);
        set!("sweep.max_new_tokens", self.max_new_tokens);
        set!("sweep.task_max_new_tokens", self.task_max_new_tokens);
        if let Some(v) = parse_optional_count(kv, "sweep.mem_items_per_run")? {
            self.mem_items_per_run = v;
        }
        if let Some(v) = parse_optional_count(kv, "sweep.fluency_probes_per_run")? {
            self.fluency_probes_per_run = v;
        }
        if let Some(v) = parse_flag(kv, "sweep.memorization")? {
            self.benchmarks.memorization = v;
        }
        if let Some(v) = parse_flag(kv, "sweep.fluency")? {
            self.benchmarks.fluency = v;
        }
        if let Some(v) = parse_flag(kv, "sweep.tasks")? {
            self.benchmarks.tasks = v;
        }
        if let Some(v) = kv.raw("sweep.anlcs_unit") {
            self.anlcs_unit = match v {
                "char" => AnlcsUnit::Char,
                "word" => AnlcsUnit::Word,
                _ => return Err(config_err(kv, "sweep.anlcs_unit", format!("expected char or word, got {v:?}"))),
            };
        }
        if let Some(v) = kv.raw("sweep.policy") {
            self.policy = match v {
                "all_positions" => PositionPolicy::AllPositions,
                "generated_only" => PositionPolicy::GeneratedOnly,
                _ => {
                    return Err(config_err(
                        kv,
                        "sweep.policy",
                        format!("expected all_positions or generated_only, got {v:?}"),
                    ))
                }
            };
        }
        set!("sweep.jobs", self.jobs);
        if let Some(v) = kv.raw("corpus.memorization") {
            self.memorization_path = Some(PathBuf::from(v));
        }
        if let Some(v) = kv.raw("corpus.facts") {
            self.facts_path = Some(PathBuf::from(v));
        }
        if let Some(v) = kv.raw("corpus.fluency") {
            self.fluency_path = Some(PathBuf::from(v));
        }
        Ok(())
    }

    /// Sets the master seed, which also seeds LM and SAE initialization.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            seed: self.seed,
            ..self.lm.clone()
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn layers(&self, lm: &LmConfig) -> Vec<usize> {
        self.sae_layers.clone().unwrap_or_else(|| lm.default_layer_set())
    }

    pub fn sae_config(&self, d_in: usize, layer: usize) -> SaeConfig {
        SaeConfig {
            d_in,
            n_features: self.sae_features,
            l1_coefficient: self.sae_l1,
            seed: crate::harness::mix_seed(self.seed, layer as u64),
        }
    }

    pub fn sweep_config(&self, layers: Vec<usize>, n_features: usize) -> SweepConfig {
        SweepConfig {
            n_runs: self.sweep_runs,
            temperature: self.temperature,
            master_seed: self.seed,
            max_new_tokens: self.max_new_tokens,
            task_max_new_tokens: self.task_max_new_tokens,
            benchmarks: self.benchmarks,
            mem_items_per_run: self.mem_items_per_run,
            fluency_probes_per_run: self.fluency_probes_per_run,
            anlcs_unit: self.anlcs_unit,
            policy: self.policy,
            jobs: self.jobs,
            ..SweepConfig::new(layers, n_features)
        }
    }
}

/// The three text corpora, bundled unless overridden by path.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    pub memorization: Vec<MemorizationItem>,
    pub facts: Vec<Fact>,
    pub fluency: Vec<FluencyProbe>,
}

impl Corpora {
    pub fn load(config: &PipelineConfig) -> Result<Corpora> {
        Ok(Corpora {
            memorization: match &config.memorization_path {
                Some(p) => load_memorization_corpus(p)?,
                None => bundled_memorization(),
            },
            facts: match &config.facts_path {
                Some(p) => load_facts(p)?,
                None => bundled_facts(),
            },
            fluency: match &config.fluency_path {
                Some(p) => load_fluency_probes(p)?,
                None => bundled_fluency(),
            },
        })
    }

    pub fn training_set(&self, config: &PipelineConfig) -> Result<TrainingSet> {
        training_set(&self.memorization, &self.facts, &self.fluency, &config.mixture)
    }

    /// Texts used for activation capture, calibration and dashboards.
    pub fn calibration_texts(&self, config: &PipelineConfig) -> Result<Vec<String>> {
        Ok(calibration_texts(&self.training_set(config)?))
    }

    pub fn tasks(&self, config: &PipelineConfig) -> Result<Vec<TaskItem>> {
        capability_items(config.tasks_per_kind, &self.facts)
    }

    pub fn benchmarks(&self, config: &PipelineConfig) -> Result<Benchmarks> {
        Ok(Benchmarks {
            memorization: self.memorization.clone(),
            probes: self.fluency.clone(),
            tasks: self.tasks(config)?,
        })
    }
}

/// File names inside an output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn lm(&self) -> PathBuf {
        self.dir.join("lm.stlb")
    }

    pub fn activations(&self, layer: usize) -> PathBuf {
        self.dir.join(format!("acts_layer{layer}.stac"))
    }

    pub fn sae(&self, layer: usize) -> PathBuf {
        self.dir.join(format!("sae_layer{layer}.stsa"))
    }

    pub fn stats(&self, layer: usize) -> PathBuf {
        self.dir.join(format!("stats_layer{layer}.json"))
    }

    pub fn runs(&self) -> PathBuf {
        self.dir.join("runs.jsonl")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.dir.join("report")
    }

    /// Layers that have a trained SAE in the directory, ascending.
    pub fn sae_layers(&self) -> Result<Vec<usize>> {
        let entries = std::fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut layers = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(l) = name
                .strip_prefix("sae_layer")
                .and_then(|r| r.strip_suffix(".stsa"))
                .and_then(|l| l.parse().ok())
            {
                layers.push(l);
            }
        }
        layers.sort_unstable();
        Ok(layers)
    }
}

pub fn train_lm(config: &PipelineConfig, corpora: &Corpora) -> Result<(LmCheckpoint, TrainingReport)> {
    let set = corpora.training_set(config)?;
    train_memorize(&config.lm_config(), &set, &config.train_options())
}

/// A trained, calibrated SAE for one layer.
#[derive(Clone, Debug)]
pub struct LayerSae {
    pub sae: SaeModel,
    pub stats: FeatureStats,
    pub report: SaeTrainingReport,
}

/// Captures activations at `layer` over `texts`, trains an SAE on them and
/// calibrates its feature scales on the same texts.
pub fn train_layer_sae(
    config: &PipelineConfig,
    ckpt: &LmCheckpoint,
    layer: usize,
    texts: &[String],
) -> Result<LayerSae> {
    let site = HookSite::new(layer);
    let acts = capture_activations(ckpt, site, texts)?;
    let sae_config = config.sae_config(ckpt.config.d_model, layer);
    let (sae, report) = train_sae(&sae_config, site, &acts.acts, &config.sae)?;
    let stats = calibrate_alpha(&sae, ckpt, texts)?;
    Ok(LayerSae { sae, stats, report })
}

/// Memorization outputs and their ANLCS.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemorizationEval {
    pub anlcs: f64,
    pub outputs: Vec<String>,
}

pub fn eval_memorization(
    ckpt: &LmCheckpoint,
    items: &[MemorizationItem],
    sampling: &SamplingParams,
    unit: AnlcsUnit,
) -> Result<MemorizationEval> {
    let mut outputs = Vec::with_capacity(items.len());
    for item in items {
        outputs.push(generate(ckpt, &with_separator(&render_memorization_prompt(item)), sampling, None)?);
    }
    let pairs: Vec<(&str, &str)> = items
        .iter()
        .zip(&outputs)
        .map(|(i, o)| {
            let prompt = with_separator(&render_memorization_prompt(i));
            (i.ground_truth.as_str(), strip_prompt_echo(o, &prompt))
        })
        .collect();
    Ok(MemorizationEval {
        anlcs: anlcs(&pairs, unit)?,
        outputs,
    })
}

/// Greedy accuracy per task kind.
pub fn eval_tasks(ckpt: &LmCheckpoint, items: &[TaskItem], max_new_tokens: usize) -> Result<BTreeMap<String, f64>> {
    let sampling = SamplingParams {
        max_new_tokens,
        temperature: 0.0,
        seed: 0,
    };
    let mut by_kind: BTreeMap<&str, (Vec<&str>, Vec<String>)> = BTreeMap::new();
    for item in items {
        let answer = generate(ckpt, &render_task_prompt(item), &sampling, None)?;
        let e = by_kind.entry(item.kind.as_str()).or_default();
        e.0.push(&item.gold);
        e.1.push(answer);
    }
    by_kind
        .into_iter()
        .map(|(k, (gold, answers))| Ok((k.to_string(), task_accuracy(&gold, &answers)?)))
        .collect()
}

/// Pooled perplexity of `texts` under `scorer`.
pub fn eval_perplexity(scorer: &LmCheckpoint, texts: &[String]) -> Result<f64> {
    response_perplexity(scorer, texts)
}

pub fn load_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_overrides() {
        let kv = KeyValues::parse(
            "seed = 4\ntrain.steps = 10\nsae.layers = 0, 1\nsweep.mem_items_per_run = 3\n\
             sweep.fluency_probes_per_run = all\nsweep.anlcs_unit = word\nsweep.tasks = false\n",
            "t",
        )
        .unwrap();
        let mut c = PipelineConfig::default();
        c.fluency_probes_per_run = Some(2);
        c.apply(&kv).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train_options().steps, 10);
        assert_eq!(c.train_options().seed, 4);
        assert_eq!(c.lm_config().seed, 4);
        assert_eq!(c.layers(&c.lm), [0, 1]);
        assert_eq!(c.mem_items_per_run, Some(3));
        assert_eq!(c.fluency_probes_per_run, None);
        assert_eq!(c.anlcs_unit, AnlcsUnit::Word);
        assert!(!c.benchmarks.tasks);
        let s = c.sweep_config(vec![0, 1], 8);
        assert_eq!((s.master_seed, s.mem_items_per_run, s.n_runs), (4, Some(3), 100));
    }

    #[test]
    fn config_file_errors() {
        let mut c = PipelineConfig::default();
        let unknown = KeyValues::parse("a = 1\ntrain.stepz = 3\n", "t").unwrap();
        assert!(matches!(c.apply(&unknown), Err(Error::Parse { line: 1, .. })));
        let bad = KeyValues::parse("sweep.policy = sometimes\n", "t").unwrap();
        assert!(matches!(c.apply(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn default_layers_are_early_middle_late() {
        let c = PipelineConfig::default();
        assert_eq!(c.layers(&c.lm), [1, 3, 5]);
    }

    #[test]
    fn artifact_layer_discovery() {
        let dir = tempfile::tempdir().unwrap();
        let a = Artifacts::new(dir.path());
        for name in ["sae_layer3.stsa", "sae_layer1.stsa", "sae_layerx.stsa", "stats_layer2.json"] {
            std::fs::write(dir.path().join(name), b"").unwrap();
        }
        assert_eq!(a.sae_layers().unwrap(), [1, 3]);
    }
}
