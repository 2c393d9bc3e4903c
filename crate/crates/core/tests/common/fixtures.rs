// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trained model and SAEs shared by the acceptance criteria, cached under the
//! cargo target directory and keyed by a hash of the pipeline config.
//! `STEERLAB_ACCEPTANCE_FRESH=1` discards the cache.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde_json::json;
use sha2::{Digest, Sha256};

use steerlab::lm::{load_checkpoint, save_checkpoint, LmCheckpoint};
use steerlab::pipeline::{train_layer_sae, train_lm, Artifacts, Corpora, PipelineConfig};
use steerlab::sae::{load_feature_stats, load_sae, save_feature_stats, save_sae, FeatureStats, SaeModel};

static CLEARED: AtomicBool = AtomicBool::new(false);

pub const FRESH_ENV: &str = "STEERLAB_ACCEPTANCE_FRESH";

/// The default recipe, with per-run benchmark subsets small enough that a
/// 100-run sweep fits the time budget.
pub fn acceptance_config() -> PipelineConfig {
    PipelineConfig {
        mem_items_per_run: Some(8),
        fluency_probes_per_run: Some(5),
        tasks_per_kind: 10,
        ..PipelineConfig::default()
    }
}

pub fn cache_dir(config: &PipelineConfig) -> PathBuf {
    let text = serde_json::to_string(config).expect("config serializes");
    let hash = hex::encode(Sha256::digest(text.as_bytes()));
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-{}", &hash[..16]))
}

fn fresh() -> bool {
    std::env::var(FRESH_ENV).is_ok_and(|v| v == "1")
}

fn timing_path(dir: &Path, what: &str) -> PathBuf {
    dir.join(format!("{what}.timing.json"))
}

fn read_timing(dir: &Path, what: &str) -> Option<f64> {
    let text = std::fs::read_to_string(timing_path(dir, what)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v["elapsed_secs"].as_f64()
}

/// The timing sidecar is written last, so its presence marks a complete entry.
fn write_timing(dir: &Path, what: &str, secs: f64) {
    std::fs::write(timing_path(dir, what), json!({ "elapsed_secs": secs }).to_string()).unwrap();
}

pub struct TrainedLm {
    pub config: PipelineConfig,
    pub corpora: Corpora,
    pub art: Artifacts,
    pub ckpt: LmCheckpoint,
    /// Wall time of the original training run.
    pub train_secs: f64,
    pub cached: bool,
}

pub fn trained_lm(config: &PipelineConfig) -> TrainedLm {
    let dir = cache_dir(config);
    let art = Artifacts::new(&dir);
    let corpora = Corpora::load(config).unwrap();
    // Only the first call in this process starts over.
    if fresh() && !CLEARED.swap(true, Ordering::SeqCst) && dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    if let Some(secs) = read_timing(&dir, "lm") {
        return TrainedLm {
            config: config.clone(),
            corpora,
            ckpt: load_checkpoint(&art.lm()).unwrap(),
            art,
            train_secs: secs,
            cached: true,
        };
    }
    let start = Instant::now();
    let (ckpt, _) = train_lm(config, &corpora).unwrap();
    let secs = start.elapsed().as_secs_f64();
    save_checkpoint(&ckpt, &art.lm()).unwrap();
    write_timing(&dir, "lm", secs);
    TrainedLm {
        config: config.clone(),
        corpora,
        art,
        ckpt,
        train_secs: secs,
        cached: false,
    }
}

pub struct TrainedSaes {
    pub layers: Vec<usize>,
    pub saes: Vec<(SaeModel, Option<FeatureStats>)>,
    pub train_secs: f64,
    pub cached: bool,
}

/// SAEs for the config's layer set, trained on the calibration texts.
pub fn trained_saes(lm: &TrainedLm) -> TrainedSaes {
    let layers = lm.config.layers(&lm.ckpt.config);
    let dir = &lm.art.dir;
    if let Some(secs) = read_timing(dir, "sae") {
        let saes = layers
            .iter()
            .map(|&l| {
                (
                    load_sae(&lm.art.sae(l)).unwrap(),
                    Some(load_feature_stats(&lm.art.stats(l)).unwrap()),
                )
            })
            .collect();
        return TrainedSaes {
            layers,
            saes,
            train_secs: secs,
            cached: true,
        };
    }
    let texts = lm.corpora.calibration_texts(&lm.config).unwrap();
    let start = Instant::now();
    let mut saes = Vec::new();
    for &layer in &layers {
        let trained = train_layer_sae(&lm.config, &lm.ckpt, layer, &texts).unwrap();
        save_sae(&trained.sae, &lm.art.sae(layer)).unwrap();
        save_feature_stats(&trained.stats, &lm.art.stats(layer)).unwrap();
        saes.push((trained.sae, Some(trained.stats)));
    }
    let secs = start.elapsed().as_secs_f64();
    write_timing(dir, "sae", secs);
    TrainedSaes {
        layers,
        saes,
        train_secs: secs,
        cached: false,
    }
}
