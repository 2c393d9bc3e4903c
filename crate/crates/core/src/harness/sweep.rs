// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::{render_memorization_prompt, render_paraphrase_prompt, render_task_prompt, with_separator};
use crate::error::{Error, Result};
use crate::lm::{LmCheckpoint, SamplingParams};
use crate::metrics::{anlcs, meteor_exact, response_perplexity, strip_prompt_echo, task_accuracy, ScoreReport};
use crate::steering::{PairedOutput, SteeringBackend, SteeringSpec};

use super::record::{read_records, text_digest, RunRecord, RunStatus, RECORD_VERSION};
use super::{mix_seed, run_seed, sample_params, subset, Benchmarks, SweepConfig};

const MEM_STREAM: u64 = 1 << 32;
const FLUENCY_STREAM: u64 = 2 << 32;
const TASK_STREAM: u64 = 3 << 32;
const SUBSET_STREAM: u64 = 4 << 32;

struct Arms {
    steered: Vec<String>,
    default: Vec<String>,
    paired: bool,
    dead_feature: bool,
    alpha: Option<f32>,
}

impl Arms {
    fn push(&mut self, out: PairedOutput) {
        self.paired &= out.paired;
        self.dead_feature |= out.dead_feature;
        if self.alpha.is_none() {
            self.alpha = out.alpha;
        }
        self.steered.push(out.steered_text);
        self.default.push(out.default_text);
    }
}

fn evaluate(
    backend: &dyn SteeringBackend,
    scorer: &LmCheckpoint,
    bench: &Benchmarks,
    config: &SweepConfig,
    spec: &SteeringSpec,
    seed: u64,
) -> Result<(ScoreReport, Arms)> {
    let mut arms = Arms {
        steered: Vec::new(),
        default: Vec::new(),
        paired: true,
        dead_feature: false,
        alpha: None,
    };
    let mut report = ScoreReport {
        anlcs_unit: config.anlcs_unit,
        ..ScoreReport::default()
    };
    let sampling = |stream: u64, i: usize, max_new_tokens: usize| SamplingParams {
        max_new_tokens,
        temperature: config.temperature,
        seed: mix_seed(seed, stream + i as u64),
    };

    if config.benchmarks.memorization {
        if bench.memorization.is_empty() {
            return Err(Error::contract("memorization benchmark enabled but corpus is empty"));
        }
        let picked = subset(bench.memorization.len(), config.mem_items_per_run, mix_seed(seed, SUBSET_STREAM));
        let start = arms.steered.len();
        let mut prompts = Vec::with_capacity(picked.len());
        for &i in &picked {
            let prompt = with_separator(&render_memorization_prompt(&bench.memorization[i]));
            arms.push(backend.paired_generate(&prompt, spec, &sampling(MEM_STREAM, i, config.max_new_tokens))?);
            prompts.push(prompt);
        }
        let score = |texts: &[String]| {
            let pairs: Vec<(&str, &str)> = picked
                .iter()
                .zip(texts)
                .zip(&prompts)
                .map(|((&i, out), p)| (bench.memorization[i].ground_truth.as_str(), strip_prompt_echo(out, p)))
                .collect();
            anlcs(&pairs, config.anlcs_unit)
        };
        report.anlcs_steered = Some(score(&arms.steered[start..])?);
        report.anlcs_default = Some(score(&arms.default[start..])?);
    }

    if config.benchmarks.fluency {
        if bench.probes.is_empty() {
            return Err(Error::contract("fluency benchmark enabled but no probes"));
        }
        let picked = subset(bench.probes.len(), config.fluency_probes_per_run, mix_seed(seed, SUBSET_STREAM + 1));
        let start = arms.steered.len();
        for &i in &picked {
            let prompt = with_separator(&render_paraphrase_prompt(&bench.probes[i]));
            arms.push(backend.paired_generate(&prompt, spec, &sampling(FLUENCY_STREAM, i, config.max_new_tokens))?);
        }
        let steered = &arms.steered[start..];
        let default = &arms.default[start..];
        let ps = response_perplexity(scorer, steered)?;
        let pd = if steered == default { ps } else { response_perplexity(scorer, default)? };
        report.perplexity_steered = Some(ps);
        report.perplexity_default = Some(pd);
        report.ppl_ratio = Some(ps / pd);
        let meteor = |texts: &[String]| {
            picked
                .iter()
                .zip(texts)
                .map(|(&i, t)| meteor_exact(t, &bench.probes[i].reference))
                .sum::<f64>()
                / picked.len() as f64
        };
        report.meteor_exact_steered = Some(meteor(steered));
        report.meteor_exact_default = Some(meteor(default));
    }

    if config.benchmarks.tasks {
        if bench.tasks.is_empty() {
            return Err(Error::contract("task benchmark enabled but no items"));
        }
        let start = arms.steered.len();
        for (i, item) in bench.tasks.iter().enumerate() {
            let prompt = render_task_prompt(item);
            arms.push(backend.paired_generate(&prompt, spec, &sampling(TASK_STREAM, i, config.task_max_new_tokens))?);
        }
        let mut by_kind: BTreeMap<&str, (Vec<&str>, Vec<&str>, Vec<&str>)> = BTreeMap::new();
        for (k, item) in bench.tasks.iter().enumerate() {
            let e = by_kind.entry(item.kind.as_str()).or_default();
            e.0.push(&item.gold);
            e.1.push(&arms.steered[start + k]);
            e.2.push(&arms.default[start + k]);
        }
        for (kind, (gold, s, d)) in by_kind {
            report.task_steered.insert(kind.to_string(), task_accuracy(&gold, &s)?);
            report.task_default.insert(kind.to_string(), task_accuracy(&gold, &d)?);
        }
    }
    Ok((report, arms))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Executes run `index` of the sweep. Backend and metric failures produce a
/// record with status `failed`; only an invalid configuration is an error.
pub fn run_one(
    backend: &dyn SteeringBackend,
    scorer: &LmCheckpoint,
    bench: &Benchmarks,
    config: &SweepConfig,
    index: usize,
) -> Result<RunRecord> {
    let spec = sample_params(config, index)?;
    let seed = run_seed(config.master_seed, index);
    let run_id = format!("{:016x}-{index:05}", config.master_seed);
    let started_at = unix_now();
    let clock = Instant::now();
    let mut record = RunRecord {
        v: RECORD_VERSION,
        run_id,
        index,
        master_seed: config.master_seed,
        run_seed: seed,
        config_fingerprint: config.fingerprint(),
        spec,
        alpha: None,
        dead_feature: false,
        paired: false,
        status: RunStatus::Failed,
        error: None,
        scores: None,
        steered_digest: None,
        default_digest: None,
        started_at,
        elapsed_secs: 0.0,
    };
    match evaluate(backend, scorer, bench, config, &spec, seed) {
        Ok((scores, arms)) => {
            record.status = RunStatus::Complete;
            record.alpha = arms.alpha;
            record.dead_feature = arms.dead_feature;
            record.paired = arms.paired;
            record.steered_digest = Some(text_digest(&arms.steered));
            record.default_digest = Some(text_digest(&arms.default));
            record.scores = Some(scores);
        }
        Err(e) => {
            log::warn!("run {} failed: {e}", record.run_id);
            record.error = Some(e.to_string());
        }
    }
    record.elapsed_secs = clock.elapsed().as_secs_f64();
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub path: PathBuf,
    pub n_runs: usize,
    /// Records already present before this invocation.
    pub resumed: usize,
    pub executed: usize,
    pub complete: usize,
    pub failed: usize,
}

/// Runs every missing index of the sweep, appending records to `path` in
/// index order. An existing file from the same sweep is resumed.
pub fn run_sweep(
    backend: &dyn SteeringBackend,
    scorer: &LmCheckpoint,
    bench: &Benchmarks,
    config: &SweepConfig,
    path: &Path,
) -> Result<SweepSummary> {
    config.validate()?;
    let (existing, intact) = read_records(path)?;
    let fingerprint = config.fingerprint();
    let mut done = BTreeSet::new();
    for r in &existing {
        if r.master_seed != config.master_seed || r.config_fingerprint != fingerprint {
            return Err(Error::Config(format!(
                "{} holds records from a different sweep (run {})",
                path.display(),
                r.run_id
            )));
        }
        if r.index >= config.n_runs || !done.insert(r.index) {
            return Err(Error::Config(format!(
                "{}: unexpected or duplicate run index {}",
                path.display(),
                r.index
            )));
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if file.metadata().map_err(|e| Error::io(path, e))?.len() as usize != intact {
        file.set_len(intact as u64).map_err(|e| Error::io(path, e))?;
    }
    let missing: Vec<usize> = (0..config.n_runs).filter(|i| !done.contains(i)).collect();
    if !existing.is_empty() {
        log::info!(
            "resuming {}: {} of {} runs present",
            path.display(),
            existing.len(),
            config.n_runs
        );
    }

    let mut complete = existing.iter().filter(|r| r.is_complete()).count();
    let mut failed = existing.len() - complete;
    let mut write = |rec: &RunRecord| -> Result<()> {
        file.write_all(rec.to_json_line().as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| Error::io(path, e))?;
        if rec.is_complete() {
            complete += 1;
        } else {
            failed += 1;
        }
        log::info!(
            "run {} ({}/{}): layer {} feature {} beta {:.2} {:?}",
            rec.run_id,
            rec.index + 1,
            config.n_runs,
            rec.spec.layer,
            rec.spec.feature_id,
            rec.spec.beta,
            rec.status
        );
        Ok(())
    };

    let jobs = config.jobs.max(1).min(missing.len().max(1));
    if jobs == 1 {
        for &i in &missing {
            write(&run_one(backend, scorer, bench, config, i)?)?;
        }
    } else {
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<Result<RunRecord>>();
        std::thread::scope(|scope| -> Result<()> {
            for _ in 0..jobs {
                let tx = tx.clone();
                let (next, missing) = (&next, &missing);
                scope.spawn(move || loop {
                    let k = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&i) = missing.get(k) else { break };
                    if tx.send(run_one(backend, scorer, bench, config, i)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            // Completed runs are held until every lower index has been
            // written, so the file is always an index-ordered prefix.
            let mut pending: BTreeMap<usize, RunRecord> = BTreeMap::new();
            let mut cursor = 0;
            for rec in rx {
                let rec = rec?;
                pending.insert(rec.index, rec);
                while let Some(rec) = missing.get(cursor).and_then(|i| pending.remove(i)) {
                    write(&rec)?;
                    cursor += 1;
                }
            }
            Ok(())
        })?;
    }
    Ok(SweepSummary {
        path: path.to_path_buf(),
        n_runs: config.n_runs,
        resumed: existing.len(),
        executed: missing.len(),
        complete,
        failed,
    })
}
