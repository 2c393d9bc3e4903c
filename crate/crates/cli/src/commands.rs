// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use steerlab::config::KeyValues;
use steerlab::corpus::{render_paraphrase_prompt, with_separator};
use steerlab::dashboard::{feature_top_examples, footprint_score, label_feature, FeatureDossier, LabelClient};
use steerlab::harness::{read_records, run_sweep, Stat};
use steerlab::lm::{load_checkpoint, save_checkpoint, LmCheckpoint, PositionPolicy, SamplingParams};
use steerlab::pipeline::{
    eval_memorization, eval_perplexity, eval_tasks, load_text, train_lm, Artifacts, Corpora,
    PipelineConfig,
};
use steerlab::report::{emit_report, layer_ratio_means};
use steerlab::sae::{
    calibrate_alpha, capture_activations, load_activations, load_feature_stats, load_sae, save_activations,
    save_feature_stats, save_sae, train_sae, total_variance, FeatureStats, SaeModel,
};
use steerlab::steering::{
    AlphaSource, BackendCapabilities, LocalBackend, RemoteBackend, SteeringBackend, SteeringSpec,
};

use crate::{Cli, Command, FeatureArgs, Policy, SteerArgs, SweepArgs};

pub const ENDPOINT_ENV: &str = "STEERLAB_ENDPOINT";

struct Ctx {
    config: PipelineConfig,
    art: Artifacts,
    json: bool,
}

impl Ctx {
    fn emit(&self, value: Value, human: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            println!("{}", human());
        }
    }

    fn checkpoint(&self) -> Result<LmCheckpoint> {
        let path = self.art.lm();
        load_checkpoint(&path).with_context(|| format!("loading {} (run train-lm first)", path.display()))
    }

    fn sae(&self, layer: usize) -> Result<SaeModel> {
        let path = self.art.sae(layer);
        load_sae(&path).with_context(|| format!("loading {} (run train-sae --layer {layer} first)", path.display()))
    }

    fn stats(&self, layer: usize) -> Result<Option<FeatureStats>> {
        let path = self.art.stats(layer);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(load_feature_stats(&path)?))
    }

    fn corpora(&self) -> Result<Corpora> {
        Ok(Corpora::load(&self.config)?)
    }

    /// Every SAE in the output directory, restricted to `layers` if given.
    fn local_backend(&self, layers: Option<&[usize]>) -> Result<LocalBackend> {
        let mut available = self.art.sae_layers()?;
        if let Some(wanted) = layers {
            for l in wanted {
                if !available.contains(l) {
                    bail!("no SAE for layer {l} in {}", self.art.dir.display());
                }
            }
            available = wanted.to_vec();
        }
        if available.is_empty() {
            bail!("no SAEs in {} (run train-sae first)", self.art.dir.display());
        }
        let mut saes = Vec::new();
        for l in available {
            saes.push((self.sae(l)?, self.stats(l)?));
        }
        Ok(LocalBackend::new(self.checkpoint()?, saes)?)
    }

    fn remote_backend(&self, layers: Vec<usize>) -> Result<RemoteBackend> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|e| !e.is_empty())
            .with_context(|| format!("--remote needs {ENDPOINT_ENV}"))?;
        let caps = BackendCapabilities {
            layers,
            n_features: self.config.sae_features,
            max_new_tokens: self.config.max_new_tokens.max(self.config.task_max_new_tokens),
        };
        Ok(RemoteBackend::from_env(endpoint, caps))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = PipelineConfig::default();
    if let Some(path) = &cli.config {
        config.apply(&KeyValues::load(path)?)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = Ctx {
        config,
        art: Artifacts::new(&cli.out),
        json: cli.json,
    };
    std::fs::create_dir_all(&ctx.art.dir).with_context(|| format!("creating {}", ctx.art.dir.display()))?;
    match cli.command {
        Command::TrainLm { steps } => train_lm_cmd(ctx, steps),
        Command::CaptureActs { layer } => capture_cmd(&ctx, layer),
        Command::TrainSae { layer, activations } => train_sae_cmd(&ctx, layer, activations),
        Command::Calibrate { layer } => calibrate_cmd(&ctx, layer),
        Command::Steer(args) => steer_cmd(&ctx, args),
        Command::Sweep(args) => sweep_cmd(ctx, args),
        Command::EvalMem {
            temperature,
            max_new_tokens,
        } => eval_mem_cmd(&ctx, temperature, max_new_tokens),
        Command::EvalPpl { file } => eval_ppl_cmd(&ctx, file),
        Command::EvalTasks { per_kind } => eval_tasks_cmd(ctx, per_kind),
        Command::Report { runs } => report_cmd(&ctx, runs),
        Command::FeatureTop(args) => feature_top_cmd(&ctx, &args).map(|_| ()),
        Command::LabelFeature {
            feature,
            endpoint,
            offline,
        } => label_cmd(&ctx, &feature, endpoint, offline),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn train_lm_cmd(mut ctx: Ctx, steps: Option<usize>) -> Result<()> {
    if let Some(s) = steps {
        ctx.config.train.steps = s;
    }
    let corpora = ctx.corpora()?;
    let (ckpt, report) = train_lm(&ctx.config, &corpora)?;
    let path = ctx.art.lm();
    save_checkpoint(&ckpt, &path)?;
    let final_loss = report.smoothed(50);
    ctx.emit(
        json!({
            "command": "train-lm",
            "checkpoint": path_str(&path),
            "steps": ckpt.meta.steps,
            "final_loss": final_loss,
            "elapsed_secs": report.elapsed_secs,
        }),
        || {
            format!(
                "trained {} steps in {:.0}s, final loss {:.4}; wrote {}",
                ckpt.meta.steps,
                report.elapsed_secs,
                final_loss.unwrap_or(f32::NAN),
                path.display()
            )
        },
    );
    Ok(())
}

fn capture_cmd(ctx: &Ctx, layer: usize) -> Result<()> {
    let ckpt = ctx.checkpoint()?;
    let texts = ctx.corpora()?.calibration_texts(&ctx.config)?;
    let set = capture_activations(&ckpt, steerlab::lm::HookSite::new(layer), &texts)?;
    let path = ctx.art.activations(layer);
    save_activations(&set, &path)?;
    ctx.emit(
        json!({
            "command": "capture-acts",
            "path": path_str(&path),
            "layer": layer,
            "positions": set.acts.rows(),
            "d_model": set.acts.cols(),
        }),
        || format!("captured {} positions at layer {layer}; wrote {}", set.acts.rows(), path.display()),
    );
    Ok(())
}

fn train_sae_cmd(ctx: &Ctx, layer: usize, activations: Option<PathBuf>) -> Result<()> {
    let acts_path = activations.unwrap_or_else(|| ctx.art.activations(layer));
    let set = load_activations(&acts_path)
        .with_context(|| format!("loading {} (run capture-acts first)", acts_path.display()))?;
    if set.site.layer != layer {
        bail!("{} holds layer {} activations, not layer {layer}", acts_path.display(), set.site.layer);
    }
    let sae_config = ctx.config.sae_config(set.acts.cols(), layer);
    let (sae, report) = train_sae(&sae_config, set.site, &set.acts, &ctx.config.sae)?;
    let path = ctx.art.sae(layer);
    save_sae(&sae, &path)?;
    let last = report.epochs.last().copied();
    let variance = total_variance(&set.acts);
    ctx.emit(
        json!({
            "command": "train-sae",
            "path": path_str(&path),
            "layer": layer,
            "n_features": sae.n_features(),
            "l1_coefficient": sae_config.l1_coefficient,
            "epochs": report.epochs,
            "data_variance": variance,
        }),
        || match last {
            Some(e) => format!(
                "trained SAE ({} features) at layer {layer}: mse {:.4} ({:.1}% of variance), L0 {:.1}; wrote {}",
                sae.n_features(),
                e.mse,
                100.0 * e.mse / variance,
                e.l0,
                path.display()
            ),
            None => format!("wrote {}", path.display()),
        },
    );
    Ok(())
}

fn calibrate_cmd(ctx: &Ctx, layer: usize) -> Result<()> {
    let ckpt = ctx.checkpoint()?;
    let sae = ctx.sae(layer)?;
    let texts = ctx.corpora()?.calibration_texts(&ctx.config)?;
    let stats = calibrate_alpha(&sae, &ckpt, &texts)?;
    let path = ctx.art.stats(layer);
    save_feature_stats(&stats, &path)?;
    let live: Vec<f64> = stats
        .features
        .iter()
        .filter(|f| !f.dead)
        .map(|f| f64::from(f.alpha))
        .collect();
    let median = Stat::of(&live).map(|s| s.median);
    ctx.emit(
        json!({
            "command": "calibrate",
            "path": path_str(&path),
            "layer": layer,
            "positions": stats.positions,
            "corpus_id": stats.corpus_id,
            "dead_features": stats.dead_count(),
            "alpha_median": median,
        }),
        || {
            format!(
                "calibrated {} features over {} positions ({} dead); wrote {}",
                stats.features.len(),
                stats.positions,
                stats.dead_count(),
                path.display()
            )
        },
    );
    Ok(())
}

fn policy(p: Option<Policy>, default: PositionPolicy) -> PositionPolicy {
    match p {
        Some(Policy::AllPositions) => PositionPolicy::AllPositions,
        Some(Policy::GeneratedOnly) => PositionPolicy::GeneratedOnly,
        None => default,
    }
}

fn steer_cmd(ctx: &Ctx, args: SteerArgs) -> Result<()> {
    let prompt = match (&args.prompt, &args.prompt_file) {
        (Some(p), _) => p.clone(),
        (None, Some(path)) => load_text(path)?,
        (None, None) => unreachable!("clap requires one prompt source"),
    };
    let spec = SteeringSpec {
        alpha: args.alpha.map_or(AlphaSource::Calibrated, AlphaSource::Override),
        policy: policy(args.policy, ctx.config.policy),
        ..SteeringSpec::new(args.layer, args.feature, args.beta)
    };
    spec.validate()?;
    let sampling = SamplingParams {
        max_new_tokens: args.max_new_tokens.unwrap_or(ctx.config.max_new_tokens),
        temperature: args.temperature.unwrap_or(ctx.config.temperature),
        seed: args.sample_seed.unwrap_or(ctx.config.seed),
    };
    let backend: Box<dyn SteeringBackend> = if args.remote {
        Box::new(ctx.remote_backend(vec![args.layer])?)
    } else {
        Box::new(ctx.local_backend(Some(&[args.layer]))?)
    };
    let out = backend.paired_generate(&with_separator(&prompt), &spec, &sampling)?;
    ctx.emit(
        json!({
            "command": "steer",
            "spec": spec,
            "sampling": sampling,
            "alpha": out.alpha,
            "dead_feature": out.dead_feature,
            "paired": out.paired,
            "steered_text": out.steered_text,
            "default_text": out.default_text,
        }),
        || {
            let mut s = String::new();
            if out.dead_feature {
                s.push_str("note: feature never fired during calibration; alpha is the fallback\n");
            }
            s.push_str(&format!("--- steered ---\n{}\n--- default ---\n{}", out.steered_text, out.default_text));
            s
        },
    );
    Ok(())
}

fn sweep_cmd(mut ctx: Ctx, args: SweepArgs) -> Result<()> {
    if let Some(n) = args.n {
        ctx.config.sweep_runs = n;
    }
    if let Some(j) = args.jobs {
        ctx.config.jobs = j;
    }
    let scorer = ctx.checkpoint()?;
    let layers = match args.layers.clone() {
        Some(l) => l,
        None if args.remote => ctx.config.layers(&scorer.config),
        None => ctx.art.sae_layers()?,
    };
    let backend: Box<dyn SteeringBackend> = if args.remote {
        Box::new(ctx.remote_backend(layers.clone())?)
    } else {
        Box::new(ctx.local_backend(Some(&layers))?)
    };
    let n_features = backend.capabilities().n_features;
    let mut sweep = ctx.config.sweep_config(layers, n_features);
    sweep.beta_override = args.beta;
    let bench = ctx.corpora()?.benchmarks(&ctx.config)?;
    let path = args.runs.unwrap_or_else(|| ctx.art.runs());
    let summary = run_sweep(backend.as_ref(), &scorer, &bench, &sweep, &path)?;
    ctx.emit(
        json!({
            "command": "sweep",
            "path": path_str(&summary.path),
            "n_runs": summary.n_runs,
            "resumed": summary.resumed,
            "executed": summary.executed,
            "complete": summary.complete,
            "failed": summary.failed,
        }),
        || {
            format!(
                "{} runs in {} ({} resumed, {} executed, {} failed)",
                summary.n_runs,
                summary.path.display(),
                summary.resumed,
                summary.executed,
                summary.failed
            )
        },
    );
    Ok(())
}

fn eval_mem_cmd(ctx: &Ctx, temperature: f32, max_new_tokens: Option<usize>) -> Result<()> {
    let ckpt = ctx.checkpoint()?;
    let corpora = ctx.corpora()?;
    let sampling = SamplingParams {
        max_new_tokens: max_new_tokens.unwrap_or(ctx.config.max_new_tokens),
        temperature,
        seed: ctx.config.seed,
    };
    let eval = eval_memorization(&ckpt, &corpora.memorization, &sampling, ctx.config.anlcs_unit)?;
    ctx.emit(
        json!({
            "command": "eval-mem",
            "anlcs": eval.anlcs,
            "items": corpora.memorization.len(),
            "temperature": temperature,
        }),
        || format!("ANLCS {:.4} over {} items", eval.anlcs, corpora.memorization.len()),
    );
    Ok(())
}

fn eval_ppl_cmd(ctx: &Ctx, file: Option<PathBuf>) -> Result<()> {
    let ckpt = ctx.checkpoint()?;
    let texts: Vec<String> = match file {
        Some(path) => load_text(&path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(String::from)
            .collect(),
        None => ctx.corpora()?.fluency.into_iter().map(|p| p.reference).collect(),
    };
    if texts.is_empty() {
        bail!("no texts to score");
    }
    let ppl = eval_perplexity(&ckpt, &texts)?;
    ctx.emit(
        json!({ "command": "eval-ppl", "perplexity": ppl, "texts": texts.len() }),
        || format!("perplexity {ppl:.4} over {} texts", texts.len()),
    );
    Ok(())
}

fn eval_tasks_cmd(mut ctx: Ctx, per_kind: Option<usize>) -> Result<()> {
    if let Some(n) = per_kind {
        ctx.config.tasks_per_kind = n;
    }
    let ckpt = ctx.checkpoint()?;
    let items = ctx.corpora()?.tasks(&ctx.config)?;
    let acc = eval_tasks(&ckpt, &items, ctx.config.task_max_new_tokens)?;
    ctx.emit(
        json!({ "command": "eval-tasks", "accuracy": acc, "items": items.len() }),
        || {
            acc.iter()
                .map(|(k, v)| format!("{k}: {v:.3}"))
                .collect::<Vec<_>>()
                .join("\n")
        },
    );
    Ok(())
}

fn report_cmd(ctx: &Ctx, runs: Option<PathBuf>) -> Result<()> {
    let path = runs.unwrap_or_else(|| ctx.art.runs());
    let (records, _) = read_records(&path)?;
    if records.is_empty() {
        bail!("no records in {}", path.display());
    }
    let dir = ctx.art.report_dir();
    let files = emit_report(&records, &dir)?;
    let ratios = layer_ratio_means(&files.aggregate);
    let later_not_worse = ratios
        .values()
        .collect::<Vec<_>>()
        .windows(2)
        .all(|w| w[1] <= w[0]);
    ctx.emit(
        json!({
            "command": "report",
            "csv": files.csv.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
            "svg": files.svg.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
            "cells": files.aggregate.cells,
            "failed_runs": files.aggregate.failed_runs,
            "layer_ppl_ratio_means": ratios,
            "later_layers_not_worse": later_not_worse,
        }),
        || {
            let mut s = format!("wrote {} files to {}\n", files.csv.len() + files.svg.len(), dir.display());
            for c in &files.aggregate.cells {
                if c.layer.is_some() {
                    continue;
                }
                let bin = c.bin.map_or("all", |b| b.label());
                let fmt = |v: Option<Stat>| v.map_or("-".to_string(), |v| format!("{:.3}", v.mean));
                s.push_str(&format!(
                    "|beta| {bin:>9}: runs {:>3}  ANLCS steered {} default {}  ppl ratio {}  task {}\n",
                    c.runs,
                    fmt(c.anlcs_steered),
                    fmt(c.anlcs_default),
                    fmt(c.ppl_ratio),
                    fmt(c.task_steered)
                ));
            }
            for (l, r) in &ratios {
                s.push_str(&format!("layer {l}: mean ppl ratio {r:.3}\n"));
            }
            s.trim_end().to_string()
        },
    );
    Ok(())
}

fn build_dossier(ctx: &Ctx, args: &FeatureArgs) -> Result<FeatureDossier> {
    let ckpt = ctx.checkpoint()?;
    let sae = ctx.sae(args.layer)?;
    let stats = ctx
        .stats(args.layer)?
        .with_context(|| format!("no calibration for layer {} (run calibrate first)", args.layer))?;
    let corpora = ctx.corpora()?;
    let texts = corpora.calibration_texts(&ctx.config)?;
    let mut dossier = feature_top_examples(&sae, &stats, &ckpt, &texts, args.feature, args.k)?;
    if let Some(beta) = args.footprint_beta {
        let backend = LocalBackend::new(ckpt, vec![(sae, Some(stats))])?;
        let probes: Vec<String> = corpora
            .fluency
            .iter()
            .map(|p| with_separator(&render_paraphrase_prompt(p)))
            .collect();
        let spec = SteeringSpec::new(args.layer, args.feature, beta);
        let sampling = SamplingParams {
            max_new_tokens: ctx.config.max_new_tokens,
            temperature: ctx.config.temperature,
            seed: ctx.config.seed,
        };
        dossier.footprint_proxy = Some(footprint_score(&backend, &spec, &probes, &sampling)?);
    }
    Ok(dossier)
}

fn dossier_path(ctx: &Ctx, d: &FeatureDossier) -> PathBuf {
    ctx.art
        .dir
        .join(format!("dossier_layer{}_feature{}.json", d.layer, d.feature_id))
}

fn print_dossier(ctx: &Ctx, d: &FeatureDossier, path: &Path, command: &str) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(d)?).with_context(|| format!("writing {}", path.display()))?;
    let mut value = serde_json::to_value(d)?;
    value["command"] = json!(command);
    value["path"] = json!(path_str(path));
    ctx.emit(value, || {
        let mut s = format!(
            "feature {} at layer {}: alpha {:.4}, frequency {:.5}{}\n",
            d.feature_id,
            d.layer,
            d.alpha,
            d.frequency,
            if d.dead { " (dead)" } else { "" }
        );
        if let Some(l) = &d.label {
            s.push_str(&format!("label: {l}\n"));
        }
        if let Some(f) = d.footprint_proxy {
            s.push_str(&format!("footprint proxy (unigram divergence): {f:.4}\n"));
        }
        for sn in &d.snippets {
            s.push_str(&format!("{:>9.4}  {:?}\n", sn.activation, sn.window));
        }
        s.trim_end().to_string()
    });
    Ok(())
}

fn feature_top_cmd(ctx: &Ctx, args: &FeatureArgs) -> Result<FeatureDossier> {
    let d = build_dossier(ctx, args)?;
    print_dossier(ctx, &d, &dossier_path(ctx, &d), "feature-top")?;
    Ok(d)
}

fn label_cmd(ctx: &Ctx, args: &FeatureArgs, endpoint: Option<String>, offline: bool) -> Result<()> {
    let mut d = build_dossier(ctx, args)?;
    let endpoint = endpoint.or_else(|| std::env::var(ENDPOINT_ENV).ok().filter(|e| !e.is_empty()));
    let client = match endpoint {
        Some(endpoint) if !offline => LabelClient::Remote {
            endpoint,
            token: std::env::var(steerlab::steering::TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            timeout: Duration::from_secs(60),
        },
        _ => LabelClient::Offline,
    };
    d.label = Some(label_feature(&d, &client)?);
    print_dossier(ctx, &d, &dossier_path(ctx, &d), "label-feature")
}
