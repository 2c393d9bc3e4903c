// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, Tape, Tensor};

use super::checkpoint::{LmCheckpoint, TrainingMeta};
use super::{encode, graph, LmConfig, BOS, EOT};

/// Texts drawn with a shared sampling weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextGroup {
    pub name: String,
    pub weight: f64,
    pub texts: Vec<String>,
}

/// Weighted mixture of text groups. Each text is trained on as
/// `[BOS] + bytes + [EOT]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub groups: Vec<TextGroup>,
}

impl TrainingSet {
    pub fn single(texts: Vec<String>) -> Self {
        TrainingSet {
            groups: vec![TextGroup {
                name: "all".into(),
                weight: 1.0,
                texts,
            }],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak after cosine decay.
    pub min_lr_fraction: f32,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
    pub seed: u64,
    /// Log the smoothed loss every this many steps (0 = never).
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 1500,
            batch_size: 8,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            warmup_steps: 100,
            min_lr_fraction: 0.1,
            grad_clip: 1.0,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainOptions {
    /// Learning-rate multiplier at `step` (0-based): linear warmup, then
    /// cosine decay to `min_lr_fraction`.
    pub fn lr_scale(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            return (step + 1) as f32 / self.warmup_steps as f32;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f32 / span as f32).min(1.0);
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
        self.min_lr_fraction + (1.0 - self.min_lr_fraction) * cos
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Token-weighted mean loss of every step's batch.
    pub losses: Vec<f32>,
    pub elapsed_secs: f64,
}

impl TrainingReport {
    /// Mean loss over the trailing `window` steps.
    pub fn smoothed(&self, window: usize) -> Option<f32> {
        if self.losses.is_empty() {
            return None;
        }
        let tail = &self.losses[self.losses.len().saturating_sub(window.max(1))..];
        Some(tail.iter().sum::<f32>() / tail.len() as f32)
    }
}

struct Sampler {
    groups: Vec<(f64, Vec<Vec<usize>>)>,
    cursors: Vec<usize>,
    orders: Vec<Vec<usize>>,
    total_weight: f64,
}

impl Sampler {
    fn new(set: &TrainingSet, cfg: &LmConfig) -> Result<Self> {
        let mut groups = Vec::new();
        for g in &set.groups {
            if g.texts.is_empty() || g.weight <= 0.0 {
                continue;
            }
            if !g.weight.is_finite() {
                return Err(Error::Config(format!("group {} has weight {}", g.name, g.weight)));
            }
            let mut docs = Vec::with_capacity(g.texts.len());
            for text in &g.texts {
                let mut doc = vec![BOS];
                doc.extend(encode(text));
                doc.push(EOT);
                if doc.len() > cfg.context_length + 1 {
                    return Err(Error::contract(format!(
                        "text of {} bytes in group {} does not fit context length {}",
                        text.len(),
                        g.name,
                        cfg.context_length
                    )));
                }
                if let Some(&bad) = doc.iter().find(|&&t| t >= cfg.vocab_size) {
                    return Err(Error::Range {
                        what: "token id",
                        value: bad,
                        bound: cfg.vocab_size,
                    });
                }
                docs.push(doc);
            }
            groups.push((g.weight, docs));
        }
        if groups.is_empty() {
            return Err(Error::contract("training set has no texts"));
        }
        let total_weight = groups.iter().map(|g| g.0).sum();
        let n = groups.len();
        Ok(Sampler {
            cursors: vec![usize::MAX; n],
            orders: vec![Vec::new(); n],
            groups,
            total_weight,
        })
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> &[usize] {
        let mut u = rng.random::<f64>() * self.total_weight;
        let mut gi = self.groups.len() - 1;
        for (i, g) in self.groups.iter().enumerate() {
            if u < g.0 {
                gi = i;
                break;
            }
            u -= g.0;
        }
        let len = self.groups[gi].1.len();
        if self.cursors[gi] >= len {
            // Fresh shuffled pass through the group.
            let mut order: Vec<usize> = (0..len).collect();
            order.shuffle(rng);
            self.orders[gi] = order;
            self.cursors[gi] = 0;
        }
        let doc = self.orders[gi][self.cursors[gi]];
        self.cursors[gi] += 1;
        &self.groups[gi].1[doc]
    }
}

/// Trains a freshly initialized model on `set` and returns the checkpoint.
/// Deterministic given `config.seed` and `options.seed`.
pub fn train_memorize(
    config: &LmConfig,
    set: &TrainingSet,
    options: &TrainOptions,
) -> Result<(LmCheckpoint, TrainingReport)> {
    let ckpt = LmCheckpoint::init(config.clone())?;
    continue_training(ckpt, set, options)
}

/// Further trains an existing checkpoint.
pub fn continue_training(
    mut ckpt: LmCheckpoint,
    set: &TrainingSet,
    options: &TrainOptions,
) -> Result<(LmCheckpoint, TrainingReport)> {
    let cfg = ckpt.config.clone();
    let mut sampler = Sampler::new(set, &cfg)?;
    if options.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut states: Vec<AdamState> = ckpt
        .weights
        .iter()
        .into_iter()
        .map(|t| AdamState::new(t.shape(), options.adam))
        .collect();
    let mut report = TrainingReport::default();

    for step in 0..options.steps {
        let batch: Vec<Vec<usize>> = (0..options.batch_size)
            .map(|_| sampler.next(&mut rng).to_vec())
            .collect();
        let total_targets: usize = batch.iter().map(|d| d.len() - 1).sum();
        let mut grads: Vec<Tensor> = ckpt
            .weights
            .iter()
            .into_iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut batch_loss = 0.0f64;
        for doc in &batch {
            let mut tape = Tape::<f32>::new();
            let p = graph::register(&mut tape, &ckpt.weights);
            let loss = graph::sequence_loss(&mut tape, &cfg, &p, doc).map_err(|e| match e {
                Error::NonFinite(_) => Error::Training {
                    step,
                    loss: f32::NAN,
                },
                other => other,
            })?;
            let share = (doc.len() - 1) as f32 / total_targets as f32;
            let loss = tape.scale(loss, share)?;
            batch_loss += f64::from(tape.value(loss).item());
            let mut g = tape.backward(loss)?;
            for (acc, var) in grads.iter_mut().zip(p.iter()) {
                let gv = g.take(*var);
                for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                    *a += *b;
                }
            }
        }
        let loss = batch_loss as f32;
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        let norm: f32 = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f32>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Training { step, loss: norm });
        }
        if options.grad_clip > 0.0 && norm > options.grad_clip {
            let s = options.grad_clip / norm;
            grads
                .iter_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        let lr_scale = options.lr_scale(step);
        for ((param, grad), state) in ckpt.weights.iter_mut().into_iter().zip(&grads).zip(&mut states)
        {
            adam_step(param, grad, state, lr_scale)?;
        }
        report.losses.push(loss);
        if options.log_every > 0 && (step + 1) % options.log_every == 0 {
            log::info!(
                "step {}/{} loss {:.4} (smoothed {:.4}) lr x{:.3}",
                step + 1,
                options.steps,
                loss,
                report.smoothed(options.log_every).unwrap_or(loss),
                lr_scale
            );
        }
    }
    report.elapsed_secs = started.elapsed().as_secs_f64();
    ckpt.meta = TrainingMeta {
        steps: ckpt.meta.steps + options.steps as u64,
        final_loss: report.smoothed(20).unwrap_or(ckpt.meta.final_loss),
    };
    Ok((ckpt, report))
}
