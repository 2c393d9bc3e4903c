// SPDX-License-Identifier: MIT OR Apache-2.0

//! Randomized steering sweeps: sample (layer, beta, feature) per run, score
//! the steered arm against its unsteered control on every benchmark, and
//! append one record per run to a JSON Lines file.

mod aggregate;
mod record;
mod sweep;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FluencyProbe, MemorizationItem, TaskItem};
use crate::error::{Error, Result};
use crate::lm::PositionPolicy;
use crate::metrics::AnlcsUnit;
use crate::steering::{SteeringSpec, BETA_LIMIT};

pub use aggregate::{aggregate, Aggregate, BetaBin, CellSummary, Stat};
pub use record::{read_records, text_digest, RunRecord, RunStatus, RECORD_VERSION};
pub use sweep::{run_one, run_sweep, SweepSummary};

/// Which benchmarks a run evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BenchmarkToggles {
    pub memorization: bool,
    pub fluency: bool,
    pub tasks: bool,
}

impl Default for BenchmarkToggles {
    fn default() -> Self {
        BenchmarkToggles {
            memorization: true,
            fluency: true,
            tasks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n_runs: usize,
    pub layers: Vec<usize>,
    pub beta_min: f32,
    pub beta_max: f32,
    pub n_features: usize,
    pub temperature: f32,
    pub master_seed: u64,
    pub max_new_tokens: usize,
    /// Token budget for capability answers.
    pub task_max_new_tokens: usize,
    pub benchmarks: BenchmarkToggles,
    /// Memorization items per run, drawn without replacement from the
    /// run seed; `None` uses the whole corpus.
    pub mem_items_per_run: Option<usize>,
    /// Fluency probes per run; `None` uses all probes.
    pub fluency_probes_per_run: Option<usize>,
    pub anlcs_unit: AnlcsUnit,
    pub policy: PositionPolicy,
    /// Replaces every sampled beta (used for identity checks).
    pub beta_override: Option<f32>,
    /// Worker threads.
    pub jobs: usize,
}

impl SweepConfig {
    pub fn new(layers: Vec<usize>, n_features: usize) -> Self {
        SweepConfig {
            n_runs: 100,
            layers,
            beta_min: -BETA_LIMIT,
            beta_max: BETA_LIMIT,
            n_features,
            temperature: 0.5,
            master_seed: 0,
            max_new_tokens: 160,
            task_max_new_tokens: 8,
            benchmarks: BenchmarkToggles::default(),
            mem_items_per_run: None,
            fluency_probes_per_run: None,
            anlcs_unit: AnlcsUnit::Char,
            policy: PositionPolicy::AllPositions,
            beta_override: None,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("layer set is empty".into()));
        }
        if self.n_features == 0 {
            return Err(Error::Config("feature domain is empty".into()));
        }
        let ok = |b: f32| b.is_finite() && b.abs() <= BETA_LIMIT;
        if !(ok(self.beta_min) && ok(self.beta_max) && self.beta_min < self.beta_max) {
            return Err(Error::Config(format!(
                "beta range [{}, {}] must be non-degenerate within [-{BETA_LIMIT}, {BETA_LIMIT}]",
                self.beta_min, self.beta_max
            )));
        }
        if let Some(b) = self.beta_override {
            if !ok(b) {
                return Err(Error::Config(format!("beta override {b} out of range")));
            }
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} invalid", self.temperature)));
        }
        if self.max_new_tokens == 0 || self.task_max_new_tokens == 0 {
            return Err(Error::Config("token budgets must be positive".into()));
        }
        if self.mem_items_per_run == Some(0) || self.fluency_probes_per_run == Some(0) {
            return Err(Error::Config("per-run subset sizes must be positive".into()));
        }
        if !(self.benchmarks.memorization || self.benchmarks.fluency || self.benchmarks.tasks) {
            return Err(Error::Config("every benchmark is disabled".into()));
        }
        Ok(())
    }

    /// Digest of the settings that determine record contents, stored in
    /// each record so a resume cannot mix incompatible sweeps.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.n_runs = 0;
        c.jobs = 0;
        text_digest(&[serde_json::to_string(&c).expect("plain struct")])
    }
}

/// Evaluation data shared by every run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Benchmarks {
    pub memorization: Vec<MemorizationItem>,
    pub probes: Vec<FluencyProbe>,
    pub tasks: Vec<TaskItem>,
}

/// SplitMix64 finalizer; spreads nearby seeds over the whole range.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for everything sampled inside run `index`.
pub fn run_seed(master_seed: u64, index: usize) -> u64 {
    mix_seed(mix_seed(master_seed, index as u64), 1)
}

/// The steering configuration of run `index`: layer uniform over the layer
/// set, beta uniform over the range, feature uniform over `[0, F)`.
pub fn sample_params(config: &SweepConfig, index: usize) -> Result<SteeringSpec> {
    config.validate()?;
    if index >= config.n_runs {
        return Err(Error::Range {
            what: "run index",
            value: index,
            bound: config.n_runs,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.master_seed, index as u64));
    let layer = config.layers[rng.random_range(0..config.layers.len())];
    let beta = rng.random_range(config.beta_min..=config.beta_max);
    let feature_id = rng.random_range(0..config.n_features);
    Ok(SteeringSpec {
        policy: config.policy,
        ..SteeringSpec::new(layer, feature_id, config.beta_override.unwrap_or(beta))
    })
}

/// First `k` indices of a seeded permutation of `0..n` (all of them when
/// `k` is `None` or at least `n`), in ascending order.
pub(crate) fn subset(n: usize, k: Option<usize>, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(k) = k.filter(|k| *k < n) {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> SweepConfig {
        SweepConfig {
            n_runs: 10_000,
            master_seed: 42,
            ..SweepConfig::new(vec![1, 3, 5], 1024)
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let c = config();
        for i in [0, 1, 17, 9999] {
            let a = sample_params(&c, i).unwrap();
            assert_eq!(a, sample_params(&c, i).unwrap());
            assert!(a.beta.abs() <= 100.0);
            assert!(a.feature_id < 1024);
            assert!(c.layers.contains(&a.layer));
        }
        assert!(sample_params(&c, 10_000).is_err());
        let other = SweepConfig {
            master_seed: 43,
            ..c.clone()
        };
        assert_ne!(sample_params(&c, 0).unwrap(), sample_params(&other, 0).unwrap());
    }

    #[test]
    fn layer_frequencies_within_binomial_bounds() {
        let c = config();
        let mut counts = [0usize; 3];
        let mut beta_neg = 0usize;
        for i in 0..c.n_runs {
            let s = sample_params(&c, i).unwrap();
            counts[c.layers.iter().position(|l| *l == s.layer).unwrap()] += 1;
            beta_neg += usize::from(s.beta < 0.0);
        }
        let n = c.n_runs as f64;
        let p = 1.0 / 3.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for k in counts {
            assert!((k as f64 - n * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
        let sigma = (n * 0.25).sqrt();
        assert!((beta_neg as f64 - n / 2.0).abs() <= 3.0 * sigma);
    }

    #[test]
    fn override_forces_beta() {
        let c = SweepConfig {
            beta_override: Some(0.0),
            ..config()
        };
        for i in 0..50 {
            assert_eq!(sample_params(&c, i).unwrap().beta, 0.0);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = config();
        c.beta_min = 5.0;
        c.beta_max = 5.0;
        assert!(c.validate().is_err());
        let mut c = config();
        c.n_runs = 0;
        assert!(c.validate().is_err());
        let mut c = config();
        c.beta_max = 150.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn subsets() {
        assert_eq!(subset(5, None, 1), vec![0, 1, 2, 3, 4]);
        assert_eq!(subset(5, Some(9), 1), vec![0, 1, 2, 3, 4]);
        let s = subset(40, Some(8), 7);
        assert_eq!(s.len(), 8);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, subset(40, Some(8), 7));
    }

    #[test]
    fn fingerprint_ignores_scheduling() {
        let a = config();
        let b = SweepConfig {
            jobs: 4,
            n_runs: 3,
            ..a.clone()
        };
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = SweepConfig {
            temperature: 0.7,
            ..a.clone()
        };
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
