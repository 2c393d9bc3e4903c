// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end checks on a tiny untrained model: calibration, dashboards,
//! the local backend and sweep bookkeeping.

use steerlab::corpus::{bundled_facts, bundled_fluency, bundled_memorization, capability_items};
use steerlab::dashboard::feature_top_examples;
use steerlab::harness::{read_records, run_sweep, Benchmarks, RunRecord, SweepConfig};
use steerlab::lm::{decode, encode_with_bos, EOT, forward, generate, HookSite, Intervention, LmCheckpoint, LmConfig, SamplingParams};
use steerlab::numerics::Tensor;
use steerlab::sae::{calibrate_alpha, capture_activations, train_sae, FeatureStats, SaeConfig, SaeModel, SaeTrainOptions};
use steerlab::steering::{AlphaSource, LocalBackend, SteeringBackend, SteeringSpec};

const LAYER: usize = 1;

fn tiny_lm() -> LmCheckpoint {
    LmCheckpoint::init(LmConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_mlp: 32,
        vocab_size: 256,
        context_length: 256,
        seed: 3,
    })
    .unwrap()
}

fn texts() -> Vec<String> {
    [
        "the quick brown fox",
        "jumps over the lazy dog",
        "A: true and false",
        "Q: Is a robin a bird?",
        "",
        "0123456789",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn fixture() -> (LmCheckpoint, SaeModel, FeatureStats) {
    let ckpt = tiny_lm();
    let site = HookSite::new(LAYER);
    let acts = capture_activations(&ckpt, site, &texts()).unwrap();
    let config = SaeConfig {
        d_in: 16,
        n_features: 24,
        l1_coefficient: 0.05,
        seed: 1,
    };
    let options = SaeTrainOptions {
        epochs: 20,
        batch_size: 32,
        ..SaeTrainOptions::default()
    };
    let (sae, _) = train_sae(&config, site, &acts.acts, &options).unwrap();
    let stats = calibrate_alpha(&sae, &ckpt, &texts()).unwrap();
    (ckpt, sae, stats)
}

/// Feature activations computed in f64 straight from the weights, from a
/// full forward pass rather than the incremental session.
fn oracle_codes(ckpt: &LmCheckpoint, sae: &SaeModel, text: &str) -> Vec<Vec<f64>> {
    let tokens = encode_with_bos(text);
    let out = forward(ckpt, &tokens, None, Some(HookSite::new(LAYER))).unwrap();
    let acts = out.captured.unwrap();
    let (f, d) = (sae.n_features(), sae.d_in());
    (1..acts.rows())
        .map(|p| {
            let a = acts.row(p);
            (0..f)
                .map(|i| {
                    let w = &sae.w_enc.data()[i * d..(i + 1) * d];
                    let mut z = f64::from(sae.b_enc.data()[i]);
                    for k in 0..d {
                        z += f64::from(w[k]) * (f64::from(a[k]) - f64::from(sae.b_dec.data()[k]));
                    }
                    z.max(0.0)
                })
                .collect()
        })
        .collect()
}

#[test]
fn calibration_matches_brute_force() {
    let (ckpt, sae, stats) = fixture();
    let f = sae.n_features();
    let mut max = vec![0.0f64; f];
    let mut count = vec![0usize; f];
    let mut near_zero = vec![0usize; f];
    let mut positions = 0;
    for t in texts() {
        for row in oracle_codes(&ckpt, &sae, &t) {
            positions += 1;
            for i in 0..f {
                max[i] = max[i].max(row[i]);
                count[i] += usize::from(row[i] > 0.0);
                near_zero[i] += usize::from(row[i] > 0.0 && row[i] < 1e-4);
            }
        }
    }
    assert_eq!(stats.positions, positions);
    assert!(stats.dead_count() < f, "every feature dead");
    for (i, s) in stats.features.iter().enumerate() {
        assert_eq!(s.feature_id, i);
        let diff = count[i].abs_diff((s.frequency * positions as f64).round() as usize);
        assert!(diff <= near_zero[i], "feature {i} frequency");
        if s.dead {
            assert!(max[i] < 1e-4);
            assert_eq!(s.alpha, 1.0);
        } else {
            assert!((f64::from(s.alpha) - max[i]).abs() < 1e-4 * max[i].max(1.0), "feature {i}");
        }
    }
}

#[test]
fn top_examples_match_brute_force() {
    let (ckpt, sae, stats) = fixture();
    let corpus = texts();
    let feature = stats.features.iter().position(|s| !s.dead).unwrap();
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (t, text) in corpus.iter().enumerate() {
        for (p, row) in oracle_codes(&ckpt, &sae, text).into_iter().enumerate() {
            all.push((row[feature], t, p));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let d = feature_top_examples(&sae, &stats, &ckpt, &corpus, feature, 5).unwrap();
    assert_eq!(d.snippets.len(), 5);
    for (s, o) in d.snippets.iter().zip(&all) {
        assert!((f64::from(s.activation) - o.0).abs() < 1e-4);
        let byte = corpus[s.text_index].as_bytes()[s.position];
        assert!(s.window.as_bytes().contains(&byte));
    }
    for w in d.snippets.windows(2) {
        assert!(w[0].activation >= w[1].activation);
    }

    if let Some(dead) = stats.features.iter().position(|s| s.dead) {
        let d = feature_top_examples(&sae, &stats, &ckpt, &corpus, dead, 5).unwrap();
        assert!(d.snippets.is_empty());
    }
}

fn argmax_margin(row: &[f32]) -> (usize, f32) {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    (idx[0], row[idx[0]] - row[idx[1]])
}

#[test]
fn greedy_steering_follows_manual_delta() {
    let (ckpt, sae, stats) = fixture();
    let feature = stats.features.iter().position(|s| !s.dead).unwrap();
    let alpha = f64::from(stats.features[feature].alpha);
    let beta = 40.0f32;
    let backend = LocalBackend::new(ckpt.clone(), vec![(sae.clone(), Some(stats))]).unwrap();
    let sampling = SamplingParams {
        max_new_tokens: 10,
        temperature: 0.0,
        seed: 0,
    };
    let prompt = "the lazy";
    let spec = SteeringSpec::new(LAYER, feature, beta);
    let out = backend.paired_generate(prompt, &spec, &sampling).unwrap();
    assert!(out.paired);
    assert_eq!(out.alpha.map(f64::from), Some(alpha));
    assert_eq!(out.default_text, generate(&ckpt, prompt, &sampling, None).unwrap());

    // Delta from the raw decoder row in f64.
    let d = sae.d_in();
    let row = &sae.w_dec.data()[feature * d..(feature + 1) * d];
    let delta: Vec<f32> = row.iter().map(|&w| (alpha * f64::from(beta) * f64::from(w)) as f32).collect();
    let iv = Intervention::new(HookSite::new(LAYER), Tensor::new(vec![d], delta).unwrap(), spec.policy);
    let mut tokens = encode_with_bos(prompt);
    let mut oracle = Vec::new();
    for _ in 0..sampling.max_new_tokens {
        let logits = forward(&ckpt, &tokens, Some(&iv), None).unwrap().logits;
        let (best, margin) = argmax_margin(logits.row(logits.rows() - 1));
        // Near-ties may legitimately resolve either way.
        if margin < 1e-5 {
            return;
        }
        if best == EOT {
            break;
        }
        oracle.push(best);
        tokens.push(best);
    }
    assert_eq!(out.steered_text, decode(&oracle));
    assert_ne!(out.steered_text, out.default_text);
}

#[test]
fn zero_beta_is_identity() {
    let (ckpt, sae, stats) = fixture();
    let backend = LocalBackend::new(ckpt, vec![(sae, Some(stats))]).unwrap();
    let sampling = SamplingParams {
        max_new_tokens: 12,
        temperature: 0.8,
        seed: 17,
    };
    for feature in [0, 5, 23] {
        let spec = SteeringSpec::new(LAYER, feature, 0.0);
        let out = backend.paired_generate("Q: Is", &spec, &sampling).unwrap();
        assert_eq!(out.steered_text, out.default_text);
    }
    let (a, b) = (
        SteeringSpec { alpha: AlphaSource::Override(2.0), ..SteeringSpec::new(LAYER, 3, 10.0) },
        SteeringSpec { alpha: AlphaSource::Override(1.0), ..SteeringSpec::new(LAYER, 3, 20.0) },
    );
    let oa = backend.paired_generate("Q: Is", &a, &sampling).unwrap();
    let ob = backend.paired_generate("Q: Is", &b, &sampling).unwrap();
    assert_eq!(oa.steered_text, ob.steered_text);
}

#[test]
fn unsupported_requests_rejected() {
    let (ckpt, sae, stats) = fixture();
    let backend = LocalBackend::new(ckpt, vec![(sae, Some(stats))]).unwrap();
    let s = SamplingParams::default();
    assert!(backend.paired_generate("x", &SteeringSpec::new(0, 1, 1.0), &s).is_err());
    assert!(backend.paired_generate("x", &SteeringSpec::new(LAYER, 24, 1.0), &s).is_err());
    assert!(backend.paired_generate("x", &SteeringSpec::new(LAYER, 1, 100.5), &s).is_err());
}

fn bench() -> Benchmarks {
    Benchmarks {
        memorization: bundled_memorization().into_iter().take(3).collect(),
        probes: bundled_fluency().into_iter().take(3).collect(),
        tasks: capability_items(2, &bundled_facts()).unwrap(),
    }
}

fn sweep_config(n_runs: usize, jobs: usize) -> SweepConfig {
    SweepConfig {
        n_runs,
        max_new_tokens: 10,
        task_max_new_tokens: 4,
        mem_items_per_run: Some(2),
        fluency_probes_per_run: Some(2),
        master_seed: 77,
        jobs,
        ..SweepConfig::new(vec![LAYER], 24)
    }
}

fn strip(records: &[RunRecord]) -> Vec<RunRecord> {
    records.iter().map(RunRecord::without_timing).collect()
}

#[test]
fn sweep_is_deterministic_and_resumable() {
    let (ckpt, sae, stats) = fixture();
    let backend = LocalBackend::new(ckpt.clone(), vec![(sae, Some(stats))]).unwrap();
    let bench = bench();
    let dir = tempfile::tempdir().unwrap();

    let serial = dir.path().join("serial.jsonl");
    let summary = run_sweep(&backend, &ckpt, &bench, &sweep_config(6, 1), &serial).unwrap();
    let (first, _) = read_records(&serial).unwrap();
    assert_eq!((summary.executed, summary.complete, summary.failed), (6, 6, 0), "{:?}", first[0].error);
    let (first, _) = read_records(&serial).unwrap();
    assert_eq!(first.iter().map(|r| r.index).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());

    let parallel = dir.path().join("parallel.jsonl");
    run_sweep(&backend, &ckpt, &bench, &sweep_config(6, 3), &parallel).unwrap();
    assert_eq!(strip(&read_records(&parallel).unwrap().0), strip(&first));

    // Interrupt after three records, mid-way through the fourth.
    let text = std::fs::read_to_string(&serial).unwrap();
    let cut: usize = text.split_inclusive('\n').take(3).map(str::len).sum::<usize>() + 25;
    std::fs::write(&serial, &text[..cut]).unwrap();
    let summary = run_sweep(&backend, &ckpt, &bench, &sweep_config(6, 1), &serial).unwrap();
    assert_eq!((summary.resumed, summary.executed), (3, 3));
    assert_eq!(strip(&read_records(&serial).unwrap().0), strip(&first));

    // Extending the run count keeps the existing prefix.
    let summary = run_sweep(&backend, &ckpt, &bench, &sweep_config(8, 2), &serial).unwrap();
    assert_eq!((summary.resumed, summary.executed), (6, 2));

    let mut other = sweep_config(6, 1);
    other.temperature = 0.9;
    assert!(run_sweep(&backend, &ckpt, &bench, &other, &serial).is_err());
}

#[test]
fn zero_beta_sweep_records_identical_arms() {
    let (ckpt, sae, stats) = fixture();
    let backend = LocalBackend::new(ckpt.clone(), vec![(sae, Some(stats))]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zero.jsonl");
    let mut config = sweep_config(4, 1);
    config.beta_override = Some(0.0);
    run_sweep(&backend, &ckpt, &bench(), &config, &path).unwrap();
    for r in read_records(&path).unwrap().0 {
        assert_eq!(r.steered_digest, r.default_digest);
        let s = r.scores.unwrap();
        assert_eq!(s.anlcs_steered, s.anlcs_default);
        assert_eq!(s.ppl_ratio, Some(1.0));
        assert_eq!(s.task_steered, s.task_default);
    }
}
