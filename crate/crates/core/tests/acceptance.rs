// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Positional arguments (`c3`, `c5`, ...) select a subset.
//!
//! The trained model and SAEs are prepared before the criteria run and
//! cached between invocations (see `common::fixtures`). Their recorded
//! training time is charged to the memorization criterion (model) and the
//! steering-efficacy criterion (SAEs).

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use common::fixtures::{self, acceptance_config, TrainedLm, TrainedSaes};
use common::gradcheck::{lm_loss_check, op_checks};

use steerlab::harness::{aggregate, read_records, run_sweep, BetaBin, RunRecord, SweepConfig};
use steerlab::lm::{load_checkpoint, save_checkpoint, LmCheckpoint, LmConfig, SamplingParams};
use steerlab::metrics::{lcs_length, meteor_alignment, meteor_exact, perplexity, AnlcsUnit};
use steerlab::numerics::{AdamConfig, Tensor};
use steerlab::pipeline::eval_memorization;
use steerlab::report::{emit_report, layer_ratio_means, read_summary_csv, SUMMARY_CSV};
use steerlab::sae::{evaluate, load_sae, save_sae, train_sae, SaeConfig, SaeModel, SaeTrainOptions, SyntheticDictionary};
use steerlab::lm::HookSite;
use steerlab::steering::LocalBackend;

/// Set in the re-executed child that runs the sweep C8 kills.
const CHILD_ENV: &str = "STEERLAB_ACCEPTANCE_CHILD";

const C5_SEEDS: [u64; 3] = [0, 1, 2];
const C5_GAP: f64 = 0.30;
const C8_RUNS: usize = 10;
const C8_SEED: u64 = 21;

struct Outcome {
    pass: bool,
    detail: String,
    /// Training done before the criterion started that counts toward its
    /// budget.
    prior: Duration,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome {
            pass,
            detail,
            prior: Duration::ZERO,
        }
    }
}

struct SeedSweep {
    seed: u64,
    path: PathBuf,
    records: Vec<RunRecord>,
}

#[derive(Default)]
struct State {
    lm: Option<TrainedLm>,
    saes: Option<TrainedSaes>,
    sweeps: Option<Vec<SeedSweep>>,
    work: Option<tempfile::TempDir>,
}

impl State {
    fn lm(&mut self) -> &TrainedLm {
        self.lm.get_or_insert_with(|| fixtures::trained_lm(&acceptance_config()))
    }

    fn backend(&mut self) -> LocalBackend {
        self.lm();
        let lm = self.lm.as_ref().unwrap();
        let saes = self.saes.get_or_insert_with(|| fixtures::trained_saes(lm));
        LocalBackend::new(lm.ckpt.clone(), saes.saes.clone()).unwrap()
    }

    fn sweep_config(&mut self) -> SweepConfig {
        self.backend();
        let lm = self.lm.as_ref().unwrap();
        let saes = self.saes.as_ref().unwrap();
        lm.config.sweep_config(saes.layers.clone(), lm.config.sae_features)
    }

    fn work_dir(&mut self) -> PathBuf {
        self.work
            .get_or_insert_with(|| tempfile::tempdir().unwrap())
            .path()
            .to_path_buf()
    }

    fn sae_secs(&self) -> f64 {
        self.saes.as_ref().map_or(0.0, |s| s.train_secs)
    }
}

fn sweep_into(state: &mut State, config: &SweepConfig, path: &Path) -> Vec<RunRecord> {
    let backend = state.backend();
    let lm = state.lm.as_ref().unwrap();
    let bench = lm.corpora.benchmarks(&lm.config).unwrap();
    let summary = run_sweep(&backend, &lm.ckpt, &bench, config, path).unwrap();
    assert_eq!(summary.complete + summary.failed, config.n_runs);
    read_records(path).unwrap().0
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.3}"))
}

// ---------------------------------------------------------------- criteria

fn c1_identity(state: &mut State) -> Outcome {
    let config = SweepConfig {
        n_runs: 20,
        master_seed: 11,
        beta_override: Some(0.0),
        ..state.sweep_config()
    };
    let path = state.work_dir().join("identity.jsonl");
    let records = sweep_into(state, &config, &path);
    let mut bad = Vec::new();
    for r in &records {
        let s = r.scores.as_ref();
        let ok = r.is_complete()
            && r.spec.beta == 0.0
            && r.steered_digest.is_some()
            && r.steered_digest == r.default_digest
            && s.is_some_and(|s| {
                s.anlcs_steered.is_some()
                    && s.anlcs_steered == s.anlcs_default
                    && s.ppl_ratio.is_some_and(|p| (p - 1.0).abs() <= 1e-6)
                    && s.meteor_exact_steered == s.meteor_exact_default
                    && s.task_steered == s.task_default
            });
        if !ok {
            bad.push(r.index);
        }
    }
    let worst = records
        .iter()
        .filter_map(|r| r.scores.as_ref()?.ppl_ratio)
        .map(|p| (p - 1.0).abs())
        .fold(0.0, f64::max);
    Outcome::new(
        records.len() == 20 && bad.is_empty(),
        format!("{} records, mismatched runs {bad:?}, max |ppl_ratio - 1| = {worst:.1e}", records.len()),
    )
}

fn c2_autodiff(_: &mut State) -> Outcome {
    let mut worst_op = (0.0f64, "");
    let mut checks = 0;
    for seed in 0..20 {
        for c in op_checks(seed) {
            assert!(c.elements > 0, "{c:?}");
            checks += 1;
            if !(c.max_rel_err <= worst_op.0) {
                worst_op = (c.max_rel_err, c.name);
            }
        }
    }
    let mut worst_lm = 0.0f64;
    for seed in 0..20 {
        let c = lm_loss_check(seed, 6);
        if !(c.max_rel_err <= worst_lm) {
            worst_lm = c.max_rel_err;
        }
    }
    Outcome::new(
        worst_op.0 < 1e-3 && worst_lm < 1e-3,
        format!(
            "{checks} op checks over 20 seeds, worst {:.1e} ({}); 2-layer LM loss over 20 seeds, worst {worst_lm:.1e}",
            worst_op.0, worst_op.1
        ),
    )
}

/// All binary strings of length 0..=10 ordered by (length, value), so that
/// a string's index determines its length.
fn binary_strings() -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for len in 0..=10u32 {
        for v in 0..(1u32 << len) {
            out.push((0..len).rev().map(|b| ((v >> b) & 1) as u8).collect());
        }
    }
    out
}

fn c3_metrics(_: &mut State) -> Outcome {
    // Exhaustive LCS oracle: the longest common subsequence is the longest
    // string in the intersection of the two subsequence sets.
    let strings = binary_strings();
    let n = strings.len();
    let words = n.div_ceil(64);
    let index = |s: &[u8]| -> usize {
        let v = s.iter().fold(0usize, |acc, &b| acc * 2 + b as usize);
        (1usize << s.len()) - 1 + v
    };
    let sets: Vec<Vec<u64>> = strings
        .iter()
        .map(|s| {
            let mut set = vec![0u64; words];
            for mask in 0..(1u32 << s.len()) {
                let sub: Vec<u8> = (0..s.len()).filter(|i| (mask >> i) & 1 == 1).map(|i| s[i]).collect();
                let k = index(&sub);
                set[k / 64] |= 1u64 << (k % 64);
            }
            set
        })
        .collect();
    let len_of_index = |k: usize| (usize::BITS - (k + 1).leading_zeros() - 1) as usize;
    let mut mismatches = 0usize;
    for (a, sa) in strings.iter().zip(&sets) {
        for (b, sb) in strings.iter().zip(&sets) {
            let top = (0..words)
                .rev()
                .find_map(|w| {
                    let x = sa[w] & sb[w];
                    (x != 0).then(|| w * 64 + 63 - x.leading_zeros() as usize)
                })
                .expect("the empty string is common");
            if lcs_length(a, b) != len_of_index(top) {
                mismatches += 1;
            }
        }
    }
    let pairs = n * n;

    // METEOR hand derivations: precision P, recall R, Fmean = 10PR/(R+9P),
    // penalty 0.5 (chunks/matches)^3.
    let hand = [
        ("the cat sat", "the cat sat", 1.0 - 0.5 / 27.0),
        ("sat cat the", "the cat sat", 0.5),
        // P = 1, R = 1/2, Fmean = 10/19, one chunk of two matches.
        ("the cat", "the dog the cat", 10.0 / 19.0 * (1.0 - 0.5 / 8.0)),
    ];
    let meteor_err = hand
        .iter()
        .map(|(c, r, want)| (meteor_exact(c, r) - want).abs())
        .fold(0.0, f64::max);
    let chunks_ok = meteor_alignment("the cat", "the dog the cat").chunks == 1;

    // All-zero unembedding gives uniform next-token logits.
    let config = LmConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_mlp: 32,
        ..LmConfig::default()
    };
    let mut scorer = LmCheckpoint::init(config).unwrap();
    scorer.weights.unembed.data_mut().fill(0.0);
    scorer.weights.unembed_bias.data_mut().fill(0.0);
    let vocab = scorer.config.vocab_size as f64;
    let ppl_err = ["hello world", "Q: 3 + 4 = ?", "x"]
        .iter()
        .map(|t| (perplexity(&scorer, t).unwrap() - vocab).abs())
        .fold(0.0, f64::max);

    Outcome::new(
        mismatches == 0 && meteor_err < 1e-9 && chunks_ok && ppl_err < 1e-3,
        format!(
            "LCS {pairs} pairs, {mismatches} mismatches; METEOR max err {meteor_err:.1e}; \
             uniform-scorer |ppl - {vocab}| = {ppl_err:.1e}"
        ),
    )
}

fn c4_memorization(state: &mut State) -> Outcome {
    let lm = state.lm();
    let sampling = SamplingParams {
        max_new_tokens: lm.config.max_new_tokens,
        temperature: 0.0,
        seed: 0,
    };
    let items = &lm.corpora.memorization;
    let eval = eval_memorization(&lm.ckpt, items, &sampling, AnlcsUnit::Char).unwrap();
    Outcome {
        prior: Duration::from_secs_f64(lm.train_secs),
        ..Outcome::new(
            items.len() == 40 && eval.anlcs >= 0.95,
            format!(
                "greedy ANLCS {:.4} over {} items",
                eval.anlcs,
                items.len()
            ),
        )
    }
}

struct BinMeans {
    low: Option<f64>,
    high: Option<f64>,
    default: Option<f64>,
    ppl_low: Option<f64>,
    ppl_high: Option<f64>,
    runs: usize,
}

/// Bin means recomputed from the records, independent of the aggregator.
fn bin_means(records: &[RunRecord]) -> BinMeans {
    let complete: Vec<&RunRecord> = records.iter().filter(|r| r.is_complete()).collect();
    let in_bin = |lo: f32, hi: f32| {
        complete
            .iter()
            .filter(move |r| (lo..hi).contains(&r.spec.beta.abs()) || (hi > 100.0 && r.spec.beta.abs() >= lo))
            .filter_map(|r| r.scores.as_ref())
    };
    BinMeans {
        low: mean(in_bin(0.0, 25.0).filter_map(|s| s.anlcs_steered)),
        high: mean(in_bin(50.0, f32::INFINITY).filter_map(|s| s.anlcs_steered)),
        default: mean(complete.iter().filter_map(|r| r.scores.as_ref()?.anlcs_default)),
        ppl_low: mean(in_bin(0.0, 25.0).filter_map(|s| s.ppl_ratio)),
        ppl_high: mean(in_bin(50.0, f32::INFINITY).filter_map(|s| s.ppl_ratio)),
        runs: complete.len(),
    }
}

fn c5_sweeps(state: &mut State) -> &[SeedSweep] {
    if state.sweeps.is_none() {
        let base = state.sweep_config();
        let dir = state.work_dir();
        let mut sweeps = Vec::new();
        for seed in C5_SEEDS {
            let config = SweepConfig {
                master_seed: seed,
                ..base.clone()
            };
            let path = dir.join(format!("sweep_seed{seed}.jsonl"));
            let records = sweep_into(state, &config, &path);
            sweeps.push(SeedSweep { seed, path, records });
        }
        state.sweeps = Some(sweeps);
    }
    state.sweeps.as_deref().unwrap()
}

fn c5_efficacy(state: &mut State) -> Outcome {
    let sweeps = c5_sweeps(state);
    let mut holds = 0;
    let mut lines = Vec::new();
    for s in sweeps {
        let m = bin_means(&s.records);
        let agg = aggregate(&s.records).unwrap();
        let agg_high = agg.cell(None, Some(BetaBin::High)).and_then(|c| c.anlcs_steered.map(|st| st.mean));
        assert!(
            matches!((agg_high, m.high), (Some(a), Some(b)) if (a - b).abs() < 1e-9) || (agg_high.is_none() && m.high.is_none()),
            "aggregator disagrees with recomputed high-bin mean"
        );
        let ok = match (m.low, m.high, m.default) {
            (Some(low), Some(high), Some(def)) => low - high >= C5_GAP && def - high >= C5_GAP,
            _ => false,
        };
        holds += ok as usize;
        lines.push(format!(
            "seed {}: {} runs, high {} low {} default {} {}",
            s.seed,
            m.runs,
            fmt(m.high),
            fmt(m.low),
            fmt(m.default),
            if ok { "ok" } else { "miss" }
        ));
    }
    Outcome {
        prior: Duration::from_secs_f64(state.sae_secs()),
        ..Outcome::new(holds >= 2, format!("{holds}/3 seeds hold; {}", lines.join("; ")))
    }
}

fn c6_fluency(state: &mut State) -> Outcome {
    let sweeps = c5_sweeps(state);
    let mut holds = 0;
    let mut lines = Vec::new();
    let mut pooled = Vec::new();
    for s in sweeps {
        let m = bin_means(&s.records);
        let ok = matches!((m.ppl_high, m.ppl_low), (Some(h), Some(l)) if h > l);
        holds += ok as usize;
        lines.push(format!("seed {}: high {} low {}", s.seed, fmt(m.ppl_high), fmt(m.ppl_low)));
        pooled.extend(s.records.iter().cloned());
    }
    let m = bin_means(&pooled);
    let layers = layer_ratio_means(&aggregate(&pooled).unwrap());
    let per_layer: Vec<String> = layers.iter().map(|(l, v)| format!("L{l} {v:.3}")).collect();
    let ordered = layers.values().zip(layers.values().skip(1)).all(|(a, b)| b <= a);
    Outcome::new(
        holds >= 2,
        format!(
            "{holds}/3 seeds hold; {}; pooled high {} low {}; per-layer ratio means {} (later <= earlier: {ordered}, not asserted)",
            lines.join("; "),
            fmt(m.ppl_high),
            fmt(m.ppl_low),
            per_layer.join(", ")
        ),
    )
}

/// f64 re-encode/decode of `data`: (mean squared error, mean L0).
fn sae_oracle(sae: &SaeModel, data: &Tensor) -> (f64, f64) {
    let (f, d) = (sae.n_features(), sae.d_in());
    let wide = |t: &Tensor| t.data().iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
    let (w_enc, b_enc, w_dec, b_dec) = (wide(&sae.w_enc), wide(&sae.b_enc), wide(&sae.w_dec), wide(&sae.b_dec));
    let (mut se, mut active) = (0.0, 0usize);
    for row in data.data().chunks(d) {
        let x: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
        let mut recon = b_dec.clone();
        for i in 0..f {
            let pre = b_enc[i] + (0..d).map(|j| w_enc[i * d + j] * (x[j] - b_dec[j])).sum::<f64>();
            if pre > 0.0 {
                active += 1;
                for j in 0..d {
                    recon[j] += pre * w_dec[i * d + j];
                }
            }
        }
        se += x.iter().zip(&recon).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let n = data.rows() as f64;
    (se / n, active as f64 / n)
}

fn variance_f64(data: &Tensor) -> f64 {
    let (n, d) = (data.rows(), data.cols());
    let mut total = 0.0;
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| f64::from(data.data()[i * d + j])).collect();
        let mu = col.iter().sum::<f64>() / n as f64;
        total += col.iter().map(|v| (v - mu).powi(2)).sum::<f64>();
    }
    total / n as f64
}

fn c7_sae_quality(_: &mut State) -> Outcome {
    let dict = SyntheticDictionary::default();
    let train = dict.samples(32768, 0);
    let held_out = dict.samples(2048, 1);
    let config = SaeConfig {
        n_features: 32,
        ..SaeConfig::new(dict.d_in)
    };
    // About 19k optimizer steps; the default schedule is sized for LM
    // activation sets.
    let options = SaeTrainOptions {
        epochs: 150,
        batch_size: 256,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        ..SaeTrainOptions::default()
    };
    let (sae, report) = train_sae(&config, HookSite::new(0), &train, &options).unwrap();
    let (mse, l0) = sae_oracle(&sae, &held_out);
    let fvu = mse / variance_f64(&held_out);
    let (lib_mse, lib_l0, _) = evaluate(&sae, &held_out).unwrap();
    let agree = (lib_mse - mse).abs() <= 1e-4 * mse.max(1e-6) + 1e-7 && (lib_l0 - l0).abs() < 0.01;

    let zeros = Tensor::zeros(&[32]);
    let off = sae.decode(&zeros).unwrap();
    let mut exact = 0;
    for i in 0..32 {
        let mut onehot = Tensor::zeros(&[32]);
        onehot.data_mut()[i] = 1.0;
        let on = sae.decode(&onehot).unwrap();
        let want: Vec<f32> = on.data().iter().zip(off.data()).map(|(a, b)| a - b).collect();
        let got = sae.feature_vector(i).unwrap();
        exact += (got.data().iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits())) as usize;
    }
    let e = &report.epochs;
    let decreasing = e.len() >= 3 && e[0].mse > e[1].mse && e[1].mse > e[2].mse;
    Outcome::new(
        fvu < 0.10 && l0 <= 0.10 * 32.0 && exact == 32 && decreasing && agree,
        format!(
            "held-out FVU {fvu:.4}, L0 {l0:.2} (limit 3.2); decoder identity exact for {exact}/32; \
             first epochs mse {:.4} > {:.4} > {:.4}; library evaluate agrees: {agree}",
            e[0].mse, e[1].mse, e[2].mse
        ),
    )
}

fn c8_config(state: &mut State) -> SweepConfig {
    SweepConfig {
        n_runs: C8_RUNS,
        master_seed: C8_SEED,
        ..state.sweep_config()
    }
}

fn line_count(path: &Path) -> usize {
    std::fs::read(path).map_or(0, |b| b.iter().filter(|&&c| c == b'\n').count())
}

fn timeless(records: &[RunRecord]) -> Vec<RunRecord> {
    records.iter().map(RunRecord::without_timing).collect()
}

fn c8_determinism(state: &mut State) -> Outcome {
    let dir = state.work_dir();
    let config = c8_config(state);
    let a = sweep_into(state, &config, &dir.join("det_a.jsonl"));
    let b = sweep_into(state, &SweepConfig { jobs: 2, ..config.clone() }, &dir.join("det_b.jsonl"));
    let same = timeless(&a) == timeless(&b);

    // Kill a real sweep process part way and resume it here.
    let killed = dir.join("det_killed.jsonl");
    let mut child = Command::new(std::env::current_exe().unwrap())
        .env(CHILD_ENV, &killed)
        .env_remove(fixtures::FRESH_ENV)
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(300);
    let mut finished_early = false;
    while line_count(&killed) < 4 {
        if child.try_wait().unwrap().is_some() {
            finished_early = true;
            break;
        }
        assert!(Instant::now() < deadline, "child sweep made no progress");
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().ok();
    child.wait().unwrap();
    let bytes = std::fs::read(&killed).unwrap();
    let lines_at_kill = line_count(&killed);
    let torn = !bytes.is_empty() && *bytes.last().unwrap() != b'\n';
    let resumed = sweep_into(state, &config, &killed);
    let resume_same = timeless(&resumed) == timeless(&a);
    Outcome::new(
        same && resume_same && !finished_early && lines_at_kill < C8_RUNS,
        format!(
            "{} runs: repeat identical {same}; killed after {lines_at_kill} records (torn tail {torn}), \
             resumed identical {resume_same}",
            a.len()
        ),
    )
}

fn c9_round_trips(state: &mut State) -> Outcome {
    let dir = state.work_dir();
    let lm = state.lm();
    let bytes = lm.ckpt.to_bytes();
    let path = dir.join("roundtrip.stlb");
    save_checkpoint(&lm.ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let ckpt_ok = loaded.to_bytes() == bytes
        && LmCheckpoint::from_bytes(&bytes).unwrap().to_bytes() == bytes
        && loaded
            .weights
            .iter()
            .iter()
            .zip(lm.ckpt.weights.iter())
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    state.backend();
    let sae = &state.saes.as_ref().unwrap().saes[0].0;
    let sae_path = dir.join("roundtrip.stsa");
    save_sae(sae, &sae_path).unwrap();
    let sae_ok = load_sae(&sae_path).unwrap().to_bytes() == sae.to_bytes();

    // Record files from the sweeps run earlier, or a short one if none were.
    let files: Vec<PathBuf> = match &state.sweeps {
        Some(s) => s.iter().map(|s| s.path.clone()).collect(),
        None => {
            let config = SweepConfig {
                n_runs: 6,
                master_seed: 5,
                ..state.sweep_config()
            };
            let path = dir.join("roundtrip.jsonl");
            sweep_into(state, &config, &path);
            vec![path]
        }
    };
    let (mut jsonl_ok, mut csv_ok, mut svg_ok, mut n_records, mut n_svg) = (true, true, true, 0, 0);
    for (k, file) in files.iter().enumerate() {
        let text = std::fs::read_to_string(file).unwrap();
        let (records, intact) = read_records(file).unwrap();
        n_records += records.len();
        jsonl_ok &= intact == text.len() && records.len() == text.lines().count();
        for (r, line) in records.iter().zip(text.lines()) {
            if let Err(e) = r.validate() {
                eprintln!("record {} fails validation: {e}", r.index);
                jsonl_ok = false;
            }
            let again = r.to_json_line();
            if again.trim_end() != line {
                eprintln!("record {} re-serializes differently:\n  {line}\n  {}", r.index, again.trim_end());
                jsonl_ok = false;
            }
        }

        let out = dir.join(format!("report{k}"));
        let files = emit_report(&records, &out).unwrap();
        csv_ok &= read_summary_csv(&out.join(SUMMARY_CSV)).unwrap() == files.aggregate.cells;
        csv_ok &= files.aggregate == aggregate(&records).unwrap();
        for csv_path in files.csv.iter().filter(|p| !p.ends_with(SUMMARY_CSV)) {
            let mut reader = csv::Reader::from_path(csv_path).unwrap();
            let idx = reader.headers().unwrap().iter().position(|h| h == "index").unwrap();
            let rows: Vec<usize> = reader.records().map(|r| r.unwrap()[idx].parse().unwrap()).collect();
            csv_ok &= rows == records.iter().map(|r| r.index).collect::<Vec<_>>();
        }
        for svg in &files.svg {
            n_svg += 1;
            let text = std::fs::read_to_string(svg).unwrap();
            svg_ok &= roxmltree::Document::parse(&text).is_ok_and(|d| d.root_element().tag_name().name() == "svg");
        }
    }
    Outcome::new(
        ckpt_ok && sae_ok && jsonl_ok && csv_ok && svg_ok && n_svg > 0,
        format!(
            "checkpoint bitwise {ckpt_ok}, SAE bitwise {sae_ok}; {n_records} JSONL records re-parse {jsonl_ok}; \
             CSV to aggregates {csv_ok}; {n_svg} SVGs well-formed {svg_ok}"
        ),
    )
}

// ---------------------------------------------------------------- runner

type Check = fn(&mut State) -> Outcome;

/// Criteria that need the trained model, and those that also need the SAEs.
const NEEDS_LM: [&str; 6] = ["c1", "c4", "c5", "c6", "c8", "c9"];
const NEEDS_SAES: [&str; 5] = ["c1", "c5", "c6", "c8", "c9"];

const CRITERIA: [(&str, &str, u64, Check); 9] = [
    ("c2", "autodiff finite differences", 120, c2_autodiff),
    ("c3", "metric oracles", 300, c3_metrics),
    ("c7", "SAE quality on synthetic dictionary", 300, c7_sae_quality),
    ("c4", "memorization premise", 1800, c4_memorization),
    ("c1", "beta = 0 identity gate", 300, c1_identity),
    ("c8", "determinism and resume", 600, c8_determinism),
    ("c5", "steering efficacy trend", 2700, c5_efficacy),
    ("c6", "fluency cost trend", 2700, c6_fluency),
    ("c9", "interface round trips", 120, c9_round_trips),
];

/// The sweep C8 kills part way through.
fn child(path: &str) -> ExitCode {
    let mut state = State::default();
    let config = c8_config(&mut state);
    sweep_into(&mut state, &config, Path::new(path));
    ExitCode::SUCCESS
}

fn panic_message(e: &(dyn std::any::Any + Send)) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn main() -> ExitCode {
    if let Ok(path) = std::env::var(CHILD_ENV) {
        return child(&path);
    }
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| selected.is_empty() || selected.iter().any(|s| s == id);
    let mut state = State::default();
    if NEEDS_LM.iter().any(|id| wanted(id)) {
        let lm = state.lm();
        let how = if lm.cached { "cached" } else { "trained" };
        println!("model: {how}, training took {:.0}s", lm.train_secs);
    }
    if NEEDS_SAES.iter().any(|id| wanted(id)) {
        state.backend();
        let saes = state.saes.as_ref().unwrap();
        let how = if saes.cached { "cached" } else { "trained" };
        println!("SAEs for layers {:?}: {how}, training took {:.0}s", saes.layers, saes.train_secs);
    }
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, budget, check) in CRITERIA {
        if !wanted(id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut state)));
        let elapsed = start.elapsed();
        let (pass, detail, prior) = match result {
            Ok(o) => (o.pass, o.detail, o.prior),
            Err(e) => (false, format!("panicked: {}", panic_message(&*e)), Duration::ZERO),
        };
        let total = elapsed + prior;
        let in_budget = total <= Duration::from_secs(budget);
        let pass = pass && in_budget;
        failed += !pass as usize;
        let timing = if prior.is_zero() {
            format!("{:.1}s", elapsed.as_secs_f64())
        } else {
            format!("{:.1}s incl. {:.1}s training", total.as_secs_f64(), prior.as_secs_f64())
        };
        println!(
            "[{}] {} {name}: {detail} ({timing}, budget {budget}s{})",
            if pass { "PASS" } else { "FAIL" },
            id.to_uppercase(),
            if in_budget { "" } else { ", over budget" }
        );
        std::io::stdout().flush().ok();
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
