// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder over residual-stream activations.
//!
//! `f = ReLU(W_enc (a - b_dec) + b_enc)`, `a_hat = f W_dec + b_dec`, trained on
//! `||a - a_hat||^2 + lambda ||f||_1`. Row `i` of `W_dec` is the direction of
//! feature `i`.

mod activations;
mod calibrate;
mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::HookSite;
use crate::numerics::{adam_step, ops, AdamConfig, AdamState, Tape, Tensor};
use crate::tensorfile::{self, ByteWriter};

pub(crate) use activations::text_activations;
pub use activations::{capture_activations, load_activations, save_activations, ActivationSet};
pub use synthetic::SyntheticDictionary;
pub use calibrate::{
    calibrate_alpha, corpus_id, load_feature_stats, save_feature_stats, FeatureStat, FeatureStats,
};

const MAGIC: &[u8; 4] = b"STSA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub d_in: usize,
    pub n_features: usize,
    pub l1_coefficient: f32,
    pub seed: u64,
}

impl SaeConfig {
    pub fn new(d_in: usize) -> Self {
        SaeConfig {
            d_in,
            n_features: 1024,
            l1_coefficient: 0.15,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(Error::Config("SAE d_in must be positive".into()));
        }
        if self.n_features < self.d_in {
            return Err(Error::Config(format!(
                "SAE needs n_features >= d_in, got {} < {}",
                self.n_features, self.d_in
            )));
        }
        if !(self.l1_coefficient > 0.0) || !self.l1_coefficient.is_finite() {
            return Err(Error::Config(format!(
                "l1_coefficient must be positive, got {}",
                self.l1_coefficient
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Rescale decoder rows to unit norm after every step, so the L1 penalty
    /// cannot be dodged by shrinking codes and growing directions.
    pub unit_norm_decoder: bool,
}

impl Default for SaeTrainOptions {
    fn default() -> Self {
        SaeTrainOptions {
            epochs: 10,
            batch_size: 128,
            adam: AdamConfig::default(),
            unit_norm_decoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeModel {
    pub config: SaeConfig,
    pub site: HookSite,
    /// `[F x d_in]`.
    pub w_enc: Tensor,
    /// `[F]`.
    pub b_enc: Tensor,
    /// `[F x d_in]`.
    pub w_dec: Tensor,
    /// `[d_in]`.
    pub b_dec: Tensor,
}

fn check_dim(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::dims(op, &[got], &[want]));
    }
    Ok(())
}

impl SaeModel {
    /// Random unit-norm decoder rows, encoder initialized to the decoder,
    /// zero biases.
    pub fn init(config: SaeConfig, site: HookSite) -> Result<Self> {
        config.validate()?;
        let (f, d) = (config.n_features, config.d_in);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let mut w_dec = Tensor::new(vec![f, d], (0..f * d).map(|_| normal.sample(&mut rng)).collect())?;
        normalize_rows(&mut w_dec);
        Ok(SaeModel {
            w_enc: w_dec.clone(),
            b_enc: Tensor::zeros(&[f]),
            w_dec,
            b_dec: Tensor::zeros(&[d]),
            config,
            site,
        })
    }

    pub fn n_features(&self) -> usize {
        self.config.n_features
    }

    pub fn d_in(&self) -> usize {
        self.config.d_in
    }

    /// Feature activations for a batch `[n x d_in]`, returned as `[n x F]`.
    pub fn encode_batch(&self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::dims("sae encode", a.shape(), &[self.d_in()]));
        }
        check_dim("sae encode", a.cols(), self.d_in())?;
        let mut centered = a.clone();
        let neg: Vec<f32> = self.b_dec.data().iter().map(|v| -v).collect();
        ops::add_row_bias(&mut centered, &neg)?;
        let mut pre = ops::matmul_nt(&centered, &self.w_enc)?;
        ops::add_row_bias(&mut pre, self.b_enc.data())?;
        Ok(pre.map(|v| v.max(0.0)))
    }

    /// `ReLU(W_enc (a - b_dec) + b_enc)` for a single vector.
    pub fn encode(&self, a: &Tensor) -> Result<Tensor> {
        check_dim("sae encode", a.len(), self.d_in())?;
        let f = self.encode_batch(&a.clone().reshape(&[1, self.d_in()])?)?;
        f.reshape(&[self.n_features()])
    }

    pub fn decode_batch(&self, f: &Tensor) -> Result<Tensor> {
        if f.rank() != 2 {
            return Err(Error::dims("sae decode", f.shape(), &[self.n_features()]));
        }
        check_dim("sae decode", f.cols(), self.n_features())?;
        let mut out = ops::matmul(f, &self.w_dec)?;
        ops::add_row_bias(&mut out, self.b_dec.data())?;
        Ok(out)
    }

    /// `f^T W_dec + b_dec`.
    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        check_dim("sae decode", f.len(), self.n_features())?;
        let out = self.decode_batch(&f.clone().reshape(&[1, self.n_features()])?)?;
        out.reshape(&[self.d_in()])
    }

    /// Direction feature `i` adds to a reconstruction:
    /// `decode(e_i) - decode(0)`. Equal to decoder row `i` up to the rounding
    /// of adding and removing `b_dec`.
    pub fn feature_vector(&self, i: usize) -> Result<Tensor> {
        if i >= self.n_features() {
            return Err(Error::Range {
                what: "feature index",
                value: i,
                bound: self.n_features(),
            });
        }
        let mut onehot = Tensor::zeros(&[1, self.n_features()]);
        onehot.data_mut()[i] = 1.0;
        let on = self.decode_batch(&onehot)?;
        let off = self.decode_batch(&Tensor::zeros(&[1, self.n_features()]))?;
        Ok(Tensor::from_vec(
            on.data().iter().zip(off.data()).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u32(self.config.d_in as u32);
        w.u32(self.config.n_features as u32);
        w.f32(self.config.l1_coefficient);
        w.u64(self.config.seed);
        w.u32(self.site.layer as u32);
        tensorfile::encode(
            MAGIC,
            &w.into_inner(),
            &[
                ("w_enc", &self.w_enc),
                ("b_enc", &self.b_enc),
                ("w_dec", &self.w_dec),
                ("b_dec", &self.b_dec),
            ],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut file = tensorfile::decode(MAGIC, bytes)?;
        let r = &mut file.config;
        let config = SaeConfig {
            d_in: r.u32("d_in")? as usize,
            n_features: r.u32("n_features")? as usize,
            l1_coefficient: r.f32("l1 coefficient")?,
            seed: r.u64("seed")?,
        };
        let site = HookSite::new(r.u32("layer")? as usize);
        if !r.is_done() {
            return Err(r.fail("unexpected bytes in config block"));
        }
        config.validate().map_err(|e| Error::Format {
            offset: 10,
            message: e.to_string(),
        })?;
        let (f, d) = (config.n_features, config.d_in);
        let t = &mut file.tensors;
        Ok(SaeModel {
            w_enc: tensorfile::take_tensor(t, "w_enc", &[f, d])?,
            b_enc: tensorfile::take_tensor(t, "b_enc", &[f])?,
            w_dec: tensorfile::take_tensor(t, "w_dec", &[f, d])?,
            b_dec: tensorfile::take_tensor(t, "b_dec", &[d])?,
            config,
            site,
        })
    }
}

pub fn save_sae(sae: &SaeModel, path: &Path) -> Result<()> {
    tensorfile::write_file(path, &sae.to_bytes())
}

pub fn load_sae(path: &Path) -> Result<SaeModel> {
    SaeModel::from_bytes(&tensorfile::read_file(path)?)
}

fn normalize_rows(t: &mut Tensor) {
    let c = t.cols();
    for row in t.data_mut().chunks_mut(c) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Reconstruction and sparsity of one pass over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeEpochStats {
    pub epoch: usize,
    /// Mean over samples of `||a - a_hat||^2`.
    pub mse: f64,
    /// Mean number of active features per sample.
    pub l0: f64,
    /// Mean training objective.
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainingReport {
    pub epochs: Vec<SaeEpochStats>,
    /// Mean over samples of `||a - mean(a)||^2`.
    pub data_variance: f64,
}

/// Mean squared reconstruction error, mean L0 and mean objective over `data`.
pub fn evaluate(sae: &SaeModel, data: &Tensor) -> Result<(f64, f64, f64)> {
    let n = data.rows();
    if n == 0 {
        return Err(Error::contract("evaluate on empty data"));
    }
    let mut mse = 0.0f64;
    let mut l0 = 0usize;
    let mut l1 = 0.0f64;
    let chunk = 1024;
    let d = sae.d_in();
    for start in (0..n).step_by(chunk) {
        let rows = chunk.min(n - start);
        let x = Tensor::new(vec![rows, d], data.data()[start * d..(start + rows) * d].to_vec())?;
        let f = sae.encode_batch(&x)?;
        let xh = sae.decode_batch(&f)?;
        mse += x
            .data()
            .iter()
            .zip(xh.data())
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum::<f64>();
        l0 += f.data().iter().filter(|v| **v > 0.0).count();
        l1 += f.data().iter().map(|v| f64::from(*v)).sum::<f64>();
    }
    let n = n as f64;
    let lambda = f64::from(sae.config.l1_coefficient);
    Ok((mse / n, l0 as f64 / n, (mse + lambda * l1) / n))
}

/// Mean over rows of the squared distance to the column means.
pub fn total_variance(data: &Tensor) -> f64 {
    let (n, d) = (data.rows(), data.cols());
    if n == 0 {
        return 0.0;
    }
    let mut mean = vec![0.0f64; d];
    for row in data.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += f64::from(*v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut total = 0.0;
    for row in data.data().chunks(d) {
        for (m, v) in mean.iter().zip(row) {
            total += (f64::from(*v) - m).powi(2);
        }
    }
    total / n as f64
}

/// Trains an SAE on `data` (`[n x d_in]`) with minibatch Adam.
/// Deterministic given `config.seed`.
pub fn train_sae(
    config: &SaeConfig,
    site: HookSite,
    data: &Tensor,
    options: &SaeTrainOptions,
) -> Result<(SaeModel, SaeTrainingReport)> {
    config.validate()?;
    if data.rank() != 2 || data.rows() == 0 {
        return Err(Error::contract("SAE training data must be a non-empty matrix"));
    }
    check_dim("train_sae", data.cols(), config.d_in)?;
    if options.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let (n, d) = (data.rows(), config.d_in);
    let mut sae = SaeModel::init(config.clone(), site)?;
    // Start the decoder bias at the data mean so early codes explain
    // deviations rather than the offset.
    let mut mean = vec![0.0f64; d];
    for row in data.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += f64::from(*v);
        }
    }
    sae.b_dec = Tensor::from_vec(mean.iter().map(|m| (m / n as f64) as f32).collect());

    let mut states: Vec<AdamState> = [&sae.w_enc, &sae.b_enc, &sae.w_dec, &sae.b_dec]
        .iter()
        .map(|t| AdamState::new(t.shape(), options.adam))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ae0_5ae0);
    let mut order: Vec<usize> = (0..n).collect();
    let lambda = config.l1_coefficient;
    let mut report = SaeTrainingReport {
        epochs: Vec::with_capacity(options.epochs),
        data_variance: total_variance(data),
    };
    let mut step = 0usize;
    let total_steps = options.epochs * n.div_ceil(options.batch_size);

    for epoch in 0..options.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(options.batch_size) {
            let b = batch.len();
            // Cosine decay to zero over the whole run.
            let progress = step as f32 / total_steps.max(1) as f32;
            let lr_scale = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
            let mut xb = Vec::with_capacity(b * d);
            for &i in batch {
                xb.extend_from_slice(data.row(i));
            }
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::new(vec![b, d], xb)?);
            let w_enc = tape.param(sae.w_enc.clone());
            let b_enc = tape.param(sae.b_enc.clone());
            let w_dec = tape.param(sae.w_dec.clone());
            let b_dec = tape.param(sae.b_dec.clone());
            let neg_b_dec = tape.scale(b_dec, -1.0)?;
            let centered = tape.add_row_bias(x, neg_b_dec)?;
            let pre = tape.matmul_nt(centered, w_enc)?;
            let pre = tape.add_row_bias(pre, b_enc)?;
            let f = tape.relu(pre)?;
            let recon = tape.matmul(f, w_dec)?;
            let recon = tape.add_row_bias(recon, b_dec)?;
            let err = tape.sub(recon, x)?;
            let sq = tape.sum_squares(err)?;
            let l1 = tape.abs_sum(f)?;
            let l1 = tape.scale(l1, lambda)?;
            let total = tape.add(sq, l1)?;
            let loss = tape.scale(total, 1.0 / b as f32)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training { step, loss: value });
            }
            let mut grads = tape.backward(loss).map_err(|e| match e {
                Error::NonFinite(_) => Error::Training {
                    step,
                    loss: f32::NAN,
                },
                other => other,
            })?;
            let params = [
                (&mut sae.w_enc, w_enc),
                (&mut sae.b_enc, b_enc),
                (&mut sae.w_dec, w_dec),
                (&mut sae.b_dec, b_dec),
            ];
            for ((param, var), state) in params.into_iter().zip(&mut states) {
                adam_step(param, &grads.take(var), state, lr_scale)?;
            }
            if options.unit_norm_decoder {
                normalize_rows(&mut sae.w_dec);
            }
            step += 1;
        }
        let (mse, l0, loss) = evaluate(&sae, data)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                loss: loss as f32,
            });
        }
        log::info!("sae epoch {}: mse {mse:.5} l0 {l0:.2} loss {loss:.5}", epoch + 1);
        report.epochs.push(SaeEpochStats {
            epoch: epoch + 1,
            mse,
            l0,
            loss,
        });
    }
    Ok((sae, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_sae() -> SaeModel {
        let config = SaeConfig {
            d_in: 3,
            n_features: 4,
            l1_coefficient: 1e-3,
            seed: 0,
        };
        SaeModel {
            w_enc: Tensor::from_rows(&[
                vec![1.0, 0.0, -1.0],
                vec![0.5, 0.5, 0.5],
                vec![-2.0, 1.0, 0.0],
                vec![0.0, 0.0, 3.0],
            ])
            .unwrap(),
            b_enc: Tensor::from_vec(vec![0.1, -0.2, 0.0, -1.0]),
            w_dec: Tensor::from_rows(&[
                vec![1.0, 2.0, 0.0],
                vec![0.0, -1.0, 1.0],
                vec![0.5, 0.5, 0.5],
                vec![2.0, 0.0, -2.0],
            ])
            .unwrap(),
            b_dec: Tensor::from_vec(vec![0.1, 0.2, 0.3]),
            config,
            site: HookSite::new(0),
        }
    }

    #[test]
    fn encode_matches_hand_arithmetic() {
        let sae = hand_sae();
        let f = sae.encode(&Tensor::from_vec(vec![1.1, 0.2, -0.7])).unwrap();
        // a - b_dec = [1.0, 0.0, -1.0]
        // pre = [2.0 + 0.1, 0.0 - 0.2, -2.0, -3.0 - 1.0]
        let want = [2.1f32, 0.0, 0.0, 0.0];
        for (g, w) in f.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_encoder_gives_zero_codes() {
        let mut sae = hand_sae();
        sae.w_enc = Tensor::zeros(&[4, 3]);
        sae.b_enc = Tensor::zeros(&[4]);
        let f = sae.encode(&Tensor::from_vec(vec![5.0, -3.0, 2.0])).unwrap();
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decoder_linearity_is_exact() {
        let sae = hand_sae();
        let zero = sae.decode(&Tensor::zeros(&[4])).unwrap();
        assert_eq!(zero, sae.b_dec);
        for i in 0..4 {
            let mut onehot = Tensor::zeros(&[4]);
            onehot.data_mut()[i] = 1.0;
            let d = sae.decode(&onehot).unwrap();
            let diff: Vec<f32> = d.data().iter().zip(zero.data()).map(|(a, b)| a - b).collect();
            let v = sae.feature_vector(i).unwrap();
            assert_eq!(diff, v.data());
            for (x, w) in v.data().iter().zip(sae.w_dec.row(i)) {
                assert!((x - w).abs() < 1e-6);
            }
        }
        assert!(matches!(
            sae.feature_vector(4),
            Err(Error::Range { value: 4, bound: 4, .. })
        ));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let sae = hand_sae();
        assert!(sae.encode(&Tensor::zeros(&[2])).is_err());
        assert!(sae.decode(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let sae = hand_sae();
        let back = SaeModel::from_bytes(&sae.to_bytes()).unwrap();
        assert_eq!(back, sae);
    }

    #[test]
    fn config_validation() {
        let mut c = SaeConfig::new(8);
        assert!(c.validate().is_ok());
        c.n_features = 4;
        assert!(c.validate().is_err());
        c.n_features = 16;
        c.l1_coefficient = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn huge_penalty_collapses_to_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let data = Tensor::new(vec![200, 4], (0..800).map(|_| normal.sample(&mut rng) + 2.0).collect())
            .unwrap();
        let cfg = SaeConfig {
            d_in: 4,
            n_features: 8,
            l1_coefficient: 10.0,
            seed: 2,
        };
        let opts = SaeTrainOptions {
            epochs: 1000,
            batch_size: 200,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..SaeTrainOptions::default()
        };
        let (sae, report) = train_sae(&cfg, HookSite::new(0), &data, &opts).unwrap();
        assert!(report.epochs.last().unwrap().l0 < 0.05);
        let mut mean = [0.0f32; 4];
        for row in data.data().chunks(4) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / 200.0;
            }
        }
        for (b, m) in sae.b_dec.data().iter().zip(mean) {
            assert!((b - m).abs() < 0.05, "{b} vs {m}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = Tensor::new(vec![64, 4], (0..256).map(|i| ((i * 7) % 13) as f32 * 0.1).collect())
            .unwrap();
        let cfg = SaeConfig {
            d_in: 4,
            n_features: 8,
            l1_coefficient: 1e-2,
            seed: 5,
        };
        let opts = SaeTrainOptions {
            epochs: 3,
            batch_size: 16,
            ..SaeTrainOptions::default()
        };
        let a = train_sae(&cfg, HookSite::new(0), &data, &opts).unwrap().0;
        let b = train_sae(&cfg, HookSite::new(0), &data, &opts).unwrap().0;
        assert_eq!(a, b);
    }
}

