// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-free inference with a key/value cache.

use crate::error::{Error, Result};
use crate::numerics::ops::{self, gelu_scalar};
use crate::numerics::{gemm, Tensor, View, ViewMut};

use super::checkpoint::LmCheckpoint;
use super::params::BlockParams;
use super::{HookSite, Intervention, LmConfig, PositionPolicy};

/// Incremental decoding state over one sequence. Borrows the checkpoint
/// read-only, so many sessions may share one model across threads.
pub struct Session<'a> {
    ckpt: &'a LmCheckpoint,
    len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    intervention: Option<&'a Intervention>,
    steer_from: usize,
    capture: Option<HookSite>,
    captured: Vec<f32>,
}

/// `out[m x n] = x[m x k] * w[k x n] + bias`.
fn linear(x: &[f32], m: usize, k: usize, w: &Tensor, bias: &Tensor) -> Vec<f32> {
    let n = bias.len();
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(bias.data());
    }
    if m == 1 {
        // Vector-matrix product as row accumulation; avoids gemm packing
        // overhead when decoding one token at a time.
        let wd = w.data();
        for (i, &xi) in x.iter().enumerate() {
            let row = &wd[i * n..(i + 1) * n];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
        return out;
    }
    gemm(
        m,
        k,
        n,
        1.0,
        View::row_major(x, k),
        View::row_major(w.data(), n),
        1.0,
        ViewMut::row_major(&mut out, n),
    );
    out
}

fn layer_norm_rows(x: &[f32], d: usize, gain: &Tensor, bias: &Tensor) -> Vec<f32> {
    let t = Tensor::new(vec![x.len() / d, d], x.to_vec()).expect("row-aligned");
    ops::layer_norm(&t, gain.data(), bias.data())
        .expect("d_model >= 2 validated with config")
        .y
        .into_data()
}

impl<'a> Session<'a> {
    pub fn new(ckpt: &'a LmCheckpoint) -> Self {
        let cfg = &ckpt.config;
        let cap = cfg.context_length * cfg.d_model;
        Session {
            ckpt,
            len: 0,
            keys: (0..cfg.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..cfg.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            intervention: None,
            steer_from: 0,
            capture: None,
            captured: Vec::new(),
        }
    }

    /// Adds `iv.delta` at its hook site for every position `>= steer_from`.
    pub fn with_intervention(mut self, iv: &'a Intervention, steer_from: usize) -> Result<Self> {
        iv.check(&self.ckpt.config)?;
        self.intervention = Some(iv);
        self.steer_from = steer_from;
        Ok(self)
    }

    /// Records pre-intervention activations at `site` for every processed
    /// position.
    pub fn with_capture(mut self, site: HookSite) -> Result<Self> {
        site.check(&self.ckpt.config)?;
        self.capture = Some(site);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn config(&self) -> &LmConfig {
        &self.ckpt.config
    }

    /// Captured activations so far, `[len x d_model]`.
    pub fn captured(&self) -> &[f32] {
        &self.captured
    }

    pub fn take_captured(&mut self) -> Tensor {
        let d = self.ckpt.config.d_model;
        let data = std::mem::take(&mut self.captured);
        Tensor::new(vec![data.len() / d, d], data).expect("row-aligned")
    }

    /// Feeds `tokens` at the next positions and returns their logits,
    /// `[tokens.len() x vocab]`.
    pub fn extend(&mut self, tokens: &[usize]) -> Result<Tensor> {
        let cfg = &self.ckpt.config;
        let w = &self.ckpt.weights;
        let (d, n) = (cfg.d_model, tokens.len());
        if n == 0 {
            return Err(Error::contract("extend with no tokens"));
        }
        if self.len + n > cfg.context_length {
            return Err(Error::contract(format!(
                "sequence of {} tokens exceeds context length {}",
                self.len + n,
                cfg.context_length
            )));
        }
        let mut x = Vec::with_capacity(n * d);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= cfg.vocab_size {
                return Err(Error::Range {
                    what: "token id",
                    value: tok,
                    bound: cfg.vocab_size,
                });
            }
            let pos = self.len + i;
            x.extend(
                w.tok_embed
                    .row(tok)
                    .iter()
                    .zip(w.pos_embed.row(pos))
                    .map(|(a, b)| a + b),
            );
        }
        for (layer, block) in w.blocks.iter().enumerate() {
            self.block(layer, block, &mut x, n);
            if self.capture.map(|s| s.layer) == Some(layer) {
                self.captured.extend_from_slice(&x);
            }
            if let Some(iv) = self.intervention.filter(|iv| iv.site.layer == layer) {
                let delta = iv.delta.data();
                for (i, row) in x.chunks_mut(d).enumerate() {
                    if self.len + i >= self.steer_from {
                        for (v, dv) in row.iter_mut().zip(delta) {
                            *v += *dv;
                        }
                    }
                }
            }
        }
        self.len += n;
        let h = layer_norm_rows(&x, d, &w.ln_f_gain, &w.ln_f_bias);
        let logits = linear(&h, n, d, &w.unembed, &w.unembed_bias);
        let out = Tensor::new(vec![n, cfg.vocab_size], logits)?;
        if !out.all_finite() {
            return Err(Error::NonFinite("forward logits"));
        }
        Ok(out)
    }

    fn block(&mut self, layer: usize, b: &BlockParams<Tensor>, x: &mut [f32], n: usize) {
        let cfg = &self.ckpt.config;
        let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let past = self.len;
        let total = past + n;
        let scale = 1.0 / (dh as f32).sqrt();

        let h = layer_norm_rows(x, d, &b.ln1_gain, &b.ln1_bias);
        let qkv = linear(&h, n, d, &b.w_qkv, &b.b_qkv);
        let keys = &mut self.keys[layer];
        let values = &mut self.values[layer];
        for row in qkv.chunks(3 * d) {
            keys.extend_from_slice(&row[d..2 * d]);
            values.extend_from_slice(&row[2 * d..]);
        }

        let mut attn = vec![0.0f32; n * d];
        let mut scores = vec![0.0f32; n * total];
        for head in 0..heads {
            let off = head * dh;
            // scores[n x total] = q_h * K_h^T
            gemm(
                n,
                dh,
                total,
                scale,
                View {
                    data: &qkv,
                    offset: off,
                    row_stride: 3 * d,
                    col_stride: 1,
                },
                View {
                    data: keys,
                    offset: off,
                    row_stride: 1,
                    col_stride: d,
                },
                0.0,
                ViewMut::row_major(&mut scores, total),
            );
            ops::softmax_rows_prefix_in_place(&mut scores, total, |r| past + r + 1);
            // attn[:, head] = P * V_h
            gemm(
                n,
                total,
                dh,
                1.0,
                View::row_major(&scores, total),
                View {
                    data: values,
                    offset: off,
                    row_stride: d,
                    col_stride: 1,
                },
                0.0,
                ViewMut {
                    data: &mut attn,
                    offset: off,
                    row_stride: d,
                    col_stride: 1,
                },
            );
        }
        let o = linear(&attn, n, d, &b.w_attn_out, &b.b_attn_out);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += ov;
        }

        let h = layer_norm_rows(x, d, &b.ln2_gain, &b.ln2_bias);
        let mut m = linear(&h, n, d, &b.w_mlp_in, &b.b_mlp_in);
        m.iter_mut().for_each(|v| *v = gelu_scalar(*v));
        let o = linear(&m, n, cfg.d_mlp, &b.w_mlp_out, &b.b_mlp_out);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += ov;
        }
    }
}

/// Result of a single full-sequence forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[T x vocab]`.
    pub logits: Tensor,
    /// `[T x d_model]` pre-intervention activations when capture was requested.
    pub captured: Option<Tensor>,
}

/// Full forward pass over `tokens`. Under [`PositionPolicy::GeneratedOnly`]
/// the delta covers only the final position.
pub fn forward(
    ckpt: &LmCheckpoint,
    tokens: &[usize],
    intervention: Option<&Intervention>,
    capture: Option<HookSite>,
) -> Result<ForwardOutput> {
    if tokens.len() > ckpt.config.context_length {
        return Err(Error::contract(format!(
            "sequence of {} tokens exceeds context length {}",
            tokens.len(),
            ckpt.config.context_length
        )));
    }
    let mut s = Session::new(ckpt);
    if let Some(iv) = intervention {
        let from = match iv.policy {
            PositionPolicy::AllPositions => 0,
            PositionPolicy::GeneratedOnly => tokens.len().saturating_sub(1),
        };
        s = s.with_intervention(iv, from)?;
    }
    if let Some(site) = capture {
        s = s.with_capture(site)?;
    }
    let logits = s.extend(tokens)?;
    let captured = capture.map(|_| s.take_captured());
    Ok(ForwardOutput { logits, captured })
}
