// SPDX-License-Identifier: MIT OR Apache-2.0

//! Differentiable forward pass recorded on a [`Tape`]. Used for training
//! and gradient checks; inference goes through [`super::Session`].

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

use super::params::{BlockParams, LmParams};
use super::{Intervention, LmConfig, PositionPolicy};

/// Registers every weight as a trainable leaf, in canonical order.
pub fn register<F: Real>(tape: &mut Tape<F>, weights: &LmParams<Tensor<F>>) -> LmParams<Var> {
    weights.map(|t| tape.param(t.clone()))
}

/// Records the forward pass for one sequence and returns the `[T x V]`
/// logits. When `intervention` is given its delta is added at the hook site
/// for the positions its policy covers.
pub fn logits<F: Real>(
    tape: &mut Tape<F>,
    cfg: &LmConfig,
    p: &LmParams<Var>,
    tokens: &[usize],
    intervention: Option<&Intervention>,
) -> Result<Var> {
    let t = tokens.len();
    if t == 0 {
        return Err(Error::contract("forward over an empty sequence"));
    }
    if t > cfg.context_length {
        return Err(Error::contract(format!(
            "sequence of {t} tokens exceeds context length {}",
            cfg.context_length
        )));
    }
    if let Some(iv) = intervention {
        iv.check(cfg)?;
    }
    let positions: Vec<usize> = (0..t).collect();
    let tok = tape.gather_rows(p.tok_embed, tokens)?;
    let pos = tape.gather_rows(p.pos_embed, &positions)?;
    let mut x = tape.add(tok, pos)?;
    for (layer, block) in p.blocks.iter().enumerate() {
        x = block_forward(tape, cfg, block, x)?;
        if let Some(iv) = intervention.filter(|iv| iv.site.layer == layer) {
            let from = match iv.policy {
                PositionPolicy::AllPositions => 0,
                PositionPolicy::GeneratedOnly => t - 1,
            };
            let d = cfg.d_model;
            let mut add = Tensor::<F>::zeros(&[t, d]);
            let delta: Vec<F> = iv.delta.cast::<F>().into_data();
            for r in from..t {
                add.row_mut(r).copy_from_slice(&delta);
            }
            let c = tape.constant(add);
            x = tape.add(x, c)?;
        }
    }
    let h = tape.layer_norm(x, p.ln_f_gain, p.ln_f_bias)?;
    let out = tape.matmul(h, p.unembed)?;
    tape.add_row_bias(out, p.unembed_bias)
}

fn block_forward<F: Real>(
    tape: &mut Tape<F>,
    cfg: &LmConfig,
    b: &BlockParams<Var>,
    x: Var,
) -> Result<Var> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();

    let h = tape.layer_norm(x, b.ln1_gain, b.ln1_bias)?;
    let qkv = tape.matmul(h, b.w_qkv)?;
    let qkv = tape.add_row_bias(qkv, b.b_qkv)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let q = tape.slice_cols(qkv, head * dh, dh)?;
        let k = tape.slice_cols(qkv, d + head * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + head * dh, dh)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale)?;
        let att = tape.causal_softmax(scores)?;
        heads.push(tape.matmul(att, v)?);
    }
    let o = tape.concat_cols(&heads)?;
    let o = tape.matmul(o, b.w_attn_out)?;
    let o = tape.add_row_bias(o, b.b_attn_out)?;
    let x = tape.add(x, o)?;

    let h = tape.layer_norm(x, b.ln2_gain, b.ln2_bias)?;
    let m = tape.matmul(h, b.w_mlp_in)?;
    let m = tape.add_row_bias(m, b.b_mlp_in)?;
    let m = tape.gelu(m)?;
    let m = tape.matmul(m, b.w_mlp_out)?;
    let m = tape.add_row_bias(m, b.b_mlp_out)?;
    tape.add(x, m)
}

/// Next-token cross-entropy of `tokens` (mean over the `T - 1` predicted
/// positions). Returns the scalar loss node.
pub fn sequence_loss<F: Real>(
    tape: &mut Tape<F>,
    cfg: &LmConfig,
    p: &LmParams<Var>,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.len() < 2 {
        return Err(Error::contract("sequence loss needs at least two tokens"));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    let l = logits(tape, cfg, p, inputs, None)?;
    tape.cross_entropy(l, targets)
}
