// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Real, Tensor};

use super::LmConfig;

/// Per-layer parameters. Generic over the slot type so the same layout
/// serves for weight tensors and for tape variables.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    /// `[d_model x 3 d_model]`, columns ordered q | k | v.
    pub w_qkv: T,
    pub b_qkv: T,
    pub w_attn_out: T,
    pub b_attn_out: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w_mlp_in: T,
    pub b_mlp_in: T,
    pub w_mlp_out: T,
    pub b_mlp_out: T,
}

/// Every named parameter of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct LmParams<T> {
    pub tok_embed: T,
    pub pos_embed: T,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_f_gain: T,
    pub ln_f_bias: T,
    pub unembed: T,
    pub unembed_bias: T,
}

pub type LmWeights<F = f32> = LmParams<Tensor<F>>;

const BLOCK_FIELDS: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.w_qkv",
    "attn.b_qkv",
    "attn.w_out",
    "attn.b_out",
    "ln2.gain",
    "ln2.bias",
    "mlp.w_in",
    "mlp.b_in",
    "mlp.w_out",
    "mlp.b_out",
];

impl<T> BlockParams<T> {
    fn slots(&self) -> [&T; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_attn_out,
            &self.b_attn_out,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_mlp_in,
            &self.b_mlp_in,
            &self.w_mlp_out,
            &self.b_mlp_out,
        ]
    }

    fn slots_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_attn_out,
            &mut self.b_attn_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_mlp_in,
            &mut self.b_mlp_in,
            &mut self.w_mlp_out,
            &mut self.b_mlp_out,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("parameter list too short");
        BlockParams {
            ln1_gain: next(),
            ln1_bias: next(),
            w_qkv: next(),
            b_qkv: next(),
            w_attn_out: next(),
            b_attn_out: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            w_mlp_in: next(),
            b_mlp_in: next(),
            w_mlp_out: next(),
            b_mlp_out: next(),
        }
    }
}

impl<T> LmParams<T> {
    /// Canonical parameter names in serialization order.
    pub fn names(n_layers: usize) -> Vec<String> {
        let mut names = vec!["tok_embed".to_string(), "pos_embed".to_string()];
        for l in 0..n_layers {
            names.extend(BLOCK_FIELDS.iter().map(|f| format!("blocks.{l}.{f}")));
        }
        names.extend(
            ["ln_f.gain", "ln_f.bias", "unembed", "unembed_bias"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    /// Slots in canonical order.
    pub fn iter(&self) -> Vec<&T> {
        let mut v = vec![&self.tok_embed, &self.pos_embed];
        for b in &self.blocks {
            v.extend(b.slots());
        }
        v.extend([&self.ln_f_gain, &self.ln_f_bias, &self.unembed, &self.unembed_bias]);
        v
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut v = vec![&mut self.tok_embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            v.extend(b.slots_mut());
        }
        v.extend([
            &mut self.ln_f_gain,
            &mut self.ln_f_bias,
            &mut self.unembed,
            &mut self.unembed_bias,
        ]);
        v
    }

    /// Rebuilds a container from slots in canonical order.
    pub fn from_flat(n_layers: usize, items: Vec<T>) -> Self {
        let mut it = items.into_iter();
        let tok_embed = it.next().expect("tok_embed");
        let pos_embed = it.next().expect("pos_embed");
        let blocks = (0..n_layers).map(|_| BlockParams::from_iter(&mut it)).collect();
        let p = LmParams {
            tok_embed,
            pos_embed,
            blocks,
            ln_f_gain: it.next().expect("ln_f.gain"),
            ln_f_bias: it.next().expect("ln_f.bias"),
            unembed: it.next().expect("unembed"),
            unembed_bias: it.next().expect("unembed_bias"),
        };
        assert!(it.next().is_none(), "parameter list too long");
        p
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LmParams<U> {
        let items = self.iter().into_iter().map(&mut f).collect();
        LmParams::from_flat(self.blocks.len(), items)
    }
}

/// Shape of every parameter in canonical order.
pub fn param_shapes(cfg: &LmConfig) -> Vec<Vec<usize>> {
    let (d, m, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
    let mut shapes = vec![vec![v, d], vec![cfg.context_length, d]];
    for _ in 0..cfg.n_layers {
        shapes.extend([
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, m],
            vec![m],
            vec![m, d],
            vec![d],
        ]);
    }
    shapes.extend([vec![d], vec![d], vec![d, v], vec![v]]);
    shapes
}

impl<F: Real> LmParams<Tensor<F>> {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual output
    /// projections scaled by 1/sqrt(2 n_layers), unit gains, zero biases.
    pub fn init(cfg: &LmConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let base = Normal::new(0.0f64, 0.02).unwrap();
        let resid = Normal::new(0.0f64, 0.02 / (2.0 * cfg.n_layers as f64).sqrt()).unwrap();
        let names = Self::names(cfg.n_layers);
        let items = param_shapes(cfg)
            .into_iter()
            .zip(&names)
            .map(|(shape, name)| {
                let n: usize = shape.iter().product();
                let data: Vec<F> = if name.ends_with("gain") {
                    vec![F::one(); n]
                } else if shape.len() == 1 {
                    vec![F::zero(); n]
                } else {
                    let dist = if name.ends_with("attn.w_out") || name.ends_with("mlp.w_out") {
                        &resid
                    } else {
                        &base
                    };
                    (0..n).map(|_| F::lit(dist.sample(&mut rng))).collect()
                };
                Tensor::new(shape, data).expect("shape product")
            })
            .collect();
        LmParams::from_flat(cfg.n_layers, items)
    }

    pub fn cast<G: Real>(&self) -> LmParams<Tensor<G>> {
        self.map(|t| t.cast())
    }

    pub fn num_params(&self) -> usize {
        self.iter().iter().map(|t| t.len()).sum()
    }
}
