// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference checks of tape gradients, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use steerlab::lm::{graph, LmConfig, LmParams};
use steerlab::numerics::{Tape, Tensor, Var};

const STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
    pub elements: usize,
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

fn loss_of(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).data()[0]
}

/// Compares analytic and numeric gradients of `build` at `inputs`, on at
/// most `per_input` randomly chosen elements of each input.
pub fn check(
    name: &'static str,
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    per_input: usize,
    build: &Build,
) -> Check {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).expect("backward");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    let mut elements = 0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let n = inputs[i].len();
        let picks: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            (0..per_input).map(|_| rng.random_range(0..n)).collect()
        };
        for k in picks {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= STEP;
            let numeric = (loss_of(&plus, build) - loss_of(&minus, build)) / (2.0 * STEP);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
            elements += 1;
        }
    }
    Check {
        name,
        seed,
        max_rel_err: worst,
        elements,
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Sum of uniforms: cheap, bounded, roughly bell-shaped.
            (0..4).map(|_| rng.random::<f64>()).sum::<f64>() - 2.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so kinks (ReLU, |x|) are never crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(x * w)` for a fixed random `w`, so every output element carries a
/// distinct weight into the loss.
fn project(tape: &mut Tape<f64>, x: Var, w: &Tensor<f64>) -> Var {
    let c = tape.constant(w.clone());
    let m = tape.mul(x, c).unwrap();
    tape.sum(m).unwrap()
}

/// One check per differentiable tape operation.
pub fn op_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (r, k, c) = (3, 4, 5);
    let w_rc = normal(&mut rng, &[r, c]);
    let w_rr = normal(&mut rng, &[r, r]);
    let w_kk = normal(&mut rng, &[k, k]);

    let a = normal(&mut rng, &[r, k]);
    let b = normal(&mut rng, &[k, c]);
    out.push(check("matmul", seed, vec![a.clone(), b], 64, &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project(t, y, &w_rc)
    }));
    let bt = normal(&mut rng, &[r, k]);
    out.push(check("matmul_nt", seed, vec![a.clone(), bt], 64, &|t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        project(t, y, &w_rr)
    }));
    let x = normal(&mut rng, &[r, c]);
    let y = normal(&mut rng, &[r, c]);
    out.push(check("add", seed, vec![x.clone(), y.clone()], 64, &|t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        project(t, s, &w_rc)
    }));
    out.push(check("sub", seed, vec![x.clone(), y.clone()], 64, &|t, v| {
        let s = t.sub(v[0], v[1]).unwrap();
        project(t, s, &w_rc)
    }));
    out.push(check("mul", seed, vec![x.clone(), y.clone()], 64, &|t, v| {
        let s = t.mul(v[0], v[1]).unwrap();
        project(t, s, &w_rc)
    }));
    let bias = normal(&mut rng, &[c]);
    out.push(check("add_row_bias", seed, vec![x.clone(), bias.clone()], 64, &|t, v| {
        let s = t.add_row_bias(v[0], v[1]).unwrap();
        project(t, s, &w_rc)
    }));
    let s = rng.random_range(-2.0..2.0);
    out.push(check("scale", seed, vec![x.clone()], 64, &|t, v| {
        let o = t.scale(v[0], s).unwrap();
        project(t, o, &w_rc)
    }));
    out.push(check("gelu", seed, vec![x.clone()], 64, &|t, v| {
        let o = t.gelu(v[0]).unwrap();
        project(t, o, &w_rc)
    }));
    let kinked = away_from_zero(&mut rng, &[r, c]);
    out.push(check("relu", seed, vec![kinked.clone()], 64, &|t, v| {
        let o = t.relu(v[0]).unwrap();
        project(t, o, &w_rc)
    }));
    let gain = normal(&mut rng, &[c]);
    out.push(check("layer_norm", seed, vec![x.clone(), gain, bias], 64, &|t, v| {
        let o = t.layer_norm(v[0], v[1], v[2]).unwrap();
        project(t, o, &w_rc)
    }));
    out.push(check("softmax_rows", seed, vec![x.clone()], 64, &|t, v| {
        let o = t.softmax_rows(v[0]).unwrap();
        project(t, o, &w_rc)
    }));
    let sq = normal(&mut rng, &[k, k]);
    out.push(check("causal_softmax", seed, vec![sq], 64, &|t, v| {
        let o = t.causal_softmax(v[0]).unwrap();
        project(t, o, &w_kk)
    }));
    let w_r2 = normal(&mut rng, &[r, 2]);
    out.push(check("slice_cols", seed, vec![x.clone()], 64, &|t, v| {
        let o = t.slice_cols(v[0], 1, 2).unwrap();
        project(t, o, &w_r2)
    }));
    let w_cat = normal(&mut rng, &[r, c + k]);
    out.push(check("concat_cols", seed, vec![x.clone(), a.clone()], 64, &|t, v| {
        let o = t.concat_cols(&[v[0], v[1]]).unwrap();
        project(t, o, &w_cat)
    }));
    let w_2c = normal(&mut rng, &[2, c]);
    out.push(check("slice_rows", seed, vec![x.clone()], 64, &|t, v| {
        let o = t.slice_rows(v[0], 1, 2).unwrap();
        project(t, o, &w_2c)
    }));
    let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..r)).collect();
    let w_gather = normal(&mut rng, &[ids.len(), c]);
    out.push(check("gather_rows", seed, vec![x.clone()], 64, &|t, v| {
        let o = t.gather_rows(v[0], &ids).unwrap();
        project(t, o, &w_gather)
    }));
    let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    out.push(check("cross_entropy", seed, vec![x.clone()], 64, &|t, v| t.cross_entropy(v[0], &targets).unwrap()));
    out.push(check("sum", seed, vec![x.clone()], 64, &|t, v| {
        let g = t.gelu(v[0]).unwrap();
        t.sum(g).unwrap()
    }));
    out.push(check("sum_squares", seed, vec![x], 64, &|t, v| t.sum_squares(v[0]).unwrap()));
    out.push(check("abs_sum", seed, vec![kinked], 64, &|t, v| t.abs_sum(v[0]).unwrap()));
    out
}

/// Next-token loss of a 2-layer model with jittered weights.
pub fn lm_loss_check(seed: u64, per_tensor: usize) -> Check {
    let cfg = LmConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        vocab_size: 256,
        context_length: 16,
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let base = LmParams::<Tensor<f64>>::init(&cfg);
    let flat: Vec<Tensor<f64>> = base
        .iter()
        .into_iter()
        .map(|t| {
            let mut t = t.clone();
            for v in t.data_mut() {
                *v += 0.1 * ((0..4).map(|_| rng.random::<f64>()).sum::<f64>() - 2.0);
            }
            t
        })
        .collect();
    // Frequent tokens so embedding rows receive gradient.
    let alphabet = [2usize, 65, 66, 67, 32, 3];
    let tokens: Vec<usize> = (0..9).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
    let n_layers = cfg.n_layers;
    check("lm_loss", seed, flat, per_tensor, &|t, v| {
        let p = LmParams::from_flat(n_layers, v.to_vec());
        graph::sequence_loss(t, &cfg, &p, &tokens).unwrap()
    })
}
