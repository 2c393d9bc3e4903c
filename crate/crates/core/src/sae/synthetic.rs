// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse mixtures of a known random dictionary, for checking that SAE
//! training recovers sparse codes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticDictionary {
    pub d_in: usize,
    pub n_atoms: usize,
    /// Probability that a given atom is present in a sample.
    pub activation_probability: f64,
    /// Upper bound on the number of atoms present in a sample.
    pub max_active: usize,
    pub seed: u64,
}

impl Default for SyntheticDictionary {
    fn default() -> Self {
        SyntheticDictionary {
            d_in: 16,
            n_atoms: 32,
            activation_probability: 1.0 / 16.0,
            max_active: 3,
            seed: 0,
        }
    }
}

impl SyntheticDictionary {
    /// Unit-norm atoms, `[n_atoms x d_in]`.
    pub fn atoms(&self) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let mut data = Vec::with_capacity(self.n_atoms * self.d_in);
        for _ in 0..self.n_atoms {
            let row: Vec<f32> = (0..self.d_in).map(|_| normal.sample(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            data.extend(row.iter().map(|v| v / norm));
        }
        Tensor::new(vec![self.n_atoms, self.d_in], data).expect("sized")
    }

    /// `n` samples drawn with stream `stream` (use different streams for
    /// train and held-out splits). Coefficients are uniform in `[0, 1)`.
    pub fn samples(&self, n: usize, stream: u64) -> Tensor {
        let atoms = self.atoms();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let mut data = vec![0.0f32; n * self.d_in];
        let mut chosen = Vec::with_capacity(self.max_active);
        for row in data.chunks_mut(self.d_in) {
            // Each atom switches on independently; draws with too many
            // active atoms are redrawn.
            loop {
                chosen.clear();
                for j in 0..self.n_atoms {
                    if rng.random::<f64>() < self.activation_probability {
                        chosen.push(j);
                    }
                }
                if chosen.len() <= self.max_active {
                    break;
                }
            }
            for &j in &chosen {
                let c: f32 = rng.random_range(0.0..1.0);
                for (x, a) in row.iter_mut().zip(atoms.row(j)) {
                    *x += c * a;
                }
            }
        }
        Tensor::new(vec![n, self.d_in], data).expect("sized")
    }
}
