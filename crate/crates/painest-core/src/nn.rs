//! Small model-layer helpers shared by the bilinear and temporal networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{he_uniform, zeros_var, Param, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Two relu layers with dropout after each, then a linear scalar output.
/// Covers both regression heads: descriptor -> 64-64-1 and the
/// time-distributed LSTM head 16-16-1.
pub struct Head {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
    name: String,
    in_dim: usize,
}

impl Head {
    pub fn init(name: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Head {
        Head {
            w1: he_uniform(rng, &[in_dim, hidden], in_dim),
            b1: zeros_var(&[hidden]),
            w2: he_uniform(rng, &[hidden, hidden], hidden),
            b2: zeros_var(&[hidden]),
            w3: he_uniform(rng, &[hidden, 1], hidden),
            b3: zeros_var(&[1]),
            name: name.to_string(),
            in_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// x: [1, in_dim] -> [1, 1]. Dropout probability `p` applies only in
    /// train mode, with masks drawn from `rng`.
    pub fn forward(&self, x: &Tensor, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let h1 = x.matmul(&self.w1)?.add_bias_rows(&self.b1)?.relu();
        let h1 = dropout(&h1, p, mode, rng)?;
        let h2 = h1.matmul(&self.w2)?.add_bias_rows(&self.b2)?.relu();
        let h2 = dropout(&h2, p, mode, rng)?;
        h2.matmul(&self.w3)?.add_bias_rows(&self.b3)
    }

    pub fn params(&self) -> ParamSet {
        ParamSet::new(vec![
            Param { name: format!("{}.fc1.w", self.name), tensor: self.w1.clone() },
            Param { name: format!("{}.fc1.b", self.name), tensor: self.b1.clone() },
            Param { name: format!("{}.fc2.w", self.name), tensor: self.w2.clone() },
            Param { name: format!("{}.fc2.b", self.name), tensor: self.b2.clone() },
            Param { name: format!("{}.fc3.w", self.name), tensor: self.w3.clone() },
            Param { name: format!("{}.fc3.b", self.name), tensor: self.b3.clone() },
        ])
    }
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `p` and survivors are scaled by 1/(1-p); eval mode is the identity.
pub fn dropout(x: &Tensor, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask_t = Tensor::new(mask, &x.shape())?;
    x.mul(&mask_t)
}
