//! Bilinear pooling of the two stream feature maps and the regression head.
//!
//! For feature grids F_a, F_b of shape [L, C] (L spatial locations, C
//! channels), the pooled descriptor is u = sum over locations of
//! fa(l) fb(l)^T, computed as F_a^T F_b and flattened; it then passes
//! through the signed square root v = sign(u) sqrt(|u|) and l2
//! normalization w = v / ||v||_2. The head regresses a scalar from w
//! through two dropout-regularized 64-unit relu layers and a linear output.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, NUM_BLOCKS, OUT_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{Head, Mode};
use crate::params::{Param, ParamSet};
use crate::rng::{derive_rng, tag};
use crate::tensor::Tensor;

pub const DESCRIPTOR_DIM: usize = OUT_CHANNELS * OUT_CHANNELS; // 1024
pub const HEAD_UNITS: usize = 64;

#[derive(Debug, Clone, Copy)]
pub struct BilinearConfig {
    /// Clamp on the signed-sqrt derivative (singular at 0).
    pub sqrt_max_grad: f64,
    /// Norm guard: vectors with ||v|| <= eps map to zero.
    pub l2_eps: f64,
    pub head_dropout: f64,
}

impl Default for BilinearConfig {
    fn default() -> Self {
        BilinearConfig { sqrt_max_grad: 1e3, l2_eps: 1e-12, head_dropout: 0.5 }
    }
}

/// u = F_a^T F_b flattened to [Ca*Cb]. Both grids must share the location
/// count; gradients flow to both streams.
pub fn pool_bilinear(fa: &Tensor, fb: &Tensor) -> Result<Tensor> {
    let sa = fa.shape();
    let sb = fb.shape();
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::ShapeMismatch { op: "pool_bilinear location grids", lhs: sa, rhs: sb });
    }
    let (ca, cb) = (sa[1], sb[1]);
    fa.transpose2d()?.matmul(fb)?.reshape(&[ca * cb])
}

/// Full descriptor: bilinear pool, signed sqrt, l2 normalization.
pub fn descriptor_from_grids(fa: &Tensor, fb: &Tensor, cfg: &BilinearConfig) -> Result<Tensor> {
    Ok(pool_bilinear(fa, fb)?
        .signed_sqrt(cfg.sqrt_max_grad)
        .l2_normalize(cfg.l2_eps))
}

/// The stage-1 network: two backbone streams, bilinear descriptor, head.
pub struct BilinearNet {
    pub stream_a: Backbone,
    pub stream_b: Backbone,
    pub head: Head,
    pub cfg: BilinearConfig,
}

impl BilinearNet {
    pub fn init(seed: u64, cfg: BilinearConfig) -> BilinearNet {
        BilinearNet {
            stream_a: Backbone::init("stream_a", &mut derive_rng(seed, &[tag("init"), 0])),
            stream_b: Backbone::init("stream_b", &mut derive_rng(seed, &[tag("init"), 1])),
            head: Head::init("head", DESCRIPTOR_DIM, HEAD_UNITS, &mut derive_rng(seed, &[tag("init"), 2])),
            cfg,
        }
    }

    /// Descriptor from stream inputs that enter at block `start` (0 = raw
    /// frame [224,224,3]; higher starts consume prefix feature maps).
    pub fn descriptor_from(&self, xa: &Tensor, xb: &Tensor, start: usize) -> Result<Tensor> {
        let fa = Backbone::to_grid(&self.stream_a.forward_from(xa, start)?)?;
        let fb = Backbone::to_grid(&self.stream_b.forward_from(xb, start)?)?;
        descriptor_from_grids(&fa, &fb, &self.cfg)
    }

    /// Per-frame descriptor (full forward, both streams see the same frame).
    pub fn descriptor(&self, frame: &Tensor) -> Result<Tensor> {
        self.descriptor_from(frame, frame, 0)
    }

    /// Raw score from stream inputs; clamp to the facial range at inference.
    pub fn score_from(
        &self,
        xa: &Tensor,
        xb: &Tensor,
        start: usize,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let d = self.descriptor_from(xa, xb, start)?;
        let row = d.reshape(&[1, DESCRIPTOR_DIM])?;
        self.head.forward(&row, self.cfg.head_dropout, mode, rng)
    }

    pub fn set_freeze_prefix(&self, freeze: usize) {
        assert!(freeze <= NUM_BLOCKS, "freeze_prefix must be 0..={NUM_BLOCKS}");
        self.stream_a.set_freeze_prefix(freeze);
        self.stream_b.set_freeze_prefix(freeze);
    }

    pub fn params(&self) -> ParamSet {
        let mut v: Vec<Param> = Vec::new();
        v.extend(self.stream_a.params().iter().cloned());
        v.extend(self.stream_b.params().iter().cloned());
        v.extend(self.head.params().iter().cloned());
        ParamSet::new(v)
    }
}
