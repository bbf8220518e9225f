//! Stand-in convolutional backbone: four conv blocks (3x3 same-pad conv,
//! relu, 2x2 max pool) taking a 224x224x3 frame to a 14x14x32 feature map.
//! Two independently initialized instances form the A/B streams of the
//! bilinear extractor. `freeze_prefix` counts whole blocks from the input;
//! frozen blocks neither receive gradients nor enter the optimizer.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{he_uniform, zeros_var, Param, ParamSet};
use crate::tensor::Tensor;

pub const INPUT_SIZE: usize = 224;
pub const NUM_BLOCKS: usize = 4;
pub const BLOCK_CHANNELS: [usize; NUM_BLOCKS] = [8, 16, 32, 32];
pub const OUT_SPATIAL: usize = 14; // 224 / 2^4
pub const OUT_CHANNELS: usize = 32;
/// Feature map flattened to (locations, channels) for bilinear pooling.
pub const NUM_LOCATIONS: usize = OUT_SPATIAL * OUT_SPATIAL;

struct ConvBlock {
    w: Tensor, // [3,3,c_in,c_out]
    b: Tensor, // [c_out]
}

impl ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.w, Some(&self.b), 1, 1)?.relu().maxpool2()
    }
}

pub struct Backbone {
    blocks: Vec<ConvBlock>,
    name: String,
}

impl Backbone {
    /// He-uniform seeded init; `name` prefixes parameter names (e.g. "backbone_a").
    pub fn init(name: &str, rng: &mut ChaCha8Rng) -> Backbone {
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut c_in = 3;
        for &c_out in BLOCK_CHANNELS.iter() {
            let fan_in = 3 * 3 * c_in;
            blocks.push(ConvBlock {
                w: he_uniform(rng, &[3, 3, c_in, c_out], fan_in),
                b: zeros_var(&[c_out]),
            });
            c_in = c_out;
        }
        Backbone { blocks, name: name.to_string() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Run blocks `start..NUM_BLOCKS` on `x`. `start = 0` is the full
    /// backbone ([224,224,3] in); larger starts consume the matching
    /// intermediate feature map (the frozen prefix's output).
    pub fn forward_from(&self, x: &Tensor, start: usize) -> Result<Tensor> {
        if start > NUM_BLOCKS {
            return Err(Error::InvalidArgument {
                what: "forward_from",
                reason: format!("start block {start} > {NUM_BLOCKS}"),
            });
        }
        let mut h = x.clone();
        for block in &self.blocks[start..] {
            h = block.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_from(x, 0)
    }

    /// Run only blocks `0..end` (the frozen prefix when `end` is the freeze
    /// boundary). `end = 0` returns the input unchanged.
    pub fn forward_prefix(&self, x: &Tensor, end: usize) -> Result<Tensor> {
        if end > NUM_BLOCKS {
            return Err(Error::InvalidArgument {
                what: "forward_prefix",
                reason: format!("end block {end} > {NUM_BLOCKS}"),
            });
        }
        let mut h = x.clone();
        for block in &self.blocks[..end] {
            h = block.forward(&h)?;
        }
        Ok(h)
    }

    /// Reshape a [14,14,32] map to the [locations, channels] grid the
    /// bilinear pool consumes.
    pub fn to_grid(map: &Tensor) -> Result<Tensor> {
        let s = map.shape();
        if s.len() != 3 {
            return Err(Error::InvalidArgument {
                what: "to_grid",
                reason: format!("expected a rank-3 feature map, got {s:?}"),
            });
        }
        map.reshape(&[s[0] * s[1], s[2]])
    }

    /// Spatial side length of block `i`'s output (blocks halve each time).
    pub fn block_out_spatial(i: usize) -> usize {
        INPUT_SIZE >> (i + 1)
    }

    /// Output element count of block `i` (0-based), used to size prefix
    /// feature buffers.
    pub fn block_out_elems(i: usize) -> usize {
        let s = Self::block_out_spatial(i);
        s * s * BLOCK_CHANNELS[i]
    }

    pub fn set_freeze_prefix(&self, freeze: usize) {
        for (i, block) in self.blocks.iter().enumerate() {
            let trainable = i >= freeze;
            block.w.set_requires_grad(trainable);
            block.b.set_requires_grad(trainable);
        }
    }

    pub fn params(&self) -> ParamSet {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            out.push(Param { name: format!("{}.block{}.w", self.name, i + 1), tensor: block.w.clone() });
            out.push(Param { name: format!("{}.block{}.b", self.name, i + 1), tensor: block.b.clone() });
        }
        ParamSet::new(out)
    }
}

/// Load a substitute feature map: a rank-3 `[h,w,c]` tensor file computed
/// elsewhere (e.g. by a real pretrained backbone). Any channel count is
/// accepted; the bilinear pool adapts to the grid it is given.
pub fn load_feature_map(path: &std::path::Path) -> Result<Tensor> {
    let (data, shape, _) = crate::tensor::read_bten(path)?;
    if shape.len() != 3 {
        return Err(Error::TensorFormat {
            path: path.to_path_buf(),
            field: "rank",
            reason: format!("feature map must be rank 3, got rank {}", shape.len()),
        });
    }
    Tensor::new(data, &shape)
}
