//! Frame representation and the pixel-level ops the pipeline needs: PNG IO,
//! crop + bilinear resize, and the train-time augmentations (rotation,
//! horizontal flip, brightness). Frames hold RGB f32 in [0,1]; none of this
//! participates in gradient computation.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_ROTATE_DEG: f64 = 30.0;
pub const BRIGHTNESS_RANGE: (f64, f64) = (0.75, 1.25);

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    /// RGB interleaved, row-major, values in [0,1].
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Frame> {
        if data.len() != h * w * 3 {
            return Err(Error::InvalidShape {
                shape: vec![h, w, 3],
                reason: format!("frame data length {} != {}", data.len(), h * w * 3),
            });
        }
        Ok(Frame { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: f32) -> Frame {
        Frame { h, w, data: vec![v; h * w * 3] }
    }

    #[inline]
    fn px(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.w + x) * 3 + c]
    }

    /// Bilinear sample at fractional coords, clamping to the border
    /// (replicate semantics).
    fn sample(&self, sy: f64, sx: f64, c: usize) -> f32 {
        let sy = sy.clamp(0.0, (self.h - 1) as f64);
        let sx = sx.clamp(0.0, (self.w - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let fy = (sy - y0 as f64) as f32;
        let fx = (sx - x0 as f64) as f32;
        let top = self.px(y0, x0, c) * (1.0 - fx) + self.px(y0, x1, c) * fx;
        let bot = self.px(y1, x0, c) * (1.0 - fx) + self.px(y1, x1, c) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// To an [h,w,3] f64 tensor for the network.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        Tensor::new(data, &[self.h, self.w, 3]).expect("frame dims")
    }
}

pub fn load_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Frame::new(h, w, data)
}

pub fn save_png(path: &Path, frame: &Frame) -> Result<()> {
    let bytes: Vec<u8> = frame
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(frame.w as u32, frame.h as u32, bytes)
        .expect("sized buffer");
    img.save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

/// Crop region in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Crop (full frame when `None`) and resize to `out x out` with bilinear
/// interpolation. Source coords follow src = (dst + 0.5) * scale - 0.5,
/// clamped to the frame, which makes a same-size full-frame call an exact
/// identity.
pub fn crop_resize(frame: &Frame, crop: Option<CropRect>, out: usize) -> Result<Frame> {
    if out == 0 {
        return Err(Error::InvalidArgument { what: "crop_resize", reason: "output size 0".into() });
    }
    let rect = crop.unwrap_or(CropRect { x: 0.0, y: 0.0, w: frame.w as f64, h: frame.h as f64 });
    if rect.w <= 0.0 || rect.h <= 0.0 {
        return Err(Error::InvalidArgument {
            what: "crop_resize",
            reason: format!("crop rect has non-positive size: {rect:?}"),
        });
    }
    let scale_y = rect.h / out as f64;
    let scale_x = rect.w / out as f64;
    let mut data = vec![0.0f32; out * out * 3];
    for dy in 0..out {
        let sy = (dy as f64 + 0.5) * scale_y - 0.5 + rect.y;
        for dx in 0..out {
            let sx = (dx as f64 + 0.5) * scale_x - 0.5 + rect.x;
            for c in 0..3 {
                data[(dy * out + dx) * 3 + c] = frame.sample(sy, sx, c);
            }
        }
    }
    Frame::new(out, out, data)
}

/// Rotate around the frame center by `deg` (counterclockwise), bilinear
/// sampling with replicated borders.
pub fn rotate(frame: &Frame, deg: f64) -> Frame {
    let rad = deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = (frame.h as f64 - 1.0) / 2.0;
    let cx = (frame.w as f64 - 1.0) / 2.0;
    let mut data = vec![0.0f32; frame.data.len()];
    for y in 0..frame.h {
        let ry = y as f64 - cy;
        for x in 0..frame.w {
            let rx = x as f64 - cx;
            // inverse map: rotate destination coords by -deg
            let sx = cos * rx + sin * ry + cx;
            let sy = -sin * rx + cos * ry + cy;
            for c in 0..3 {
                data[(y * frame.w + x) * 3 + c] = frame.sample(sy, sx, c);
            }
        }
    }
    Frame { h: frame.h, w: frame.w, data }
}

pub fn hflip(frame: &Frame) -> Frame {
    let mut data = vec![0.0f32; frame.data.len()];
    for y in 0..frame.h {
        for x in 0..frame.w {
            let src = (y * frame.w + (frame.w - 1 - x)) * 3;
            let dst = (y * frame.w + x) * 3;
            data[dst..dst + 3].copy_from_slice(&frame.data[src..src + 3]);
        }
    }
    Frame { h: frame.h, w: frame.w, data }
}

/// Scale all channels by `factor` and clip to [0,1].
pub fn brightness(frame: &Frame, factor: f64) -> Frame {
    let f = factor as f32;
    let data: Vec<f32> = frame.data.iter().map(|&v| (v * f).clamp(0.0, 1.0)).collect();
    Frame { h: frame.h, w: frame.w, data }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub flipped: bool,
    pub brightness: f64,
}

pub fn sample_augment_params(rng: &mut ChaCha8Rng) -> AugmentParams {
    AugmentParams {
        angle_deg: rng.gen_range(-MAX_ROTATE_DEG..=MAX_ROTATE_DEG),
        flipped: rng.gen::<f64>() < 0.5,
        brightness: rng.gen_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1),
    }
}

/// Apply fixed augmentation parameters: rotate, then flip, then brightness.
pub fn augment_with(frame: &Frame, p: &AugmentParams) -> Frame {
    let mut out = rotate(frame, p.angle_deg);
    if p.flipped {
        out = hflip(&out);
    }
    brightness(&out, p.brightness)
}

/// Sample parameters from `rng` and apply them, returning both.
pub fn augment(frame: &Frame, rng: &mut ChaCha8Rng) -> (Frame, AugmentParams) {
    let p = sample_augment_params(rng);
    (augment_with(frame, &p), p)
}
