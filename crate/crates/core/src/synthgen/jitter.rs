//! Training-time augmentation: horizontal flip, rotation, scaling, brightness
//! and contrast.

use rand::Rng;

use super::render::background_texture;
use super::Sample;
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct JitterSpec {
    pub flip_probability: f64,
    /// Rotation drawn uniformly from `[−max, max]` degrees.
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Additive brightness drawn from `[−b, b]`.
    pub brightness: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
}

impl Default for JitterSpec {
    fn default() -> Self {
        JitterSpec {
            flip_probability: 0.5,
            max_rotation_deg: 20.0,
            scale_min: 0.8,
            scale_max: 1.2,
            brightness: 0.1,
            contrast_min: 0.8,
            contrast_max: 1.2,
        }
    }
}

impl JitterSpec {
    pub fn identity() -> Self {
        JitterSpec {
            flip_probability: 0.0,
            max_rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            brightness: 0.0,
            contrast_min: 1.0,
            contrast_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.flip_probability,
            self.max_rotation_deg,
            self.scale_min,
            self.scale_max,
            self.brightness,
            self.contrast_min,
            self.contrast_max,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("jitter ranges must be finite"));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::invalid("flip probability outside [0, 1]"));
        }
        if self.max_rotation_deg < 0.0 || self.brightness < 0.0 {
            return Err(Error::invalid("rotation and brightness ranges must be nonnegative"));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max) {
            return Err(Error::invalid("scale range must satisfy 0 < min ≤ max"));
        }
        if !(0.0 < self.contrast_min && self.contrast_min <= self.contrast_max) {
            return Err(Error::invalid("contrast range must satisfy 0 < min ≤ max"));
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> JitterDraw {
        fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
            if lo < hi {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        }
        JitterDraw {
            flip: self.flip_probability > 0.0 && rng.gen::<f64>() < self.flip_probability,
            rotation_deg: uniform(rng, -self.max_rotation_deg, self.max_rotation_deg),
            scale: uniform(rng, self.scale_min, self.scale_max),
            brightness: uniform(rng, -self.brightness, self.brightness),
            contrast: uniform(rng, self.contrast_min, self.contrast_max),
        }
    }
}

/// One concrete draw of the jitter parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterDraw {
    pub flip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl JitterDraw {
    fn is_rigid_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0
    }

    /// Source coordinate sampled by output pixel `(x, y)`: undo rotation and
    /// scaling about the image center, then undo the flip.
    fn source(&self, x: usize, y: usize, h: usize, w: usize) -> (f64, f64) {
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let (mut sx, sy) = if self.is_rigid_identity() {
            (x as f64, y as f64)
        } else {
            let (s, c) = (-self.rotation_deg.to_radians()).sin_cos();
            let (u, v) = (x as f64 - cx, y as f64 - cy);
            (
                cx + (c * u - s * v) / self.scale,
                cy + (s * u + c * v) / self.scale,
            )
        };
        if self.flip {
            sx = w as f64 - 1.0 - sx;
        }
        (sx, sy)
    }
}

const EDGE_TOLERANCE: f64 = 1e-9;

fn in_frame(v: f64, len: usize) -> bool {
    v >= -EDGE_TOLERANCE && v <= len as f64 - 1.0 + EDGE_TOLERANCE
}

/// Apply the geometric and photometric parts of `draw` to an image in
/// `[0, 1]`. Pixels that map outside the frame are filled with fresh
/// background texture drawn from `rng`.
pub fn jitter_image<R: Rng + ?Sized>(image: &Tensor, draw: &JitterDraw, rng: &mut R) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut fill: Option<Tensor> = None;
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = draw.source(x, y, h, w);
            if draw.is_rigid_identity() {
                let (ix, iy) = (sx as usize, sy as usize);
                for ch in 0..c {
                    out.set3(ch, y, x, image.at3(ch, iy, ix));
                }
            } else if in_frame(sx, w) && in_frame(sy, h) {
                let sx = sx.clamp(0.0, w as f64 - 1.0);
                let sy = sy.clamp(0.0, h as f64 - 1.0);
                let (x0, y0) = ((sx.floor() as usize).min(w - 1), (sy.floor() as usize).min(h - 1));
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                for ch in 0..c {
                    let v = (1.0 - fy) * ((1.0 - fx) * image.at3(ch, y0, x0) + fx * image.at3(ch, y0, x1))
                        + fy * ((1.0 - fx) * image.at3(ch, y1, x0) + fx * image.at3(ch, y1, x1));
                    out.set3(ch, y, x, v);
                }
            } else {
                let tex = fill.get_or_insert_with(|| background_texture(h, w, rng));
                for ch in 0..c.min(3) {
                    out.set3(ch, y, x, tex.at3(ch, y, x));
                }
            }
        }
    }
    if draw.brightness != 0.0 || draw.contrast != 1.0 {
        let mean = out.data().iter().sum::<f64>() / out.len() as f64;
        for v in out.data_mut() {
            *v = ((*v - mean) * draw.contrast + mean + draw.brightness).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

fn jitter_mask(mask: &LabelMask, draw: &JitterDraw) -> LabelMask {
    let (h, w) = mask.dims();
    let mut out = LabelMask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = draw.source(x, y, h, w);
            let (rx, ry) = (sx.round(), sy.round());
            if rx >= 0.0 && ry >= 0.0 && (rx as usize) < w && (ry as usize) < h {
                out.set(y, x, mask.get(ry as usize, rx as usize));
            }
        }
    }
    out
}

/// Jitter a full sample; the mask follows the image geometry with
/// nearest-neighbor sampling and the label is unchanged.
pub fn apply_jitter<R: Rng + ?Sized>(sample: &Sample, spec: &JitterSpec, rng: &mut R) -> Result<Sample> {
    let draw = spec.draw(rng);
    Ok(Sample {
        image: jitter_image(&sample.image, &draw, rng)?,
        label: sample.label,
        gt_mask: jitter_mask(&sample.gt_mask, &draw),
    })
}

/// Random `crop×crop` window. Images smaller than `crop` on either side are
/// first rescaled (bilinear) so their smaller side equals `crop`.
pub fn training_crop<R: Rng + ?Sized>(image: &Tensor, crop: usize, rng: &mut R) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    if crop == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    let resized;
    let src = if h.min(w) < crop {
        let f = crop as f64 / h.min(w) as f64;
        let nh = ((h as f64 * f).round() as usize).max(crop);
        let nw = ((w as f64 * f).round() as usize).max(crop);
        resized = resize_bilinear(image, nh, nw)?;
        &resized
    } else {
        image
    };
    let (_, h, w) = src.dims3()?;
    let y0 = rng.gen_range(0..=h - crop);
    let x0 = rng.gen_range(0..=w - crop);
    src.crop3(y0, x0, crop, crop)
}

pub(crate) fn resize_bilinear(image: &Tensor, nh: usize, nw: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let mut out = Tensor::zeros(&[c, nh, nw]);
    let sy = if nh > 1 { (h - 1) as f64 / (nh - 1) as f64 } else { 0.0 };
    let sx = if nw > 1 { (w - 1) as f64 / (nw - 1) as f64 } else { 0.0 };
    for y in 0..nh {
        let fy = y as f64 * sy;
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = x as f64 * sx;
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let v = (1.0 - ty) * ((1.0 - tx) * image.at3(ch, y0, x0) + tx * image.at3(ch, y0, x1))
                    + ty * ((1.0 - tx) * image.at3(ch, y1, x0) + tx * image.at3(ch, y1, x1));
                out.set3(ch, y, x, v);
            }
        }
    }
    Ok(out)
}
