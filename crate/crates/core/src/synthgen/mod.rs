//! Deterministic synthetic shape corpus.
//!
//! Each image holds at most one filled shape (disk, square, triangle, then
//! regular polygons with more sides) over a low-frequency colored texture.
//! Label 0 images contain texture only. The ground-truth mask is carried for
//! evaluation but is not reachable from the training API.

mod jitter;
mod render;

pub use jitter::{apply_jitter, jitter_image, training_crop, JitterDraw, JitterSpec};
pub use render::{background_texture, ShapeKind};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::rng::{stream, Stream};
use crate::segnet::LabeledImage;
use crate::tensor::Tensor;

/// Smallest image side the generator supports.
pub const MIN_IMAGE_SIZE: usize = 24;

/// Foreground fraction bounds every shape sample satisfies.
pub const MIN_FOREGROUND: f64 = 0.01;
pub const MAX_FOREGROUND: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×h×w`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub(crate) gt_mask: LabelMask,
}

impl Sample {
    /// Assemble a sample from externally loaded data (e.g. a dataset directory).
    pub fn new(image: Tensor, label: usize, gt_mask: LabelMask) -> Result<Self> {
        let (_, h, w) = image.dims3()?;
        if gt_mask.dims() != (h, w) {
            return Err(Error::shape(format!(
                "mask is {:?} but image is {h}x{w}",
                gt_mask.dims()
            )));
        }
        Ok(Sample {
            image,
            label,
            gt_mask,
        })
    }

    /// Pixel-level ground truth, for evaluation only.
    pub fn ground_truth(&self) -> &LabelMask {
        &self.gt_mask
    }

    /// Image and label only: the view training code gets.
    pub fn labeled(&self) -> LabeledImage<'_> {
        LabeledImage {
            image: &self.image,
            label: self.label,
        }
    }
}

/// `per_class` samples of each of `classes` labels (0 = background),
/// interleaved so sample `i` has label `i % classes`.
pub fn generate_dataset(classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Vec<Sample>> {
    if classes < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 classes (background plus one shape), got {classes}"
        )));
    }
    if classes > 255 {
        return Err(Error::invalid("at most 255 classes fit in an 8-bit mask"));
    }
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::TooSmall(format!(
            "image size {image_size} below the minimum {MIN_IMAGE_SIZE} for shape rendering"
        )));
    }
    Ok((0..classes * per_class)
        .map(|i| generate_sample(i % classes, image_size, seed, i as u64))
        .collect())
}

/// The `index`-th sample of a dataset with master seed `seed`.
pub fn generate_sample(label: usize, image_size: usize, seed: u64, index: u64) -> Sample {
    let mut rng = stream(seed, Stream::Data, index);
    let mut image = background_texture(image_size, image_size, &mut rng);
    let mut mask = LabelMask::new(image_size, image_size);
    if label > 0 {
        render::draw_shape(&mut image, &mut mask, ShapeKind::for_label(label), label as u8, &mut rng);
    }
    Sample {
        image,
        label,
        gt_mask: mask,
    }
}

/// Per-channel zero mean and unit variance; channels with variance below
/// `1e-8` are scaled by `1/√1e-8` after centering (so constants map to 0).
pub fn normalize_image(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let n = (h * w) as f64;
    let mut out = image.clone();
    for ch in 0..c {
        let plane = out.plane_mut(ch);
        if plane.iter().all(|&v| v == plane[0]) {
            plane.fill(0.0);
            continue;
        }
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / var.max(1e-8).sqrt();
        plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    Ok(out)
}
