use crate::aggregation::{aggregate_maps, first_argmax, Aggregator};
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::segnet::{softmax, ScoreMaps};
use crate::tensor::Tensor;

/// Per-pixel class probabilities, `K×h×w`; each pixel's vector sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMaps(pub Tensor);

/// Posteriors multiplied by the image-level prior (not renormalized).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedMaps(pub Tensor);

/// Image-level class probabilities, background first.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePrior(pub Vec<f64>);

fn per_pixel<F: FnMut(&mut [f64])>(t: &Tensor, mut f: F) -> Result<Tensor> {
    let (k, h, w) = t.dims3()?;
    let n = h * w;
    let mut out = t.clone();
    let mut buf = vec![0.0; k];
    for i in 0..n {
        for (c, b) in buf.iter_mut().enumerate() {
            *b = t.data()[c * n + i];
        }
        f(&mut buf);
        for (c, b) in buf.iter().enumerate() {
            out.data_mut()[c * n + i] = *b;
        }
    }
    Ok(out)
}

/// Softmax across classes at every location.
pub fn pixel_posteriors(maps: &ScoreMaps) -> Result<ProbMaps> {
    per_pixel(maps.tensor(), |v| {
        let p = softmax(v);
        v.copy_from_slice(&p);
    })
    .map(ProbMaps)
}

/// Aggregate each plane with LSE of sharpness `r`, then softmax across classes.
pub fn image_prior(maps: &ScoreMaps, r: f64) -> Result<ImagePrior> {
    let scores = aggregate_maps(maps.tensor(), Aggregator::lse(r)?)?;
    Ok(ImagePrior(softmax(scores.values())))
}

/// `ŷ′(k) = p_ij(k) × p(k)` at every pixel for the object classes; the
/// background plane is left unweighted. Scaling background by `p(0)` as well
/// would hand every pixel of a confidently classified image to its object
/// class, since `p(0) ≈ 0` there.
pub fn apply_ilp(probs: &ProbMaps, prior: &ImagePrior) -> Result<WeightedMaps> {
    let (k, _, _) = probs.0.dims3()?;
    if prior.0.len() != k {
        return Err(Error::shape(format!(
            "prior has {} classes, maps have {k}",
            prior.0.len()
        )));
    }
    let mut out = probs.0.clone();
    for (c, &p) in prior.0.iter().enumerate().skip(1) {
        out.plane_mut(c).iter_mut().for_each(|v| *v *= p);
    }
    Ok(WeightedMaps(out))
}

/// Per-pixel argmax over all planes; ties go to the lower class index.
pub fn argmax_labels(maps: &Tensor) -> Result<LabelMask> {
    let (k, h, w) = maps.dims3()?;
    if k > 256 {
        return Err(Error::invalid("more than 256 classes do not fit in a label mask"));
    }
    let n = h * w;
    let mut mask = LabelMask::new(h, w);
    let mut buf = vec![0.0; k];
    for (i, label) in mask.labels_mut().iter_mut().enumerate() {
        for (c, b) in buf.iter_mut().enumerate() {
            *b = maps.data()[c * n + i];
        }
        *label = first_argmax(&buf) as u8;
    }
    Ok(mask)
}
