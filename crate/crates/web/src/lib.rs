//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function has a plain Rust counterpart so it can be tested
//! natively.

use milseg::aggregation::{aggregate_backward, aggregate_forward, Aggregator};
use milseg::densepriors::{felzenszwalb_segment, objectness_map, Proposal, ProposalKind, ProposalSet, Region};
use milseg::synthgen::generate_sample;
use wasm_bindgen::prelude::*;

fn js_err(e: milseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[mean, lse, max, w_0, …, w_{n-1}]` where `w` are the LSE gradient weights.
pub fn lse_summary(plane: &[f64], r: f64) -> milseg::Result<Vec<f64>> {
    let kind = Aggregator::lse(r)?;
    let mean = aggregate_forward(plane, Aggregator::Sum)? / plane.len() as f64;
    let mut out = vec![mean, aggregate_forward(plane, kind)?, aggregate_forward(plane, Aggregator::Max)?];
    out.extend(aggregate_backward(plane, kind, 1.0)?);
    Ok(out)
}

#[wasm_bindgen(js_name = lseSummary)]
pub fn lse_summary_js(plane: &[f64], r: f64) -> Result<Vec<f64>, JsError> {
    lse_summary(plane, r).map_err(js_err)
}

/// A synthetic image and its superpixels, as RGBA bytes for a canvas.
#[wasm_bindgen]
pub struct Segmentation {
    size: usize,
    image: Vec<u8>,
    overlay: Vec<u8>,
    count: usize,
}

#[wasm_bindgen]
impl Segmentation {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn count(&self) -> usize {
        self.count
    }

    /// Source image, RGBA.
    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    /// Each superpixel filled with its mean color and outlined, RGBA.
    pub fn overlay(&self) -> Vec<u8> {
        self.overlay.clone()
    }
}

fn rgba(r: f64, g: f64, b: f64) -> [u8; 4] {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(r), q(g), q(b), 255]
}

pub fn segment_sample(label: usize, size: usize, seed: u64, k: f64, min_size: usize) -> milseg::Result<Segmentation> {
    if size < milseg::synthgen::MIN_IMAGE_SIZE || size > 512 {
        return Err(milseg::Error::InvalidArgument(format!(
            "size must be between {} and 512",
            milseg::synthgen::MIN_IMAGE_SIZE
        )));
    }
    let sample = generate_sample(label.min(6), size, seed, 0);
    let parts = felzenszwalb_segment(&sample.image, k, min_size)?;
    let n = size * size;
    let px = |i: usize| [0, 1, 2].map(|c| sample.image.data()[c * n + i]);

    let mut mean = vec![[0.0; 3]; parts.count()];
    for (i, &id) in parts.ids().iter().enumerate() {
        for (m, v) in mean[id].iter_mut().zip(px(i)) {
            *m += v;
        }
    }
    for (m, &s) in mean.iter_mut().zip(&parts.component_sizes()) {
        m.iter_mut().for_each(|v| *v /= s as f64);
    }

    let mut image = Vec::with_capacity(4 * n);
    let mut overlay = Vec::with_capacity(4 * n);
    for y in 0..size {
        for x in 0..size {
            let [r, g, b] = px(y * size + x);
            image.extend(rgba(r, g, b));
            let id = parts.id(y, x);
            let edge = (x + 1 < size && parts.id(y, x + 1) != id) || (y + 1 < size && parts.id(y + 1, x) != id);
            let [r, g, b] = if edge { [1.0, 1.0, 1.0] } else { mean[id] };
            overlay.extend(rgba(r, g, b));
        }
    }
    Ok(Segmentation { size, image, overlay, count: parts.count() })
}

#[wasm_bindgen(js_name = segmentSample)]
pub fn segment_sample_js(label: usize, size: usize, seed: u64, k: f64, min_size: usize) -> Result<Segmentation, JsError> {
    segment_sample(label, size, seed, k, min_size).map_err(js_err)
}

/// Objectness of an `h×w` grid from boxes given as flat
/// `[x0, y0, x1, y1, score, …]` (inclusive corners, scores in `[0, 1]`).
pub fn box_objectness(boxes: &[f64], h: usize, w: usize) -> milseg::Result<Vec<f64>> {
    if boxes.len() % 5 != 0 {
        return Err(milseg::Error::InvalidArgument("boxes must come in groups of five numbers".into()));
    }
    let mut proposals = Vec::with_capacity(boxes.len() / 5);
    for b in boxes.chunks_exact(5) {
        if b[..4].iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(milseg::Error::InvalidArgument("box corners must be nonnegative".into()));
        }
        let [x0, y0, x1, y1] = [b[0], b[1], b[2], b[3]].map(|v| v as usize);
        let region = Region::Box { x0: x0.min(x1), y0: y0.min(y1), x1: x0.max(x1), y1: y0.max(y1) };
        proposals.push(Proposal { region, score: b[4].clamp(0.0, 1.0) });
    }
    let set = ProposalSet { kind: ProposalKind::Boxes, proposals };
    Ok(objectness_map(&set, h, w)?.values)
}

#[wasm_bindgen(js_name = boxObjectness)]
pub fn box_objectness_js(boxes: &[f64], h: usize, w: usize) -> Result<Vec<f64>, JsError> {
    box_objectness(boxes, h, w).map_err(js_err)
}
