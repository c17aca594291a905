use crate::error::{Error, Result};
use crate::segnet::{forward, Mode, NetworkParams, NetworkSpec, ScoreMaps};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DenseMode {
    /// `d²` shifted forward passes, interleaved. Exact.
    #[default]
    ShiftAndStitch,
    /// One forward pass, nearest-neighbor upsampled by `d`. Approximate.
    Upsample,
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Mirror-pad (edge pixel not repeated) by the given amounts on each side.
pub fn reflect_pad(image: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let (nh, nw) = (h + top + bottom, w + left + right);
    let mut out = Tensor::zeros(&[c, nh, nw]);
    for ch in 0..c {
        for y in 0..nh {
            let sy = reflect_index(y as isize - top as isize, h);
            for x in 0..nw {
                let sx = reflect_index(x as isize - left as isize, w);
                out.set3(ch, y, x, image.at3(ch, sy, sx));
            }
        }
    }
    Ok(out)
}

/// Padding that centers every output on its input pixel: the receptive field
/// `R` is split as `⌊(R−1)/2⌋` before and the rest after.
fn centering_pad(spec: &NetworkSpec) -> (usize, usize) {
    let r = spec.receptive_field();
    let before = (r - 1) / 2;
    (before, r - 1 - before)
}

/// Full-resolution score maps for a normalized `3×h×w` image: output pixel
/// `(i, j)` is the network's score for the receptive-field patch centered on
/// input pixel `(i, j)` of the reflect-padded image.
pub fn dense_scores(image: &Tensor, params: &NetworkParams, spec: &NetworkSpec) -> Result<ScoreMaps> {
    dense_scores_with(image, params, spec, DenseMode::ShiftAndStitch)
}

pub fn dense_scores_with(
    image: &Tensor,
    params: &NetworkParams,
    spec: &NetworkSpec,
    mode: DenseMode,
) -> Result<ScoreMaps> {
    let (_, h, w) = image.dims3()?;
    let d = spec.downsample_factor();
    if d == 0 {
        return Err(Error::invalid("downsample factor must be positive"));
    }
    let r = spec.receptive_field();
    let (before, after) = centering_pad(spec);
    let padded = reflect_pad(image, before, after, before, after)?;
    let k = spec.class_count();
    let mut out = Tensor::zeros(&[k, h, w]);

    match mode {
        DenseMode::Upsample => {
            let maps = forward(&padded, params, spec, Mode::Eval)?;
            let (mh, mw) = (maps.height(), maps.width());
            for c in 0..k {
                for y in 0..h {
                    for x in 0..w {
                        let v = maps.tensor().at3(c, (y / d).min(mh - 1), (x / d).min(mw - 1));
                        out.set3(c, y, x, v);
                    }
                }
            }
        }
        DenseMode::ShiftAndStitch => {
            for dy in 0..d.min(h) {
                let rows = (h - dy).div_ceil(d);
                for dx in 0..d.min(w) {
                    let cols = (w - dx).div_ceil(d);
                    let window = padded.crop3(dy, dx, (rows - 1) * d + r, (cols - 1) * d + r)?;
                    let maps = forward(&window, params, spec, Mode::Eval)?;
                    if (maps.height(), maps.width()) != (rows, cols) {
                        return Err(Error::shape(format!(
                            "shifted pass produced {}x{} outputs, expected {rows}x{cols}; \
                             pooling does not tile the receptive field",
                            maps.height(),
                            maps.width()
                        )));
                    }
                    for c in 0..k {
                        for a in 0..rows {
                            for b in 0..cols {
                                out.set3(c, dy + a * d, dx + b * d, maps.tensor().at3(c, a, b));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ScoreMaps(out))
}
