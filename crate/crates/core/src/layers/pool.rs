use super::conv::conv_output_size;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Winner positions recorded by the forward pass, as flat indices into the input.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Max pooling over `k×k` windows. Ties go to the first element in row-major
/// scan order of the window.
pub fn maxpool2d_forward(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, PoolIndices)> {
    if k == 0 || stride == 0 {
        return Err(Error::invalid(format!(
            "pool size and stride must be positive (k={k}, stride={stride})"
        )));
    }
    let (c, h, w) = x.dims3()?;
    let (Some(oh), Some(ow)) = (conv_output_size(h, k, stride), conv_output_size(w, k, stride))
    else {
        return Err(Error::TooSmall(format!("{h}x{w} input smaller than {k}x{k} pool")));
    };
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for ky in 0..k {
                    let row = (ch * h + oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        let v = src[row + kx];
                        if best == usize::MAX || v > best_v {
                            best = row + kx;
                            best_v = v;
                        }
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
    }
    let indices = PoolIndices {
        input_shape: vec![c, h, w],
        output_shape: vec![c, oh, ow],
        argmax,
    };
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, indices))
}

pub fn maxpool2d_backward(indices: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != indices.output_shape.as_slice() {
        return Err(Error::shape(format!(
            "pool grad shape {:?} vs output {:?}",
            grad_out.shape(),
            indices.output_shape
        )));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in indices.argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    Ok(grad)
}
