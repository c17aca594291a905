//! Valid (unpadded) 2-d convolution via im2col + GEMM.

use super::{LayerGrads, LayerParams};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvGrads {
    pub fn into_layer_grads(self) -> (Tensor, LayerGrads) {
        (
            self.input,
            LayerGrads {
                weights: self.weights,
                bias: self.bias,
            },
        )
    }
}

/// Output length of a valid convolution or pooling window along one axis.
pub fn conv_output_size(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || len < kernel {
        None
    } else {
        Some((len - kernel) / stride + 1)
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

fn geometry(input: &Tensor, params: &LayerParams, stride: usize) -> Result<Geometry> {
    let (c, h, w) = input.dims3()?;
    let [o, kc, kh, kw] = params.weights.shape()[..] else {
        return Err(Error::shape(format!(
            "conv weights must be O×C×Kh×Kw, got {:?}",
            params.weights.shape()
        )));
    };
    if kc != c {
        return Err(Error::shape(format!(
            "input has {c} channels but kernel expects {kc}"
        )));
    }
    if params.bias.shape() != [o] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {o} output channels",
            params.bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv stride must be positive"));
    }
    let (Some(oh), Some(ow)) = (
        conv_output_size(h, kh, stride),
        conv_output_size(w, kw, stride),
    ) else {
        return Err(Error::TooSmall(format!(
            "{h}x{w} input is smaller than the {kh}x{kw} kernel"
        )));
    };
    Ok(Geometry {
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
        stride,
    })
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let n = self.oh * self.ow;
        let mut cols = vec![0.0; self.patch_len() * n];
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        let src = (c * self.h + oy * self.stride + ky) * self.w + kx;
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if self.stride == 1 {
                            out.copy_from_slice(&input[src..src + self.ow]);
                        } else {
                            for (ox, v) in out.iter_mut().enumerate() {
                                *v = input[src + ox * self.stride];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.oh * self.ow;
        let mut img = vec![0.0; self.c * self.h * self.w];
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        let dst = (c * self.h + oy * self.stride + ky) * self.w + kx;
                        for ox in 0..self.ow {
                            img[dst + ox * self.stride] += src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
        img
    }
}

/// `C×H×W` input, `O×C×Kh×Kw` weights → `O×H′×W′` output with
/// `H′ = ⌊(H−Kh)/stride⌋ + 1`.
pub fn conv2d_forward(input: &Tensor, params: &LayerParams, stride: usize) -> Result<Tensor> {
    let g = geometry(input, params, stride)?;
    let n = g.oh * g.ow;
    let mut out = vec![0.0; g.o * n];
    for (row, &b) in out.chunks_exact_mut(n).zip(params.bias.data()) {
        row.fill(b);
    }
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input.data()
    } else {
        owned = g.im2col(input.data());
        &owned
    };
    gemm(
        g.o,
        g.patch_len(),
        n,
        1.0,
        params.weights.data(),
        Op::N,
        cols,
        Op::N,
        1.0,
        &mut out,
    );
    Tensor::from_vec(&[g.o, g.oh, g.ow], out)
}

pub fn conv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
    stride: usize,
) -> Result<ConvGrads> {
    conv2d_backward_impl(input, params, grad_out, stride, true)
}

/// Backward pass that may skip the input gradient (first layer of a network).
pub(crate) fn conv2d_backward_impl(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
    stride: usize,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let g = geometry(input, params, stride)?;
    if grad_out.shape() != [g.o, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "grad_out shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            [g.o, g.oh, g.ow]
        )));
    }
    let n = g.oh * g.ow;
    let k = g.patch_len();
    let go = grad_out.data();

    let bias: Vec<f64> = go.chunks_exact(n).map(|row| row.iter().sum()).collect();

    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input.data()
    } else {
        owned = g.im2col(input.data());
        &owned
    };
    let mut gw = vec![0.0; g.o * k];
    gemm(g.o, n, k, 1.0, go, Op::N, cols, Op::T, 0.0, &mut gw);

    let gin = if need_input_grad {
        let mut gcols = vec![0.0; k * n];
        gemm(
            k,
            g.o,
            n,
            1.0,
            params.weights.data(),
            Op::T,
            go,
            Op::N,
            0.0,
            &mut gcols,
        );
        if g.is_pointwise() {
            gcols
        } else {
            g.col2im(&gcols)
        }
    } else {
        vec![0.0; g.c * g.h * g.w]
    };

    Ok(ConvGrads {
        input: Tensor::from_vec(&[g.c, g.h, g.w], gin)?,
        weights: Tensor::from_vec(params.weights.shape(), gw)?,
        bias: Tensor::from_vec(&[g.o], bias)?,
    })
}
