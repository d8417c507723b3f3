//! Tensor-level primitives.
//!
//! These are the non-recording counterparts of the [`Tape`](crate::autograd::Tape)
//! methods and share their kernels.

pub(crate) mod act;
pub(crate) mod chanconv;
pub(crate) mod conv;
pub(crate) mod layout;
pub(crate) mod linalg;
pub(crate) mod norm;
pub(crate) mod sobel;

pub use act::{gelu_scalar, sigmoid_scalar};
pub use chanconv::window_count;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{ConvGeometry, Tensor};

/// Cross-correlation of `x[B, Cin, H, W]` with `weight[Cout, Cin/groups, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: ConvGeometry) -> Result<Tensor> {
    conv::conv2d_forward(x, weight, bias, &geom).map(|(t, _)| t)
}

/// Batched matrix product over identical leading axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, n, k, m, shape) = crate::autograd::matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; batch * n * m];
    for i in 0..batch {
        linalg::gemm_acc(
            &a.data()[i * n * k..(i + 1) * n * k],
            &b.data()[i * k * m..(i + 1) * k * m],
            &mut out[i * n * m..(i + 1) * n * m],
            n,
            k,
            m,
        );
    }
    Tensor::new(&shape, out)
}

/// Softmax of `x / tau` over the last axis.
pub fn softmax(x: &Tensor, tau: f64) -> Result<Tensor> {
    softmax_along(x, x.rank().saturating_sub(1), tau)
}

pub fn softmax_along(x: &Tensor, axis: usize, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if axis >= x.rank() {
        return Err(dim_err("softmax", format!("axis {axis} out of rank {}", x.rank())));
    }
    let lay = act::axis_layout(x.shape(), axis);
    Tensor::new(x.shape(), act::softmax_axis(x.data(), lay, tau))
}

/// Renormalized softmax over the `k` largest entries along `axis`.
pub fn topk_softmax(x: &Tensor, axis: usize, k: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(dim_err("topk", format!("axis {axis} out of rank {}", x.rank())));
    }
    if k == 0 || k > x.shape()[axis] {
        return Err(Error::Parameter(format!("top-k needs 1 <= k <= {}, got {k}", x.shape()[axis])));
    }
    let lay = act::axis_layout(x.shape(), axis);
    Tensor::new(x.shape(), act::topk_softmax_axis(x.data(), lay, k))
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &[f64], shift: &[f64], eps: f64) -> Result<Tensor> {
    let axis = x.rank().checked_sub(1).ok_or_else(|| dim_err("rank", "scalar input"))?;
    let len = x.shape()[axis];
    if gain.len() != len || shift.len() != len {
        return Err(dim_err(
            "layer_norm affine",
            format!("gain/shift must have {len} entries, got {} and {}", gain.len(), shift.len()),
        ));
    }
    let lay = act::axis_layout(x.shape(), axis);
    Tensor::new(x.shape(), norm::layer_norm_axis(x.data(), lay, gain, shift, eps).0)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(act::gelu_scalar)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(act::sigmoid_scalar)
}

/// Global average pooling `[B, C, H, W] -> [B, C]`.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    Tensor::new(&[b, c], layout::plane_means(x.data(), h * w))
}

/// Sobel magnitude `|Gx| + |Gy|` with replicate padding, per channel plane.
pub fn sobel_gradient(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    if h < 3 || w < 3 {
        return Err(dim_err("spatial", format!("Sobel needs at least 3x3, got {h}x{w}")));
    }
    let (gx, gy) = sobel::sobel_xy(x.data(), b * c, h, w);
    Tensor::new(x.shape(), gx.iter().zip(&gy).map(|(a, b)| a.abs() + b.abs()).collect())
}

/// Interleaves the channels of two equally shaped maps: `[a0, b0, a1, b1, ...]`.
pub fn channel_shuffle(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_same_shape(b, "channel_shuffle")?;
    let [bs, c, h, w] = a.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(2 * a.numel());
    for bi in 0..bs {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            out.extend_from_slice(&a.data()[off..off + hw]);
            out.extend_from_slice(&b.data()[off..off + hw]);
        }
    }
    Tensor::new(&[bs, 2 * c, h, w], out)
}

/// Undoes [`channel_shuffle`], returning `concat(a, b)` along channels.
pub fn channel_unshuffle(x: &Tensor) -> Result<Tensor> {
    let [bs, c2, h, w] = x.dims4()?;
    if c2 % 2 != 0 {
        return Err(dim_err("channels", format!("odd channel count {c2}")));
    }
    let (c, hw) = (c2 / 2, h * w);
    let mut out = vec![0.0; x.numel()];
    for bi in 0..bs {
        for ci in 0..c2 {
            let dst = if ci % 2 == 0 { ci / 2 } else { c + ci / 2 };
            out[(bi * c2 + dst) * hw..][..hw].copy_from_slice(&x.data()[(bi * c2 + ci) * hw..][..hw]);
        }
    }
    Tensor::new(x.shape(), out)
}
