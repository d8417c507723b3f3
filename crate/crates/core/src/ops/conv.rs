//! 2-D cross-correlation via patch matrices.
//!
//! An image is unfolded once into per-group `col` matrices; a convolution is
//! then a matrix product with the kernel. The dynamic convolution reuses one
//! unfolding for every expert of an image.

use super::linalg;
use crate::error::{dim_err, Result};
use crate::tensor::{ConvGeometry, Tensor};

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub ho: usize,
    pub wo: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvDims {
    /// `x` is `[Cin, H, W]` (per image) and `weight` is `[Cout, Cin/groups, k, k]`.
    pub fn new(cin: usize, h: usize, w: usize, weight: &[usize], geom: &ConvGeometry) -> Result<Self> {
        let [cout, cin_g, kh, kw] = match weight[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(dim_err("weight", format!("expected rank-4 kernel, got {weight:?}"))),
        };
        if kh != geom.kernel || kw != geom.kernel {
            return Err(dim_err(
                "kernel",
                format!("kernel {kh}x{kw} does not match geometry k={}", geom.kernel),
            ));
        }
        if cin % geom.groups != 0 || cout % geom.groups != 0 {
            return Err(dim_err(
                "groups",
                format!("{} groups must divide Cin={cin} and Cout={cout}", geom.groups),
            ));
        }
        if cin / geom.groups != cin_g {
            return Err(dim_err(
                "channels",
                format!(
                    "input has {cin} channels but kernel expects {} ({cin_g} per group x {} groups)",
                    cin_g * geom.groups,
                    geom.groups
                ),
            ));
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            ho: geom.output_size(h)?,
            wo: geom.output_size(w)?,
            k: geom.kernel,
            stride: geom.stride,
            pad: geom.padding,
            groups: geom.groups,
        })
    }

    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin_g() * self.k * self.k
    }

    /// Output indices `o` in `[lo, hi)` whose input `o*stride + off - pad` is in bounds.
    fn valid_range(&self, off: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if off >= self.pad {
            0
        } else {
            (self.pad - off).div_ceil(s)
        };
        let hi = if extent + self.pad > off {
            ((extent - 1 + self.pad - off) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Gathers the receptive fields of group `g` into `col[Cin/groups * k * k, Ho * Wo]`.
pub(crate) fn im2col(d: &ConvDims, x: &[f64], g: usize, col: &mut [f64]) {
    let (k, s, pad) = (d.k, d.stride, d.pad);
    let hw_out = d.ho * d.wo;
    let plane_in = d.h * d.w;
    let cin_g = d.cin_g();
    for icl in 0..cin_g {
        let xp = &x[(g * cin_g + icl) * plane_in..][..plane_in];
        for kh in 0..k {
            let (oy_lo, oy_hi) = d.valid_range(kh, d.h, d.ho);
            for kw in 0..k {
                let (ox_lo, ox_hi) = d.valid_range(kw, d.w, d.wo);
                let row = &mut col[((icl * k + kh) * k + kw) * hw_out..][..hw_out];
                row.fill(0.0);
                for oy in oy_lo..oy_hi {
                    let src = &xp[(oy * s + kh - pad) * d.w..][..d.w];
                    let dst = &mut row[oy * d.wo..][..d.wo];
                    if s == 1 {
                        dst[ox_lo..ox_hi].copy_from_slice(&src[ox_lo + kw - pad..ox_hi + kw - pad]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * s + kw - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatters `col` (layout of [`im2col`]) back onto the input gradient of group `g`.
pub(crate) fn col2im_acc(d: &ConvDims, col: &[f64], g: usize, gx: &mut [f64]) {
    let (k, s, pad) = (d.k, d.stride, d.pad);
    let hw_out = d.ho * d.wo;
    let plane_in = d.h * d.w;
    let cin_g = d.cin_g();
    for icl in 0..cin_g {
        let gp = &mut gx[(g * cin_g + icl) * plane_in..][..plane_in];
        for kh in 0..k {
            let (oy_lo, oy_hi) = d.valid_range(kh, d.h, d.ho);
            for kw in 0..k {
                let (ox_lo, ox_hi) = d.valid_range(kw, d.w, d.wo);
                let row = &col[((icl * k + kh) * k + kw) * hw_out..][..hw_out];
                for oy in oy_lo..oy_hi {
                    let dst = &mut gp[(oy * s + kh - pad) * d.w..][..d.w];
                    let src = &row[oy * d.wo..][..d.wo];
                    if s == 1 {
                        for (o, &v) in dst[ox_lo + kw - pad..ox_hi + kw - pad].iter_mut().zip(&src[ox_lo..ox_hi]) {
                            *o += v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox * s + kw - pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Scratch size for one group's `col` matrix.
pub(crate) fn col_len(d: &ConvDims) -> usize {
    d.cin_g() * d.k * d.k * d.ho * d.wo
}

/// `out[Cout, Ho, Wo] += conv(x, weight) (+ bias)` given the per-group `cols` of one image.
pub(crate) fn forward_from_cols(d: &ConvDims, cols: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let hw_out = d.ho * d.wo;
    let (cout_g, ckk) = (d.cout_g(), d.cin_g() * d.k * d.k);
    let cl = col_len(d);
    if let Some(b) = bias {
        for (oc, plane) in out.chunks_exact_mut(hw_out).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[oc]);
        }
    }
    for g in 0..d.groups {
        linalg::gemm_acc(
            &weight[g * cout_g * ckk..][..cout_g * ckk],
            &cols[g * cl..][..cl],
            &mut out[g * cout_g * hw_out..][..cout_g * hw_out],
            cout_g,
            ckk,
            hw_out,
        );
    }
}

/// All groups' `col` matrices of one image, concatenated.
pub(crate) fn image_cols(d: &ConvDims, x: &[f64]) -> Vec<f64> {
    let cl = col_len(d);
    let mut cols = vec![0.0; d.groups * cl];
    for g in 0..d.groups {
        im2col(d, x, g, &mut cols[g * cl..][..cl]);
    }
    cols
}

/// Weight and bias gradients from one image's `cols`, plus the `col`-space input gradient.
///
/// `gcols`, when given, accumulates `weight^T gy` per group; map it back with [`col2im_acc`].
pub(crate) fn backward_from_cols(
    d: &ConvDims,
    cols: &[f64],
    weight: &[f64],
    gy: &[f64],
    gcols: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let hw_out = d.ho * d.wo;
    let (cout_g, ckk) = (d.cout_g(), d.cin_g() * d.k * d.k);
    let cl = col_len(d);
    if let Some(gb) = gb {
        for (oc, plane) in gy.chunks_exact(hw_out).enumerate() {
            gb[oc] += plane.iter().sum::<f64>();
        }
    }
    if let Some(gw) = gw {
        for g in 0..d.groups {
            linalg::gemm_nt_acc(
                &gy[g * cout_g * hw_out..][..cout_g * hw_out],
                &cols[g * cl..][..cl],
                &mut gw[g * cout_g * ckk..][..cout_g * ckk],
                cout_g,
                hw_out,
                ckk,
            );
        }
    }
    if let Some(gc) = gcols {
        for g in 0..d.groups {
            linalg::gemm_tn_acc(
                &weight[g * cout_g * ckk..][..cout_g * ckk],
                &gy[g * cout_g * hw_out..][..cout_g * hw_out],
                &mut gc[g * cl..][..cl],
                cout_g,
                ckk,
                hw_out,
            );
        }
    }
}

/// Maps concatenated per-group `gcols` back to an image gradient.
pub(crate) fn cols_to_image(d: &ConvDims, gcols: &[f64], gx: &mut [f64]) {
    let cl = col_len(d);
    for g in 0..d.groups {
        col2im_acc(d, &gcols[g * cl..][..cl], g, gx);
    }
}

/// Batched convolution returning the output tensor and its dims.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: &ConvGeometry,
) -> Result<(Tensor, ConvDims)> {
    let [b, cin, h, w] = x.dims4()?;
    let d = ConvDims::new(cin, h, w, weight.shape(), geom)?;
    if let Some(bias) = bias {
        if bias.numel() != d.cout {
            return Err(dim_err(
                "bias",
                format!("bias has {} entries, expected Cout={}", bias.numel(), d.cout),
            ));
        }
    }
    let in_len = cin * h * w;
    let out_len = d.cout * d.ho * d.wo;
    let mut out = vec![0.0; b * out_len];
    for bi in 0..b {
        let cols = image_cols(&d, &x.data()[bi * in_len..(bi + 1) * in_len]);
        forward_from_cols(
            &d,
            &cols,
            weight.data(),
            bias.map(|t| t.data()),
            &mut out[bi * out_len..(bi + 1) * out_len],
        );
    }
    Ok((Tensor::from_parts(vec![b, d.cout, d.ho, d.wo], out), d))
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward(
    d: &ConvDims,
    x: &Tensor,
    weight: &Tensor,
    gy: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let b = x.shape()[0];
    let in_len = d.cin * d.h * d.w;
    let out_len = d.cout * d.ho * d.wo;
    let mut gx = want[0].then(|| vec![0.0; x.numel()]);
    let mut gw = want[1].then(|| vec![0.0; weight.numel()]);
    let mut gb = want[2].then(|| vec![0.0; d.cout]);
    let mut gcols = want[0].then(|| vec![0.0; d.groups * col_len(d)]);
    for bi in 0..b {
        let gyb = &gy[bi * out_len..(bi + 1) * out_len];
        let cols = want[1].then(|| image_cols(d, &x.data()[bi * in_len..(bi + 1) * in_len]));
        if let Some(gc) = gcols.as_deref_mut() {
            gc.fill(0.0);
        }
        backward_from_cols(
            d,
            cols.as_deref().unwrap_or(&[]),
            weight.data(),
            gyb,
            gcols.as_deref_mut(),
            gw.as_deref_mut(),
            gb.as_deref_mut(),
        );
        if let (Some(gc), Some(gx)) = (gcols.as_deref(), gx.as_deref_mut()) {
            cols_to_image(d, gc, &mut gx[bi * in_len..(bi + 1) * in_len]);
        }
    }
    (gx, gw, gb)
}
