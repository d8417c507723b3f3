//! Sliding-window 1-D convolution along the channel axis, shared across
//! spatial positions. Window responses are folded into the channel axis as
//! `out[b, o * n_win + w, h, x]`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ChanConvDims {
    pub cin: usize,
    pub hw: usize,
    pub kernels: usize,
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    pub n_win: usize,
}

/// Number of window positions along a padded channel axis.
pub fn window_count(cin: usize, window: usize, stride: usize, pad: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("channel window and stride must be positive".into()));
    }
    let padded = cin + 2 * pad;
    if padded < window {
        return Err(Error::Config(format!(
            "channel window {window} exceeds padded channel count {padded} (C_in={cin}, padding={pad})"
        )));
    }
    Ok((padded - window) / stride + 1)
}

impl ChanConvDims {
    pub fn new(cin: usize, hw: usize, kernels: usize, window: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Self {
            cin,
            hw,
            kernels,
            window,
            stride,
            pad,
            n_win: window_count(cin, window, stride, pad)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels * self.n_win
    }

    /// Source channel for window `w`, tap `j`, or `None` inside the zero padding.
    #[inline]
    fn source(&self, w: usize, j: usize) -> Option<usize> {
        let c = (w * self.stride + j) as isize - self.pad as isize;
        (c >= 0 && (c as usize) < self.cin).then_some(c as usize)
    }
}

/// `x` is `[B, Cin, HW]`, `kernels` is `[K, window]`, `bias` is `[K]`.
pub(crate) fn forward(d: &ChanConvDims, batch: usize, x: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    let oc = d.out_channels();
    let mut out = vec![0.0; batch * oc * d.hw];
    for b in 0..batch {
        for o in 0..d.kernels {
            for w in 0..d.n_win {
                let dst = &mut out[((b * oc) + o * d.n_win + w) * d.hw..][..d.hw];
                dst.iter_mut().for_each(|v| *v = bias[o]);
                for j in 0..d.window {
                    let Some(c) = d.source(w, j) else { continue };
                    let kv = kernels[o * d.window + j];
                    let src = &x[(b * d.cin + c) * d.hw..][..d.hw];
                    for (dv, &s) in dst.iter_mut().zip(src) {
                        *dv += kv * s;
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_kernels, grad_bias)`.
pub(crate) fn backward(
    d: &ChanConvDims,
    batch: usize,
    x: &[f64],
    kernels: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let oc = d.out_channels();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernels.len()];
    let mut gb = vec![0.0; d.kernels];
    for b in 0..batch {
        for o in 0..d.kernels {
            for w in 0..d.n_win {
                let gplane = &g[((b * oc) + o * d.n_win + w) * d.hw..][..d.hw];
                gb[o] += gplane.iter().sum::<f64>();
                for j in 0..d.window {
                    let Some(c) = d.source(w, j) else { continue };
                    let kv = kernels[o * d.window + j];
                    let base = (b * d.cin + c) * d.hw;
                    gk[o * d.window + j] += gplane
                        .iter()
                        .zip(&x[base..base + d.hw])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                    for (dst, &gv) in gx[base..base + d.hw].iter_mut().zip(gplane) {
                        *dst += kv * gv;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}
