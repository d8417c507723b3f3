//! Naive loop implementations used as reference oracles.
//!
//! Nothing here shares code with the fast kernels: every output element is
//! computed from its definition with plain index arithmetic.

use crate::config::CwmcConfig;
use crate::error::{dim_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{ConvGeometry, Tensor};

fn out_size(input: usize, g: &ConvGeometry) -> Result<usize> {
    let padded = input + 2 * g.padding;
    if padded < g.kernel {
        return Err(dim_err("spatial", format!("kernel {} larger than padded input {padded}", g.kernel)));
    }
    Ok((padded - g.kernel) / g.stride + 1)
}

/// Input pixel `(iy, ix)` for output `(oy, ox)` and tap `(ky, kx)`, or `None` in the padding.
fn tap(oy: usize, ox: usize, ky: usize, kx: usize, g: &ConvGeometry, h: usize, w: usize) -> Option<(usize, usize)> {
    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
    (iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w).then(|| (iy as usize, ix as usize))
}

/// Grouped cross-correlation, one output element at a time.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    let [b, cin, h, w] = x.dims4()?;
    let [cout, cin_g, kh, kw] = weight.dims4()?;
    if kh != g.kernel || kw != g.kernel || cin != cin_g * g.groups || cout % g.groups != 0 {
        return Err(dim_err("weight", format!("{:?} incompatible with input {:?}", weight.shape(), x.shape())));
    }
    let (ho, wo) = (out_size(h, &g)?, out_size(w, &g)?);
    let cout_g = cout / g.groups;
    let wt = |o: usize, i: usize, ky: usize, kx: usize| weight.data()[((o * cin_g + i) * kh + ky) * kw + kx];
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            let grp = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for i in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                if let Some((iy, ix)) = tap(oy, ox, ky, kx, &g, h, w) {
                                    acc += wt(o, i, ky, kx) * x.at4(n, grp * cin_g + i, iy, ix);
                                }
                            }
                        }
                    }
                    out[((n * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, cout, ho, wo], out)
}

/// Batched product `[..., n, k] x [..., k, m]` with identical leading axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] || a.shape()[ra - 1] != b.shape()[rb - 2] {
        return Err(dim_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (n, k, m) = (a.shape()[ra - 2], a.shape()[ra - 1], b.shape()[rb - 1]);
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let mut out = vec![0.0; batch * n * m];
    for t in 0..batch {
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[(t * n + i) * k + p] * b.data()[(t * k + p) * m + j];
                }
                out[(t * n + i) * m + j] = acc;
            }
        }
    }
    let mut shape = a.shape()[..ra - 2].to_vec();
    shape.extend([n, m]);
    Tensor::new(&shape, out)
}

/// Sliding 1-D kernels along channels; window responses folded as `o * n_win + w`.
pub fn channel_conv(x: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [b, cin, h, w] = x.dims4()?;
    let (nk, window) = match kernels.shape()[..] {
        [k, win] => (k, win),
        _ => return Err(dim_err("channel kernels", format!("{:?}", kernels.shape()))),
    };
    if cin + 2 * pad < window || stride == 0 {
        return Err(Error::Config(format!("window {window} does not fit {cin} channels with padding {pad}")));
    }
    let n_win = (cin + 2 * pad - window) / stride + 1;
    let oc = nk * n_win;
    let mut out = vec![0.0; b * oc * h * w];
    for n in 0..b {
        for o in 0..nk {
            for win in 0..n_win {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bias.data()[o];
                        for j in 0..window {
                            let c = (win * stride + j) as isize - pad as isize;
                            if c >= 0 && (c as usize) < cin {
                                acc += kernels.data()[o * window + j] * x.at4(n, c as usize, y, xx);
                            }
                        }
                        out[((n * oc + o * n_win + win) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(&[b, oc, h, w], out)
}

/// Channel-wise mixing convolution with the parameters stored under `prefix`.
pub fn cwmc(store: &ParamStore, prefix: &str, x: &Tensor, cfg: &CwmcConfig) -> Result<Tensor> {
    let get = |name: &str| {
        store
            .get(&format!("{prefix}.{name}"))
            .ok_or_else(|| Error::Config(format!("missing parameter `{prefix}.{name}`")))
    };
    let folded = channel_conv(x, get("chan.kernels")?, get("chan.bias")?, cfg.stride, cfg.pad)?;
    let pw = ConvGeometry::new(1, 1, 0, 1)?;
    let h = conv2d(&folded, get("compress.weight")?, Some(get("compress.bias")?), pw)?;
    conv2d(&h, get("project.weight")?, Some(get("project.bias")?), pw)
}

/// Dynamic convolution by materializing the routed kernel at every output pixel.
///
/// `kernels` is `[B, M, Cout, Cin/groups, k, k]`, `biases` `[B, M, Cout]`, `pi` `[B, M, Ho, Wo]`.
pub fn ddc(x: &Tensor, kernels: &Tensor, biases: &Tensor, pi: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let [b, cin, h, w] = x.dims4()?;
    let (m, cout, cin_g, k) = match kernels.shape()[..] {
        [kb, m, co, ci, k1, k2] if kb == b && k1 == g.kernel && k2 == g.kernel => (m, co, ci, k1),
        _ => return Err(dim_err("experts", format!("{:?}", kernels.shape()))),
    };
    if cin != cin_g * g.groups {
        return Err(dim_err("groups", format!("{cin} channels vs {cin_g} x {}", g.groups)));
    }
    let (ho, wo) = (out_size(h, &g)?, out_size(w, &g)?);
    if pi.shape() != [b, m, ho, wo] || biases.shape() != [b, m, cout] {
        return Err(dim_err("routing", format!("{:?} / {:?}", pi.shape(), biases.shape())));
    }
    let klen = cout * cin_g * k * k;
    let cout_g = cout / g.groups;
    let mut out = vec![0.0; b * cout * ho * wo];
    let mut mixed = vec![0.0; klen];
    let mut mixed_bias = vec![0.0; cout];
    for n in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                mixed.iter_mut().for_each(|v| *v = 0.0);
                mixed_bias.iter_mut().for_each(|v| *v = 0.0);
                for e in 0..m {
                    let p = pi.at4(n, e, oy, ox);
                    let ke = &kernels.data()[(n * m + e) * klen..][..klen];
                    for (mv, kv) in mixed.iter_mut().zip(ke) {
                        *mv += p * kv;
                    }
                    for (mb, bv) in mixed_bias.iter_mut().zip(&biases.data()[(n * m + e) * cout..][..cout]) {
                        *mb += p * bv;
                    }
                }
                for o in 0..cout {
                    let grp = o / cout_g;
                    let mut acc = mixed_bias[o];
                    for i in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some((iy, ix)) = tap(oy, ox, ky, kx, &g, h, w) {
                                    acc += mixed[((o * cin_g + i) * k + ky) * k + kx] * x.at4(n, grp * cin_g + i, iy, ix);
                                }
                            }
                        }
                    }
                    out[((n * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, cout, ho, wo], out)
}
