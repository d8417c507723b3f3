//! Layer normalization along an arbitrary axis.

pub(crate) struct LnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes every slice along the middle index of `(outer, len, inner)`,
/// then applies `gain[j] * xhat + shift[j]`.
pub(crate) fn layer_norm_axis(
    x: &[f64],
    layout: (usize, usize, usize),
    gain: &[f64],
    shift: &[f64],
    eps: f64,
) -> (Vec<f64>, LnSaved) {
    let (outer, len, inner) = layout;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mean = (0..len).map(|j| x[idx(j)]).sum::<f64>() / len as f64;
            let var = (0..len).map(|j| (x[idx(j)] - mean).powi(2)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[o * inner + i] = inv;
            for j in 0..len {
                let xh = (x[idx(j)] - mean) * inv;
                xhat[idx(j)] = xh;
                y[idx(j)] = gain[j] * xh + shift[j];
            }
        }
    }
    (y, LnSaved { xhat, inv_std })
}

/// Returns `(grad_x, grad_gain, grad_shift)`.
pub(crate) fn layer_norm_axis_backward(
    saved: &LnSaved,
    gain: &[f64],
    g: &[f64],
    layout: (usize, usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (outer, len, inner) = layout;
    let mut gx = vec![0.0; g.len()];
    let mut ggain = vec![0.0; len];
    let mut gshift = vec![0.0; len];
    let n = len as f64;
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let inv = saved.inv_std[o * inner + i];
            let mut mean_gxh = 0.0;
            let mut mean_gxh_xh = 0.0;
            for j in 0..len {
                let gxh = g[idx(j)] * gain[j];
                mean_gxh += gxh;
                mean_gxh_xh += gxh * saved.xhat[idx(j)];
                ggain[j] += g[idx(j)] * saved.xhat[idx(j)];
                gshift[j] += g[idx(j)];
            }
            mean_gxh /= n;
            mean_gxh_xh /= n;
            for j in 0..len {
                let gxh = g[idx(j)] * gain[j];
                gx[idx(j)] = inv * (gxh - mean_gxh - saved.xhat[idx(j)] * mean_gxh_xh);
            }
        }
    }
    (gx, ggain, gshift)
}
