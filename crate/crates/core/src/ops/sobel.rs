//! Sobel gradient magnitude `|Gx| + |Gy|` with replicate padding.

const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamp_index(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

/// Per-plane responses `(gx, gy)` for `planes` stacked `h x w` images.
pub(crate) fn sobel_xy(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gy = vec![0.0; x.len()];
    for p in 0..planes {
        let img = &x[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                let mut sx = 0.0;
                let mut sy = 0.0;
                for (i, (kx_row, ky_row)) in KX.iter().zip(&KY).enumerate() {
                    let rr = clamp_index(r, i as isize - 1, h);
                    for j in 0..3 {
                        let cc = clamp_index(c, j as isize - 1, w);
                        let v = img[rr * w + cc];
                        sx += kx_row[j] * v;
                        sy += ky_row[j] * v;
                    }
                }
                gx[p * h * w + r * w + c] = sx;
                gy[p * h * w + r * w + c] = sy;
            }
        }
    }
    (gx, gy)
}

pub(crate) fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adjoint of the magnitude map given the saved directional responses.
pub(crate) fn sobel_backward(
    gx: &[f64],
    gy: &[f64],
    g: &[f64],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    for p in 0..planes {
        let base = p * h * w;
        for r in 0..h {
            for c in 0..w {
                let o = base + r * w + c;
                let sx = g[o] * sign0(gx[o]);
                let sy = g[o] * sign0(gy[o]);
                if sx == 0.0 && sy == 0.0 {
                    continue;
                }
                for i in 0..3 {
                    let rr = clamp_index(r, i as isize - 1, h);
                    for j in 0..3 {
                        let cc = clamp_index(c, j as isize - 1, w);
                        out[base + rr * w + cc] += sx * KX[i][j] + sy * KY[i][j];
                    }
                }
            }
        }
    }
    out
}
