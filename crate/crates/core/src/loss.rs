//! Unsupervised fusion objective.
//!
//! Four terms compare the fused image `F` with the infrared `I` and visible
//! `V` sources: intensity against the pixelwise maximum, Sobel gradients
//! against the pixelwise maximum gradient, gradient-weighted SSIM, and the
//! gradients of the residual maps `|F - V|` and `|F - I|` against the other
//! source. Every mean runs over all elements of the batch.
//!
//! Gradients flow to `F` only; the SSIM weights are computed from the
//! sources' values and treated as constants.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::LossWeights;
use crate::error::{dim_err, Result};
use crate::tensor::{ConvGeometry, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const OMEGA_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub intensity: f64,
    pub gradient: f64,
    pub ssim: f64,
    #[serde(rename = "struct")]
    pub structure: f64,
    pub total: f64,
    pub omega_ir: f64,
    pub omega_vis: f64,
    pub weights: LossWeights,
}

/// Recorded loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub intensity: Var,
    pub gradient: Var,
    pub ssim: Var,
    pub structure: Var,
    pub total: Var,
    pub omega_ir: f64,
    pub omega_vis: f64,
    pub weights: LossWeights,
}

impl LossTerms {
    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            intensity: tape.item(self.intensity),
            gradient: tape.item(self.gradient),
            ssim: tape.item(self.ssim),
            structure: tape.item(self.structure),
            total: tape.item(self.total),
            omega_ir: self.omega_ir,
            omega_vis: self.omega_vis,
            weights: self.weights,
        }
    }
}

fn check_triple(tape: &Tape, f: Var, i: Var, v: Var) -> Result<()> {
    for (name, x) in [("infrared", i), ("visible", v)] {
        if tape.shape(x) != tape.shape(f) {
            return Err(dim_err(
                name,
                format!("shape {:?} differs from fused {:?}", tape.shape(x), tape.shape(f)),
            ));
        }
    }
    tape.value(f).dims4().map(|_| ())
}

/// `mean |F - max(I, V)|`.
pub fn intensity_loss(tape: &mut Tape, f: Var, i: Var, v: Var) -> Result<Var> {
    check_triple(tape, f, i, v)?;
    let target = tape.maximum(i, v)?;
    let d = tape.sub(f, target)?;
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

/// `mean |sobel(F) - max(sobel(I), sobel(V))|`.
pub fn gradient_loss(tape: &mut Tape, f: Var, i: Var, v: Var) -> Result<Var> {
    check_triple(tape, f, i, v)?;
    let gf = tape.sobel(f)?;
    let gi = tape.sobel(i)?;
    let gv = tape.sobel(v)?;
    let target = tape.maximum(gi, gv)?;
    let d = tape.sub(gf, target)?;
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

/// `(omega_ir, omega_vis)` from the mean Sobel magnitudes of both sources.
pub fn ssim_weights(i: &Tensor, v: &Tensor) -> Result<(f64, f64)> {
    let gi = crate::ops::sobel_gradient(i)?.mean();
    let gv = crate::ops::sobel_gradient(v)?.mean();
    let wi = (gi + OMEGA_EPS) / (gi + gv + 2.0 * OMEGA_EPS);
    Ok((wi, 1.0 - wi))
}

/// Normalized 2-D Gaussian window `[1, 1, 11, 11]`.
pub fn gaussian_window() -> Tensor {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|k| (-((k as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let n = SSIM_WINDOW;
    Tensor::from_fn(&[1, 1, n, n], |idx| g[idx / n] * g[idx % n] / (s * s))
}

/// Mean SSIM over valid window positions and all planes.
pub fn ssim(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let [b, c, h, w] = tape.value(x).dims4()?;
    if tape.shape(y) != tape.shape(x) {
        return Err(dim_err("ssim", format!("{:?} vs {:?}", tape.shape(x), tape.shape(y))));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err(
            "spatial",
            format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"),
        ));
    }
    let planes = [b * c, 1, h, w];
    let x = tape.reshape(x, &planes)?;
    let y = tape.reshape(y, &planes)?;
    let win = tape.constant(gaussian_window());
    let geom = ConvGeometry::new(SSIM_WINDOW, 1, 0, 1)?;
    let filt = |t: &mut Tape, a: Var| t.conv2d(a, win, None, geom);

    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let mx = filt(tape, x)?;
    let my = filt(tape, y)?;
    let exx = filt(tape, xx)?;
    let eyy = filt(tape, yy)?;
    let exy = filt(tape, xy)?;

    let mx2 = tape.mul(mx, mx)?;
    let my2 = tape.mul(my, my)?;
    let mxy = tape.mul(mx, my)?;
    let sxx = tape.sub(exx, mx2)?;
    let syy = tape.sub(eyy, my2)?;
    let sxy = tape.sub(exy, mxy)?;

    let n1 = tape.scale(mxy, 2.0);
    let n1 = tape.add_scalar(n1, SSIM_C1);
    let n2 = tape.scale(sxy, 2.0);
    let n2 = tape.add_scalar(n2, SSIM_C2);
    let d1 = tape.add(mx2, my2)?;
    let d1 = tape.add_scalar(d1, SSIM_C1);
    let d2 = tape.add(sxx, syy)?;
    let d2 = tape.add_scalar(d2, SSIM_C2);
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean_all(map))
}

/// `1 - (omega_ir * SSIM(I, F) + omega_vis * SSIM(V, F))` and the weights.
pub fn ssim_loss(tape: &mut Tape, f: Var, i: Var, v: Var) -> Result<(Var, f64, f64)> {
    check_triple(tape, f, i, v)?;
    let (wi, wv) = ssim_weights(tape.value(i), tape.value(v))?;
    let si = ssim(tape, i, f)?;
    let sv = ssim(tape, v, f)?;
    let a = tape.scale(si, -wi);
    let b = tape.scale(sv, -wv);
    let s = tape.add(a, b)?;
    Ok((tape.add_scalar(s, 1.0), wi, wv))
}

/// `mean |sobel|F - V| - sobel(I)| + mean |sobel|F - I| - sobel(V)|`.
pub fn struct_loss(tape: &mut Tape, f: Var, i: Var, v: Var) -> Result<Var> {
    check_triple(tape, f, i, v)?;
    let term = |t: &mut Tape, other: Var, guide: Var| -> Result<Var> {
        let r = t.sub(f, other)?;
        let r = t.abs(r);
        let gr = t.sobel(r)?;
        let gg = t.sobel(guide)?;
        let d = t.sub(gr, gg)?;
        let d = t.abs(d);
        Ok(t.mean_all(d))
    };
    let a = term(tape, v, i)?;
    let b = term(tape, i, v)?;
    tape.add(a, b)
}

pub fn total_loss(tape: &mut Tape, f: Var, i: Var, v: Var, w: &LossWeights) -> Result<LossTerms> {
    w.validate()?;
    let intensity = intensity_loss(tape, f, i, v)?;
    let gradient = gradient_loss(tape, f, i, v)?;
    let (ssim, omega_ir, omega_vis) = ssim_loss(tape, f, i, v)?;
    let structure = struct_loss(tape, f, i, v)?;
    let parts = [
        tape.scale(intensity, w.intensity),
        tape.scale(gradient, w.gradient),
        tape.scale(ssim, w.ssim),
        tape.scale(structure, w.structure),
    ];
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(LossTerms {
        intensity,
        gradient,
        ssim,
        structure,
        total,
        omega_ir,
        omega_vis,
        weights: *w,
    })
}

/// Evaluates every term on plain tensors.
pub fn evaluate(f: &Tensor, i: &Tensor, v: &Tensor, w: &LossWeights) -> Result<LossReport> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let iv = tape.constant(i.clone());
    let vv = tape.constant(v.clone());
    Ok(total_loss(&mut tape, fv, iv, vv, w)?.report(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(&[1, 1, h, w], |k| f(k / w, k % w))
    }

    #[test]
    fn window_sums_to_one() {
        let g = gaussian_window();
        assert!((g.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_against_frozen_value() {
        // valid-window SSIM computed by an independent script
        let a = img(16, 16, |i, j| ((i * 5 + j * 3) % 13) as f64 / 12.0);
        let b = img(16, 16, |i, j| 0.5 + 0.4 * (0.7 * i as f64 + 0.3 * j as f64).sin());
        let mut tape = Tape::new();
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let s = ssim(&mut tape, av, bv).unwrap();
        assert!((tape.item(s) - 0.0053456862233094045).abs() < 1e-10, "{}", tape.item(s));
    }

    #[test]
    fn struct_loss_against_frozen_value() {
        let v = img(6, 6, |i, j| ((i * 7 + j * 3) % 11) as f64 / 10.0);
        let i = Tensor::full(&[1, 1, 6, 6], 0.3);
        let mut tape = Tape::new();
        let fv = tape.constant(v.clone());
        let iv = tape.constant(i);
        let vv = tape.constant(v);
        let s = struct_loss(&mut tape, fv, iv, vv).unwrap();
        assert!((tape.item(s) - 0.7055555555555555).abs() < 1e-12);
    }

    #[test]
    fn step_edge_gradient_loss() {
        let i = img(4, 4, |_, j| if j >= 2 { 1.0 } else { 0.0 });
        let f = Tensor::full(&[1, 1, 4, 4], 0.25);
        let v = Tensor::zeros(&[1, 1, 4, 4]);
        let mut tape = Tape::new();
        let (fv, iv, vv) = (tape.constant(f), tape.constant(i), tape.constant(v));
        let g = gradient_loss(&mut tape, fv, iv, vv).unwrap();
        assert!((tape.item(g) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn too_small_for_ssim() {
        let t = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(matches!(
            evaluate(&t, &t, &t, &LossWeights::default()),
            Err(crate::Error::Dimension { .. })
        ));
    }
}
