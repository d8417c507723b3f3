//! Central-difference verification of tape gradients.
//!
//! Relative error per coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
//! and a check reports the maximum over the coordinates it visits. The floor
//! is the smallest derivative whose central difference at the requested step
//! round-off still resolves to 1e-3 relative accuracy (about `1.4e-7 * |f|`
//! at the default step), and never below 1e-8. Smaller derivatives are
//! compared in absolute terms against that floor.
//!
//! The numeric derivative starts at the requested step `h`. The stencils `s`
//! and `s/2` are compared; their disagreement plus a round-off bound
//! estimates the error. If that estimate is not tiny next to the derivative,
//! steps 10h, h/10 and h/100 are tried too and the Richardson combination at
//! the step with the smallest estimate is used. Small steps win where a kink of `|.|`, pixelwise max or top-k lies
//! nearby; large steps win where the derivative is tiny next to a large
//! function value and round-off dominates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;
/// The requested step comes first; the others are tried only if it looks unreliable.
const STEP_SCALES: [f64; 4] = [1.0, 10.0, 0.1, 0.01];
/// An error estimate this far below the derivative ends the search early.
const ACCEPT_RATIO: f64 = 1e-5;
/// Round-off allowance of one function evaluation, in units of `eps * |f|`.
const ROUNDOFF_ULPS: f64 = 64.0;
/// Relative accuracy a derivative must be resolvable to before it is compared relatively.
const RESOLVED_ACCURACY: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check a seeded random subset of at most this many coordinates.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn subset(max_coords: usize, seed: u64) -> Self {
        Self {
            max_coords: Some(max_coords),
            seed,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor).max(REL_FLOOR)
}

/// Derivative magnitude below which round-off at `step` hides a `RESOLVED_ACCURACY` error.
pub fn resolution_floor(f0: f64, step: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * f0.abs().max(1.0) / step / RESOLVED_ACCURACY
}

/// Maximum relative error between the tape gradient of `f` at `x` and central differences.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..GradCheckOptions::default()
    };
    grad_check_with(f, x, &opts).map(|r| r.max_rel_error)
}

pub fn grad_check_with<F>(f: F, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let out = f(&mut tape, v)?;
    let f0 = scalar_of(&tape, out)?;
    let analytic = tape.backward(out)?.get_or_zero(v);
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.input(t.clone());
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    compare(x, analytic.data(), f0, eval, opts)
}

/// Checks the gradient with respect to the named parameter of a model built by `build`.
pub fn grad_check_param<F>(
    store: &ParamStore,
    name: &str,
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let x = store
        .get(name)
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
        .clone();
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    let f0 = scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = match tape.bound_params().get(name) {
        Some(&v) => grads.get_or_zero(v),
        None => Tensor::zeros(x.shape()),
    };
    let eval = |t: &Tensor| -> Result<f64> {
        let mut perturbed = store.clone();
        perturbed.set(name, t.clone())?;
        let mut tape = Tape::new();
        let out = build(&mut tape, &perturbed)?;
        scalar_of(&tape, out)
    };
    compare(&x, analytic.data(), f0, eval, opts)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Oracle(format!("function returned shape {:?}, not a scalar", t.shape())));
    }
    let val = t.data()[0];
    if !val.is_finite() {
        return Err(Error::Oracle(format!("function value is not finite ({val})")));
    }
    Ok(val)
}

fn compare(
    x: &Tensor,
    analytic: &[f64],
    f0: f64,
    eval: impl Fn(&Tensor) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {}", opts.step)));
    }
    let n = x.numel();
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: coords.len(),
    };
    for &i in &coords {
        let (numeric, h) = refined_difference(x, i, f0, opts.step, &eval)?;
        let err = relative_error(analytic[i], numeric, resolution_floor(f0, h));
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

fn central(x: &Tensor, i: usize, h: f64, eval: &impl Fn(&Tensor) -> Result<f64>) -> Result<f64> {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    let fp = eval(&Tensor::new(x.shape(), plus)?)?;
    let fm = eval(&Tensor::new(x.shape(), minus)?)?;
    Ok((fp - fm) / (2.0 * h))
}

/// Richardson-extrapolated derivative along coordinate `i` and the step it came from.
fn refined_difference(
    x: &Tensor,
    i: usize,
    f0: f64,
    step: f64,
    eval: &impl Fn(&Tensor) -> Result<f64>,
) -> Result<(f64, f64)> {
    let mut best = (f64::INFINITY, 0.0, step);
    for scale in STEP_SCALES {
        let h = step * scale;
        let coarse = central(x, i, h, eval)?;
        let fine = central(x, i, h / 2.0, eval)?;
        let roundoff = ROUNDOFF_ULPS * f64::EPSILON * f0.abs().max(1.0) / h;
        let estimate = (coarse - fine).abs() + roundoff;
        let value = (4.0 * fine - coarse) / 3.0;
        if estimate <= ACCEPT_RATIO * value.abs() {
            return Ok((value, h));
        }
        if estimate < best.0 {
            best = (estimate, value, h);
        }
    }
    Ok((best.1, best.2))
}

/// Plain central-difference gradient of a scalar tensor function (all coordinates).
pub fn numeric_gradient(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut g = vec![0.0; x.numel()];
    for (i, gi) in g.iter_mut().enumerate() {
        *gi = central(x, i, h, &f)?;
    }
    Tensor::new(x.shape(), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn quadratic_is_exact() {
        let x = rand_input(&[1, 2, 3, 3], 1);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum_all(sq))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn abs_sum_away_from_zero() {
        // keep every coordinate at least 0.1 from the kink
        let x = rand_input(&[1, 1, 4, 4], 2).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
        let err = grad_check(
            |t, v| {
                let a = t.abs(v);
                Ok(t.sum_all(a))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "err={err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // value is sum|x| but the recorded gradient is that of sum(-x)
        let x = Tensor::new(&[3], vec![0.5, -0.7, 1.2]).unwrap();
        let report = grad_check_with(
            |t, v| {
                let n = t.scale(v, -1.0);
                let a = t.abs(v);
                let total = t.sum_all(n);
                let fixed = t.value(a).sum() - t.value(total).data()[0];
                Ok(t.add_scalar(total, fixed))
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error > 0.5);
    }

    #[test]
    fn small_error_on_large_value_is_detected() {
        // value 100 + 0.01 sum(x^2), recorded gradient 1% too large
        let x = rand_input(&[6], 3);
        let report = grad_check_with(
            |t, v| {
                let sq = t.mul(v, v)?;
                let s = t.sum_all(sq);
                let wrong = t.scale(s, 0.0101);
                let want = 100.0 + 0.01 * t.value(s).data()[0];
                let fixed = want - t.value(wrong).data()[0];
                Ok(t.add_scalar(wrong, fixed))
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error > 5e-3, "{}", report.max_rel_error);
        assert!(resolution_floor(100.0, DEFAULT_STEP) < 2e-5);
    }

    #[test]
    fn non_finite_function_is_an_oracle_error() {
        let x = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let d = t.div(v, v)?;
                Ok(t.sum_all(d))
            },
            &x,
            DEFAULT_STEP,
        );
        assert!(matches!(r, Err(Error::Oracle(_))));
    }
}
