//! Synthetic infrared/visible pairs.
//!
//! The visible image carries band-limited texture and thin geometric
//! outlines at mid gray; the infrared image is a smooth dim background with a
//! few bright Gaussian blobs. The blob mask (pixels above 60% of a blob's
//! peak contrast) marks the thermal targets.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    /// `[1, 1, S, S]` in `[0, 1]`.
    pub ir: Tensor,
    pub vis: Tensor,
    /// Row-major blob membership, `S * S` entries.
    pub blob_mask: Vec<bool>,
}

impl SyntheticPair {
    pub fn side(&self) -> usize {
        self.ir.shape()[3]
    }
}

/// Mean of `img` over masked pixels (`None` for an empty mask).
pub fn masked_mean(img: &Tensor, mask: &[bool]) -> Option<f64> {
    let (sum, n) = img
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn synthetic_pair<R: Rng>(side: usize, rng: &mut R) -> SyntheticPair {
    let s = side as f64;
    let n = side * side;

    let mut vis = vec![0.4; n];
    for _ in 0..4 {
        let freq = rng.random_range(0.25..0.9);
        let angle = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.05..0.12);
        let (ca, sa) = (angle.cos(), angle.sin());
        for (k, v) in vis.iter_mut().enumerate() {
            let (y, x) = ((k / side) as f64, (k % side) as f64);
            *v += amp * (freq * (x * ca + y * sa) + phase).sin();
        }
    }
    for _ in 0..rng.random_range(2..4) {
        let level = if rng.random_bool(0.5) { 0.3 } else { -0.3 };
        let cx = rng.random_range(0.2 * s..0.8 * s);
        let cy = rng.random_range(0.2 * s..0.8 * s);
        let size = rng.random_range(0.1 * s..0.3 * s);
        let circle = rng.random_bool(0.5);
        for (k, v) in vis.iter_mut().enumerate() {
            let (y, x) = ((k / side) as f64, (k % side) as f64);
            let on = if circle {
                (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - size).abs() < 0.75
            } else {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                dx.max(dy) <= size && dx.max(dy) > size - 1.0
            };
            if on {
                *v += level;
            }
        }
    }

    let tilt = rng.random_range(0.0..2.0 * PI);
    let bg: Vec<f64> = (0..n)
        .map(|k| {
            let (y, x) = ((k / side) as f64 / s, (k % side) as f64 / s);
            0.15 + 0.05 * (tilt.cos() * x + tilt.sin() * y)
        })
        .collect();
    let mut contrast = vec![0.0f64; n];
    let mut ir = bg.clone();
    let mut blob_mask = vec![false; n];
    for _ in 0..rng.random_range(1..4) {
        let peak = rng.random_range(0.8..0.95);
        let sigma = rng.random_range(0.05 * s..0.1 * s);
        let cx = rng.random_range(0.15 * s..0.85 * s);
        let cy = rng.random_range(0.15 * s..0.85 * s);
        for k in 0..n {
            let (y, x) = ((k / side) as f64, (k % side) as f64);
            let g = (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp();
            if g > contrast[k] {
                contrast[k] = g;
                ir[k] = bg[k] + (peak - bg[k]) * g;
            }
            blob_mask[k] |= g > 0.6;
        }
    }

    let to_tensor = |v: Vec<f64>| {
        Tensor::new(&[1, 1, side, side], v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect())
            .expect("square image")
    };
    SyntheticPair {
        ir: to_tensor(ir),
        vis: to_tensor(vis),
        blob_mask,
    }
}

/// `count` pairs of side `side`, reproducible from `seed`.
pub fn synthetic_dataset(count: usize, side: usize, seed: u64) -> Result<Vec<SyntheticPair>> {
    if side < 8 {
        return Err(Error::Input(format!("synthetic images need a side of at least 8, got {side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| synthetic_pair(side, &mut rng)).collect())
}
