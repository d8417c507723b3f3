//! Reference-free fusion quality metrics on 8-bit grayscale images.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Row-major 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Input(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let pixels = (0..width * height).map(|k| f(k / width, k % width)).collect();
        Self { width, height, pixels }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col] as f64
    }

    /// Scales `[0, 1]` values by 255 and rounds; `t` must hold one `H x W` plane.
    pub fn from_unit_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, 1, h, w] | [1, h, w] | [h, w] => (*h, *w),
            s => return Err(dim_err("image", format!("expected a single plane, got {s:?}"))),
        };
        let pixels = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self::new(w, h, pixels)
    }

    /// `[1, 1, H, W]` tensor with values in `[0, 1]`.
    pub fn to_unit_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, 1, self.height, self.width], |k| self.pixels[k] as f64 / 255.0)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.pixels[c * self.width + r])
    }

    fn need_2x2(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(dim_err(
                "spatial",
                format!("metric needs at least 2x2, got {}x{}", self.height, self.width),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub en: f64,
    pub sf: f64,
    pub ag: f64,
    pub sd: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "en,sf,ag,sd";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.en, self.sf, self.ag, self.sd)
    }
}

/// Shannon entropy (bits) of the 256-bin histogram.
pub fn entropy(img: &GrayImage) -> Result<f64> {
    if img.pixels.is_empty() {
        return Err(Error::Input("entropy of an empty image".into()));
    }
    let mut hist = [0usize; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let n = img.pixels.len() as f64;
    let h: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    Ok(h.max(0.0))
}

/// `sqrt(RF^2 + CF^2)`, each the RMS of first differences along one axis over `M * N`.
///
/// Squared differences of 8-bit levels are summed exactly in integers.
pub fn spatial_frequency(img: &GrayImage) -> Result<f64> {
    img.need_2x2()?;
    let (h, w) = (img.height, img.width);
    let level = |r: usize, c: usize| img.pixels[r * w + c] as i64;
    let mut sq: u64 = 0;
    for r in 0..h {
        for c in 0..w {
            if c > 0 {
                sq += (level(r, c) - level(r, c - 1)).pow(2) as u64;
            }
            if r > 0 {
                sq += (level(r, c) - level(r - 1, c)).pow(2) as u64;
            }
        }
    }
    Ok((sq as f64 / (h * w) as f64).sqrt())
}

/// Mean of `sqrt((dx^2 + dy^2) / 2)` over the `(M - 1)(N - 1)` forward-difference positions.
pub fn average_gradient(img: &GrayImage) -> Result<f64> {
    img.need_2x2()?;
    let (h, w) = (img.height, img.width);
    let mut acc = 0.0;
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let dx = img.at(r, c + 1) - img.at(r, c);
            let dy = img.at(r + 1, c) - img.at(r, c);
            acc += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(acc / ((h - 1) * (w - 1)) as f64)
}

/// Population standard deviation of gray levels, `sqrt(n * sum(p^2) - sum(p)^2) / n` in exact integers.
pub fn std_dev(img: &GrayImage) -> Result<f64> {
    img.need_2x2()?;
    let n = img.pixels.len() as u128;
    let sum: u128 = img.pixels.iter().map(|&p| p as u128).sum();
    let sum_sq: u128 = img.pixels.iter().map(|&p| (p as u128).pow(2)).sum();
    Ok(((n * sum_sq - sum * sum) as f64).sqrt() / n as f64)
}

pub fn evaluate(img: &GrayImage) -> Result<MetricReport> {
    Ok(MetricReport {
        en: entropy(img)?,
        sf: spatial_frequency(img)?,
        ag: average_gradient(img)?,
        sd: std_dev(img)?,
    })
}
