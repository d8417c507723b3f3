//! Dense row-major tensors.
//!
//! Feature maps are rank 4 `[batch, channels, height, width]`; prior tokens
//! and attention operands are rank 3 `[batch, tokens, channels]`. Storage is
//! shared (`Arc`) so cloning a tensor never copies its payload, and tensors
//! are immutable once built.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err(
                "data",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Zero-mean normal samples with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        if std == 0.0 {
            return Self::zeros(shape);
        }
        let dist = Normal::new(0.0, std).expect("finite std");
        Self::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Uniform::new(lo, hi).expect("lo < hi");
        Self::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Returns the payload, copying only when the storage is shared.
    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(dim_err(
                "rank",
                format!("expected rank-4 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn dims3(&self) -> Result<[usize; 3]> {
        match self.shape[..] {
            [b, n, c] => Ok([b, n, c]),
            _ => Err(dim_err(
                "rank",
                format!("expected rank-3 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(dim_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "operand")?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err(
                what,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cc, hh, ww] = self.dims4().expect("rank-4 tensor");
        self.data[((b * cc + c) * hh + h) * ww + w]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.numel() as f64
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch element `b` of a rank-4 tensor as a `[1, C, H, W]` tensor.
    pub fn batch_item(&self, b: usize) -> Result<Self> {
        let [bs, c, h, w] = self.dims4()?;
        if b >= bs {
            return Err(dim_err("batch", format!("index {b} out of {bs}")));
        }
        let len = c * h * w;
        Ok(Self::from_parts(
            vec![1, c, h, w],
            self.data[b * len..(b + 1) * len].to_vec(),
        ))
    }

    /// Stacks rank-4 tensors with identical `[1, C, H, W]`-compatible shapes along batch.
    pub fn stack_batch(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Input("cannot stack an empty list".into()))?;
        let [_, c, h, w] = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut batch = 0;
        for t in items {
            let [b, c2, h2, w2] = t.dims4()?;
            if (c2, h2, w2) != (c, h, w) {
                return Err(dim_err(
                    "batch",
                    format!("cannot stack {:?} with {:?}", t.shape(), first.shape()),
                ));
            }
            batch += b;
            data.extend_from_slice(t.data());
        }
        Ok(Self::from_parts(vec![batch, c, h, w], data))
    }
}

/// Kernel size, stride, padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Parameter(format!(
                "kernel size must be a positive odd integer, got {kernel}"
            )));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::Parameter("stride and groups must be positive".into()));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
            groups,
        })
    }

    /// 'Same'-size geometry for odd kernels at stride 1.
    pub fn same(kernel: usize) -> Self {
        Self::new(kernel, 1, kernel / 2, 1).expect("odd kernel")
    }

    pub fn output_size(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(dim_err(
                "spatial",
                format!(
                    "input extent {input} with padding {} is smaller than kernel {}",
                    self.padding, self.kernel
                ),
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(&[1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor::new(&[1, 2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn reshape_shares_storage() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64);
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn geometry_output_size() {
        let g = ConvGeometry::new(3, 2, 1, 1).unwrap();
        assert_eq!(g.output_size(64).unwrap(), 32);
        assert_eq!(ConvGeometry::same(3).output_size(5).unwrap(), 5);
        assert!(ConvGeometry::new(2, 1, 0, 1).is_err());
        assert!(ConvGeometry::new(5, 1, 0, 1).unwrap().output_size(3).is_err());
    }

    #[test]
    fn stack_and_split_batch() {
        let a = Tensor::full(&[1, 2, 2, 2], 1.0);
        let b = Tensor::full(&[1, 2, 2, 2], 2.0);
        let s = Tensor::stack_batch(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 2]);
        assert_eq!(s.batch_item(0).unwrap(), a);
        assert_eq!(s.batch_item(1).unwrap().mean(), 2.0);
    }
}
