//! Pointwise activations and axis-wise probability maps.

use std::f64::consts::PI;

const GELU_CUBIC: f64 = 0.044715;

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let t = (c * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax of `x / tau` along the middle index of an `(outer, len, inner)` layout.
pub(crate) fn softmax_axis(x: &[f64], layout: (usize, usize, usize), tau: f64) -> Vec<f64> {
    let (outer, len, inner) = layout;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = ((x[idx(j)] - max) / tau).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] /= sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_axis_backward(
    y: &[f64],
    g: &[f64],
    layout: (usize, usize, usize),
    tau: f64,
) -> Vec<f64> {
    let (outer, len, inner) = layout;
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
            for j in 0..len {
                gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot) / tau;
            }
        }
    }
    gx
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Softmax restricted to the top-`k` entries along the axis; other entries are exactly zero.
pub(crate) fn topk_softmax_axis(x: &[f64], layout: (usize, usize, usize), k: usize) -> Vec<f64> {
    let (outer, len, inner) = layout;
    let mut out = vec![0.0; x.len()];
    let mut slice = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            for (j, s) in slice.iter_mut().enumerate() {
                *s = x[idx(j)];
            }
            let kept = top_k_indices(&slice, k);
            let max = kept.iter().map(|&j| slice[j]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = kept.iter().map(|&j| (slice[j] - max).exp()).sum();
            for &j in &kept {
                out[idx(j)] = (slice[j] - max).exp() / sum;
            }
        }
    }
    out
}

/// Gradient flows only through retained entries (non-retained outputs are constant zero).
pub(crate) fn topk_softmax_axis_backward(y: &[f64], g: &[f64], layout: (usize, usize, usize)) -> Vec<f64> {
    // Non-retained entries have y == 0, so the dense softmax Jacobian restricted
    // to the support gives exactly the retained-entry gradient.
    softmax_axis_backward(y, g, layout, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
        assert!(sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[2.0, 2.0, 2.0, 2.0], 2), vec![0, 1]);
    }

    #[test]
    fn topk_support_has_at_most_k_entries() {
        let x = [0.3, -1.0, 2.0, 0.1, 0.9];
        let q = topk_softmax_axis(&x, (1, 5, 1), 3);
        assert_eq!(q.iter().filter(|&&v| v > 0.0).count(), 3);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(q[1], 0.0);
        assert_eq!(q[3], 0.0);
    }
}
