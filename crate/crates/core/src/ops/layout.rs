//! Data-movement kernels: permutation, concatenation, slicing, resampling, pooling.

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out` has axes `shape[perm[0]], shape[perm[1]], ...`.
pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Concatenates `(outer, len_i, inner)` blocks along the middle index.
pub(crate) fn concat(parts: &[&[f64]], lens: &[usize], outer: usize, inner: usize) -> Vec<f64> {
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (part, &len) in parts.iter().zip(lens) {
            out.extend_from_slice(&part[o * len * inner..(o + 1) * len * inner]);
        }
    }
    out
}

pub(crate) fn slice(x: &[f64], outer: usize, len: usize, inner: usize, start: usize, take: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(outer * take * inner);
    for o in 0..outer {
        let base = (o * len + start) * inner;
        out.extend_from_slice(&x[base..base + take * inner]);
    }
    out
}

/// Scatters `g` back into a zero tensor of the unsliced layout.
pub(crate) fn slice_backward(
    g: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
    start: usize,
    take: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let base = (o * len + start) * inner;
        out[base..base + take * inner].copy_from_slice(&g[o * take * inner..(o + 1) * take * inner]);
    }
    out
}

pub(crate) fn upsample_nearest2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h2 * w2];
    for p in 0..planes {
        for r in 0..h2 {
            for c in 0..w2 {
                out[(p * h2 + r) * w2 + c] = x[(p * h + r / 2) * w + c / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest2_backward(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for r in 0..h2 {
            for c in 0..w2 {
                out[(p * h + r / 2) * w + c / 2] += g[(p * h2 + r) * w2 + c];
            }
        }
    }
    out
}

/// Mean over each contiguous plane of length `hw`.
pub(crate) fn plane_means(x: &[f64], hw: usize) -> Vec<f64> {
    x.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect()
}

/// Repeats each value `hw` times.
pub(crate) fn broadcast_planes(v: &[f64], hw: usize) -> Vec<f64> {
    v.iter().flat_map(|&x| std::iter::repeat_n(x, hw)).collect()
}

pub(crate) fn plane_sums(x: &[f64], hw: usize) -> Vec<f64> {
    x.chunks(hw).map(|p| p.iter().sum::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_matrix() {
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        let (y, s) = permute(&x, &[2, 3], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(y, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let (z, _) = permute(&y, &s, &inverse_perm(&[1, 0]));
        assert_eq!(z, x);
    }

    #[test]
    fn permute_rank4_roundtrip() {
        let shape = [2, 3, 4, 5];
        let x: Vec<f64> = (0..120).map(f64::from).collect();
        let perm = [0, 2, 3, 1];
        let (y, s) = permute(&x, &shape, &perm);
        // y[b, h, w, c] == x[b, c, h, w]
        assert_eq!(y[((1 * 4 + 2) * 5 + 3) * 3 + 1], x[((1 * 3 + 1) * 4 + 2) * 5 + 3]);
        let (z, _) = permute(&y, &s, &inverse_perm(&perm));
        assert_eq!(z, x);
    }

    #[test]
    fn slice_and_concat_invert() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let c = concat(&[&a, &b], &[2, 1], 2, 1);
        assert_eq!(c, vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(slice(&c, 2, 3, 1, 2, 1), b.to_vec());
        assert_eq!(slice_backward(&b, 2, 3, 1, 2, 1), vec![0.0, 0.0, 5.0, 0.0, 0.0, 6.0]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let g: Vec<f64> = (0..16).map(|i| (i as f64) * 0.5 - 2.0).collect();
        let up = upsample_nearest2(&x, 1, 2, 2);
        let lhs: f64 = up.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = upsample_nearest2_backward(&g, 1, 2, 2);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
