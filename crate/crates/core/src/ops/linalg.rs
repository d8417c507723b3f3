//! Dense matrix products.
//!
//! Column tiles keep the streamed operand cache-resident; dot products use
//! independent partial sums so the loops vectorize. Results depend only on
//! the shapes, never on timing, so repeated calls are bit-identical.

const TILE: usize = 512;
const LANES: usize = 8;

/// Dot product with fixed-order partial sums.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let pairs = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c[n, m] += a[n, k] * b[k, m]` for contiguous row-major slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for j0 in (0..m).step_by(TILE) {
        let j1 = (j0 + TILE).min(m);
        for i in 0..n {
            let crow = &mut c[i * m + j0..i * m + j1];
            for p in 0..k {
                let av = a[i * k + p];
                if av != 0.0 {
                    axpy(crow, av, &b[p * m + j0..p * m + j1]);
                }
            }
        }
    }
}

/// `c[n, m] += a[n, k] * b[m, k]^T`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            c[i * m + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k, m] += a[n, k]^T * b[n, m]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for j0 in (0..m).step_by(TILE) {
        let j1 = (j0 + TILE).min(m);
        for p in 0..k {
            let crow = &mut c[p * m + j0..p * m + j1];
            for i in 0..n {
                let av = a[i * k + p];
                if av != 0.0 {
                    axpy(crow, av, &b[i * m + j0..i * m + j1]);
                }
            }
        }
    }
}
