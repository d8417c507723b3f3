use super::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::ops::act::{
    axis_layout, gelu_grad_scalar, gelu_scalar, sigmoid_scalar, softmax_axis,
    softmax_axis_backward, topk_softmax_axis, topk_softmax_axis_backward,
};
use crate::ops::chanconv::{self, ChanConvDims};
use crate::ops::conv::{self, ConvDims};
use crate::ops::layout;
use crate::ops::linalg::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::ops::norm::{layer_norm_axis, layer_norm_axis_backward};
use crate::ops::sobel::{self, sign0};
use crate::tensor::{ConvGeometry, Tensor};

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    tape.value(a).expect_same_shape(tape.value(b), what)
}

impl Tape {
    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], |g, _| vec![Some(g.to_vec()), Some(g.to_vec())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, &[a, b], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.zip_map(&bv, |x, y| x * y)?;
        Ok(self.push(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.iter().zip(bv.data()).map(|(g, y)| g * y).collect()),
                need[1].then(|| g.iter().zip(av.data()).map(|(g, x)| g * x).collect()),
            ]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "div")?;
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.zip_map(&bv, |x, y| x / y)?;
        Ok(self.push(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.iter().zip(bv.data()).map(|(g, y)| g / y).collect()),
                need[1].then(|| {
                    g.iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect()
                }),
            ]
        }))
    }

    /// Elementwise maximum; exact ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "maximum")?;
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.zip_map(&bv, f64::max)?;
        Ok(self.push(out, &[a, b], move |g, _| {
            let pick_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x >= y).collect();
            vec![
                Some(g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect()),
                Some(g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect()),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], move |g, _| vec![Some(g.iter().map(|v| v * s).collect())])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, &[a], |g, _| vec![Some(g.to_vec())])
    }

    /// `a * s` where `s` is a one-element node.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(dim_err("scalar", format!("expected one element, got {:?}", self.shape(s))));
        }
        let av = self.value(a).clone();
        let sv = self.item(s);
        let out = av.map(|x| x * sv);
        Ok(self.push(out, &[a, s], move |g, need| {
            vec![
                need[0].then(|| g.iter().map(|v| v * sv).collect()),
                need[1].then(|| vec![g.iter().zip(av.data()).map(|(g, x)| g * x).sum()]),
            ]
        }))
    }

    /// `|a|` with subgradient `sign(0) = 0`.
    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = av.map(f64::abs);
        self.push(out, &[a], move |g, _| {
            vec![Some(g.iter().zip(av.data()).map(|(g, x)| g * sign0(*x)).collect())]
        })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = av.map(gelu_scalar);
        self.push(out, &[a], move |g, _| {
            vec![Some(g.iter().zip(av.data()).map(|(g, x)| g * gelu_grad_scalar(*x)).collect())]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        let y = out.clone();
        self.push(out, &[a], move |g, _| {
            vec![Some(g.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect())]
        })
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, &[a], move |g, _| vec![Some(vec![g[0] / n as f64; n])])
    }

    /// Global average pooling `[B, C, H, W] -> [B, C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let out = Tensor::from_parts(vec![b, c], layout::plane_means(self.value(x).data(), hw));
        Ok(self.push(out, &[x], move |g, _| {
            vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect())]
        }))
    }

    /// `[B, C] -> [B, C, H, W]` by repeating each value over space.
    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let (b, c) = match self.shape(v)[..] {
            [b, c] => (b, c),
            _ => return Err(dim_err("broadcast", format!("expected [B, C], got {:?}", self.shape(v)))),
        };
        let hw = h * w;
        let out = Tensor::from_parts(vec![b, c, h, w], layout::broadcast_planes(self.value(v).data(), hw));
        Ok(self.push(out, &[v], move |g, _| vec![Some(layout::plane_sums(g, hw))]))
    }

    /// Repeats a tensor along a new leading batch axis.
    pub fn broadcast_batch(&mut self, v: Var, batch: usize) -> Var {
        let t = self.value(v);
        let n = t.numel();
        let mut shape = vec![batch];
        shape.extend_from_slice(t.shape());
        let data: Vec<f64> = (0..batch).flat_map(|_| t.data().iter().copied()).collect();
        self.push(Tensor::from_parts(shape, data), &[v], move |g, _| {
            let mut acc = vec![0.0; n];
            for chunk in g.chunks(n) {
                acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
            vec![Some(acc)]
        })
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, &[a], |g, _| vec![Some(g.to_vec())]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(dim_err("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (data, out_shape) = layout::permute(self.value(a).data(), &shape, perm);
        let inv = layout::inverse_perm(perm);
        let out_shape_c = out_shape.clone();
        Ok(self.push(Tensor::from_parts(out_shape, data), &[a], move |g, _| {
            vec![Some(layout::permute(g, &out_shape_c, &inv).0)]
        }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Parameter("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err("concat", format!("axis {axis} out of rank {}", first.len())));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err(
                    format!("axis {axis}"),
                    format!("cannot concatenate {:?} with {first:?}", s),
                ));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = axis_layout(&first, axis);
        let slices: Vec<&[f64]> = parts.iter().map(|&p| self.value(p).data()).collect();
        let data = layout::concat(&slices, &lens, outer, inner);
        let mut shape = first.clone();
        shape[axis] = lens.iter().sum();
        let total = shape[axis];
        Ok(self.push(Tensor::from_parts(shape, data), parts, move |g, need| {
            let mut start = 0;
            lens.iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let r = n.then(|| layout::slice(g, outer, total, inner, start, len));
                    start += len;
                    r
                })
                .collect()
        }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err(
                format!("axis {axis}"),
                format!("slice {start}..{} out of bounds for {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_layout(&shape, axis);
        let data = layout::slice(self.value(a).data(), outer, full, inner, start, len);
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(out_shape, data), &[a], move |g, _| {
            vec![Some(layout::slice_backward(g, outer, full, inner, start, len))]
        }))
    }

    /// Interleaves channels as `[a0, b0, a1, b1, ...]`.
    pub fn channel_shuffle(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "channel_shuffle")?;
        let [bs, c, h, w] = self.value(a).dims4()?;
        let cat = self.concat(&[a, b], 1)?;
        let grouped = self.reshape(cat, &[bs, 2, c, h * w])?;
        let swapped = self.permute(grouped, &[0, 2, 1, 3])?;
        self.reshape(swapped, &[bs, 2 * c, h, w])
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let data = layout::upsample_nearest2(self.value(x).data(), b * c, h, w);
        Ok(self.push(Tensor::from_parts(vec![b, c, 2 * h, 2 * w], data), &[x], move |g, _| {
            vec![Some(layout::upsample_nearest2_backward(g, b * c, h, w))]
        }))
    }

    // ---- linear algebra -------------------------------------------------

    /// `x[..., Cin] @ w[Cin, Cout] (+ b[Cout])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (cin, cout) = match self.shape(w)[..] {
            [i, o] => (i, o),
            _ => return Err(dim_err("weight", format!("expected [Cin, Cout], got {:?}", self.shape(w)))),
        };
        if xs.last() != Some(&cin) {
            return Err(dim_err("features", format!("input {xs:?} does not end in Cin={cin}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err("bias", format!("expected [{cout}], got {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / cin;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut out = match b {
            Some(b) => (0..rows).flat_map(|_| self.value(b).data().iter().copied()).collect(),
            None => vec![0.0; rows * cout],
        };
        gemm_acc(xv.data(), wv.data(), &mut out, rows, cin, cout);
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(Tensor::from_parts(shape, out), &parents, move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = vec![0.0; rows * cin];
                gemm_nt_acc(g, wv.data(), &mut gx, rows, cout, cin);
                gx
            });
            let gw = need[1].then(|| {
                let mut gw = vec![0.0; cin * cout];
                gemm_tn_acc(xv.data(), g, &mut gw, rows, cin, cout);
                gw
            });
            let mut res = vec![gx, gw];
            if need.len() == 3 {
                res.push(need[2].then(|| {
                    let mut gb = vec![0.0; cout];
                    for row in g.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                }));
            }
            res
        }))
    }

    /// Batched `a[..., n, k] @ b[..., k, m]` with identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let (batch, n, k, m, shape) = matmul_dims(av.shape(), bv.shape())?;
        let mut out = vec![0.0; batch * n * m];
        for i in 0..batch {
            gemm_acc(
                &av.data()[i * n * k..(i + 1) * n * k],
                &bv.data()[i * k * m..(i + 1) * k * m],
                &mut out[i * n * m..(i + 1) * n * m],
                n,
                k,
                m,
            );
        }
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; batch * n * k];
                for i in 0..batch {
                    gemm_nt_acc(
                        &g[i * n * m..(i + 1) * n * m],
                        &bv.data()[i * k * m..(i + 1) * k * m],
                        &mut ga[i * n * k..(i + 1) * n * k],
                        n,
                        m,
                        k,
                    );
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; batch * k * m];
                for i in 0..batch {
                    gemm_tn_acc(
                        &av.data()[i * n * k..(i + 1) * n * k],
                        &g[i * n * m..(i + 1) * n * m],
                        &mut gb[i * k * m..(i + 1) * k * m],
                        n,
                        k,
                        m,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    // ---- normalization and probability maps ----------------------------

    pub fn softmax(&mut self, a: Var, axis: usize, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
        }
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax", format!("axis {axis} out of rank {}", shape.len())));
        }
        let lay = axis_layout(&shape, axis);
        let y = Tensor::from_parts(shape, softmax_axis(self.value(a).data(), lay, tau));
        let yc = y.clone();
        Ok(self.push(y, &[a], move |g, _| vec![Some(softmax_axis_backward(yc.data(), g, lay, tau))]))
    }

    /// Softmax over the `k` largest entries along `axis`; the rest are exactly zero.
    pub fn topk_softmax(&mut self, a: Var, axis: usize, k: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("topk", format!("axis {axis} out of rank {}", shape.len())));
        }
        if k == 0 || k > shape[axis] {
            return Err(Error::Parameter(format!("top-k needs 1 <= k <= {}, got {k}", shape[axis])));
        }
        let lay = axis_layout(&shape, axis);
        let y = Tensor::from_parts(shape, topk_softmax_axis(self.value(a).data(), lay, k));
        let yc = y.clone();
        Ok(self.push(y, &[a], move |g, _| vec![Some(topk_softmax_axis_backward(yc.data(), g, lay))]))
    }

    /// Layer normalization over `axis` with per-position affine `gain`/`shift`.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("layer_norm", format!("axis {axis} out of rank {}", shape.len())));
        }
        let len = shape[axis];
        if self.value(gain).numel() != len || self.value(shift).numel() != len {
            return Err(dim_err(
                "layer_norm affine",
                format!("gain/shift must have {len} entries, got {} and {}", self.value(gain).numel(), self.value(shift).numel()),
            ));
        }
        let lay = axis_layout(&shape, axis);
        let gv = self.value(gain).clone();
        let (y, saved) = layer_norm_axis(self.value(x).data(), lay, gv.data(), self.value(shift).data(), eps);
        Ok(self.push(Tensor::from_parts(shape, y), &[x, gain, shift], move |g, need| {
            let (gx, gg, gs) = layer_norm_axis_backward(&saved, gv.data(), g, lay);
            vec![need[0].then_some(gx), need[1].then_some(gg), need[2].then_some(gs)]
        }))
    }

    // ---- convolutions ---------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = b.map(|b| self.value(b).clone());
        let (out, d) = conv::conv2d_forward(&xv, &wv, bv.as_ref(), &geom)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, &parents, move |g, need| {
            let want_b = need.get(2).copied().unwrap_or(false);
            let (gx, gw, gb) = conv::conv2d_backward(&d, &xv, &wv, g, [need[0], need[1], want_b]);
            let mut res = vec![gx, gw];
            if need.len() == 3 {
                res.push(gb);
            }
            res
        }))
    }

    /// Position-dependent convolution: `y_n = sum_m pi[n, m] * (x * W_m + b_m)_n`.
    ///
    /// `kernels` is `[B, M, Cout, Cin/groups, k, k]`, `biases` is `[B, M, Cout]`,
    /// `pi` is `[B, M, Ho, Wo]`.
    pub fn dynamic_conv(
        &mut self,
        x: Var,
        kernels: Var,
        biases: Var,
        pi: Var,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let xv = self.value(x).clone();
        let kv = self.value(kernels).clone();
        let bv = self.value(biases).clone();
        let pv = self.value(pi).clone();
        let [bs, cin, h, w] = xv.dims4()?;
        let (m, cout, kshape) = match kv.shape()[..] {
            [b2, m, co, ci, k1, k2] if b2 == bs => (m, co, [co, ci, k1, k2]),
            _ => {
                return Err(dim_err(
                    "experts",
                    format!("kernels {:?} incompatible with batch {bs}", kv.shape()),
                ))
            }
        };
        if bv.shape() != [bs, m, cout] {
            return Err(dim_err("expert biases", format!("expected {:?}, got {:?}", [bs, m, cout], bv.shape())));
        }
        let d = ConvDims::new(cin, h, w, &kshape, &geom)?;
        if pv.shape() != [bs, m, d.ho, d.wo] {
            return Err(dim_err(
                "routing spatial",
                format!(
                    "routing field {:?} does not match conv output {:?}",
                    pv.shape(),
                    [bs, m, d.ho, d.wo]
                ),
            ));
        }
        let (in_len, hw_out) = (cin * h * w, d.ho * d.wo);
        let out_len = cout * hw_out;
        let wlen = d.weight_len();
        let mut y = vec![0.0; bs * out_len];
        let mut z = vec![0.0; bs * m * out_len];
        for b in 0..bs {
            let cols = conv::image_cols(&d, &xv.data()[b * in_len..][..in_len]);
            for e in 0..m {
                let zb = &mut z[(b * m + e) * out_len..][..out_len];
                conv::forward_from_cols(
                    &d,
                    &cols,
                    &kv.data()[(b * m + e) * wlen..][..wlen],
                    Some(&bv.data()[(b * m + e) * cout..][..cout]),
                    zb,
                );
                let pe = &pv.data()[(b * m + e) * hw_out..][..hw_out];
                let yb = &mut y[b * out_len..][..out_len];
                for co in 0..cout {
                    for ((yv, &zv), &p) in yb[co * hw_out..][..hw_out]
                        .iter_mut()
                        .zip(&zb[co * hw_out..][..hw_out])
                        .zip(pe)
                    {
                        *yv += p * zv;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![bs, cout, d.ho, d.wo], y);
        Ok(self.push(out, &[x, kernels, biases, pi], move |g, need| {
            let mut gx = need[0].then(|| vec![0.0; xv.numel()]);
            let mut gk = need[1].then(|| vec![0.0; kv.numel()]);
            let mut gb = need[2].then(|| vec![0.0; bv.numel()]);
            let mut gp = need[3].then(|| vec![0.0; pv.numel()]);
            let mut gz = vec![0.0; out_len];
            let mut gcols = vec![0.0; d.groups * conv::col_len(&d)];
            for b in 0..bs {
                let gyb = &g[b * out_len..][..out_len];
                let xb = &xv.data()[b * in_len..][..in_len];
                let cols = gk.is_some().then(|| conv::image_cols(&d, xb));
                gcols.fill(0.0);
                for e in 0..m {
                    let be = b * m + e;
                    let zb = &z[be * out_len..][..out_len];
                    let pe = &pv.data()[be * hw_out..][..hw_out];
                    if let Some(gp) = gp.as_mut() {
                        let dst = &mut gp[be * hw_out..][..hw_out];
                        for co in 0..cout {
                            for ((d, &gv), &zv) in dst
                                .iter_mut()
                                .zip(&gyb[co * hw_out..][..hw_out])
                                .zip(&zb[co * hw_out..][..hw_out])
                            {
                                *d += gv * zv;
                            }
                        }
                    }
                    if gx.is_none() && gk.is_none() && gb.is_none() {
                        continue;
                    }
                    for co in 0..cout {
                        for ((d, &gv), &p) in gz[co * hw_out..][..hw_out]
                            .iter_mut()
                            .zip(&gyb[co * hw_out..][..hw_out])
                            .zip(pe)
                        {
                            *d = gv * p;
                        }
                    }
                    conv::backward_from_cols(
                        &d,
                        cols.as_deref().unwrap_or(&[]),
                        &kv.data()[be * wlen..][..wlen],
                        &gz,
                        gx.is_some().then_some(gcols.as_mut_slice()),
                        gk.as_mut().map(|v| &mut v[be * wlen..][..wlen]),
                        gb.as_mut().map(|v| &mut v[be * cout..][..cout]),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    conv::cols_to_image(&d, &gcols, &mut gx[b * in_len..][..in_len]);
                }
            }
            vec![gx, gk, gb, gp]
        }))
    }

    /// Sliding 1-D convolution along channels, window responses folded into channels.
    ///
    /// `kernels` is `[K, window]`, `bias` is `[K]`; output is `[B, K * n_win, H, W]`.
    pub fn channel_conv(
        &mut self,
        x: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [b, cin, h, w] = self.value(x).dims4()?;
        let (nk, window) = match self.shape(kernels)[..] {
            [k, win] => (k, win),
            _ => return Err(dim_err("channel kernels", format!("expected [K, window], got {:?}", self.shape(kernels)))),
        };
        if self.shape(bias) != [nk] {
            return Err(dim_err("channel bias", format!("expected [{nk}], got {:?}", self.shape(bias))));
        }
        let d = ChanConvDims::new(cin, h * w, nk, window, stride, pad)?;
        let xv = self.value(x).clone();
        let kv = self.value(kernels).clone();
        let out = chanconv::forward(&d, b, xv.data(), kv.data(), self.value(bias).data());
        let shape = vec![b, d.out_channels(), h, w];
        Ok(self.push(Tensor::from_parts(shape, out), &[x, kernels, bias], move |g, need| {
            let (gx, gk, gb) = chanconv::backward(&d, b, xv.data(), kv.data(), g);
            vec![need[0].then_some(gx), need[1].then_some(gk), need[2].then_some(gb)]
        }))
    }

    /// Sobel magnitude `|Gx| + |Gy|` per channel plane, replicate padding.
    pub fn sobel(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if h < 3 || w < 3 {
            return Err(dim_err("spatial", format!("Sobel needs at least 3x3, got {h}x{w}")));
        }
        let (gx, gy) = sobel::sobel_xy(self.value(x).data(), b * c, h, w);
        let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.abs() + b.abs()).collect();
        Ok(self.push(Tensor::from_parts(vec![b, c, h, w], mag), &[x], move |g, _| {
            vec![Some(sobel::sobel_backward(&gx, &gy, g, b * c, h, w))]
        }))
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, Vec<usize>)> {
    if a.len() < 2 || a.len() != b.len() {
        return Err(dim_err("rank", format!("matmul operands {a:?} and {b:?}")));
    }
    let r = a.len();
    if a[..r - 2] != b[..r - 2] {
        return Err(dim_err("batch", format!("leading axes of {a:?} and {b:?} differ")));
    }
    let (n, k, k2, m) = (a[r - 2], a[r - 1], b[r - 2], b[r - 1]);
    if k != k2 {
        return Err(dim_err("inner", format!("inner dimensions {k} and {k2} differ")));
    }
    let batch = a[..r - 2].iter().product();
    let mut shape = a[..r - 2].to_vec();
    shape.extend([n, m]);
    Ok((batch, n, k, m, shape))
}

