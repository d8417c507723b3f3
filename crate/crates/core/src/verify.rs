//! Verification suites: loop-oracle equivalence, dynamic-convolution
//! degeneracies, routing invariants and finite-difference gradient checks.
//!
//! Every suite returns a list of [`Check`]s carrying the worst observed error
//! and the tolerance it must stay below.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::config::{ApgMode, CwmcConfig, FusionConfig, LossWeights, ScfbMode};
use crate::dynconv::{Ddcb, Routing};
use crate::error::{Error, Result};
use crate::fusion::{cwmc, init_cwmc, Scfb};
use crate::gradcheck::{grad_check_param, grad_check_with, GradCheckOptions};
use crate::loss;
use crate::ops;
use crate::network::Network;
use crate::oracle;
use crate::params::{Init, ParamStore};
use crate::prior::{init_d0, init_priors, Apg, PriorSet};
use crate::tensor::{ConvGeometry, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-3;
pub const ORACLE_TOLERANCE: f64 = 1e-5;
pub const EXACT_TOLERANCE: f64 = 1e-6;
/// Random instances per operator in [`oracle_suite`].
pub const ORACLE_INSTANCES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    /// Where the worst error was observed.
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, error: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            error,
            tolerance,
            detail: detail.into(),
        }
    }

    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} error {:.3e} (tolerance {:.0e})",
            if self.passed() { "ok  " } else { "FAIL" },
            self.name,
            self.error,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, "  [{}]", self.detail)?;
        }
        Ok(())
    }
}

/// Sets the tolerance of the named check to zero so it must fail; returns
/// whether a check of that name exists. Used to exercise failure reporting.
pub fn corrupt_tolerance(checks: &mut [Check], name: &str) -> bool {
    let mut hit = false;
    for c in checks.iter_mut().filter(|c| c.name == name) {
        c.tolerance = 0.0;
        hit = true;
    }
    hit
}

/// Which gradient checks to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Blocks,
    End2end,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "end2end" => Ok(Scope::End2end),
            other => Err(Error::Config(format!("unknown scope `{other}` (expected ops, blocks or end2end)"))),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Uniform magnitudes in `[0.2, 1]` with random signs, away from kinks at zero.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn simplex(b: usize, m: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let logits = Tensor::rand_uniform(&[b, m, h, w], -2.0, 2.0, rng);
    ops::softmax_along(&logits, 1, 1.0)
}

/// Adds `std * N(0, 1)` noise to every parameter so that zero-initialized
/// layers do not hide gradient paths.
pub fn jitter(store: &ParamStore, std: f64, seed: u64) -> Result<ParamStore> {
    let mut r = rng(seed);
    let mut out = store.clone();
    for (name, t) in store.iter() {
        let noisy = t
            .data()
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut r);
                v + std * z
            })
            .collect();
        out.set(name, Tensor::new(t.shape(), noisy)?)?;
    }
    Ok(out)
}

// ---- oracle equivalence ---------------------------------------------------

fn random_geometry(rng: &mut ChaCha8Rng) -> Result<ConvGeometry> {
    let kernel = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=kernel / 2);
    let groups = rng.random_range(1..=2);
    ConvGeometry::new(kernel, stride, padding, groups)
}

/// Each fast operator against its loop oracle on `instances` random problems.
pub fn oracle_suite(seed: u64, instances: usize) -> Result<Vec<Check>> {
    let mut r = rng(seed);
    let mut worst = [(0.0f64, String::new()), (0.0, String::new()), (0.0, String::new()), (0.0, String::new())];
    let mut note = |slot: usize, err: f64, what: String| {
        if err > worst[slot].0 || !err.is_finite() {
            worst[slot] = (err, what);
        }
    };
    for _ in 0..instances {
        // conv2d
        let g = random_geometry(&mut r)?;
        let b = r.random_range(1..=2);
        let cin = g.groups * r.random_range(1..=3);
        let cout = g.groups * r.random_range(1..=3);
        let (h, w) = (r.random_range(g.kernel..=8), r.random_range(g.kernel..=8));
        let x = uniform(&[b, cin, h, w], &mut r);
        let wt = uniform(&[cout, cin / g.groups, g.kernel, g.kernel], &mut r);
        let bias = uniform(&[cout], &mut r);
        let fast = ops::conv2d(&x, &wt, Some(&bias), g)?;
        let slow = oracle::conv2d(&x, &wt, Some(&bias), g)?;
        note(0, fast.max_abs_diff(&slow), format!("x {:?} w {:?} {g:?}", x.shape(), wt.shape()));

        // matmul
        let (bt, n, k, m) = (r.random_range(1..=3), r.random_range(1..=7), r.random_range(1..=9), r.random_range(1..=7));
        let a = uniform(&[bt, n, k], &mut r);
        let bm = uniform(&[bt, k, m], &mut r);
        let err = ops::matmul(&a, &bm)?.max_abs_diff(&oracle::matmul(&a, &bm)?);
        note(1, err, format!("{:?} x {:?}", a.shape(), bm.shape()));

        // cwmc
        let cfg = CwmcConfig {
            window: r.random_range(2..=4),
            stride: r.random_range(1..=2),
            pad: r.random_range(0..=1),
            kernels: r.random_range(1..=4),
        };
        let c = r.random_range(cfg.window.max(2)..=8);
        let mut store = ParamStore::new();
        init_cwmc(
            &mut Init {
                store: &mut store,
                rng: &mut r,
            },
            "m",
            &cfg,
            c,
            c,
        )?;
        let store = jitter(&store, 0.3, r.random())?;
        let x = uniform(&[b, c, r.random_range(1..=5), r.random_range(1..=5)], &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fast = cwmc(&mut tape, &store, "m", xv, &cfg)?;
        let err = tape.value(fast).max_abs_diff(&oracle::cwmc(&store, "m", &x, &cfg)?);
        note(2, err, format!("x {:?} {cfg:?}", x.shape()));

        // ddc
        let g = random_geometry(&mut r)?;
        let experts = r.random_range(1..=4);
        let cin = g.groups * r.random_range(1..=2);
        let cout = g.groups * r.random_range(1..=2);
        let (h, w) = (r.random_range(g.kernel..=7), r.random_range(g.kernel..=7));
        let x = uniform(&[b, cin, h, w], &mut r);
        let kern = uniform(&[b, experts, cout, cin / g.groups, g.kernel, g.kernel], &mut r);
        let biases = uniform(&[b, experts, cout], &mut r);
        let pi = simplex(b, experts, g.output_size(h)?, g.output_size(w)?, &mut r)?;
        let err = ddc_tensors(&x, &kern, &biases, &pi, g)?.max_abs_diff(&oracle::ddc(&x, &kern, &biases, &pi, g)?);
        note(3, err, format!("x {:?} M={experts} {g:?}", x.shape()));
    }
    Ok(["conv2d", "matmul", "cwmc", "ddc_forward"]
        .iter()
        .zip(worst)
        .map(|(name, (err, detail))| Check::new(format!("oracle/{name}"), err, ORACLE_TOLERANCE, detail))
        .collect())
}

/// Dynamic convolution on plain tensors.
pub fn ddc_tensors(x: &Tensor, kernels: &Tensor, biases: &Tensor, pi: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(kernels.clone());
    let b = tape.constant(biases.clone());
    let p = tape.constant(pi.clone());
    let y = tape.dynamic_conv(xv, k, b, p, g)?;
    Ok(tape.value(y).clone())
}

// ---- dynamic convolution degeneracies and routing ---------------------------

fn ddcb(width: usize, experts: usize, routing: Routing, seed: u64) -> Result<(Ddcb, ParamStore)> {
    let d = Ddcb {
        prefix: "ddcb".into(),
        width,
        experts,
        geom: ConvGeometry::same(3),
        routing,
    };
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    d.init(&mut Init {
        store: &mut store,
        rng: &mut r,
    })?;
    Ok((d, jitter(&store, 0.3, seed ^ 0x5eed)?))
}

fn routing(tau: f64, top_k: usize, blend: f64) -> Routing {
    Routing { tau, top_k, blend }
}

/// Expert `e` of batch element `b` as a static convolution.
fn static_expert(kernels: &Tensor, biases: &Tensor, b: usize, e: usize) -> Result<(Tensor, Tensor)> {
    let s = kernels.shape();
    let klen: usize = s[2..].iter().product();
    let m = s[1];
    let cout = s[2];
    Ok((
        Tensor::new(&s[2..], kernels.data()[(b * m + e) * klen..][..klen].to_vec())?,
        Tensor::new(&[cout], biases.data()[(b * m + e) * cout..][..cout].to_vec())?,
    ))
}

pub fn degeneracy_suite(seed: u64) -> Result<Vec<Check>> {
    let mut r = rng(seed);
    let g = ConvGeometry::same(3);
    let x = uniform(&[2, 4, 6, 6], &mut r);
    let mut checks = Vec::new();

    // a single expert is a static convolution
    let kern = uniform(&[2, 1, 4, 4, 3, 3], &mut r);
    let biases = uniform(&[2, 1, 4], &mut r);
    let pi = Tensor::full(&[2, 1, 6, 6], 1.0);
    let y = ddc_tensors(&x, &kern, &biases, &pi, g)?;
    let mut err = 0.0f64;
    for b in 0..2 {
        let (k, bias) = static_expert(&kern, &biases, b, 0)?;
        let want = ops::conv2d(&x.batch_item(b)?, &k, Some(&bias), g)?;
        err = err.max(y.batch_item(b)?.max_abs_diff(&want));
    }
    checks.push(Check::new("degenerate/single_expert", err, EXACT_TOLERANCE, "M=1 vs conv2d"));

    // one-hot routing selects an expert
    let m = 3;
    let kern = uniform(&[2, m, 4, 4, 3, 3], &mut r);
    let biases = uniform(&[2, m, 4], &mut r);
    let mut err = 0.0f64;
    for e in 0..m {
        let pi = Tensor::from_fn(&[2, m, 6, 6], |i| if (i / 36) % m == e { 1.0 } else { 0.0 });
        let y = ddc_tensors(&x, &kern, &biases, &pi, g)?;
        for b in 0..2 {
            let (k, bias) = static_expert(&kern, &biases, b, e)?;
            let want = ops::conv2d(&x.batch_item(b)?, &k, Some(&bias), g)?;
            err = err.max(y.batch_item(b)?.max_abs_diff(&want));
        }
    }
    checks.push(Check::new("degenerate/one_hot_routing", err, EXACT_TOLERANCE, format!("M={m}")));

    // K = M: the top-k distribution is the dense one
    let (d, store) = ddcb(4, 4, routing(1.0, 4, 0.5), r.random())?;
    let mut tape = Tape::new();
    let f = tape.constant(x.clone());
    let field = d.route(&mut tape, &store, f)?;
    let err = tape.value(field.sparse).max_abs_diff(tape.value(field.dense));
    checks.push(Check::new("degenerate/top_k_equals_m", err, EXACT_TOLERANCE, "q vs p"));

    // blend weight 0: the routing field is the dense one
    let (d, store) = ddcb(4, 4, routing(1.0, 2, 0.0), r.random())?;
    let mut tape = Tape::new();
    let f = tape.constant(x);
    let field = d.route(&mut tape, &store, f)?;
    let err = tape.value(field.blended).max_abs_diff(tape.value(field.dense));
    checks.push(Check::new("degenerate/blend_zero", err, EXACT_TOLERANCE, "pi vs p"));
    Ok(checks)
}

fn argmax_axis1(t: &Tensor) -> Result<Vec<usize>> {
    let [b, m, h, w] = t.dims4()?;
    let mut out = Vec::with_capacity(b * h * w);
    for n in 0..b {
        for p in 0..h * w {
            let best = (0..m)
                .max_by(|&i, &j| t.data()[(n * m + i) * h * w + p].total_cmp(&t.data()[(n * m + j) * h * w + p]))
                .expect("experts");
            out.push(best);
        }
    }
    Ok(out)
}

/// Simplex, sparsity and temperature invariants of the routing field.
pub fn routing_suite(seed: u64) -> Result<Vec<Check>> {
    let mut r = rng(seed);
    let (mut sum_err, mut excess, mut flips) = (0.0f64, 0usize, 0usize);
    for _ in 0..8 {
        let experts = r.random_range(2..=6);
        let top_k = r.random_range(1..=experts);
        let blend = r.random_range(0.0..=1.0);
        let x = uniform(&[2, 4, 5, 5], &mut r);
        let param_seed: u64 = r.random();
        let mut reference: Option<Vec<usize>> = None;
        for tau in [0.5, 1.0, 2.0] {
            let (d, store) = ddcb(4, experts, routing(tau, top_k, blend), param_seed)?;
            let mut tape = Tape::new();
            let f = tape.constant(x.clone());
            let field = d.route(&mut tape, &store, f)?;
            for v in [field.dense, field.sparse, field.blended] {
                let t = tape.value(v);
                let [b, m, h, w] = t.dims4()?;
                for n in 0..b {
                    for p in 0..h * w {
                        let s: f64 = (0..m).map(|e| t.data()[(n * m + e) * h * w + p]).sum();
                        sum_err = sum_err.max((s - 1.0).abs());
                        if (0..m).any(|e| t.data()[(n * m + e) * h * w + p] < 0.0) {
                            sum_err = f64::INFINITY;
                        }
                    }
                }
            }
            let q = tape.value(field.sparse);
            let [b, m, h, w] = q.dims4()?;
            for n in 0..b {
                for p in 0..h * w {
                    let nz = (0..m).filter(|&e| q.data()[(n * m + e) * h * w + p] != 0.0).count();
                    excess += nz.saturating_sub(top_k);
                }
            }
            let am = argmax_axis1(tape.value(field.logits))?;
            match &reference {
                None => reference = Some(am),
                Some(prev) => flips += prev.iter().zip(&am).filter(|(a, b)| a != b).count(),
            }
        }
    }
    Ok(vec![
        Check::new("routing/simplex", sum_err, EXACT_TOLERANCE, "p, q and pi sum to one"),
        Check::new("routing/top_k_support", excess as f64, 0.5, "entries beyond K"),
        Check::new("routing/argmax_vs_tau", flips as f64, 0.5, "tau in {0.5, 1, 2}"),
    ])
}

// ---- gradients ------------------------------------------------------------

type ScalarFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = uniform(tape.shape(y), &mut rng(seed));
    let rv = tape.constant(r);
    let p = tape.mul(y, rv)?;
    Ok(tape.sum_all(p))
}

fn grad_entry(name: &str, x: Tensor, f: ScalarFn, opts: &GradCheckOptions) -> Result<Check> {
    let rep = grad_check_with(f, &x, opts)?;
    Ok(Check::new(
        format!("grad/{name}"),
        rep.max_rel_error,
        GRAD_TOLERANCE,
        format!("coord {} analytic {:.4e} numeric {:.4e}", rep.worst_index, rep.analytic, rep.numeric),
    ))
}

/// Worst relative error over every parameter of `store` (a seeded subset of coordinates each).
fn param_entry<F>(name: &str, store: &ParamStore, coords: usize, seed: u64, build: F) -> Result<Check>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut worst = Check::new(format!("grad/{name}"), 0.0, GRAD_TOLERANCE, "");
    for (k, pname) in store.names().enumerate() {
        if store.is_frozen(pname) {
            continue;
        }
        let opts = GradCheckOptions::subset(coords, seed.wrapping_add(k as u64));
        let rep = grad_check_param(store, pname, &build, &opts)?;
        if rep.max_rel_error > worst.error || !rep.max_rel_error.is_finite() {
            worst.error = rep.max_rel_error;
            worst.detail = format!("{pname}[{}] analytic {:.4e} numeric {:.4e}", rep.worst_index, rep.analytic, rep.numeric);
        }
    }
    Ok(worst)
}

fn op_entries(seed: u64) -> Result<Vec<(&'static str, Tensor, ScalarFn)>> {
    let mut r = rng(seed);
    let mut v: Vec<(&'static str, Tensor, ScalarFn)> = Vec::new();
    let ps: u64 = r.random();

    let other = uniform(&[2, 3, 4], &mut r);
    let o = other.clone();
    v.push(("add", uniform(&[2, 3, 4], &mut r), Box::new(move |t, x| {
        let c = t.constant(o.clone());
        let y = t.add(x, c)?;
        project(t, y, ps)
    })));
    let o = other.clone();
    v.push(("sub", uniform(&[2, 3, 4], &mut r), Box::new(move |t, x| {
        let c = t.constant(o.clone());
        let y = t.sub(c, x)?;
        project(t, y, ps)
    })));
    let o = other.clone();
    v.push(("mul", uniform(&[2, 3, 4], &mut r), Box::new(move |t, x| {
        let c = t.constant(o.clone());
        let y = t.mul(x, x)?;
        let y = t.mul(y, c)?;
        project(t, y, ps)
    })));
    let num = uniform(&[2, 3, 4], &mut r);
    v.push(("div", Tensor::rand_uniform(&[2, 3, 4], 0.5, 1.5, &mut r), Box::new(move |t, x| {
        let n = t.constant(num.clone());
        let a = t.div(n, x)?;
        let b = t.div(x, x)?;
        let y = t.add(a, b)?;
        project(t, y, ps)
    })));
    let o = other.clone();
    v.push(("maximum", uniform(&[2, 3, 4], &mut r), Box::new(move |t, x| {
        let c = t.constant(o.clone());
        let y = t.maximum(x, c)?;
        project(t, y, ps)
    })));
    v.push(("abs", off_zero(&[2, 3, 4], &mut r), Box::new(move |t, x| {
        let y = t.abs(x);
        project(t, y, ps)
    })));
    v.push(("gelu", Tensor::rand_uniform(&[2, 3, 4], -3.0, 3.0, &mut r), Box::new(move |t, x| {
        let y = t.gelu(x);
        project(t, y, ps)
    })));
    v.push(("sigmoid", Tensor::rand_uniform(&[2, 3, 4], -3.0, 3.0, &mut r), Box::new(move |t, x| {
        let y = t.sigmoid(x);
        project(t, y, ps)
    })));
    let o = other.clone();
    v.push(("mul_scalar_var", uniform(&[1], &mut r), Box::new(move |t, s| {
        let c = t.constant(o.clone());
        let y = t.mul_scalar_var(c, s)?;
        let y = t.mul(y, c)?;
        project(t, y, ps)
    })));
    v.push(("mean_all", uniform(&[2, 3, 4], &mut r), Box::new(move |t, x| {
        let sq = t.mul(x, x)?;
        Ok(t.mean_all(sq))
    })));
    v.push(("gap_broadcast", uniform(&[2, 3, 4, 5], &mut r), Box::new(move |t, x| {
        let g = t.gap(x)?;
        let y = t.broadcast_spatial(g, 2, 3)?;
        let z = t.broadcast_batch(y, 2);
        project(t, z, ps)
    })));
    v.push(("layout", uniform(&[2, 4, 3, 3], &mut r), Box::new(move |t, x| {
        let a = t.permute(x, &[0, 2, 3, 1])?;
        let a = t.reshape(a, &[2, 9, 4])?;
        let s = t.slice(a, 2, 1, 2)?;
        let c = t.concat(&[s, a], 2)?;
        project(t, c, ps)
    })));
    let o = uniform(&[2, 3, 4, 4], &mut r);
    v.push(("channel_shuffle", uniform(&[2, 3, 4, 4], &mut r), Box::new(move |t, x| {
        let c = t.constant(o.clone());
        let y = t.channel_shuffle(x, c)?;
        let z = t.channel_shuffle(c, x)?;
        let s = t.add(y, z)?;
        project(t, s, ps)
    })));
    v.push(("upsample_nearest2", uniform(&[1, 2, 3, 4], &mut r), Box::new(move |t, x| {
        let y = t.upsample_nearest2(x)?;
        project(t, y, ps)
    })));
    let w = uniform(&[5, 3], &mut r);
    let b = uniform(&[3], &mut r);
    v.push(("linear/input", uniform(&[2, 4, 5], &mut r), Box::new(move |t, x| {
        let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
        let y = t.linear(x, wv, Some(bv))?;
        project(t, y, ps)
    })));
    let xin = uniform(&[2, 4, 5], &mut r);
    v.push(("linear/weight", uniform(&[5, 3], &mut r), Box::new(move |t, w| {
        let xv = t.constant(xin.clone());
        let y = t.linear(xv, w, None)?;
        project(t, y, ps)
    })));
    let bm = uniform(&[2, 4, 3], &mut r);
    v.push(("matmul/left", uniform(&[2, 5, 4], &mut r), Box::new(move |t, a| {
        let bv = t.constant(bm.clone());
        let y = t.matmul(a, bv)?;
        project(t, y, ps)
    })));
    let am = uniform(&[2, 5, 4], &mut r);
    v.push(("matmul/right", uniform(&[2, 4, 3], &mut r), Box::new(move |t, b| {
        let av = t.constant(am.clone());
        let y = t.matmul(av, b)?;
        project(t, y, ps)
    })));
    v.push(("softmax", Tensor::rand_uniform(&[2, 5, 3], -2.0, 2.0, &mut r), Box::new(move |t, x| {
        let y = t.softmax(x, 1, 0.7)?;
        project(t, y, ps)
    })));
    v.push(("topk_softmax", Tensor::rand_uniform(&[2, 5, 3], -2.0, 2.0, &mut r), Box::new(move |t, x| {
        let y = t.topk_softmax(x, 1, 2)?;
        project(t, y, ps)
    })));
    let gain = Tensor::rand_uniform(&[3], 0.5, 1.5, &mut r);
    let shift = uniform(&[3], &mut r);
    v.push(("layer_norm/input", uniform(&[2, 3, 4], &mut r), Box::new(move |t, x| {
        let (g, s) = (t.constant(gain.clone()), t.constant(shift.clone()));
        let y = t.layer_norm(x, 1, g, s, 1e-5)?;
        project(t, y, ps)
    })));
    let xin = uniform(&[2, 4, 3], &mut r);
    let shift = uniform(&[3], &mut r);
    v.push(("layer_norm/gain", uniform(&[3], &mut r), Box::new(move |t, g| {
        let (xv, s) = (t.constant(xin.clone()), t.constant(shift.clone()));
        let y = t.layer_norm(xv, 2, g, s, 1e-5)?;
        project(t, y, ps)
    })));
    let geom = ConvGeometry::new(3, 2, 1, 2)?;
    let w = uniform(&[4, 2, 3, 3], &mut r);
    let b = uniform(&[4], &mut r);
    v.push(("conv2d/input", uniform(&[2, 4, 5, 6], &mut r), Box::new(move |t, x| {
        let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(x, wv, Some(bv), geom)?;
        project(t, y, ps)
    })));
    let xin = uniform(&[2, 4, 5, 6], &mut r);
    v.push(("conv2d/weight", uniform(&[4, 2, 3, 3], &mut r), Box::new(move |t, w| {
        let xv = t.constant(xin.clone());
        let y = t.conv2d(xv, w, None, geom)?;
        project(t, y, ps)
    })));
    let g3 = ConvGeometry::same(3);
    let kern = uniform(&[1, 3, 2, 2, 3, 3], &mut r);
    let bias = uniform(&[1, 3, 2], &mut r);
    let pi = simplex(1, 3, 4, 4, &mut r)?;
    let xin = uniform(&[1, 2, 4, 4], &mut r);
    {
        let (kern, bias, pi) = (kern.clone(), bias.clone(), pi.clone());
        v.push(("dynamic_conv/input", xin.clone(), Box::new(move |t, x| {
            let (k, b, p) = (t.constant(kern.clone()), t.constant(bias.clone()), t.constant(pi.clone()));
            let y = t.dynamic_conv(x, k, b, p, g3)?;
            project(t, y, ps)
        })));
    }
    {
        let (xin, bias, pi) = (xin.clone(), bias.clone(), pi.clone());
        v.push(("dynamic_conv/kernels", kern.clone(), Box::new(move |t, k| {
            let (x, b, p) = (t.constant(xin.clone()), t.constant(bias.clone()), t.constant(pi.clone()));
            let y = t.dynamic_conv(x, k, b, p, g3)?;
            project(t, y, ps)
        })));
    }
    {
        let (xin, kern, pi) = (xin.clone(), kern.clone(), pi.clone());
        v.push(("dynamic_conv/biases", bias.clone(), Box::new(move |t, b| {
            let (x, k, p) = (t.constant(xin.clone()), t.constant(kern.clone()), t.constant(pi.clone()));
            let y = t.dynamic_conv(x, k, b, p, g3)?;
            project(t, y, ps)
        })));
    }
    v.push(("dynamic_conv/routing", pi, Box::new(move |t, p| {
        let (x, k, b) = (t.constant(xin.clone()), t.constant(kern.clone()), t.constant(bias.clone()));
        let y = t.dynamic_conv(x, k, b, p, g3)?;
        project(t, y, ps)
    })));
    let ck = uniform(&[2, 3], &mut r);
    let cb = uniform(&[2], &mut r);
    v.push(("channel_conv/input", uniform(&[1, 5, 3, 3], &mut r), Box::new(move |t, x| {
        let (k, b) = (t.constant(ck.clone()), t.constant(cb.clone()));
        let y = t.channel_conv(x, k, b, 2, 1)?;
        project(t, y, ps)
    })));
    let xin = uniform(&[1, 5, 3, 3], &mut r);
    v.push(("channel_conv/kernels", uniform(&[2, 3], &mut r), Box::new(move |t, k| {
        let x = t.constant(xin.clone());
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.channel_conv(x, k, b, 2, 1)?;
        project(t, y, ps)
    })));
    v.push(("sobel", uniform(&[1, 2, 5, 5], &mut r), Box::new(move |t, x| {
        let y = t.sobel(x)?;
        project(t, y, ps)
    })));
    Ok(v)
}

fn ops_checks(seed: u64) -> Result<Vec<Check>> {
    let opts = GradCheckOptions::default();
    op_entries(seed)?
        .into_iter()
        .map(|(name, x, f)| grad_entry(&format!("ops/{name}"), x, f, &opts))
        .collect()
}

fn apg_check(seed: u64) -> Result<Check> {
    let mut r = rng(seed);
    let (tokens, heads) = (4, 2);
    let apg1 = Apg {
        prefix: "apg1".into(),
        prev_width: None,
        width: 4,
        tokens,
        heads,
        scale: 1,
    };
    let apg2 = Apg {
        prefix: "apg2".into(),
        prev_width: Some(4),
        width: 8,
        tokens,
        heads,
        scale: 2,
    };
    let mut store = ParamStore::new();
    {
        let mut init = Init {
            store: &mut store,
            rng: &mut r,
        };
        init_d0(&mut init, "d0", tokens, 4);
        apg1.init(&mut init)?;
        apg2.init(&mut init)?;
    }
    let store = jitter(&store, 0.3, r.random())?;
    let f1 = uniform(&[1, 4, 4, 4], &mut r);
    let f2 = uniform(&[1, 8, 2, 2], &mut r);
    let ps: u64 = r.random();
    let build = move |t: &mut Tape, s: &ParamStore| -> Result<Var> {
        let d0 = init_priors(t, s, "d0", 1)?;
        let x1 = t.constant(f1.clone());
        let p1 = apg1.step(t, s, x1, &d0, ApgMode::Full)?;
        let x2 = t.constant(f2.clone());
        let p2: PriorSet = apg2.step(t, s, x2, &p1, ApgMode::Full)?;
        project(t, p2.tokens, ps)
    };
    param_entry("blocks/apg_step", &store, 6, seed, build)
}

fn ddcb_check(seed: u64) -> Result<Vec<Check>> {
    let mut r = rng(seed);
    let (d, store) = ddcb(4, 3, routing(1.0, 2, 0.5), r.random())?;
    let x = uniform(&[1, 4, 5, 5], &mut r);
    let toks = uniform(&[1, 3, 4], &mut r);
    let ps: u64 = r.random();
    let (d2, s2, t2) = (d.clone(), store.clone(), toks.clone());
    let input = grad_entry(
        "blocks/ddcb_block/input",
        x.clone(),
        Box::new(move |t, xv| {
            let tv = t.constant(t2.clone());
            let y = d2.block(t, &s2, xv, &PriorSet { tokens: tv, scale: 1 })?;
            project(t, y, ps)
        }),
        &GradCheckOptions::default(),
    )?;
    let (d2, s2, x2) = (d.clone(), store.clone(), x.clone());
    let priors = grad_entry(
        "blocks/ddcb_block/priors",
        toks.clone(),
        Box::new(move |t, tv| {
            let xv = t.constant(x2.clone());
            let y = d2.block(t, &s2, xv, &PriorSet { tokens: tv, scale: 1 })?;
            project(t, y, ps)
        }),
        &GradCheckOptions::default(),
    )?;
    let params = param_entry("blocks/ddcb_block/params", &store, 6, seed, move |t, s| {
        let xv = t.constant(x.clone());
        let tv = t.constant(toks.clone());
        let y = d.block(t, s, xv, &PriorSet { tokens: tv, scale: 1 })?;
        project(t, y, ps)
    })?;
    Ok(vec![input, priors, params])
}

fn scfb_check(seed: u64) -> Result<Vec<Check>> {
    let mut r = rng(seed);
    let s = Scfb {
        prefix: "scfb".into(),
        width: 4,
        cwmc: CwmcConfig::default(),
        mode: ScfbMode::Full,
    };
    let mut store = ParamStore::new();
    s.init(&mut Init {
        store: &mut store,
        rng: &mut r,
    })?;
    let store = jitter(&store, 0.3, r.random())?;
    let ir = uniform(&[1, 4, 6, 6], &mut r);
    let vis = uniform(&[1, 4, 6, 6], &mut r);
    let ps: u64 = r.random();
    let (s2, st2, v2) = (s.clone(), store.clone(), vis.clone());
    let input = grad_entry(
        "blocks/scfb_full/input",
        ir.clone(),
        Box::new(move |t, iv| {
            let vv = t.constant(v2.clone());
            let y = s2.fuse(t, &st2, iv, vv)?;
            project(t, y, ps)
        }),
        &GradCheckOptions::default(),
    )?;
    let params = param_entry("blocks/scfb_full/params", &store, 6, seed, move |t, st| {
        let iv = t.constant(ir.clone());
        let vv = t.constant(vis.clone());
        let y = s.fuse(t, st, iv, vv)?;
        project(t, y, ps)
    })?;
    Ok(vec![input, params])
}

fn loss_checks(seed: u64) -> Result<Vec<Check>> {
    let mut r = rng(seed);
    let shape = [1, 1, 12, 12];
    let ir = Tensor::rand_uniform(&shape, 0.0, 1.0, &mut r);
    let vis = Tensor::rand_uniform(&shape, 0.0, 1.0, &mut r);
    let f = Tensor::rand_uniform(&shape, 0.05, 0.95, &mut r);
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    for term in ["intensity", "gradient", "ssim", "struct", "total"] {
        let (i, v) = (ir.clone(), vis.clone());
        let fun: ScalarFn = Box::new(move |t, fv| {
            let iv = t.constant(i.clone());
            let vv = t.constant(v.clone());
            match term {
                "intensity" => loss::intensity_loss(t, fv, iv, vv),
                "gradient" => loss::gradient_loss(t, fv, iv, vv),
                "ssim" => loss::ssim_loss(t, fv, iv, vv).map(|r| r.0),
                "struct" => loss::struct_loss(t, fv, iv, vv),
                _ => loss::total_loss(t, fv, iv, vv, &LossWeights::default()).map(|l| l.total),
            }
        });
        out.push(grad_entry(&format!("blocks/loss_{term}"), f.clone(), fun, &opts)?);
    }
    Ok(out)
}

/// Total loss of the two-scale toy network on a 16x16 pair.
fn end2end_checks(seed: u64) -> Result<Vec<Check>> {
    let mut r = rng(seed);
    let cfg = FusionConfig::toy();
    let net = Network::new(cfg.clone())?;
    let store = jitter(&net.init(r.random())?, 0.05, r.random())?;
    let shape = [1, 1, 16, 16];
    let ir = Tensor::rand_uniform(&shape, 0.0, 1.0, &mut r);
    let vis = Tensor::rand_uniform(&shape, 0.0, 1.0, &mut r);
    let w = cfg.loss;
    // the loss sources stay fixed: only the network input moves
    let (n2, s2, i2, v2) = (net.clone(), store.clone(), ir.clone(), vis.clone());
    let input = grad_entry(
        "end2end/input",
        ir.clone(),
        Box::new(move |t, xv| {
            let iv = t.constant(i2.clone());
            let vv = t.constant(v2.clone());
            let f = n2.forward(t, &s2, xv, vv)?;
            Ok(loss::total_loss(t, f, iv, vv, &w)?.total)
        }),
        &GradCheckOptions::subset(24, seed),
    )?;
    let params = param_entry("end2end/params", &store, 3, seed, move |t, s| {
        let iv = t.constant(ir.clone());
        let vv = t.constant(vis.clone());
        let f = net.forward(t, s, iv, vv)?;
        Ok(loss::total_loss(t, f, iv, vv, &w)?.total)
    })?;
    Ok(vec![input, params])
}

pub fn gradient_suite(scope: Scope, seed: u64) -> Result<Vec<Check>> {
    match scope {
        Scope::Ops => ops_checks(seed),
        Scope::Blocks => {
            let mut v = vec![apg_check(seed)?];
            v.extend(ddcb_check(seed.wrapping_add(1))?);
            v.extend(scfb_check(seed.wrapping_add(2))?);
            v.extend(loss_checks(seed.wrapping_add(3))?);
            Ok(v)
        }
        Scope::End2end => end2end_checks(seed),
    }
}

/// Oracle equivalence, degeneracies, routing invariants and operator gradients.
pub fn selftest(seed: u64) -> Result<Vec<Check>> {
    let mut v = oracle_suite(seed, ORACLE_INSTANCES)?;
    v.extend(degeneracy_suite(seed)?);
    v.extend(routing_suite(seed)?);
    v.extend(gradient_suite(Scope::Ops, seed)?);
    Ok(v)
}
