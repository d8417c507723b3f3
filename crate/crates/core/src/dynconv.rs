//! Prior-conditioned dynamic convolution.
//!
//! Every prior token is mapped by one shared generator to an expert kernel
//! and bias. A pointwise router scores the experts at every pixel; the dense
//! softmax and the renormalized top-k distribution are blended, and the
//! output at each pixel is the blend-weighted sum of expert responses, which
//! equals convolving with the blend-weighted kernel.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::layers;
use crate::params::{Init, ParamStore};
use crate::prior::PriorSet;
use crate::tensor::{ConvGeometry, Tensor};

/// Second moment of GELU applied to a standard normal input.
const GELU_SECOND_MOMENT: f64 = 0.425;

/// Routing hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Routing {
    pub tau: f64,
    pub top_k: usize,
    pub blend: f64,
}

impl Routing {
    pub fn validate(&self, experts: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Parameter(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.top_k == 0 || self.top_k > experts {
            return Err(Error::Parameter(format!("top-k must lie in 1..={experts}, got {}", self.top_k)));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Parameter(format!("blend weight must lie in [0, 1], got {}", self.blend)));
        }
        Ok(())
    }
}

/// Per-pixel distributions over experts, each `[B, M, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingField {
    pub logits: Var,
    pub dense: Var,
    pub sparse: Var,
    pub blended: Var,
    pub routing: Routing,
}

/// One generated expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Generated experts of a batch: kernels `[B, M, Cout, Cin/g, k, k]`, biases `[B, M, Cout]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertSet {
    pub kernels: Var,
    pub biases: Var,
}

impl ExpertSet {
    /// Materializes the experts of batch element `b`.
    pub fn experts(&self, tape: &Tape, b: usize) -> Result<Vec<ExpertParams>> {
        let k = tape.value(self.kernels);
        let bias = tape.value(self.biases);
        let s = k.shape();
        if b >= s[0] {
            return Err(dim_err("batch", format!("index {b} out of {}", s[0])));
        }
        let (m, klen, cout) = (s[1], s[2] * s[3] * s[4] * s[5], s[2]);
        (0..m)
            .map(|e| {
                let off = (b * m + e) * klen;
                Ok(ExpertParams {
                    kernel: Tensor::new(&s[2..], k.data()[off..off + klen].to_vec())?,
                    bias: Tensor::new(&[cout], bias.data()[(b * m + e) * cout..][..cout].to_vec())?,
                })
            })
            .collect()
    }
}

/// Parameters of one dynamic convolution block, stored under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ddcb {
    pub prefix: String,
    pub width: usize,
    pub experts: usize,
    pub geom: ConvGeometry,
    pub routing: Routing,
}

impl Ddcb {
    fn p(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn kernel_len(&self) -> usize {
        let k = self.geom.kernel;
        self.width * (self.width / self.geom.groups) * k * k
    }

    /// Flattened generator output length: kernel entries plus bias.
    pub fn generator_len(&self) -> usize {
        self.kernel_len() + self.width
    }

    pub fn router_hidden(&self) -> usize {
        (self.width / 4).max(1)
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) -> Result<()> {
        let c = self.width;
        if c % self.geom.groups != 0 {
            return Err(dim_err("groups", format!("width {c} not divisible by {} groups", self.geom.groups)));
        }
        self.routing.validate(self.experts)?;
        init.linear(&self.p("gen.fc1"), c, c);
        // generated kernels then start near fan-in scaled magnitude
        let fan_in = (c / self.geom.groups * self.geom.kernel * self.geom.kernel) as f64;
        let std = 1.0 / (fan_in.sqrt() * (GELU_SECOND_MOMENT * c as f64).sqrt());
        init.normal(&self.p("gen.fc2.weight"), &[c, self.generator_len()], std);
        init.zeros(&self.p("gen.fc2.bias"), &[self.generator_len()]);
        init.conv(&self.p("router.fc1"), c, self.router_hidden(), 1);
        init.conv(&self.p("router.fc2"), self.router_hidden(), self.experts, 1);
        init.layer_norm(&self.p("norm"), c);
        Ok(())
    }

    /// Maps every prior token through the shared generator.
    pub fn generate_experts(&self, tape: &mut Tape, store: &ParamStore, priors: &PriorSet) -> Result<ExpertSet> {
        let s = tape.shape(priors.tokens).to_vec();
        if s.len() != 3 || s[2] != self.width || s[1] != self.experts {
            return Err(dim_err(
                "prior tokens",
                format!("expected [B, {}, {}], got {s:?}", self.experts, self.width),
            ));
        }
        let b = s[0];
        let h = layers::linear(tape, store, &self.p("gen.fc1"), priors.tokens)?;
        let h = tape.gelu(h);
        let flat = layers::linear(tape, store, &self.p("gen.fc2"), h)?;
        let kl = self.kernel_len();
        let k = self.geom.kernel;
        let kernels = tape.slice(flat, 2, 0, kl)?;
        let kernels = tape.reshape(
            kernels,
            &[b, self.experts, self.width, self.width / self.geom.groups, k, k],
        )?;
        let biases = tape.slice(flat, 2, kl, self.width)?;
        Ok(ExpertSet { kernels, biases })
    }

    /// Scores experts at every pixel of `f` and forms the three distributions.
    pub fn route(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<RoutingField> {
        self.routing.validate(self.experts)?;
        let r = self.routing;
        let h = layers::conv1x1(tape, store, &self.p("router.fc1"), f)?;
        let h = tape.gelu(h);
        let raw = layers::conv1x1(tape, store, &self.p("router.fc2"), h)?;
        let logits = tape.scale(raw, 1.0 / r.tau);
        let dense = tape.softmax(logits, 1, 1.0)?;
        let sparse = tape.topk_softmax(logits, 1, r.top_k)?;
        let blended = blend(tape, sparse, dense, r.blend)?;
        Ok(RoutingField {
            logits,
            dense,
            sparse,
            blended,
            routing: r,
        })
    }

    /// `F + GELU(LN_channels(DDC(F, D)))`.
    pub fn block(&self, tape: &mut Tape, store: &ParamStore, f_in: Var, priors: &PriorSet) -> Result<Var> {
        let c = tape.value(f_in).dims4()?[1];
        if c != self.width {
            return Err(dim_err("channels", format!("block width is {}, input has {c}", self.width)));
        }
        let experts = self.generate_experts(tape, store, priors)?;
        let field = self.route(tape, store, f_in)?;
        let y = ddc_forward(tape, f_in, &experts, &field, self.geom)?;
        let y = layers::layer_norm_channels(tape, store, &self.p("norm"), y)?;
        let y = tape.gelu(y);
        tape.add(f_in, y)
    }
}

/// `lambda * q + (1 - lambda) * p`.
pub fn blend(tape: &mut Tape, q: Var, p: Var, lambda: f64) -> Result<Var> {
    let a = tape.scale(q, lambda);
    let b = tape.scale(p, 1.0 - lambda);
    tape.add(a, b)
}

/// Position-dependent convolution with per-pixel expert mixing.
pub fn ddc_forward(
    tape: &mut Tape,
    f: Var,
    experts: &ExpertSet,
    routing: &RoutingField,
    geom: ConvGeometry,
) -> Result<Var> {
    tape.dynamic_conv(f, experts.kernels, experts.biases, routing.blended, geom)
}
