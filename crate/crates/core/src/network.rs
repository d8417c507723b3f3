//! Dual-branch multi-scale fusion network.
//!
//! Each modality runs its own encoder. At every scale an embedding conv
//! (stride 2 after the first scale) feeds the prior generator; the local
//! branch (dynamic convolution, or an ablation stand-in) and a pooled global
//! branch are summed and passed through a residual pointwise FFN. Per-scale
//! features of both modalities are fused, then decoded deepest-first with
//! nearest upsampling, a channel-reducing conv, injection of the same-scale
//! fused feature and a basic block. The full-resolution result is
//! concatenated with the finest fused feature and mapped to one sigmoid
//! channel.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::{D0Mode, DdcbMode, FusionConfig};
use crate::dynconv::{Ddcb, Routing};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{basic_block, init_basic_block, Scfb};
use crate::layers;
use crate::params::{Init, ParamStore, RESIDUAL_GAIN};
use crate::prior::{init_d0, init_priors, Apg, PriorSet};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Ir,
    Vis,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Ir, Modality::Vis];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ir => "ir",
            Modality::Vis => "vis",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-scale encoder outputs of one modality (index 0 is scale 1).
#[derive(Clone, Debug)]
pub struct Encoded {
    pub feats: Vec<Var>,
    pub embeds: Vec<Var>,
    pub priors: Vec<PriorSet>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: FusionConfig,
}

impl Network {
    pub fn new(cfg: FusionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn width(&self, scale: usize) -> usize {
        self.cfg.widths[scale - 1]
    }

    pub fn d0_name(&self, m: Modality) -> String {
        match self.cfg.d0_mode {
            D0Mode::Shared => "enc.d0".into(),
            _ => format!("enc.{m}.d0"),
        }
    }

    fn enc(&self, m: Modality, scale: usize, name: &str) -> String {
        format!("enc.{m}.s{scale}.{name}")
    }

    pub fn apg(&self, m: Modality, scale: usize) -> Apg {
        Apg {
            prefix: self.enc(m, scale, "apg"),
            prev_width: (scale > 1).then(|| self.width(scale - 1)),
            width: self.width(scale),
            tokens: self.cfg.priors,
            heads: self.cfg.heads,
            scale,
        }
    }

    pub fn ddcb(&self, m: Modality, scale: usize) -> Result<Ddcb> {
        let k = self.cfg.kernel;
        Ok(Ddcb {
            prefix: self.enc(m, scale, "ddcb"),
            width: self.width(scale),
            experts: self.cfg.priors,
            geom: ConvGeometry::new(k, 1, k / 2, self.cfg.groups)?,
            routing: Routing {
                tau: self.cfg.tau,
                top_k: self.cfg.top_k,
                blend: self.cfg.blend,
            },
        })
    }

    pub fn scfb(&self, scale: usize) -> Scfb {
        Scfb {
            prefix: format!("fuse.s{scale}"),
            width: self.width(scale),
            cwmc: self.cfg.cwmc,
            mode: self.cfg.scfb_mode,
        }
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let c1 = self.width(1);
        for m in Modality::BOTH {
            let name = self.d0_name(m);
            if !init.store.contains(&name) {
                init_d0(&mut init, &name, self.cfg.priors, c1);
            }
            for s in 1..=self.cfg.scales() {
                let c = self.width(s);
                let cin = if s == 1 { 1 } else { self.width(s - 1) };
                init.conv_scaled(&self.enc(m, s, "embed"), cin, c, 3, 1.0);
                self.apg(m, s).init(&mut init)?;
                match self.cfg.ddcb_mode {
                    DdcbMode::Full => self.ddcb(m, s)?.init(&mut init)?,
                    DdcbMode::RestormerStandIn => init_basic_block(&mut init, &self.enc(m, s, "local"), c),
                    DdcbMode::ConcatPrior => {
                        init.conv_scaled(&self.enc(m, s, "concat"), 2 * c, c, 1, 1.0);
                        init_basic_block(&mut init, &self.enc(m, s, "local"), c);
                    }
                }
                init.linear(&self.enc(m, s, "global.fc1"), c, c);
                init.linear_scaled(&self.enc(m, s, "global.fc2"), c, c, RESIDUAL_GAIN);
                init.conv(&self.enc(m, s, "ffn.fc1"), c, 2 * c, 1);
                init.conv_scaled(&self.enc(m, s, "ffn.fc2"), 2 * c, c, 1, RESIDUAL_GAIN);
            }
        }
        for s in 1..=self.cfg.scales() {
            self.scfb(s).init(&mut init)?;
        }
        for s in (1..self.cfg.scales()).rev() {
            let c = self.width(s);
            init.conv_scaled(&format!("dec.s{s}.up"), self.width(s + 1), c, 3, 1.0);
            init.linear(&format!("dec.s{s}.sim.fc1"), c, c);
            init.zeros(&format!("dec.s{s}.sim.fc2.weight"), &[c, 2 * c]);
            init.zeros(&format!("dec.s{s}.sim.fc2.bias"), &[2 * c]);
            init_basic_block(&mut init, &format!("dec.s{s}.refine"), c);
        }
        init_basic_block(&mut init, "final.block", 2 * c1);
        init.conv("final.conv1", 2 * c1, c1, 3);
        init.conv_scaled("final.conv2", c1, 1, 3, RESIDUAL_GAIN);
        if self.cfg.d0_mode == D0Mode::Frozen {
            for m in Modality::BOTH {
                store.freeze(&self.d0_name(m));
            }
        }
        Ok(store)
    }

    /// Checks that an input pair fits the configured depth.
    pub fn check_inputs(&self, ir: &Tensor, vis: &Tensor) -> Result<()> {
        if ir.shape() != vis.shape() {
            return Err(dim_err(
                "modalities",
                format!("infrared {:?} and visible {:?} differ", ir.shape(), vis.shape()),
            ));
        }
        let [_, c, h, w] = ir.dims4()?;
        if c != 1 {
            return Err(dim_err("channels", format!("inputs must be single-channel, got {c}")));
        }
        let factor = 1 << (self.cfg.scales() - 1);
        if h % factor != 0 || w % factor != 0 || h < factor * 3 || w < factor * 3 {
            return Err(dim_err(
                "spatial",
                format!(
                    "{h}x{w} input must be divisible by {factor} with at least 3 pixels per side at the deepest scale"
                ),
            ));
        }
        Ok(())
    }

    /// One encoder scale: `(f_next, priors_next, f_emb)`.
    pub fn encode_scale(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        m: Modality,
        scale: usize,
        f_prev: Var,
        priors_prev: &PriorSet,
    ) -> Result<(Var, PriorSet, Var)> {
        if scale == 0 || scale > self.cfg.scales() {
            return Err(Error::Config(format!("scale {scale} outside 1..={}", self.cfg.scales())));
        }
        let c = self.width(scale);
        let stride = if scale == 1 { 1 } else { 2 };
        let f_emb = layers::conv(tape, store, &self.enc(m, scale, "embed"), f_prev, ConvGeometry::new(3, stride, 1, 1)?)?;
        let priors = self.apg(m, scale).step(tape, store, f_emb, priors_prev, self.cfg.apg_mode)?;

        let local = match self.cfg.ddcb_mode {
            DdcbMode::Full => self.ddcb(m, scale)?.block(tape, store, f_emb, &priors)?,
            DdcbMode::RestormerStandIn => basic_block(tape, store, &self.enc(m, scale, "local"), f_emb)?,
            DdcbMode::ConcatPrior => {
                let [b, _, h, w] = tape.value(f_emb).dims4()?;
                let summary = token_mean(tape, priors.tokens)?;
                let summary = tape.broadcast_spatial(summary, h, w)?;
                let joint = tape.concat(&[f_emb, summary], 1)?;
                let mixed = layers::conv1x1(tape, store, &self.enc(m, scale, "concat"), joint)?;
                debug_assert_eq!(tape.shape(mixed), &[b, c, h, w]);
                basic_block(tape, store, &self.enc(m, scale, "local"), mixed)?
            }
        };

        let global = global_extractor(tape, store, &self.enc(m, scale, "global"), f_emb)?;
        let s = tape.add(local, global)?;
        let h = layers::conv1x1(tape, store, &self.enc(m, scale, "ffn.fc1"), s)?;
        let h = tape.gelu(h);
        let h = layers::conv1x1(tape, store, &self.enc(m, scale, "ffn.fc2"), h)?;
        let f_next = tape.add(s, h)?;
        Ok((f_next, priors, f_emb))
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, m: Modality, x: Var) -> Result<Encoded> {
        let batch = tape.value(x).dims4()?[0];
        let mut priors = init_priors(tape, store, &self.d0_name(m), batch)?;
        let mut f = x;
        let mut out = Encoded {
            feats: Vec::new(),
            embeds: Vec::new(),
            priors: Vec::new(),
        };
        for s in 1..=self.cfg.scales() {
            let (next, p, emb) = self.encode_scale(tape, store, m, s, f, &priors)?;
            out.feats.push(next);
            out.embeds.push(emb);
            out.priors.push(p);
            f = next;
            priors = p;
        }
        Ok(out)
    }

    /// Fuses per-scale features and decodes them to a `[B, 1, H, W]` image in `(0, 1)`.
    pub fn fuse_and_decode(&self, tape: &mut Tape, store: &ParamStore, ir: &[Var], vis: &[Var]) -> Result<Var> {
        let scales = self.cfg.scales();
        if ir.len() != scales || vis.len() != scales {
            return Err(Error::Config(format!(
                "expected {scales} feature scales per modality, got {} and {}",
                ir.len(),
                vis.len()
            )));
        }
        let fused: Vec<Var> = (1..=scales)
            .map(|s| self.scfb(s).fuse(tape, store, ir[s - 1], vis[s - 1]))
            .collect::<Result<_>>()?;

        let mut d = fused[scales - 1];
        for s in (1..scales).rev() {
            let up = tape.upsample_nearest2(d)?;
            let up = layers::conv3x3(tape, store, &format!("dec.s{s}.up"), up)?;
            if tape.shape(up) != tape.shape(fused[s - 1]) {
                return Err(Error::Config(format!(
                    "decoder scale {s}: upsampled {:?} does not match fused {:?}",
                    tape.shape(up),
                    tape.shape(fused[s - 1])
                )));
            }
            let injected = semantic_injection(tape, store, &format!("dec.s{s}.sim"), up, fused[s - 1])?;
            d = basic_block(tape, store, &format!("dec.s{s}.refine"), injected)?;
        }
        let joint = tape.concat(&[d, fused[0]], 1)?;
        let h = basic_block(tape, store, "final.block", joint)?;
        let h = layers::conv3x3(tape, store, "final.conv1", h)?;
        let h = tape.gelu(h);
        let h = layers::conv3x3(tape, store, "final.conv2", h)?;
        Ok(tape.sigmoid(h))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ir: Var, vis: Var) -> Result<Var> {
        self.check_inputs(tape.value(ir), tape.value(vis))?;
        let ei = self.encode(tape, store, Modality::Ir, ir)?;
        let ev = self.encode(tape, store, Modality::Vis, vis)?;
        self.fuse_and_decode(tape, store, &ei.feats, &ev.feats)
    }

    /// Fused image for a batch of pairs.
    pub fn infer(&self, store: &ParamStore, ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let i = tape.constant(ir.clone());
        let v = tape.constant(vis.clone());
        let out = self.forward(&mut tape, store, i, v)?;
        Ok(tape.value(out).clone())
    }
}

/// Mean over the token axis: `[B, M, C] -> [B, C]`.
fn token_mean(tape: &mut Tape, tokens: Var) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    let t = tape.permute(tokens, &[0, 2, 1])?;
    let t = tape.reshape(t, &[s[0], s[2], s[1], 1])?;
    tape.gap(t)
}

/// `f + broadcast(MLP(GAP(f)))`.
pub fn global_extractor(tape: &mut Tape, store: &ParamStore, prefix: &str, f: Var) -> Result<Var> {
    let [_, _, h, w] = tape.value(f).dims4()?;
    let z = tape.gap(f)?;
    let z = layers::linear(tape, store, &format!("{prefix}.fc1"), z)?;
    let z = tape.gelu(z);
    let z = layers::linear(tape, store, &format!("{prefix}.fc2"), z)?;
    let z = tape.broadcast_spatial(z, h, w)?;
    tape.add(f, z)
}

/// `(1 + gamma) * d + beta + fused`, with `gamma, beta` pooled from `fused`.
pub fn semantic_injection(tape: &mut Tape, store: &ParamStore, prefix: &str, d: Var, fused: Var) -> Result<Var> {
    let [_, c, h, w] = tape.value(d).dims4()?;
    let z = tape.gap(fused)?;
    let z = layers::linear(tape, store, &format!("{prefix}.fc1"), z)?;
    let z = tape.gelu(z);
    let z = layers::linear(tape, store, &format!("{prefix}.fc2"), z)?;
    let gamma = tape.slice(z, 1, 0, c)?;
    let gamma = tape.add_scalar(gamma, 1.0);
    let beta = tape.slice(z, 1, c, c)?;
    let gamma = tape.broadcast_spatial(gamma, h, w)?;
    let beta = tape.broadcast_spatial(beta, h, w)?;
    let y = tape.mul(d, gamma)?;
    let y = tape.add(y, beta)?;
    tape.add(y, fused)
}
