//! Cross-modal channel fusion.
//!
//! Both streams are refined by a residual basic block, modulated channel-wise
//! by coefficients predicted from their joint pooled descriptor, interleaved
//! channel by channel, and mixed by sliding 1-D convolutions along the channel
//! axis in three branches of increasing depth before a 1x1 projection.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::{CwmcConfig, ScfbMode};
use crate::error::{dim_err, Result};
use crate::layers;
use crate::params::{Init, ParamStore, RESIDUAL_GAIN};

/// Number of stacked mixing units in each branch.
pub const BRANCH_DEPTHS: [usize; 3] = [1, 2, 3];

pub fn init_basic_block<R: Rng>(init: &mut Init<'_, R>, prefix: &str, c: usize) {
    init.conv(&format!("{prefix}.conv1"), c, c, 3);
    init.layer_norm(&format!("{prefix}.norm"), c);
    init.conv_scaled(&format!("{prefix}.conv2"), c, c, 3, RESIDUAL_GAIN);
}

/// `x + conv3x3(GELU(LN_channels(conv3x3(x))))`.
pub fn basic_block(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = layers::conv3x3(tape, store, &format!("{prefix}.conv1"), x)?;
    let h = layers::layer_norm_channels(tape, store, &format!("{prefix}.norm"), h)?;
    let h = tape.gelu(h);
    let h = layers::conv3x3(tape, store, &format!("{prefix}.conv2"), h)?;
    tape.add(x, h)
}

/// Descriptor MLP `2C -> C -> 4C`; the last layer starts at zero (identity modulation).
pub fn init_film<R: Rng>(init: &mut Init<'_, R>, prefix: &str, c: usize) {
    init.linear(&format!("{prefix}.fc1"), 2 * c, c);
    init.zeros(&format!("{prefix}.fc2.weight"), &[c, 4 * c]);
    init.zeros(&format!("{prefix}.fc2.bias"), &[4 * c]);
}

/// Raw FiLM coefficients `[B, 4C]` laid out as `(gamma_ir, beta_ir, gamma_vis, beta_vis)`,
/// with the gammas still offset by -1.
pub fn film_coefficients(tape: &mut Tape, store: &ParamStore, prefix: &str, ir: Var, vis: Var) -> Result<Var> {
    let joint = tape.concat(&[ir, vis], 1)?;
    let z = tape.gap(joint)?;
    let h = layers::linear(tape, store, &format!("{prefix}.fc1"), z)?;
    let h = tape.gelu(h);
    layers::linear(tape, store, &format!("{prefix}.fc2"), h)
}

/// Channel-wise affine modulation of both streams from their joint descriptor.
pub fn film_gate(tape: &mut Tape, store: &ParamStore, prefix: &str, ir: Var, vis: Var) -> Result<(Var, Var)> {
    if tape.shape(ir) != tape.shape(vis) {
        return Err(dim_err(
            "modalities",
            format!("infrared {:?} and visible {:?} differ", tape.shape(ir), tape.shape(vis)),
        ));
    }
    let [_, c, h, w] = tape.value(ir).dims4()?;
    let raw = film_coefficients(tape, store, prefix, ir, vis)?;
    let mut modulate = |x: Var, block: usize| -> Result<Var> {
        let gamma = tape.slice(raw, 1, 2 * block * c, c)?;
        let gamma = tape.add_scalar(gamma, 1.0);
        let beta = tape.slice(raw, 1, (2 * block + 1) * c, c)?;
        let gamma = tape.broadcast_spatial(gamma, h, w)?;
        let beta = tape.broadcast_spatial(beta, h, w)?;
        let y = tape.mul(x, gamma)?;
        tape.add(y, beta)
    };
    let ir_out = modulate(ir, 0)?;
    let vis_out = modulate(vis, 1)?;
    Ok((ir_out, vis_out))
}

/// Width of the compression layer after folding `n_win` windows.
pub fn cwmc_hidden(cfg: &CwmcConfig, n_win: usize) -> usize {
    (cfg.kernels * n_win / 2).max(1)
}

pub fn init_cwmc<R: Rng>(init: &mut Init<'_, R>, prefix: &str, cfg: &CwmcConfig, cin: usize, cout: usize) -> Result<()> {
    let n_win = cfg.windows(cin)?;
    let folded = cfg.kernels * n_win;
    let hidden = cwmc_hidden(cfg, n_win);
    init.normal(&format!("{prefix}.chan.kernels"), &[cfg.kernels, cfg.window], 1.0 / (cfg.window as f64).sqrt());
    init.zeros(&format!("{prefix}.chan.bias"), &[cfg.kernels]);
    init.conv_scaled(&format!("{prefix}.compress"), folded, hidden, 1, 1.0);
    init.conv_scaled(&format!("{prefix}.project"), hidden, cout, 1, 1.0);
    Ok(())
}

/// Channel-wise mixing convolution: channel-axis sliding kernels, fold, two 1x1 convs.
pub fn cwmc(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, cfg: &CwmcConfig) -> Result<Var> {
    let k = tape.param(store, &format!("{prefix}.chan.kernels"))?;
    let b = tape.param(store, &format!("{prefix}.chan.bias"))?;
    let folded = tape.channel_conv(x, k, b, cfg.stride, cfg.pad)?;
    let h = layers::conv1x1(tape, store, &format!("{prefix}.compress"), folded)?;
    layers::conv1x1(tape, store, &format!("{prefix}.project"), h)
}

/// Parameters of one fusion block, stored under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scfb {
    pub prefix: String,
    pub width: usize,
    pub cwmc: CwmcConfig,
    pub mode: ScfbMode,
}

impl Scfb {
    fn p(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    fn branches(&self) -> &'static [usize] {
        match self.mode {
            ScfbMode::SingleBranch => &BRANCH_DEPTHS[..1],
            _ => &BRANCH_DEPTHS,
        }
    }

    fn init_mixer<R: Rng>(&self, init: &mut Init<'_, R>, name: &str) -> Result<()> {
        let c2 = 2 * self.width;
        match self.mode {
            ScfbMode::PlainConv => {
                init.conv_scaled(&self.p(name), c2, c2, 3, 1.0);
                Ok(())
            }
            _ => init_cwmc(init, &self.p(name), &self.cwmc, c2, c2),
        }
    }

    fn mixer(&self, tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
        match self.mode {
            ScfbMode::PlainConv => layers::conv3x3(tape, store, &self.p(name), x),
            _ => cwmc(tape, store, &self.p(name), x, &self.cwmc),
        }
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) -> Result<()> {
        let c = self.width;
        init_basic_block(init, &self.p("pre_ir"), c);
        init_basic_block(init, &self.p("pre_vis"), c);
        init_film(init, &self.p("film"), c);
        self.init_mixer(init, "embed")?;
        for (bi, &depth) in self.branches().iter().enumerate() {
            for u in 0..depth {
                self.init_mixer(init, &format!("branch{}.{u}", bi + 1))?;
            }
        }
        init.conv_scaled(&self.p("proj"), 2 * c * self.branches().len(), c, 1, 1.0);
        Ok(())
    }

    /// Shuffled, mixed embedding of both modalities and the branch outputs.
    pub fn branch_outputs(&self, tape: &mut Tape, store: &ParamStore, ir: Var, vis: Var) -> Result<Vec<Var>> {
        if tape.shape(ir) != tape.shape(vis) {
            return Err(dim_err(
                "modalities",
                format!("infrared {:?} and visible {:?} differ", tape.shape(ir), tape.shape(vis)),
            ));
        }
        let c = tape.value(ir).dims4()?[1];
        if c != self.width {
            return Err(dim_err("channels", format!("fusion width is {}, inputs have {c}", self.width)));
        }
        let ir = basic_block(tape, store, &self.p("pre_ir"), ir)?;
        let vis = basic_block(tape, store, &self.p("pre_vis"), vis)?;
        let (ir, vis) = film_gate(tape, store, &self.p("film"), ir, vis)?;
        let shuffled = tape.channel_shuffle(vis, ir)?;
        let embed = self.mixer(tape, store, "embed", shuffled)?;
        let mut outs = Vec::new();
        for (bi, &depth) in self.branches().iter().enumerate() {
            let mut t = embed;
            for u in 0..depth {
                t = self.mixer(tape, store, &format!("branch{}.{u}", bi + 1), t)?;
                t = tape.gelu(t);
            }
            outs.push(t);
        }
        Ok(outs)
    }

    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, ir: Var, vis: Var) -> Result<Var> {
        let outs = self.branch_outputs(tape, store, ir, vis)?;
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        layers::conv1x1(tape, store, &self.p("proj"), cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_for(s: &Scfb) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        s.init(&mut Init {
            store: &mut store,
            rng: &mut rng,
        })
        .unwrap();
        store
    }

    #[test]
    fn every_mode_projects_to_width() {
        for mode in ScfbMode::ALL {
            let s = Scfb {
                prefix: "f".into(),
                width: 4,
                cwmc: CwmcConfig::default(),
                mode: *mode,
            };
            let store = store_for(&s);
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::from_fn(&[2, 4, 5, 6], |i| (i as f64 * 0.3).sin()));
            let b = tape.constant(Tensor::from_fn(&[2, 4, 5, 6], |i| (i as f64 * 0.2).cos()));
            let y = s.fuse(&mut tape, &store, a, b).unwrap();
            assert_eq!(tape.shape(y), &[2, 4, 5, 6], "{mode}");
        }
    }

    #[test]
    fn mismatched_modalities() {
        let s = Scfb {
            prefix: "f".into(),
            width: 4,
            cwmc: CwmcConfig::default(),
            mode: ScfbMode::Full,
        };
        let store = store_for(&s);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 4, 4, 5]));
        assert!(matches!(s.fuse(&mut tape, &store, a, b), Err(crate::Error::Dimension { .. })));
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_basic_block(&mut Init { store: &mut store, rng: &mut rng }, "bb", 3);
        store.set("bb.conv2.weight", Tensor::zeros(&[3, 3, 3, 3])).unwrap();
        let x = Tensor::from_fn(&[1, 3, 4, 4], |i| i as f64 * 0.1);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = basic_block(&mut tape, &store, "bb", v).unwrap();
        assert_eq!(tape.value(y), &x);
    }
}
