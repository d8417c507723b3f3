//! Prior token evolution across encoder scales.
//!
//! Each scale keeps `M` tokens of the scale's channel width. The tokens of
//! the previous scale are aligned to the new width, a candidate set is
//! proposed by cross-attention from learnable queries onto the current
//! features, and a scalar sigmoid gate blends the two before a final layer
//! norm.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::ApgMode;
use crate::error::{dim_err, Result};
use crate::layers;
use crate::params::{Init, ParamStore};

pub const TOKEN_INIT_STD: f64 = 0.02;

/// Prior tokens `[B, M, C]` at one scale (scale 0 is the initial set).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PriorSet {
    pub tokens: Var,
    pub scale: usize,
}

/// Registers the initial tokens `[M, C]` under `name`.
pub fn init_d0<R: Rng>(init: &mut Init<'_, R>, name: &str, tokens: usize, width: usize) {
    init.normal(name, &[tokens, width], TOKEN_INIT_STD);
}

/// Broadcasts the initial tokens `name` to every batch element.
pub fn init_priors(tape: &mut Tape, store: &ParamStore, name: &str, batch: usize) -> Result<PriorSet> {
    let d0 = tape.param(store, name)?;
    Ok(PriorSet {
        tokens: tape.broadcast_batch(d0, batch),
        scale: 0,
    })
}

/// Parameters of one prior generator, stored under `prefix`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Apg {
    pub prefix: String,
    /// Width of the incoming tokens; `None` when they already have `width`
    /// and the alignment map is the identity.
    pub prev_width: Option<usize>,
    pub width: usize,
    pub tokens: usize,
    pub heads: usize,
    pub scale: usize,
}

impl Apg {
    fn p(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init<R: Rng>(&self, init: &mut Init<'_, R>) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(dim_err("heads", format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        let c = self.width;
        if let Some(cp) = self.prev_width {
            init.linear(&self.p("align"), cp, c);
        }
        init.layer_norm(&self.p("align_norm"), c);
        init.normal(&self.p("query"), &[self.tokens, c], 1.0);
        for proj in ["q", "v", "o"] {
            init.linear(&self.p(&format!("attn.{proj}")), c, c);
        }
        // a key bias only shifts every score of a query equally, so it is left out
        init.normal(&self.p("attn.k.weight"), &[c, c], 1.0 / (c as f64).sqrt());
        init.layer_norm(&self.p("prop_norm"), c);
        init.zeros(&self.p("gate"), &[1]);
        init.layer_norm(&self.p("out_norm"), c);
        Ok(())
    }

    /// Maps previous-scale tokens to this width and normalizes them.
    pub fn align_history(&self, tape: &mut Tape, store: &ParamStore, prev: &PriorSet) -> Result<Var> {
        let shape = tape.shape(prev.tokens).to_vec();
        let expected = self.prev_width.unwrap_or(self.width);
        if shape.len() != 3 || shape[2] != expected {
            return Err(dim_err(
                "prior width",
                format!("expected [B, M, {expected}] tokens, got {shape:?}"),
            ));
        }
        let mapped = match self.prev_width {
            Some(_) => layers::linear(tape, store, &self.p("align"), prev.tokens)?,
            None => prev.tokens,
        };
        layers::layer_norm_last(tape, store, &self.p("align_norm"), mapped)
    }

    /// Candidate tokens and the attention weights `[B * heads, M, H * W]`.
    pub fn propose_with_weights(&self, tape: &mut Tape, store: &ParamStore, f_emb: Var) -> Result<(Var, Var)> {
        let [b, c, h, w] = tape.value(f_emb).dims4()?;
        if c != self.width {
            return Err(dim_err("channels", format!("features have {c} channels, prior width is {}", self.width)));
        }
        let (m, heads, n) = (self.tokens, self.heads, h * w);
        let d = c / heads;

        let flat = tape.reshape(f_emb, &[b, c, n])?;
        let feats = tape.permute(flat, &[0, 2, 1])?;
        let query = tape.param(store, &self.p("query"))?;
        let queries = tape.broadcast_batch(query, b);

        let q = layers::linear(tape, store, &self.p("attn.q"), queries)?;
        let wk = tape.param(store, &self.p("attn.k.weight"))?;
        let k = tape.linear(feats, wk, None)?;
        let v = layers::linear(tape, store, &self.p("attn.v"), feats)?;
        let q = split_heads(tape, q, b, m, heads, d)?;
        let k = split_heads(tape, k, b, n, heads, d)?;
        let v = split_heads(tape, v, b, n, heads, d)?;

        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax(scores, 2, 1.0)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = merge_heads(tape, ctx, b, m, heads, d)?;
        let delta = layers::linear(tape, store, &self.p("attn.o"), ctx)?;

        let resid = tape.add(queries, delta)?;
        let cand = layers::layer_norm_last(tape, store, &self.p("prop_norm"), resid)?;
        Ok((cand, attn))
    }

    pub fn propose_from_features(&self, tape: &mut Tape, store: &ParamStore, f_emb: Var) -> Result<Var> {
        self.propose_with_weights(tape, store, f_emb).map(|(c, _)| c)
    }

    /// `LN(aligned + sigmoid(gate) * (candidate - aligned))`.
    pub fn gated_update(&self, tape: &mut Tape, store: &ParamStore, aligned: Var, candidate: Var) -> Result<PriorSet> {
        let eta = tape.param(store, &self.p("gate"))?;
        let g = tape.sigmoid(eta);
        let diff = tape.sub(candidate, aligned)?;
        let step = tape.mul_scalar_var(diff, g)?;
        let blended = tape.add(aligned, step)?;
        self.finish(tape, store, blended)
    }

    fn finish(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<PriorSet> {
        Ok(PriorSet {
            tokens: layers::layer_norm_last(tape, store, &self.p("out_norm"), x)?,
            scale: self.scale,
        })
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_emb: Var,
        prev: &PriorSet,
        mode: ApgMode,
    ) -> Result<PriorSet> {
        match mode {
            ApgMode::Full => {
                let aligned = self.align_history(tape, store, prev)?;
                let cand = self.propose_from_features(tape, store, f_emb)?;
                self.gated_update(tape, store, aligned, cand)
            }
            ApgMode::ProposalOnly => {
                let cand = self.propose_from_features(tape, store, f_emb)?;
                self.finish(tape, store, cand)
            }
            ApgMode::HistoryOnly => {
                let aligned = self.align_history(tape, store, prev)?;
                self.finish(tape, store, aligned)
            }
        }
    }
}

/// `[B, T, heads * d] -> [B * heads, T, d]`.
fn split_heads(tape: &mut Tape, x: Var, b: usize, t: usize, heads: usize, d: usize) -> Result<Var> {
    let x = tape.reshape(x, &[b, t, heads, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, t, d])
}

fn merge_heads(tape: &mut Tape, x: Var, b: usize, t: usize, heads: usize, d: usize) -> Result<Var> {
    let x = tape.reshape(x, &[b, heads, t, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b, t, heads * d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(prev_width: Option<usize>, width: usize) -> (Apg, ParamStore) {
        let apg = Apg {
            prefix: "apg".into(),
            prev_width,
            width,
            tokens: 4,
            heads: 2,
            scale: 1,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        apg.init(&mut init).unwrap();
        init_d0(&mut init, "d0", 4, width);
        (apg, store)
    }

    #[test]
    fn broadcast_priors_are_identical() {
        let (_, store) = setup(None, 8);
        let mut tape = Tape::new();
        let p = init_priors(&mut tape, &store, "d0", 2).unwrap();
        let t = tape.value(p.tokens);
        assert_eq!(t.shape(), &[2, 4, 8]);
        assert_eq!(t.data()[..32], t.data()[32..]);
    }

    #[test]
    fn output_shape_and_width_change() {
        let (apg, store) = setup(Some(4), 8);
        let mut tape = Tape::new();
        let prev = tape.constant(Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.37).sin()));
        let prev = PriorSet { tokens: prev, scale: 0 };
        let f = tape.constant(Tensor::from_fn(&[2, 8, 3, 3], |i| (i as f64 * 0.11).cos()));
        for mode in ApgMode::ALL {
            let out = apg.step(&mut tape, &store, f, &prev, *mode).unwrap();
            assert_eq!(tape.shape(out.tokens), &[2, 4, 8]);
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let (apg, store) = setup(Some(4), 8);
        let mut tape = Tape::new();
        let prev = tape.constant(Tensor::zeros(&[1, 4, 6]));
        let r = apg.align_history(&mut tape, &store, &PriorSet { tokens: prev, scale: 0 });
        assert!(matches!(r, Err(crate::Error::Dimension { .. })));
    }
}
