//! Toy-scale training loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::network::Network;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            if store.is_frozen(name) {
                continue;
            }
            let p = store
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let mut next = p.to_vec();
            for (((x, &gi), mi), vi) in next.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
            store.set(name, Tensor::new(p.shape(), next)?)?;
        }
        Ok(())
    }
}

/// Linear warm-up over the first `warmup` fraction of steps, then cosine decay.
pub fn learning_rate(step: usize, total: usize, base: f64, warmup: f64) -> f64 {
    let warm = ((warmup * total as f64).ceil() as usize).min(total);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = (step - warm) as f64 / span;
    0.5 * base * (1.0 + (PI * progress).cos())
}

/// Mean of the first and last `window` entries.
pub fn smoothed_endpoints(curve: &[f64], window: usize) -> Option<(f64, f64)> {
    if window == 0 || curve.len() < window {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..window]), mean(&curve[curve.len() - window..])))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

fn check_dataset(data: &[(Tensor, Tensor)]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input("training needs at least one image pair".into()));
    }
    let shape = data[0].0.shape().to_vec();
    for (k, (ir, vis)) in data.iter().enumerate() {
        if ir.shape() != shape.as_slice() || vis.shape() != shape.as_slice() {
            return Err(Error::Input(format!(
                "pair {k}: shapes {:?}/{:?} differ from {shape:?}",
                ir.shape(),
                vis.shape()
            )));
        }
    }
    match shape[..] {
        [1, 1, h, w] if h == w && h >= 32 && h.is_power_of_two() => Ok(()),
        _ => Err(Error::Input(format!(
            "training images must be [1, 1, S, S] with S a power of two of at least 32, got {shape:?}"
        ))),
    }
}

/// Trains a freshly initialized network on `data` for `cfg.train.steps` steps.
pub fn train_toy(data: &[(Tensor, Tensor)], cfg: &FusionConfig) -> Result<TrainOutcome> {
    check_dataset(data)?;
    let net = Network::new(cfg.clone())?;
    let t = cfg.train;
    let mut store = net.init(t.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut adam = Adam::default();
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(t.steps);

    for step in 0..t.steps {
        let mut batch = Vec::with_capacity(t.batch_size);
        while batch.len() < t.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let ir = Tensor::stack_batch(&batch.iter().map(|&k| data[k].0.clone()).collect::<Vec<_>>())?;
        let vis = Tensor::stack_batch(&batch.iter().map(|&k| data[k].1.clone()).collect::<Vec<_>>())?;

        let mut tape = Tape::new();
        let iv = tape.constant(ir);
        let vv = tape.constant(vis);
        let fused = net.forward(&mut tape, &store, iv, vv)?;
        let terms = total_loss(&mut tape, fused, iv, vv, &cfg.loss)?;
        let loss = tape.item(terms.total);
        if !loss.is_finite() {
            return Err(Error::Oracle(format!("loss became non-finite at step {step}")));
        }
        losses.push(loss);
        let grads = tape.backward(terms.total)?.param_grads(&tape);
        adam.step(&mut store, &grads, learning_rate(step, t.steps, t.lr, t.warmup))?;
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            params: store,
            step: t.steps as u64,
            rng_seed: t.seed,
            rng_word_pos: rng.get_word_pos(),
        },
        losses,
    })
}
