//! End-to-end acceptance report: one line per criterion, non-zero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use priorfuse::checkpoint::Checkpoint;
use priorfuse::config::{ApgMode, D0Mode, LossWeights};
use priorfuse::data::{masked_mean, synthetic_dataset};
use priorfuse::loss::{evaluate, ssim_weights};
use priorfuse::metrics::{self, GrayImage};
use priorfuse::network::{Modality, Network};
use priorfuse::params::{Init, ParamStore};
use priorfuse::prior::{Apg, PriorSet};
use priorfuse::train::{smoothed_endpoints, train_toy, TrainOutcome};
use priorfuse::verify::{self, Check, Scope};
use priorfuse::{loss, Error, FusionConfig, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn all_pass(checks: &[Check]) -> Result<f64, String> {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed()).map(|c| c.to_string()).collect();
    ensure(failed.is_empty(), failed.join("; "))?;
    Ok(checks.iter().map(|c| c.error).fold(0.0, f64::max))
}

fn within(elapsed: Duration, limit_s: u64, what: &str) -> Result<(), String> {
    ensure(
        elapsed <= Duration::from_secs(limit_s),
        format!("{what} took {elapsed:.1?}, limit {limit_s} s"),
    )
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let checks = verify::oracle_suite(SEED, verify::ORACLE_INSTANCES).map_err(|e| e.to_string())?;
    let worst = all_pass(&checks)?;
    within(t.elapsed(), 30, "oracle suite")?;
    Ok(format!(
        "{} operators x {} instances, worst diff {worst:.1e}, {:.1?}",
        checks.len(),
        verify::ORACLE_INSTANCES,
        t.elapsed()
    ))
}

fn degeneracies() -> Outcome {
    let checks = verify::degeneracy_suite(SEED).map_err(|e| e.to_string())?;
    let worst = all_pass(&checks)?;
    Ok(format!("{} cases, worst diff {worst:.1e}", checks.len()))
}

fn routing() -> Outcome {
    let checks = verify::routing_suite(SEED).map_err(|e| e.to_string())?;
    all_pass(&checks)?;
    Ok(format!("{} invariants hold", checks.len()))
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut checks = verify::gradient_suite(Scope::Ops, SEED).map_err(|e| e.to_string())?;
    checks.extend(verify::gradient_suite(Scope::Blocks, SEED).map_err(|e| e.to_string())?);
    let mid = t.elapsed();
    checks.extend(verify::gradient_suite(Scope::End2end, SEED).map_err(|e| e.to_string())?);
    let worst = all_pass(&checks)?;
    within(t.elapsed(), 120, "gradient suite")?;
    within(t.elapsed() - mid, 60, "end-to-end gradient checks")?;
    Ok(format!("{} checks, worst relative error {worst:.1e}, {:.1?}", checks.len(), t.elapsed()))
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn apg_ablations() -> Outcome {
    let apg = Apg {
        prefix: "apg".into(),
        prev_width: Some(4),
        width: 8,
        tokens: 4,
        heads: 2,
        scale: 2,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    apg.init(&mut Init {
        store: &mut store,
        rng: &mut rng,
    })
    .map_err(|e| e.to_string())?;
    let store = verify::jitter(&store, 0.3, SEED).map_err(|e| e.to_string())?;
    let feats = |s: u64| Tensor::rand_uniform(&[2, 8, 4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(s));
    let hist = |s: u64| Tensor::rand_uniform(&[2, 4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(s));
    let run = |store: &ParamStore, f: &Tensor, p: &Tensor, mode: ApgMode| {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let pv = tape.constant(p.clone());
        let out = apg.step(&mut tape, store, fv, &PriorSet { tokens: pv, scale: 1 }, mode).unwrap();
        tape.value(out.tokens).clone()
    };
    let gate = |eta: f64| {
        let mut s = store.clone();
        s.set("apg.gate", Tensor::new(&[1], vec![eta]).unwrap()).unwrap();
        s
    };

    let h = max_diff(&run(&store, &feats(1), &hist(2), ApgMode::HistoryOnly), &run(&store, &feats(3), &hist(2), ApgMode::HistoryOnly));
    ensure(h == 0.0, format!("history_only moved by {h:e} under feature perturbation"))?;
    let p = max_diff(&run(&store, &feats(1), &hist(2), ApgMode::ProposalOnly), &run(&store, &feats(1), &hist(4), ApgMode::ProposalOnly));
    ensure(p == 0.0, format!("proposal_only moved by {p:e} under history perturbation"))?;
    let closed = max_diff(&run(&gate(-20.0), &feats(5), &hist(6), ApgMode::Full), &run(&store, &feats(5), &hist(6), ApgMode::HistoryOnly));
    let open = max_diff(&run(&gate(20.0), &feats(5), &hist(6), ApgMode::Full), &run(&store, &feats(5), &hist(6), ApgMode::ProposalOnly));
    ensure(closed < 1e-4 && open < 1e-4, format!("gate limits off by {closed:e} / {open:e}"))?;

    let mut cfg = FusionConfig::toy();
    cfg.d0_mode = D0Mode::Frozen;
    let net = Network::new(cfg.clone()).map_err(|e| e.to_string())?;
    let params = net.init(SEED).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng));
    let v = tape.constant(Tensor::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng));
    let f = net.forward(&mut tape, &params, i, v).map_err(|e| e.to_string())?;
    let total = loss::total_loss(&mut tape, f, i, v, &cfg.loss).map_err(|e| e.to_string())?.total;
    let grads = tape.backward(total).map_err(|e| e.to_string())?;
    for m in Modality::BOTH {
        let name = net.d0_name(m);
        let g = grads.get_or_zero(tape.bound_params()[&name]);
        ensure(g.data().iter().all(|&x| x == 0.0), format!("frozen {name} received a gradient"))?;
    }
    Ok(format!("invariances exact, gate limits within {:.1e}, frozen D0 gradient zero", closed.max(open)))
}

fn loss_zero_cases() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let shape = [1, 1, 24, 24];
    let i = Tensor::rand_uniform(&shape, 0.0, 1.0, &mut rng);
    let v = Tensor::rand_uniform(&shape, 0.0, 1.0, &mut rng);
    let w = LossWeights::default();
    ensure((w.intensity, w.gradient, w.ssim, w.structure) == (4.0, 24.0, 0.5, 4.5), "default weights changed")?;
    let fmax = Tensor::from_fn(&shape, |k| i.data()[k].max(v.data()[k]));
    let r = evaluate(&fmax, &i, &v, &w).map_err(|e| e.to_string())?;
    ensure(r.intensity == 0.0, format!("intensity {} for F = max(I, V)", r.intensity))?;
    let r = evaluate(&i, &i, &i, &w).map_err(|e| e.to_string())?;
    ensure(r.gradient.abs() < 1e-12 && r.ssim.abs() < 1e-12, format!("F = I = V gives {} / {}", r.gradient, r.ssim))?;
    let shifted = Tensor::from_fn(&shape, |k| i.data()[k] * 0.5 + 0.3);
    let halved = Tensor::from_fn(&shape, |k| i.data()[k] * 0.5);
    let (wi, wv) = ssim_weights(&halved, &shifted).map_err(|e| e.to_string())?;
    ensure((wi - 0.5).abs() < 1e-12 && (wv - 0.5).abs() < 1e-12, format!("omega {wi} / {wv}"))?;
    let f = Tensor::rand_uniform(&shape, 0.0, 1.0, &mut rng);
    let r = evaluate(&f, &i, &v, &w).map_err(|e| e.to_string())?;
    let sum = 4.0 * r.intensity + 24.0 * r.gradient + 0.5 * r.ssim + 4.5 * r.structure;
    ensure((r.total - sum).abs() < 1e-6, format!("total {} vs weighted sum {sum}", r.total))?;
    Ok("all zero cases exact, total matches weighted sum".into())
}

fn metric_sanity() -> Outcome {
    let m = metrics::evaluate(&GrayImage::from_fn(16, 16, |_, _| 77)).map_err(|e| e.to_string())?;
    ensure((m.en, m.sf, m.ag, m.sd) == (0.0, 0.0, 0.0, 0.0), format!("constant image gives {m:?}"))?;
    let en = metrics::entropy(&GrayImage::from_fn(16, 16, |r, c| (r * 16 + c) as u8)).map_err(|e| e.to_string())?;
    ensure((en - 8.0).abs() < 1e-6, format!("uniform histogram EN {en}"))?;
    let sd = metrics::std_dev(&GrayImage::from_fn(8, 8, |r, _| if r < 4 { 0 } else { 255 })).map_err(|e| e.to_string())?;
    ensure(sd == 127.5, format!("half/half SD {sd}"))?;
    // 8x8 checkerboard: 112 unit-255 differences over 64 pixels
    let sf = metrics::spatial_frequency(&GrayImage::from_fn(8, 8, |r, c| if (r + c) % 2 == 0 { 0 } else { 255 }))
        .map_err(|e| e.to_string())?;
    ensure((sf - 337.333_292_160_735_3).abs() < 1e-9, format!("checkerboard SF {sf}"))?;
    Ok(format!("EN {en}, SD {sd}, checkerboard SF {sf:.6}"))
}

fn train_once() -> Result<(TrainOutcome, Duration), String> {
    let data: Vec<_> = synthetic_dataset(16, 64, SEED)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|p| (p.ir, p.vis))
        .collect();
    let t = Instant::now();
    let out = train_toy(&data, &FusionConfig::default()).map_err(|e| e.to_string())?;
    Ok((out, t.elapsed()))
}

fn toy_training(first: &TrainOutcome, elapsed: Duration) -> Outcome {
    within(elapsed, 600, "training")?;
    ensure(first.losses.len() == 50, format!("{} steps", first.losses.len()))?;
    let (a, b) = smoothed_endpoints(&first.losses, 5).ok_or("loss curve too short")?;
    let ratio = b / a;
    ensure(ratio <= 0.8, format!("smoothed loss {a:.4} -> {b:.4}, ratio {ratio:.3}"))?;
    let (second, _) = train_once()?;
    let same_curve = first.losses.iter().zip(&second.losses).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(same_curve, "loss curves differ between identical runs")?;
    ensure(
        first.checkpoint.to_bytes() == second.checkpoint.to_bytes(),
        "checkpoints differ between identical runs",
    )?;
    Ok(format!("smoothed loss {a:.3} -> {b:.3} (ratio {ratio:.3}), bit-identical rerun, {elapsed:.1?}"))
}

fn fusion_behavior(trained: &TrainOutcome) -> Outcome {
    let net = Network::new(trained.checkpoint.config.clone()).map_err(|e| e.to_string())?;
    let held_out = synthetic_dataset(8, 64, 7).map_err(|e| e.to_string())?;
    let ag = |t: &Tensor| metrics::average_gradient(&GrayImage::from_unit_tensor(t).unwrap()).unwrap();
    let mut good = 0;
    for p in &held_out {
        let f = net.infer(&trained.checkpoint.params, &p.ir, &p.vis).map_err(|e| e.to_string())?;
        let blob = |t: &Tensor| masked_mean(t, &p.blob_mask).unwrap();
        if ag(&f) >= ag(&p.ir) && blob(&f) >= blob(&p.vis) {
            good += 1;
        }
    }
    ensure(good * 10 >= held_out.len() * 8, format!("{good}/{} held-out pairs satisfy both", held_out.len()))?;
    Ok(format!("{good}/{} held-out pairs keep detail and highlight targets", held_out.len()))
}

fn checkpoint_round_trip() -> Outcome {
    let cfg = FusionConfig::toy();
    let ckpt = Checkpoint {
        params: Network::new(cfg.clone()).and_then(|n| n.init(SEED)).map_err(|e| e.to_string())?,
        config: cfg.clone(),
        step: 50,
        rng_seed: SEED,
        rng_word_pos: 0,
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ckpt.save(&a).map_err(|e| e.to_string())?;
    Checkpoint::load(&a).and_then(|c| c.save(&b)).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&a).map_err(|e| e.to_string())?;
    ensure(bytes == std::fs::read(&b).map_err(|e| e.to_string())?, "save/load/save changed bytes")?;

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    for (what, bad) in [("truncated", &bytes[..bytes.len() - 3]), ("flipped", &flipped[..])] {
        ensure(
            matches!(Checkpoint::from_bytes(bad), Err(Error::Integrity { .. })),
            format!("{what} file not rejected as an integrity error"),
        )?;
    }
    let mut other = cfg;
    other.priors = 8;
    match ckpt.validate_against(&other) {
        Err(Error::Config(m)) if m.contains("block `") => Ok(format!("byte-identical, corruption rejected, {m}")),
        r => Err(format!("incompatible config gave {r:?}")),
    }
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match &r {
        Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
        Err(detail) => println!("criterion {n:>2} FAIL  {name}: {detail}"),
    }
    r.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "oracle equivalence", oracle_equivalence);
    ok &= report(2, "dynamic convolution degeneracies", degeneracies);
    ok &= report(3, "routing simplex and temperature", routing);
    ok &= report(4, "gradient suite", gradients);
    ok &= report(5, "prior generator ablations", apg_ablations);
    ok &= report(6, "loss zero cases", loss_zero_cases);
    ok &= report(7, "metric sanity", metric_sanity);
    let trained = train_once();
    ok &= report(8, "toy training", || {
        let (out, elapsed) = trained.as_ref().map_err(Clone::clone)?;
        toy_training(out, *elapsed)
    });
    ok &= report(9, "fusion behavior on held-out pairs", || fusion_behavior(&trained.as_ref().map_err(Clone::clone)?.0));
    ok &= report(10, "checkpoint round trip", checkpoint_round_trip);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
