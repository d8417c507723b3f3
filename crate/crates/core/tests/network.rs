use priorfuse::config::{ApgMode, DdcbMode, ScfbMode};
use priorfuse::network::Network;
use priorfuse::{loss, Error, FusionConfig, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair(side: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::rand_uniform(&[1, 1, side, side], 0.0, 1.0, &mut rng),
        Tensor::rand_uniform(&[1, 1, side, side], 0.0, 1.0, &mut rng),
    )
}

/// Adds a fixed offset to every parameter whose name contains one of `parts`.
fn perturb(store: &ParamStore, parts: &[&str]) -> (ParamStore, usize) {
    let mut out = store.clone();
    let mut hit = 0;
    for (name, t) in store.iter() {
        if parts.iter().any(|p| name.contains(p)) {
            out.set(name, Tensor::from_fn(t.shape(), |i| t.data()[i] + 0.3 + 0.01 * i as f64)).unwrap();
            hit += 1;
        }
    }
    (out, hit)
}

fn fused(cfg: &FusionConfig, store: &ParamStore, seed: u64) -> Tensor {
    let (ir, vis) = pair(16, seed);
    Network::new(cfg.clone()).unwrap().infer(store, &ir, &vis).unwrap()
}

fn differs(a: &Tensor, b: &Tensor) -> bool {
    a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-9)
}

#[test]
fn history_only_ignores_proposal_parameters() {
    let mut cfg = FusionConfig::toy();
    let proposal = [".query", ".attn.", ".prop_norm"];
    cfg.apg_mode = ApgMode::HistoryOnly;
    let store = Network::new(cfg.clone()).unwrap().init(2).unwrap();
    let (moved, hit) = perturb(&store, &proposal);
    assert!(hit > 0);
    assert_eq!(fused(&cfg, &store, 1), fused(&cfg, &moved, 1));

    cfg.apg_mode = ApgMode::Full;
    let store = Network::new(cfg.clone()).unwrap().init(2).unwrap();
    let (moved, hit) = perturb(&store, &proposal);
    assert!(hit > 0);
    assert!(differs(&fused(&cfg, &store, 1), &fused(&cfg, &moved, 1)));
}

#[test]
fn stand_in_ignores_every_prior_parameter() {
    let mut cfg = FusionConfig::toy();
    cfg.ddcb_mode = DdcbMode::RestormerStandIn;
    let store = Network::new(cfg.clone()).unwrap().init(4).unwrap();
    let (moved, hit) = perturb(&store, &["apg", "d0", ".gen.", "router"]);
    assert!(hit > 0);
    assert_eq!(fused(&cfg, &store, 3), fused(&cfg, &moved, 3));
}

#[test]
fn every_mode_runs_and_stays_in_unit_range() {
    let base = FusionConfig::toy();
    let mut cfgs = vec![base.clone()];
    for m in [DdcbMode::RestormerStandIn, DdcbMode::ConcatPrior] {
        cfgs.push(FusionConfig { ddcb_mode: m, ..base.clone() });
    }
    for m in [ScfbMode::SingleBranch, ScfbMode::PlainConv] {
        cfgs.push(FusionConfig { scfb_mode: m, ..base.clone() });
    }
    for m in [ApgMode::ProposalOnly, ApgMode::HistoryOnly] {
        cfgs.push(FusionConfig { apg_mode: m, ..base.clone() });
    }
    for cfg in cfgs {
        let store = Network::new(cfg.clone()).unwrap().init(5).unwrap();
        let y = fused(&cfg, &store, 6);
        assert_eq!(y.shape(), &[1, 1, 16, 16]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0), "{cfg:?}");
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let cfg = FusionConfig::toy();
    let net = Network::new(cfg.clone()).unwrap();
    let run = || {
        let store = net.init(8).unwrap();
        let (ir, vis) = pair(16, 9);
        let mut tape = Tape::new();
        let (i, v) = (tape.constant(ir), tape.constant(vis));
        let f = net.forward(&mut tape, &store, i, v).unwrap();
        let total = loss::total_loss(&mut tape, f, i, v, &cfg.loss).unwrap().total;
        let grads = tape.backward(total).unwrap().param_grads(&tape);
        (tape.value(f).clone(), grads)
    };
    assert_eq!(run(), run());
}

#[test]
fn input_checks() {
    let net = Network::new(FusionConfig::default()).unwrap();
    let store = net.init(0).unwrap();
    let (ir, _) = pair(16, 1);
    let (_, vis) = pair(32, 1);
    match net.infer(&store, &ir, &vis) {
        Err(Error::Dimension { axis, detail }) => {
            assert_eq!(axis, "modalities");
            assert!(detail.contains("[1, 1, 16, 16]") && detail.contains("[1, 1, 32, 32]"), "{detail}");
        }
        other => panic!("{other:?}"),
    }
    // three scales need sides divisible by four
    let (a, b) = pair(18, 2);
    assert!(matches!(net.infer(&store, &a, &b), Err(Error::Dimension { .. })));
}
