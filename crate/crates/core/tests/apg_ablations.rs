use priorfuse::config::{ApgMode, D0Mode};
use priorfuse::network::{Modality, Network};
use priorfuse::params::{Init, ParamStore};
use priorfuse::prior::{init_d0, init_priors, Apg, PriorSet};
use priorfuse::verify::jitter;
use priorfuse::{loss, FusionConfig, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn apg() -> (Apg, ParamStore) {
    let apg = Apg {
        prefix: "apg".into(),
        prev_width: Some(4),
        width: 8,
        tokens: 4,
        heads: 2,
        scale: 2,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    apg.init(&mut init).unwrap();
    init_d0(&mut init, "d0", 4, 4);
    let store = jitter(&store, 0.3, 12).unwrap();
    (apg, store)
}

fn tokens(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(&[2, 4, 8], -1.0, 1.0, &mut rng)
}

fn features(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(&[2, 8, 4, 4], -1.0, 1.0, &mut rng)
}

fn history(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng)
}

fn run(apg: &Apg, store: &ParamStore, feats: &Tensor, prev: &Tensor, mode: ApgMode) -> Tensor {
    let mut tape = Tape::new();
    let f = tape.constant(feats.clone());
    let p = tape.constant(prev.clone());
    let out = apg
        .step(&mut tape, store, f, &PriorSet { tokens: p, scale: 1 }, mode)
        .unwrap();
    tape.value(out.tokens).clone()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn with_gate(store: &ParamStore, eta: f64) -> ParamStore {
    let mut s = store.clone();
    s.set("apg.gate", Tensor::new(&[1], vec![eta]).unwrap()).unwrap();
    s
}

#[test]
fn history_only_ignores_features() {
    let (apg, store) = apg();
    let a = run(&apg, &store, &features(1), &history(2), ApgMode::HistoryOnly);
    let b = run(&apg, &store, &features(3), &history(2), ApgMode::HistoryOnly);
    assert_eq!(a, b);
    // and the full mode does depend on them
    let c = run(&apg, &store, &features(1), &history(2), ApgMode::Full);
    let d = run(&apg, &store, &features(3), &history(2), ApgMode::Full);
    assert!(max_diff(&c, &d) > 1e-3);
}

#[test]
fn proposal_only_ignores_history() {
    let (apg, store) = apg();
    let a = run(&apg, &store, &features(1), &history(2), ApgMode::ProposalOnly);
    let b = run(&apg, &store, &features(1), &history(4), ApgMode::ProposalOnly);
    assert_eq!(a, b);
}

#[test]
fn saturated_gate_reproduces_pure_modes() {
    let (apg, store) = apg();
    let (f, p) = (features(5), history(6));
    let closed = run(&apg, &with_gate(&store, -20.0), &f, &p, ApgMode::Full);
    let open = run(&apg, &with_gate(&store, 20.0), &f, &p, ApgMode::Full);
    let hist = run(&apg, &store, &f, &p, ApgMode::HistoryOnly);
    let prop = run(&apg, &store, &f, &p, ApgMode::ProposalOnly);
    assert!(max_diff(&closed, &hist) < 1e-4, "{}", max_diff(&closed, &hist));
    assert!(max_diff(&open, &prop) < 1e-4, "{}", max_diff(&open, &prop));
}

#[test]
fn gate_at_zero_is_midpoint_before_norm() {
    let (apg, store) = apg();
    let store = with_gate(&store, 0.0);
    let mut tape = Tape::new();
    let a = tape.constant(tokens(7));
    let c = tape.constant(tokens(8));
    let got = apg.gated_update(&mut tape, &store, a, c).unwrap();
    // blending the midpoint with itself leaves it unchanged for any gate
    let sum = tape.add(a, c).unwrap();
    let mid = tape.scale(sum, 0.5);
    let want = apg.gated_update(&mut tape, &store, mid, mid).unwrap();
    assert!(max_diff(tape.value(got.tokens), tape.value(want.tokens)) < 1e-12);
}

fn d0_grad(mode: D0Mode) -> (Tensor, bool) {
    let mut cfg = FusionConfig::toy();
    cfg.d0_mode = mode;
    let net = Network::new(cfg.clone()).unwrap();
    let store = net.init(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ir = Tensor::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
    let vis = Tensor::rand_uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let i = tape.constant(ir);
    let v = tape.constant(vis);
    let f = net.forward(&mut tape, &store, i, v).unwrap();
    let total = loss::total_loss(&mut tape, f, i, v, &cfg.loss).unwrap().total;
    let grads = tape.backward(total).unwrap();
    let name = net.d0_name(Modality::Ir);
    let var = tape.bound_params()[&name];
    let listed = grads.param_grads(&tape).contains_key(&name);
    (grads.get_or_zero(var), listed)
}

#[test]
fn frozen_d0_gets_exactly_zero_gradient() {
    let (g, listed) = d0_grad(D0Mode::Frozen);
    assert!(!listed);
    assert!(g.data().iter().all(|&x| x == 0.0));
    let (g, listed) = d0_grad(D0Mode::Separate);
    assert!(listed);
    assert!(g.data().iter().any(|&x| x != 0.0));
}

#[test]
fn shared_d0_is_one_block() {
    let mut cfg = FusionConfig::toy();
    cfg.d0_mode = D0Mode::Shared;
    let net = Network::new(cfg).unwrap();
    assert_eq!(net.d0_name(Modality::Ir), net.d0_name(Modality::Vis));
    let mut tape = Tape::new();
    let store = net.init(1).unwrap();
    let a = init_priors(&mut tape, &store, &net.d0_name(Modality::Ir), 1).unwrap();
    let before = tape.bound_params().len();
    init_priors(&mut tape, &store, &net.d0_name(Modality::Vis), 1).unwrap();
    assert_eq!(tape.bound_params().len(), before);
    assert_eq!(a.scale, 0);
}
