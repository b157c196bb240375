use numcore::gradcheck::check_params;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backtest::{run_backtest, ActorDecider, MetricSpec, PolicyDecider};
use crate::policy::{FixedActor, Policy, PolicyConfig};
use crate::synth::{generate, SynthSpec};

fn qcfg(fm: usize, t: usize, k: usize) -> QConfig {
    QConfig { market_channels: fm, lookback: t, n_policies: k, hidden: 2, fc_hidden: 3 }
}

fn random_state(fm: usize, t: usize, k: usize, seed: u64) -> MetaState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_m = Tensor::new(&[fm, t], (0..fm * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    MetaState { x_m, x_p: (0..k).map(|_| rng.random_range(-0.05..0.05)).collect() }
}

fn zeroed(cfg: &QConfig) -> ParamStore {
    let mut p = ParamStore::new();
    for (name, shape, _) in cfg.param_layout() {
        p.init_zeros(&name, &shape);
    }
    p
}

/// Scalar loop re-implementation of the Q network.
fn oracle_q(p: &ParamStore, cfg: &QConfig, s: &MetaState) -> Vec<f64> {
    let (fm, tl, h, k, d) = (cfg.market_channels, cfg.lookback, cfg.hidden, cfg.n_policies, cfg.fc_hidden);
    let w = p.get("q.lstm.w").unwrap();
    let b = p.get("q.lstm.b").unwrap();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (mut hv, mut cv) = (vec![0.0; h], vec![0.0; h]);
    let mut hs = Vec::new();
    for t in 0..tl {
        let input: Vec<f64> = (0..fm).map(|c| s.x_m.at(&[c, t])).chain(hv.iter().copied()).collect();
        let gate = |j: usize| b.data()[j] + input.iter().enumerate().map(|(r, x)| x * w.at(&[r, j])).sum::<f64>();
        for u in 0..h {
            let i = sig(gate(u));
            let f = sig(gate(h + u));
            let g = gate(2 * h + u).tanh();
            let o = sig(gate(3 * h + u));
            cv[u] = f * cv[u] + i * g;
            hv[u] = o * cv[u].tanh();
        }
        hs.push(hv.clone());
    }
    let wa = p.get("q.wa").unwrap();
    let va = p.get("q.va").unwrap();
    let last = hs[tl - 1].clone();
    let e: Vec<f64> = hs
        .iter()
        .map(|ht| {
            let pair: Vec<f64> = ht.iter().chain(&last).copied().collect();
            (0..h).map(|j| (0..2 * h).map(|r| pair[r] * wa.at(&[r, j])).sum::<f64>().tanh() * va.at(&[j, 0])).sum()
        })
        .collect();
    let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = e.iter().map(|x| (x - mx).exp()).sum();
    let ctx: Vec<f64> = (0..h).map(|u| (0..tl).map(|t| (e[t] - mx).exp() / z * hs[t][u]).sum()).collect();
    let joined: Vec<f64> = ctx.into_iter().chain(s.x_p.iter().copied()).collect();
    let (w1, b1, w2, b2) = (p.get("q.w1").unwrap(), p.get("q.b1").unwrap(), p.get("q.w2").unwrap(), p.get("q.b2").unwrap());
    let hid: Vec<f64> =
        (0..d).map(|j| (b1.data()[j] + joined.iter().enumerate().map(|(r, x)| x * w1.at(&[r, j])).sum::<f64>()).max(0.0)).collect();
    (0..k).map(|j| b2.data()[j] + hid.iter().enumerate().map(|(r, x)| x * w2.at(&[r, j])).sum::<f64>()).collect()
}

fn transition(s: MetaState, k: usize, r: f64, next: MetaState, done: bool) -> Transition {
    Transition { state: s, selected: k, reward: r, next_state: next, done }
}

#[test]
fn meta_state_examples() {
    let x_m = Tensor::zeros(&[2, 3]);
    assert_eq!(build_meta_state(x_m.clone(), &[vec![], vec![]], 12).x_p, vec![0.0, 0.0]);
    assert!((build_meta_state(x_m.clone(), &[vec![0.01; 12]], 12).x_p[0] - 0.01).abs() < 1e-15);
    let s = build_meta_state(x_m, &[vec![0.5, 0.02, -0.01]], 2);
    assert!((s.x_p[0] - 0.005).abs() < 1e-15);
}

#[test]
fn greedy_selection_and_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(select_policy(&[1.0, 3.0, 2.0], 0.0, &mut rng), 1);
    assert_eq!(select_policy(&[0.4, 0.4, 0.4], 0.0, &mut rng), 0);
}

#[test]
fn full_exploration_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        counts[select_policy(&[9.0, 0.0, 0.0, 0.0], 1.0, &mut rng)] += 1;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn epsilon_schedule_endpoints() {
    let cfg = MetaConfig { steps: 1000, ..MetaConfig::default() };
    assert_eq!(cfg.epsilon_at(0), 1.0);
    assert!((cfg.epsilon_at(250) - 0.525).abs() < 1e-12);
    assert_eq!(cfg.epsilon_at(500), 0.05);
    assert_eq!(cfg.epsilon_at(999), 0.05);
}

#[test]
fn zero_weights_give_the_output_bias() {
    let cfg = qcfg(2, 3, 3);
    let mut p = zeroed(&cfg);
    p.set("q.b2", Tensor::vector(vec![0.3, -1.0, 2.5])).unwrap();
    let net = QNetwork::from_params(cfg, p).unwrap();
    assert_eq!(net.q(&random_state(2, 3, 3, 1)).unwrap(), vec![0.3, -1.0, 2.5]);
}

#[test]
fn q_matches_loop_oracle() {
    let cfg = qcfg(2, 3, 2);
    let net = QNetwork::init(cfg.clone(), 4).unwrap();
    let states: Vec<MetaState> = (0..3).map(|i| random_state(2, 3, 2, 10 + i)).collect();
    let refs: Vec<&MetaState> = states.iter().collect();
    let batch = q_values(&net.online, &cfg, &refs).unwrap();
    for (s, row) in states.iter().zip(&batch) {
        let want = oracle_q(&net.online, &cfg, s);
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{row:?} vs {want:?}");
        }
        assert_eq!(&net.q(s).unwrap(), row);
    }
}

#[test]
fn loss_degenerate_cases() {
    let cfg = qcfg(2, 3, 2);
    let net = QNetwork::init(cfg.clone(), 5).unwrap();
    let s = random_state(2, 3, 2, 1);
    let s2 = random_state(2, 3, 2, 2);
    let tr = transition(s.clone(), 1, 0.7, s2.clone(), false);
    let mut g = Graph::new();
    let l = q_loss(&mut g, &net.online, &net.target, &cfg, &[&tr], 0.0).unwrap();
    let q = net.q(&s).unwrap()[1];
    assert!((g.value(l).data()[0] - (0.7 - q).powi(2)).abs() < 1e-12);

    let z = zeroed(&cfg);
    let tr = transition(s, 0, 1.0, s2, false);
    let mut g = Graph::new();
    let l = q_loss(&mut g, &z, &z, &cfg, &[&tr], 0.9).unwrap();
    assert_eq!(g.value(l).data()[0], 1.0);
}

#[test]
fn loss_on_hand_set_tables() {
    // Q(s) = [relu(x_p[0]), 2 relu(x_p[1])]: state A has Q = [1, 0], state B has Q = [0, 2].
    let cfg = QConfig { market_channels: 1, lookback: 2, n_policies: 2, hidden: 2, fc_hidden: 2 };
    let mut p = zeroed(&cfg);
    p.set("q.w1", Tensor::matrix(4, 2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    p.set("q.w2", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
    let a = MetaState { x_m: Tensor::full(&[1, 2], 0.3), x_p: vec![1.0, 0.0] };
    let b = MetaState { x_m: Tensor::full(&[1, 2], -0.3), x_p: vec![0.0, 1.0] };
    let t1 = transition(a.clone(), 0, 0.5, b.clone(), false);
    let t2 = transition(b, 1, -1.0, a, true);
    let mut g = Graph::new();
    let l = q_loss(&mut g, &p, &p, &cfg, &[&t1, &t2], 0.5).unwrap();
    // y1 = 0.5 + 0.5 * 2 = 1.5 against Q = 1; y2 = -1 against Q = 2.
    assert!((g.value(l).data()[0] - (0.25 + 9.0) / 2.0).abs() < 1e-12);
}

#[test]
fn q_loss_gradient_matches_finite_differences() {
    let cfg = qcfg(2, 3, 2);
    let net = QNetwork::init(cfg.clone(), 6).unwrap();
    let mut target = net.online.clone();
    target.get_mut("q.b2").unwrap().data_mut()[0] += 0.3;
    let trs: Vec<Transition> =
        (0..3).map(|i| transition(random_state(2, 3, 2, i), (i % 2) as usize, 0.1 * i as f64, random_state(2, 3, 2, 9 + i), i == 2)).collect();
    let refs: Vec<&Transition> = trs.iter().collect();
    let check = check_params(&net.online, 1e-6, |g, p| {
        q_loss(g, p, &target, &cfg, &refs, 0.9).map_err(|e| match e {
            CoreError::Num(n) => n,
            other => panic!("{other}"),
        })
    })
    .unwrap();
    assert!(check.max_rel_err < 1e-4, "{check:?}");
}

#[test]
fn target_is_stale_until_synced() {
    let cfg = qcfg(2, 3, 2);
    let mut net = QNetwork::init(cfg, 7).unwrap();
    let s = random_state(2, 3, 2, 3);
    let trs: Vec<Transition> = (0..4).map(|i| transition(random_state(2, 3, 2, i), i as usize % 2, 1.0, s.clone(), false)).collect();
    let refs: Vec<&Transition> = trs.iter().collect();
    let before = net.q_target(&s).unwrap();
    let online_before = net.q(&s).unwrap();
    for _ in 0..5 {
        net.optimize(&refs, 0.9, 1e-2).unwrap();
        assert_eq!(net.q_target(&s).unwrap(), before);
    }
    assert_ne!(net.q(&s).unwrap(), online_before);
    net.sync_target();
    assert_eq!(net.q_target(&s).unwrap(), net.q(&s).unwrap());
}

#[test]
fn replay_buffer_is_a_ring() {
    let mut buf = ReplayBuffer::new(3);
    let s = random_state(1, 1, 1, 0);
    for i in 0..5 {
        buf.push(transition(s.clone(), 0, i as f64, s.clone(), false));
    }
    assert_eq!(buf.len(), 3);
    let mut rewards: Vec<f64> = buf.items.iter().map(|t| t.reward).collect();
    rewards.sort_by(f64::total_cmp);
    assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = [0usize; 3];
    for t in buf.sample(&mut rng, 6000) {
        counts[t.reward as usize - 2] += 1;
    }
    assert!(counts.iter().all(|&c| (c as f64 / 6000.0 - 1.0 / 3.0).abs() < 0.03), "{counts:?}");
}

fn market() -> (PriceTable, FeatureSet) {
    let m = generate(&SynthSpec::random_walk(4, 160, 0.0, 0.02, 21)).unwrap();
    let fs = FeatureSet::build(&m.prices, 4, 0..120, &[]).unwrap();
    (m.prices, fs)
}

fn actors() -> Vec<FixedActor> {
    vec![
        FixedActor(PortfolioVector::equal_weight(4, &[0], &[1], 0.5).unwrap()),
        FixedActor(PortfolioVector::equal_weight(4, &[1], &[0], 0.5).unwrap()),
        FixedActor(PortfolioVector::uniform_long(4)),
    ]
}

#[test]
fn shadows_replay_standalone_backtests() {
    let (p, fs) = market();
    let acts = actors();
    let start = fs.first_state();
    let mut bank = ShadowBank::new(acts.len(), 4, 100, start);
    bank.catch_up(&acts, &p, &fs, 0.0, start + 20).unwrap();
    let spec = MetricSpec { periods_per_year: 252.0, risk_free: 0.0 };
    for (k, a) in acts.iter().enumerate() {
        let r = run_backtest("a", ActorDecider(a), &p, &fs, &EnvConfig::default(), start..start + 20, spec).unwrap();
        assert_eq!(bank.histories()[k], r.ror);
    }
    assert!(bank.state_at(&fs, start + 19).is_err());
    assert_eq!(bank.state_at(&fs, start + 20).unwrap().x_p.len(), 3);
}

fn tiny_policy(seed: u64) -> Policy {
    let cfg = PolicyConfig {
        n_assets: 4,
        in_channels: 9,
        market_channels: 5,
        hidden: 2,
        lookback: 4,
        kernel_size: 2,
        dilations: vec![1],
        top_m: 1,
        allow_short: true,
        noise_std: 0.1,
        rho_scale: 1.0,
    };
    Policy::init(cfg, seed).unwrap()
}

#[test]
fn base_policies_stay_frozen_and_training_repeats() {
    let (p, fs) = market();
    let pols = vec![tiny_policy(1), tiny_policy(2)];
    let hashes: Vec<String> = pols.iter().map(|q| q.params().content_hash()).collect();
    let cfg = MetaConfig { steps: 40, episode_length: 10, batch_size: 8, sync_every: 15, ..MetaConfig::default() };
    let a = train_meta(&pols, &p, &fs, &EnvConfig::default(), 0..120, &cfg).unwrap();
    let b = train_meta(&pols, &p, &fs, &EnvConfig::default(), 0..120, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.curve.len(), 40);
    assert_eq!(a.target_syncs, 2);
    assert!(a.curve[..7].iter().all(|r| r.q_loss.is_none()));
    assert!(a.curve[7..].iter().all(|r| r.q_loss.is_some()));
    assert_eq!(pols.iter().map(|q| q.params().content_hash()).collect::<Vec<_>>(), hashes);
    let mut buf = Vec::new();
    write_meta_curve_csv(&a.curve, &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("step,epsilon,q_loss,selected_k,reward\n0,1,,"));
}

#[test]
fn single_policy_meta_matches_the_policy() {
    let (p, fs) = market();
    let pols = vec![tiny_policy(3)];
    let cfg = MetaConfig { steps: 20, episode_length: 10, batch_size: 4, ..MetaConfig::default() };
    let out = train_meta(&pols, &p, &fs, &EnvConfig::default(), 0..120, &cfg).unwrap();
    assert!(out.curve.iter().all(|r| r.selected == 0));
    let spec = MetricSpec { periods_per_year: 252.0, risk_free: 0.0 };
    let env = EnvConfig::default();
    let meta = MetaDecider::new(&out.network, &pols, &p, &fs, 0.0, cfg.window).unwrap();
    let m = run_backtest("meta", meta, &p, &fs, &env, 120..150, spec).unwrap();
    let s = run_backtest("single", PolicyDecider(&pols[0]), &p, &fs, &env, 120..150, spec).unwrap();
    assert_eq!(m.wealth, s.wealth);
    assert_eq!(m.selections, Some(vec![0; 30]));
}
