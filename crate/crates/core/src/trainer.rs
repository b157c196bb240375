//! Base-policy training: noisy rollouts scored with a policy-gradient term
//! plus behavior cloning toward one demonstration dataset.

use std::io::Write;
use std::ops::Range;

use numcore::{AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backtest::metrics_of;
use crate::env::{EnvConfig, StateSnapshot, TradingEnv};
use crate::error::{CoreError, Result};
use crate::experts::ExpertDataset;
use crate::marketdata::{FeatureSet, PriceTable};
use crate::policy::{gaussian_log_prob_node, portfolio_head, Policy};
use crate::portfolio::PortfolioVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the cloning term.
    pub lambda: f64,
    pub gamma: f64,
    pub episodes: usize,
    pub episode_length: usize,
    pub bc_batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Subtract the episode's mean return-to-go before weighting log-probabilities.
    pub baseline: bool,
    /// Multiplies environment rewards; zero turns off the policy-gradient signal.
    pub reward_scale: f64,
    /// Annualization used for the `ARR_train` curve column.
    pub periods_per_year: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 0.99,
            episodes: 200,
            episode_length: 64,
            bc_batch: 32,
            learning_rate: 1e-3,
            seed: 0,
            baseline: false,
            reward_scale: 1.0,
            periods_per_year: 252.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("train.lambda = {} must be non-negative", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("train.gamma = {} outside [0, 1]", self.gamma));
        }
        if self.episode_length == 0 {
            return bad("train.episode_length must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate = {} must be positive", self.learning_rate));
        }
        if !self.reward_scale.is_finite() {
            return bad("train.reward_scale must be finite".into());
        }
        if !(self.periods_per_year > 0.0) {
            return bad("train.periods_per_year must be positive".into());
        }
        Ok(())
    }
}

/// `psi[t] = r[t] + gamma * psi[t + 1]`, evaluated backwards.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateSnapshot>,
    /// Sampled score vectors the actions were built from.
    pub samples: Vec<Vec<f64>>,
    pub actions: Vec<PortfolioVector>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
    pub ror: Vec<f64>,
    /// Set when bankruptcy cut the episode short.
    pub done_early: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Runs one noisy episode of `length` periods starting at `start`.
pub fn rollout<R: Rng + ?Sized>(
    policy: &Policy,
    env: &mut TradingEnv<'_>,
    start: usize,
    length: usize,
    gamma: f64,
    reward_scale: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut state = env.reset(start, length)?;
    let mut traj = Trajectory {
        states: Vec::with_capacity(length),
        samples: Vec::with_capacity(length),
        actions: Vec::with_capacity(length),
        log_probs: Vec::with_capacity(length),
        rewards: Vec::with_capacity(length),
        returns: Vec::new(),
        ror: Vec::with_capacity(length),
        done_early: false,
    };
    loop {
        let noisy = policy.act_noisy(&state, rng)?;
        let out = env.step(&noisy.action)?;
        traj.states.push(state);
        traj.samples.push(noisy.v_sample);
        traj.actions.push(noisy.action);
        traj.log_probs.push(noisy.log_prob);
        traj.rewards.push(out.reward * reward_scale);
        traj.ror.push(out.ror);
        state = out.state;
        if out.done {
            traj.done_early = out.bankrupt && traj.len() < length;
            break;
        }
    }
    traj.returns = discounted_returns(&traj.rewards, gamma);
    Ok(traj)
}

/// One cloning target: the state the expert acted in and its action.
#[derive(Debug, Clone, PartialEq)]
pub struct BcSample {
    pub state: StateSnapshot,
    pub target: PortfolioVector,
}

/// Cloning samples for every pair whose state is observable in `range`.
///
/// The account feature is the expert's own previous action, or uniform long
/// when the expert has no pair one period earlier.
pub fn bc_samples(dataset: &ExpertDataset, features: &FeatureSet, range: Range<usize>) -> Result<Vec<BcSample>> {
    let lo = range.start.max(features.first_state());
    let hi = range.end.min(features.n_periods());
    let mut out = Vec::new();
    for (t, a) in dataset.pairs() {
        if !(lo..hi).contains(t) {
            continue;
        }
        let n = a.n_assets();
        let prev = t.checked_sub(1).and_then(|p| dataset.action_at(p)).cloned().unwrap_or_else(|| PortfolioVector::uniform_long(n));
        out.push(BcSample { state: StateSnapshot::at(features, *t, prev)?, target: a.clone() });
    }
    Ok(out)
}

/// Tape handles of the mixed objective.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub pg: Var,
    pub bc: Var,
}

/// Records `-sum_t psi_t log pi(a_t | s_t) + lambda * mean_i |pi(s_i) - a_i|^2` on `g`.
pub fn mixed_loss(
    g: &mut Graph,
    policy: &Policy,
    params: &ParamStore,
    traj: &Trajectory,
    batch: &[BcSample],
    lambda: f64,
    baseline: bool,
) -> Result<LossParts> {
    let sigma = policy.config().noise_std;
    let base = if baseline && !traj.is_empty() { traj.returns.iter().sum::<f64>() / traj.len() as f64 } else { 0.0 };
    let mut pg = g.constant(Tensor::scalar(0.0));
    for t in 0..traj.len() {
        let fw = policy.forward_with(g, params, &traj.states[t])?;
        let lp = gaussian_log_prob_node(g, &traj.samples[t], fw.v, sigma)?;
        let term = g.scale(lp, -(traj.returns[t] - base));
        pg = g.add(pg, term)?;
    }
    let mut bc = g.constant(Tensor::scalar(0.0));
    for s in batch {
        let fw = policy.forward_with(g, params, &s.state)?;
        let (out, _) = portfolio_head(g, fw.v, fw.rho, policy.config().top_m)?;
        let target = g.constant(Tensor::vector(s.target.concat()));
        let d = g.sub(out, target)?;
        let sq = g.mul(d, d)?;
        let sq = g.sum(sq);
        bc = g.add(bc, sq)?;
    }
    if !batch.is_empty() {
        bc = g.scale(bc, 1.0 / batch.len() as f64);
    }
    let weighted = g.scale(bc, lambda);
    let total = g.add(pg, weighted)?;
    Ok(LossParts { total, pg, bc })
}

/// Mean squared distance `|pi(s) - a|^2` of the noiseless policy over `samples`.
pub fn bc_mse(policy: &Policy, samples: &[BcSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for s in samples {
        let a = policy.act(&s.state)?.action.concat();
        acc += a.iter().zip(s.target.concat()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    Ok(acc / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub episode: usize,
    pub pg_loss: f64,
    pub bc_loss: f64,
    pub mean_reward: f64,
    pub arr_train: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    /// Parameters after the last finite update.
    pub policy: Policy,
    pub curve: Vec<CurveRow>,
    /// Episode whose loss or gradient was non-finite, if training stopped early.
    pub diverged_at: Option<usize>,
}

/// Trains `policy` on the decision times of `train`, cloning `dataset`.
pub fn train_policy(
    mut policy: Policy,
    prices: &PriceTable,
    features: &FeatureSet,
    env_config: &EnvConfig,
    dataset: &ExpertDataset,
    train: Range<usize>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let first = features.first_state().max(train.start);
    let last_decision = train.end.min(prices.n_periods()).saturating_sub(1);
    if last_decision <= first {
        return Err(CoreError::Window(format!("training range {train:?} leaves no decision after warm-up at {first}")));
    }
    let length = cfg.episode_length.min(last_decision - first);
    let samples = bc_samples(dataset, features, first..last_decision + 1)?;
    let mut env = TradingEnv::new(prices, features, env_config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig::default();
    let mut curve = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let start = rng.random_range(first..=last_decision - length);
        let traj = rollout(&policy, &mut env, start, length, cfg.gamma, cfg.reward_scale, &mut rng)?;
        let batch: Vec<BcSample> = if samples.len() <= cfg.bc_batch {
            samples.clone()
        } else {
            index::sample(&mut rng, samples.len(), cfg.bc_batch).into_iter().map(|i| samples[i].clone()).collect()
        };
        let mut g = Graph::new();
        let parts = mixed_loss(&mut g, &policy, policy.params(), &traj, &batch, cfg.lambda, cfg.baseline)?;
        let (total, pg, bc) = (g.value(parts.total).data()[0], g.value(parts.pg).data()[0], g.value(parts.bc).data()[0]);
        let grads = g.backward(parts.total)?;
        let finite = total.is_finite() && grads.params().values().all(|t| t.data().iter().all(|x| x.is_finite()));
        if !finite {
            return Ok(TrainOutput { policy, curve, diverged_at: Some(episode) });
        }
        policy.params_mut().adam_step(grads.params(), cfg.learning_rate, &adam)?;
        let mean_reward = traj.rewards.iter().sum::<f64>() / traj.len() as f64;
        let arr_train = metrics_of(&traj.ror, cfg.periods_per_year, env_config.risk_free)?.arr;
        curve.push(CurveRow { episode, pg_loss: pg, bc_loss: bc, mean_reward, arr_train });
    }
    Ok(TrainOutput { policy, curve, diverged_at: None })
}

/// Writes `episode,pg_loss,bc_loss,mean_reward,ARR_train`.
pub fn write_curve_csv<W: Write>(rows: &[CurveRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["episode", "pg_loss", "bc_loss", "mean_reward", "ARR_train"])?;
    for r in rows {
        out.write_record([
            r.episode.to_string(),
            r.pg_loss.to_string(),
            r.bc_loss.to_string(),
            r.mean_reward.to_string(),
            r.arr_train.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{empty_dataset, gen_csm, gen_hindsight};
    use crate::policy::PolicyConfig;
    use crate::synth::{generate, SynthSpec};

    fn small_market(n: usize, periods: usize, seed: u64) -> (PriceTable, FeatureSet) {
        let m = generate(&SynthSpec::random_walk(n, periods, 0.0, 0.02, seed)).unwrap();
        let fs = FeatureSet::build(&m.prices, 4, 0..periods, &[]).unwrap();
        (m.prices, fs)
    }

    fn small_policy(n: usize, fm: usize, t: usize, m: usize, sigma: f64) -> Policy {
        let cfg = PolicyConfig {
            n_assets: n,
            in_channels: 9,
            market_channels: fm,
            hidden: 3,
            lookback: t,
            kernel_size: 2,
            dilations: vec![1, 2],
            top_m: m,
            allow_short: true,
            noise_std: sigma,
            rho_scale: 1.0,
        };
        Policy::init(cfg, 5).unwrap()
    }

    #[test]
    fn discounted_returns_examples() {
        assert_eq!(discounted_returns(&[1.0, 1.0, 1.0], 1.0), vec![3.0, 2.0, 1.0]);
        assert_eq!(discounted_returns(&[0.3, -2.0, 5.0], 0.0), vec![0.3, -2.0, 5.0]);
        assert_eq!(discounted_returns(&[1.0, 2.0, 4.0], 0.5), vec![3.0, 4.0, 4.0]);
    }

    #[test]
    fn zero_noise_rollout_is_the_deterministic_policy() {
        let (p, fs) = small_market(3, 80, 1);
        let pol = small_policy(3, 5, 4, 1, 0.0);
        let mut env = TradingEnv::new(&p, &fs, EnvConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tr = rollout(&pol, &mut env, fs.first_state(), 5, 0.9, 1.0, &mut rng).unwrap();
        assert_eq!(tr.len(), 5);
        assert!(tr.log_probs.iter().all(|&l| l == 0.0));
        for (s, a) in tr.states.iter().zip(&tr.actions) {
            assert_eq!(&pol.act(s).unwrap().action, a);
        }
    }

    #[test]
    fn seeded_rollouts_repeat() {
        let (p, fs) = small_market(3, 80, 2);
        let pol = small_policy(3, 5, 4, 1, 0.1);
        let mut env = TradingEnv::new(&p, &fs, EnvConfig::default()).unwrap();
        let run = |env: &mut TradingEnv<'_>| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            rollout(&pol, env, 50, 6, 0.99, 1.0, &mut rng).unwrap()
        };
        assert_eq!(run(&mut env), run(&mut env));
    }

    #[test]
    fn loss_terms_degenerate_cases() {
        let (p, fs) = small_market(3, 80, 3);
        let pol = small_policy(3, 5, 4, 1, 0.1);
        let mut env = TradingEnv::new(&p, &fs, EnvConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = rollout(&pol, &mut env, 50, 4, 0.99, 1.0, &mut rng).unwrap();
        let d = gen_csm(&p, 45..70, 1, 0.5).unwrap();
        let batch = bc_samples(&d, &fs, 50..54).unwrap();
        let value = |lambda: f64, batch: &[BcSample]| {
            let mut g = Graph::new();
            let l = mixed_loss(&mut g, &pol, pol.params(), &tr, batch, lambda, false).unwrap();
            (g.value(l.total).data()[0], g.value(l.pg).data()[0], g.value(l.bc).data()[0])
        };
        let (total, pg, bc) = value(0.0, &batch);
        assert_eq!(total, pg);
        assert!(bc > 0.0);
        let (total, pg, bc) = value(7.0, &[]);
        assert_eq!(bc, 0.0);
        assert_eq!(total, pg);

        let own: Vec<BcSample> = batch
            .iter()
            .map(|s| BcSample { state: s.state.clone(), target: pol.act(&s.state).unwrap().action })
            .collect();
        let (_, _, bc) = value(1e3, &own);
        assert!(bc.abs() < 1e-24);
        assert!(bc_mse(&pol, &own).unwrap() < 1e-24);
    }

    #[test]
    fn mixed_loss_gradient_matches_finite_differences() {
        let (p, fs) = small_market(3, 80, 4);
        let pol = small_policy(3, 5, 4, 1, 0.3);
        let mut env = TradingEnv::new(&p, &fs, EnvConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tr = rollout(&pol, &mut env, 50, 2, 0.9, 1.0, &mut rng).unwrap();
        tr.returns = vec![0.7, -0.4];
        let d = gen_hindsight(&p, 45..70, 1, 0.5).unwrap();
        let batch = bc_samples(&d, &fs, 55..57).unwrap();
        assert_eq!(batch.len(), 2);
        let check = numcore::gradcheck::check_params(pol.params(), 1e-6, |g, params| {
            let l = mixed_loss(g, &pol, params, &tr, &batch, 2.0, false).map_err(|e| match e {
                CoreError::Num(n) => n,
                other => panic!("{other}"),
            })?;
            Ok(l.total)
        })
        .unwrap();
        assert!(check.max_rel_err < 1e-4, "{check:?}");
    }

    #[test]
    fn zero_signal_leaves_parameters_unchanged() {
        let (p, fs) = small_market(3, 90, 5);
        let pol = small_policy(3, 5, 4, 1, 0.1);
        let cfg = TrainConfig { lambda: 0.0, reward_scale: 0.0, episodes: 3, episode_length: 5, ..TrainConfig::default() };
        let out = train_policy(pol.clone(), &p, &fs, &EnvConfig::default(), &empty_dataset(), 0..90, &cfg).unwrap();
        assert_eq!(out.diverged_at, None);
        assert_eq!(out.curve.len(), 3);
        for (name, t) in pol.params().iter() {
            assert_eq!(out.policy.params().get(name).unwrap(), t, "{name}");
        }
    }

    #[test]
    fn training_is_seed_deterministic_and_writes_curve() {
        let (p, fs) = small_market(3, 90, 6);
        let d = gen_csm(&p, 40..89, 1, 0.5).unwrap();
        let cfg = TrainConfig { episodes: 4, episode_length: 6, bc_batch: 4, ..TrainConfig::default() };
        let run = || train_policy(small_policy(3, 5, 4, 1, 0.1), &p, &fs, &EnvConfig::default(), &d, 0..90, &cfg).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_ne!(a.policy.params().content_hash(), small_policy(3, 5, 4, 1, 0.1).params().content_hash());
        let mut buf = Vec::new();
        write_curve_csv(&a.curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("episode,pg_loss,bc_loss,mean_reward,ARR_train\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
