//! Value-based selection among frozen base policies.
//!
//! Each period a Q-network scores the `K` base policies from the market
//! window and each policy's trailing mean return, the chosen policy trades
//! the real account, and every policy keeps trading its own shadow account so
//! that track records exist for policies that were not selected.

mod qnet;

use std::io::Write;
use std::ops::Range;

use numcore::{AdamConfig, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backtest::Decider;
use crate::env::{rebalance, AccountState, EnvConfig, StateSnapshot, TradingEnv};
use crate::error::{CoreError, Result};
use crate::marketdata::{FeatureSet, PriceTable};
use crate::policy::Actor;
use crate::portfolio::PortfolioVector;

pub use qnet::{q_forward, q_loss, q_values, QConfig, Transition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Periods averaged into each policy's track record.
    pub window: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Environment steps between target-network copies.
    pub sync_every: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of the training steps over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    /// Total environment steps.
    pub steps: usize,
    pub episode_length: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub fc_hidden: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            window: 12,
            buffer_capacity: 10_000,
            batch_size: 64,
            sync_every: 200,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            steps: 4000,
            episode_length: 64,
            learning_rate: 1e-3,
            hidden: 8,
            fc_hidden: 16,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.window == 0 || self.batch_size == 0 || self.sync_every == 0 || self.episode_length == 0 {
            return bad("meta.window, batch_size, sync_every and episode_length must be positive".into());
        }
        if self.buffer_capacity < self.batch_size {
            return bad(format!("meta.buffer_capacity = {} below batch_size = {}", self.buffer_capacity, self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("meta.gamma = {} outside [0, 1]", self.gamma));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.epsilon_start) || !unit(self.epsilon_end) || !unit(self.epsilon_decay_fraction) {
            return bad("meta epsilon settings must lie in [0, 1]".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("meta.learning_rate = {} must be positive", self.learning_rate));
        }
        if self.hidden == 0 || self.fc_hidden == 0 {
            return bad("meta.hidden and fc_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn q_config(&self, market_channels: usize, lookback: usize, n_policies: usize) -> QConfig {
        QConfig { market_channels, lookback, n_policies, hidden: self.hidden, fc_hidden: self.fc_hidden }
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`, flat afterwards.
    pub fn epsilon_at(&self, step: usize) -> f64 {
        let span = (self.epsilon_decay_fraction * self.steps as f64).ceil() as usize;
        if step >= span {
            return self.epsilon_end;
        }
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * step as f64 / span as f64
    }
}

/// Market window and per-policy trailing mean return.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    /// `[F_m, T]`.
    pub x_m: Tensor,
    pub x_p: Vec<f64>,
}

/// Mean of the last `window` returns of each history; zero for an empty history.
pub fn build_meta_state(x_m: Tensor, histories: &[Vec<f64>], window: usize) -> MetaState {
    let x_p = histories
        .iter()
        .map(|h| {
            let tail = &h[h.len().saturating_sub(window)..];
            if tail.is_empty() {
                0.0
            } else {
                tail.iter().sum::<f64>() / tail.len() as f64
            }
        })
        .collect();
    MetaState { x_m, x_p }
}

/// Uniform random with probability `epsilon`, otherwise the first maximizer.
pub fn select_policy<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return rng.random_range(0..q.len());
    }
    argmax(q)
}

fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = k;
        }
    }
    best
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: Vec::with_capacity(capacity.min(4096)), next: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores `tr`, overwriting the oldest entry once full.
    pub fn push(&mut self, tr: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(tr);
        } else {
            self.items[self.next] = tr;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `n` draws with replacement over the occupied slots.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<&Transition> {
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// Online and target parameters of the selector.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    pub config: QConfig,
    pub online: ParamStore,
    pub target: ParamStore,
}

impl QNetwork {
    pub fn init(config: QConfig, seed: u64) -> Result<Self> {
        let online = config.init_params(seed)?;
        Ok(Self { config, target: online.values_only(), online })
    }

    /// Wraps loaded online parameters; the target starts as a copy.
    pub fn from_params(config: QConfig, online: ParamStore) -> Result<Self> {
        config.validate()?;
        config.check_params(&online)?;
        Ok(Self { config, target: online.values_only(), online })
    }

    pub fn q(&self, state: &MetaState) -> Result<Vec<f64>> {
        Ok(q_values(&self.online, &self.config, &[state])?.remove(0))
    }

    pub fn q_target(&self, state: &MetaState) -> Result<Vec<f64>> {
        Ok(q_values(&self.target, &self.config, &[state])?.remove(0))
    }

    /// One Adam step on the online parameters; returns the loss before the step.
    pub fn optimize(&mut self, batch: &[&Transition], gamma: f64, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let loss = q_loss(&mut g, &self.online, &self.target, &self.config, batch, gamma)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        if !value.is_finite() || grads.params().values().any(|t| !t.is_finite()) {
            return Err(CoreError::Divergence(format!("meta loss {value}")));
        }
        self.online.adam_step(grads.params(), lr, &AdamConfig::default())?;
        Ok(value)
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.values_only();
    }
}

/// Counterfactual accounts, one per base policy, stepped period by period.
#[derive(Debug, Clone)]
pub struct ShadowBank {
    accounts: Vec<AccountState>,
    history: Vec<Vec<f64>>,
    window: usize,
    /// Next period to simulate.
    t: usize,
}

impl ShadowBank {
    pub fn new(n_policies: usize, n_assets: usize, window: usize, start: usize) -> Self {
        Self {
            accounts: vec![AccountState::initial(n_assets); n_policies],
            history: vec![Vec::new(); n_policies],
            window,
            t: start,
        }
    }

    pub fn histories(&self) -> &[Vec<f64>] {
        &self.history
    }

    pub fn next_period(&self) -> usize {
        self.t
    }

    /// Simulates every shadow account through the periods before `t`.
    pub fn catch_up<A: Actor>(&mut self, actors: &[A], prices: &PriceTable, features: &FeatureSet, cost: f64, t: usize) -> Result<()> {
        while self.t < t {
            let now = prices.closes_at(self.t);
            let next = prices.closes_at(self.t + 1);
            let period = self.t;
            let stepped = actors
                .par_iter()
                .zip(self.accounts.par_iter())
                .map(|(actor, acct)| {
                    let state = StateSnapshot::at(features, period, acct.x_a.clone())?;
                    let action = actor.action(&state)?;
                    let out = rebalance(acct, &action, &now, &next, cost)?;
                    let account = if out.bankrupt { AccountState::initial(acct.n_assets()) } else { out.account };
                    Ok((account, out.ror))
                })
                .collect::<Result<Vec<_>>>()?;
            for (k, (account, ror)) in stepped.into_iter().enumerate() {
                self.accounts[k] = account;
                let h = &mut self.history[k];
                h.push(ror);
                if h.len() > self.window {
                    h.remove(0);
                }
            }
            self.t += 1;
        }
        Ok(())
    }

    pub fn state_at(&self, features: &FeatureSet, t: usize) -> Result<MetaState> {
        if t != self.t {
            return Err(CoreError::Lifecycle(format!("shadow accounts are at period {}, state requested at {t}", self.t)));
        }
        Ok(build_meta_state(features.market_window(t)?, &self.history, self.window))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaCurveRow {
    pub step: usize,
    pub epsilon: f64,
    /// `None` until the buffer holds a full batch.
    pub q_loss: Option<f64>,
    pub selected: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainOutput {
    pub network: QNetwork,
    pub curve: Vec<MetaCurveRow>,
    pub target_syncs: usize,
    /// Step whose loss was non-finite, if training stopped early.
    pub diverged_at: Option<usize>,
}

/// Trains the selector on episodes drawn from the decision times of `train`.
pub fn train_meta<A: Actor>(
    actors: &[A],
    prices: &PriceTable,
    features: &FeatureSet,
    env_config: &EnvConfig,
    train: Range<usize>,
    cfg: &MetaConfig,
) -> Result<MetaTrainOutput> {
    cfg.validate()?;
    if actors.is_empty() {
        return Err(CoreError::Config("meta training needs at least one base policy".into()));
    }
    let first = features.first_state().max(train.start);
    let last_decision = train.end.min(prices.n_periods()).saturating_sub(1);
    if last_decision <= first {
        return Err(CoreError::Window(format!("meta training range {train:?} leaves no decision after warm-up at {first}")));
    }
    let length = cfg.episode_length.min(last_decision - first);
    let qcfg = cfg.q_config(features.market.n_channels(), features.lookback(), actors.len());
    let mut net = QNetwork::init(qcfg, cfg.seed)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d65_7461);
    let mut env = TradingEnv::new(prices, features, env_config.clone())?;
    let cost = env_config.transaction_cost;
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut syncs = 0;
    let mut step = 0;
    while step < cfg.steps {
        let start = rng.random_range(first..=last_decision - length);
        let mut real = env.reset(start, length)?;
        let pre = start.saturating_sub(cfg.window).max(features.first_state());
        let mut shadows = ShadowBank::new(actors.len(), prices.n_assets(), cfg.window, pre);
        shadows.catch_up(actors, prices, features, cost, start)?;
        let mut s = shadows.state_at(features, start)?;
        while step < cfg.steps {
            let epsilon = cfg.epsilon_at(step);
            let k = select_policy(&net.q(&s)?, epsilon, &mut rng);
            let action = actors[k].action(&real)?;
            let out = env.step(&action)?;
            shadows.catch_up(actors, prices, features, cost, out.state.t)?;
            let s_next = shadows.state_at(features, out.state.t)?;
            buffer.push(Transition { state: s, selected: k, reward: out.reward, next_state: s_next.clone(), done: out.done });
            let mut loss = None;
            if buffer.len() >= cfg.batch_size {
                let batch = buffer.sample(&mut rng, cfg.batch_size);
                match net.optimize(&batch, cfg.gamma, cfg.learning_rate) {
                    Ok(l) => loss = Some(l),
                    Err(CoreError::Divergence(_)) => {
                        return Ok(MetaTrainOutput { network: net, curve, target_syncs: syncs, diverged_at: Some(step) })
                    }
                    Err(e) => return Err(e),
                }
            }
            curve.push(MetaCurveRow { step, epsilon, q_loss: loss, selected: k, reward: out.reward });
            step += 1;
            if step % cfg.sync_every == 0 {
                net.sync_target();
                syncs += 1;
            }
            s = s_next;
            real = out.state;
            if out.done {
                break;
            }
        }
    }
    Ok(MetaTrainOutput { network: net, curve, target_syncs: syncs, diverged_at: None })
}

/// Writes `step,epsilon,q_loss,selected_k,reward`; the loss is blank before learning starts.
pub fn write_meta_curve_csv<W: Write>(rows: &[MetaCurveRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "epsilon", "q_loss", "selected_k", "reward"])?;
    for r in rows {
        out.write_record([
            r.step.to_string(),
            r.epsilon.to_string(),
            r.q_loss.map(|l| l.to_string()).unwrap_or_default(),
            r.selected.to_string(),
            r.reward.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Greedy selector for backtests; shadow accounts advance lazily to each decision time.
pub struct MetaDecider<'a, A> {
    network: &'a QNetwork,
    actors: &'a [A],
    prices: &'a PriceTable,
    features: &'a FeatureSet,
    cost: f64,
    window: usize,
    shadows: Option<ShadowBank>,
    last: Option<usize>,
}

impl<'a, A: Actor> MetaDecider<'a, A> {
    pub fn new(
        network: &'a QNetwork,
        actors: &'a [A],
        prices: &'a PriceTable,
        features: &'a FeatureSet,
        cost: f64,
        window: usize,
    ) -> Result<Self> {
        if actors.len() != network.config.n_policies {
            return Err(CoreError::Config(format!(
                "meta network scores {} policies, {} supplied",
                network.config.n_policies,
                actors.len()
            )));
        }
        Ok(Self { network, actors, prices, features, cost, window, shadows: None, last: None })
    }
}

impl<A: Actor> Decider for MetaDecider<'_, A> {
    fn decide(&mut self, state: &StateSnapshot) -> Result<PortfolioVector> {
        let t = state.t;
        let shadows = match &mut self.shadows {
            Some(s) if s.next_period() <= t => s,
            slot => {
                let pre = t.saturating_sub(self.window).max(self.features.first_state());
                slot.insert(ShadowBank::new(self.actors.len(), self.prices.n_assets(), self.window, pre))
            }
        };
        shadows.catch_up(self.actors, self.prices, self.features, self.cost, t)?;
        let s = shadows.state_at(self.features, t)?;
        let k = argmax(&self.network.q(&s)?);
        self.last = Some(k);
        self.actors[k].action(state)
    }

    fn last_selection(&self) -> Option<usize> {
        self.last
    }
}

#[cfg(test)]
mod tests;
