//! Trading MDP: state assembly, long/short execution, and the reward stream.

mod account;
mod dsr;

use std::io::Write;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::marketdata::{FeatureSet, PriceTable};
use crate::portfolio::PortfolioVector;

pub use account::{rebalance, AccountState, Rebalanced};
pub use dsr::{dsr_reward, DsrState, VARIANCE_GUARD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub gamma: f64,
    pub transaction_cost: f64,
    /// Per-period risk-free rate; used by the metrics only.
    pub risk_free: f64,
    pub allow_short: bool,
    pub episode_length: usize,
    pub dsr_eta: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { gamma: 0.99, transaction_cost: 0.0, risk_free: 0.0, allow_short: true, episode_length: 64, dsr_eta: 0.01 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("env.gamma = {} outside (0, 1]", self.gamma));
        }
        if !(0.0..0.2).contains(&self.transaction_cost) {
            return bad(format!("env.transaction_cost = {} outside [0, 0.2)", self.transaction_cost));
        }
        if !self.risk_free.is_finite() {
            return bad("env.risk_free must be finite".into());
        }
        if self.episode_length == 0 {
            return bad("env.episode_length must be positive".into());
        }
        if !(self.dsr_eta > 0.0 && self.dsr_eta < 1.0) {
            return bad(format!("env.dsr_eta = {} outside (0, 1)", self.dsr_eta));
        }
        Ok(())
    }
}

/// Everything a policy observes at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub t: usize,
    /// `[N, F, T]` asset features.
    pub x_s: Tensor,
    /// `[F_m, T]` market features.
    pub x_m: Tensor,
    /// Previous action.
    pub x_a: PortfolioVector,
}

impl StateSnapshot {
    pub fn at(features: &FeatureSet, t: usize, x_a: PortfolioVector) -> Result<Self> {
        Ok(Self { t, x_s: features.asset_window(t)?, x_m: features.market_window(t)?, x_a })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: StateSnapshot,
    pub reward: f64,
    pub ror: f64,
    pub done: bool,
    pub bankrupt: bool,
}

/// One audited holding period.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    /// Capital after the period.
    pub ac: f64,
    pub ror: f64,
    pub reward: f64,
    pub action: PortfolioVector,
}

/// A single-account environment over a fixed feature set.
///
/// A step at decision time `t` trades at close `t` and marks at close `t + 1`.
#[derive(Debug, Clone)]
pub struct TradingEnv<'a> {
    prices: &'a PriceTable,
    features: &'a FeatureSet,
    config: EnvConfig,
    t: usize,
    end: usize,
    account: AccountState,
    dsr: DsrState,
    active: bool,
    trace: Vec<TraceRow>,
}

impl<'a> TradingEnv<'a> {
    pub fn new(prices: &'a PriceTable, features: &'a FeatureSet, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        if prices.n_periods() != features.n_periods() || prices.n_assets() != features.asset.n_assets() {
            return Err(CoreError::Window("features were not computed from this price table".into()));
        }
        let n = prices.n_assets();
        let eta = config.dsr_eta;
        Ok(Self {
            prices,
            features,
            config,
            t: 0,
            end: 0,
            account: AccountState::initial(n),
            dsr: DsrState::new(eta),
            active: false,
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn prices(&self) -> &PriceTable {
        self.prices
    }

    pub fn features(&self) -> &FeatureSet {
        self.features
    }

    /// Starts an episode of `length` periods whose first decision is at `start`.
    pub fn reset(&mut self, start: usize, length: usize) -> Result<StateSnapshot> {
        let first = self.features.first_state();
        if length == 0 || start < first || start + length >= self.prices.n_periods() {
            return Err(CoreError::Window(format!(
                "episode of {length} steps from {start} needs decisions in [{first}, {})",
                self.prices.n_periods().saturating_sub(1)
            )));
        }
        self.t = start;
        self.end = start + length;
        self.account = AccountState::initial(self.prices.n_assets());
        self.dsr = DsrState::new(self.config.dsr_eta);
        self.active = true;
        self.trace.clear();
        self.state()
    }

    pub fn state(&self) -> Result<StateSnapshot> {
        StateSnapshot::at(self.features, self.t, self.account.x_a.clone())
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn account(&self) -> &AccountState {
        &self.account
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn step(&mut self, action: &PortfolioVector) -> Result<StepResult> {
        if !self.active {
            return Err(CoreError::Lifecycle("step called on a finished or unstarted episode".into()));
        }
        if !self.config.allow_short && action.rho() != 0.0 {
            return Err(CoreError::InvalidPortfolio(format!("short ratio {} with shorting disabled", action.rho())));
        }
        let now = self.prices.closes_at(self.t);
        let next = self.prices.closes_at(self.t + 1);
        let out = rebalance(&self.account, action, &now, &next, self.config.transaction_cost)?;
        let (reward, dsr) = dsr_reward(&self.dsr, out.ror);
        self.dsr = dsr;
        self.trace.push(TraceRow { t: self.t, ac: out.account.ac, ror: out.ror, reward, action: action.clone() });
        self.account = out.account;
        self.t += 1;
        let done = out.bankrupt || self.t >= self.end;
        if done {
            self.active = false;
        }
        Ok(StepResult { state: self.state()?, reward, ror: out.ror, done, bankrupt: out.bankrupt })
    }
}

/// Writes `t,AC,RoR,reward,rho,action_json`.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "AC", "RoR", "reward", "rho", "action_json"])?;
    for r in rows {
        out.write_record([
            r.t.to_string(),
            r.ac.to_string(),
            r.ror.to_string(),
            r.reward.to_string(),
            r.action.rho().to_string(),
            serde_json::to_string(&r.action)?,
        ])?;
    }
    out.flush()?;
    Ok(())
}
