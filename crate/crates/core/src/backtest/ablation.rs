use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{run_backtest, ActorDecider, BacktestReport, Decider, MetricSpec};
use crate::env::{EnvConfig, StateSnapshot};
use crate::error::{CoreError, Result};
use crate::marketdata::{FeatureSet, PriceTable};
use crate::policy::Actor;
use crate::portfolio::PortfolioVector;

/// Follows a uniformly drawn base policy each period.
#[derive(Debug, Clone)]
pub struct RandomPick<'a, A> {
    policies: &'a [A],
    rng: ChaCha8Rng,
    last: Option<usize>,
}

impl<'a, A: Actor> RandomPick<'a, A> {
    pub fn new(policies: &'a [A], seed: u64) -> Result<Self> {
        if policies.is_empty() {
            return Err(CoreError::Config("random pick needs at least one policy".into()));
        }
        Ok(Self { policies, rng: ChaCha8Rng::seed_from_u64(seed), last: None })
    }
}

impl<A: Actor> Decider for RandomPick<'_, A> {
    fn decide(&mut self, state: &StateSnapshot) -> Result<PortfolioVector> {
        let k = self.rng.random_range(0..self.policies.len());
        self.last = Some(k);
        self.policies[k].action(state)
    }

    fn last_selection(&self) -> Option<usize> {
        self.last
    }
}

/// Mean of the actions with each leg renormalized; the short leg sums to minus the mean ratio.
pub fn average_actions(actions: &[PortfolioVector]) -> Result<PortfolioVector> {
    let k = actions.len() as f64;
    let n = actions.first().ok_or_else(|| CoreError::Config("nothing to average".into()))?.n_assets();
    let mut wp = vec![0.0; n];
    let mut wm = vec![0.0; n];
    let mut rho = 0.0;
    for a in actions {
        for i in 0..n {
            wp[i] += a.w_plus()[i] / k;
            wm[i] += a.w_minus()[i] / k;
        }
        rho += a.rho() / k;
    }
    let sp: f64 = wp.iter().sum();
    wp.iter_mut().for_each(|w| *w /= sp);
    let sm: f64 = wm.iter().sum();
    if sm < 0.0 {
        wm.iter_mut().for_each(|w| *w *= -rho / sm);
    } else {
        rho = 0.0;
    }
    PortfolioVector::new(wp, wm, rho)
}

/// Averages the base actions each period.
#[derive(Debug, Clone, Copy)]
pub struct AverageWeight<'a, A>(pub &'a [A]);

impl<A: Actor> Decider for AverageWeight<'_, A> {
    fn decide(&mut self, state: &StateSnapshot) -> Result<PortfolioVector> {
        let actions = self.0.iter().map(|p| p.action(state)).collect::<Result<Vec<_>>>()?;
        average_actions(&actions)
    }
}

/// Picks the policy with the highest training ARR (lowest index on ties) and runs it on `test`.
/// Returns the chosen index with its test report.
#[allow(clippy::too_many_arguments)]
pub fn ablation_single_best<A: Actor>(
    policies: &[A],
    prices: &PriceTable,
    features: &FeatureSet,
    env_config: &EnvConfig,
    train: Range<usize>,
    test: Range<usize>,
    spec: MetricSpec,
) -> Result<(usize, BacktestReport)> {
    if policies.is_empty() {
        return Err(CoreError::Config("single best needs at least one policy".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (k, p) in policies.iter().enumerate() {
        let arr = run_backtest("train", ActorDecider(p), prices, features, env_config, train.clone(), spec)?.metrics.arr;
        if arr > best.1 {
            best = (k, arr);
        }
    }
    let report = run_backtest("single_best", ActorDecider(&policies[best.0]), prices, features, env_config, test, spec)?;
    Ok((best.0, report))
}

pub fn ablation_random_pick<A: Actor>(
    policies: &[A],
    prices: &PriceTable,
    features: &FeatureSet,
    env_config: &EnvConfig,
    test: Range<usize>,
    spec: MetricSpec,
    seed: u64,
) -> Result<BacktestReport> {
    run_backtest("random_pick", RandomPick::new(policies, seed)?, prices, features, env_config, test, spec)
}

pub fn ablation_average_weight<A: Actor>(
    policies: &[A],
    prices: &PriceTable,
    features: &FeatureSet,
    env_config: &EnvConfig,
    test: Range<usize>,
    spec: MetricSpec,
) -> Result<BacktestReport> {
    if policies.is_empty() {
        return Err(CoreError::Config("average weight needs at least one policy".into()));
    }
    run_backtest("average_weight", AverageWeight(policies), prices, features, env_config, test, spec)
}
