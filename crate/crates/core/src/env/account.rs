use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::portfolio::PortfolioVector;

const COST_ITERATIONS: usize = 64;

/// Wealth, open positions, and the last executed action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountState {
    /// Accumulated capital marked at the latest prices.
    pub ac: f64,
    /// Uninvested cash; nonzero only before the first rebalance.
    pub cash: f64,
    pub long_shares: Vec<f64>,
    pub short_shares: Vec<f64>,
    /// The account feature: the previous action.
    pub x_a: PortfolioVector,
}

impl AccountState {
    /// Unit capital held in cash, with a uniform long placeholder as the account feature.
    pub fn initial(n: usize) -> Self {
        Self { ac: 1.0, cash: 1.0, long_shares: vec![0.0; n], short_shares: vec![0.0; n], x_a: PortfolioVector::uniform_long(n) }
    }

    pub fn n_assets(&self) -> usize {
        self.long_shares.len()
    }

    /// Net capital at `prices`.
    pub fn value(&self, prices: &[f64]) -> f64 {
        let long: f64 = self.long_shares.iter().zip(prices).map(|(b, p)| b * p).sum();
        let short: f64 = self.short_shares.iter().zip(prices).map(|(b, p)| b * p).sum();
        self.cash + long - short
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rebalanced {
    pub account: AccountState,
    /// Capital at the current prices, before trading.
    pub ac_before: f64,
    pub ror: f64,
    pub cost_paid: f64,
    pub bankrupt: bool,
}

/// Executes one holding period. `acct.ac` must be marked at `prices_now`.
///
/// Both legs are closed at `prices_now`, `ac * rho` of stock is borrowed and
/// sold, the proceeds plus capital buy the long leg, and everything is marked
/// at `prices_next`. A proportional `cost` is charged on the net change in
/// each position's notional, solved as a fixed point since the cost shrinks
/// the capital being allocated.
pub fn rebalance(
    acct: &AccountState,
    action: &PortfolioVector,
    prices_now: &[f64],
    prices_next: &[f64],
    cost: f64,
) -> Result<Rebalanced> {
    let n = acct.n_assets();
    if action.n_assets() != n || prices_now.len() != n || prices_next.len() != n {
        return Err(CoreError::InvalidPortfolio(format!(
            "action over {} assets, account over {n}, prices over {} and {}",
            action.n_assets(),
            prices_now.len(),
            prices_next.len()
        )));
    }
    if prices_now.iter().chain(prices_next).any(|p| !(*p > 0.0 && p.is_finite())) {
        return Err(CoreError::Window("rebalance prices must be positive".into()));
    }
    if !(0.0..0.2).contains(&cost) {
        return Err(CoreError::Config(format!("transaction cost {cost} outside [0, 0.2)")));
    }
    let ac = acct.ac;
    let rho = action.rho();
    let old_long: Vec<f64> = acct.long_shares.iter().zip(prices_now).map(|(b, p)| b * p).collect();
    let old_short: Vec<f64> = acct.short_shares.iter().zip(prices_now).map(|(b, p)| b * p).collect();
    let turnover = |capital: f64| -> f64 {
        let tc = capital * (1.0 + rho);
        (0..n)
            .map(|i| (tc * action.w_plus()[i] - old_long[i]).abs() + (capital * -action.w_minus()[i] - old_short[i]).abs())
            .sum()
    };
    let mut paid = 0.0;
    if cost > 0.0 && ac > 0.0 {
        for _ in 0..COST_ITERATIONS {
            let next = cost * turnover(ac - paid);
            if (next - paid).abs() <= 1e-15 * ac {
                paid = next;
                break;
            }
            paid = next;
        }
    }
    let capital = ac - paid;
    if capital <= 0.0 {
        let account = AccountState { ac: capital, ..acct.clone() };
        return Ok(Rebalanced { account, ac_before: ac, ror: -1.0, cost_paid: paid, bankrupt: true });
    }
    let tc = capital * (1.0 + rho);
    let long_shares: Vec<f64> = (0..n).map(|i| tc * action.w_plus()[i] / prices_now[i]).collect();
    let short_shares: Vec<f64> = (0..n).map(|i| capital * -action.w_minus()[i] / prices_now[i]).collect();
    let mut pnl = -paid;
    for i in 0..n {
        let g = prices_next[i] / prices_now[i] - 1.0;
        pnl += (tc * action.w_plus()[i] + capital * action.w_minus()[i]) * g;
    }
    let next_ac = ac + pnl;
    let ror = pnl / ac;
    let account = AccountState { ac: 0.0, cash: 0.0, long_shares, short_shares, x_a: action.clone() };
    Ok(Rebalanced {
        account: AccountState { ac: next_ac, ..account },
        ac_before: ac,
        ror,
        cost_paid: paid,
        bankrupt: next_ac <= 0.0,
    })
}
