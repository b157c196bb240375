//! Differential Sharpe ratio reward.

use serde::{Deserialize, Serialize};

/// Below this variance estimate the reward is withheld.
pub const VARIANCE_GUARD: f64 = 1e-8;

/// Exponential moment estimates of the per-period return rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsrState {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub steps_seen: u64,
}

impl DsrState {
    pub fn new(eta: f64) -> Self {
        Self { alpha: 0.0, beta: 0.0, eta, steps_seen: 0 }
    }
}

/// Reward for return rate `ror` given the moments before this step, plus the updated moments.
///
/// Returns zero while fewer than two returns have been seen or while the
/// variance estimate is at most [`VARIANCE_GUARD`].
pub fn dsr_reward(state: &DsrState, ror: f64) -> (f64, DsrState) {
    let DsrState { alpha, beta, eta, steps_seen } = *state;
    let d_alpha = ror - alpha;
    let d_beta = ror * ror - beta;
    let var = beta - alpha * alpha;
    let reward =
        if steps_seen < 2 || var <= VARIANCE_GUARD { 0.0 } else { (beta * d_alpha - 0.5 * alpha * d_beta) / var.powf(1.5) };
    let next = DsrState { alpha: alpha + eta * d_alpha, beta: beta + eta * d_beta, eta, steps_seen: steps_seen + 1 };
    (reward, next)
}
