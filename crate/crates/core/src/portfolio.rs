//! Long/short portfolio vectors and the top-M selection rule shared by the
//! policy head and the rule-based experts.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Tolerance on the leg sums `sum(w+) = 1` and `sum(w-) = -rho`.
pub const SUM_TOL: f64 = 1e-9;

/// An action `[w+; w-]`: long weights summing to one and short weights summing to `-rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioVector {
    w_plus: Vec<f64>,
    w_minus: Vec<f64>,
    rho: f64,
}

impl PortfolioVector {
    pub fn new(w_plus: Vec<f64>, w_minus: Vec<f64>, rho: f64) -> Result<Self> {
        let bad = |m: String| Err(CoreError::InvalidPortfolio(m));
        if w_plus.len() != w_minus.len() || w_plus.is_empty() {
            return bad(format!("leg lengths {} and {}", w_plus.len(), w_minus.len()));
        }
        if !(0.0..1.0).contains(&rho) {
            return bad(format!("short ratio {rho} outside [0, 1)"));
        }
        if let Some(w) = w_plus.iter().find(|w| !(-SUM_TOL..=1.0 + SUM_TOL).contains(*w)) {
            return bad(format!("long weight {w} outside [0, 1]"));
        }
        if let Some(w) = w_minus.iter().find(|w| !(-1.0 - SUM_TOL..=SUM_TOL).contains(*w)) {
            return bad(format!("short weight {w} outside [-1, 0]"));
        }
        let sp: f64 = w_plus.iter().sum();
        let sm: f64 = w_minus.iter().sum();
        if (sp - 1.0).abs() > SUM_TOL {
            return bad(format!("long weights sum to {sp}"));
        }
        if (sm + rho).abs() > SUM_TOL {
            return bad(format!("short weights sum to {sm}, expected {}", -rho));
        }
        Ok(Self { w_plus, w_minus, rho })
    }

    /// Equal long weight on every asset, no short leg. Used as the account
    /// feature before any decision has been made.
    pub fn uniform_long(n: usize) -> Self {
        Self { w_plus: vec![1.0 / n as f64; n], w_minus: vec![0.0; n], rho: 0.0 }
    }

    /// Equal weights `1/M` on `long` and `-rho/M` on `short`.
    pub fn equal_weight(n: usize, long: &[usize], short: &[usize], rho: f64) -> Result<Self> {
        let mut wp = vec![0.0; n];
        let mut wm = vec![0.0; n];
        for &i in long {
            wp[i] = 1.0 / long.len() as f64;
        }
        if rho > 0.0 {
            for &i in short {
                wm[i] = -rho / short.len() as f64;
            }
        }
        Self::new(wp, wm, rho)
    }

    /// Softmax of `long_logits` over `long`, and `-rho` times softmax of `short_logits` over `short`.
    pub fn softmax_weighted(
        n: usize,
        long: &[usize],
        long_logits: &[f64],
        short: &[usize],
        short_logits: &[f64],
        rho: f64,
    ) -> Result<Self> {
        let mut wp = vec![0.0; n];
        let mut wm = vec![0.0; n];
        for (&i, w) in long.iter().zip(softmax(long_logits)) {
            wp[i] = w;
        }
        if rho > 0.0 {
            for (&i, w) in short.iter().zip(softmax(short_logits)) {
                wm[i] = -rho * w;
            }
        }
        Self::new(wp, wm, rho)
    }

    pub fn n_assets(&self) -> usize {
        self.w_plus.len()
    }

    pub fn w_plus(&self) -> &[f64] {
        &self.w_plus
    }

    pub fn w_minus(&self) -> &[f64] {
        &self.w_minus
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `[w+; w-]`, length `2N`.
    pub fn concat(&self) -> Vec<f64> {
        self.w_plus.iter().chain(&self.w_minus).copied().collect()
    }

    pub fn long_support(&self) -> Vec<usize> {
        (0..self.w_plus.len()).filter(|&i| self.w_plus[i] > 0.0).collect()
    }

    pub fn short_support(&self) -> Vec<usize> {
        (0..self.w_minus.len()).filter(|&i| self.w_minus[i] < 0.0).collect()
    }

    pub fn supports_disjoint(&self) -> bool {
        self.w_plus.iter().zip(&self.w_minus).all(|(p, m)| *p == 0.0 || *m == 0.0)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Top-M and bottom-M asset sets for `scores`.
///
/// The long set holds the `m` highest scores; the short set holds the `m`
/// lowest among the rest, so the two never overlap. Ties go to the lowest
/// index. With `shorting` off the short set is empty.
pub fn select_long_short(scores: &[f64], m: usize, shorting: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = scores.len();
    if m == 0 || m > n {
        return Err(CoreError::Config(format!("top-M of {m} invalid for {n} assets")));
    }
    if shorting && 2 * m > n {
        return Err(CoreError::Config(format!("long and short sets of {m} each need at least {} assets, have {n}", 2 * m)));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(CoreError::InvalidPortfolio(format!("non-finite score {s}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite"));
    let long: Vec<usize> = order[..m].to_vec();
    let short = if shorting {
        let mut rest: Vec<usize> = order[m..].to_vec();
        rest.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite").then(a.cmp(&b)));
        rest.truncate(m);
        rest
    } else {
        Vec::new()
    };
    Ok((long, short))
}
