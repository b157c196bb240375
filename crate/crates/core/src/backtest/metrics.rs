use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

bitflags! {
    /// Marks metrics replaced by a sentinel and runs that ended early.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
    pub struct MetricFlags: u32 {
        const ASR_SENTINEL = 1;
        const CR_SENTINEL = 1 << 1;
        const SOR_SENTINEL = 1 << 2;
        const BANKRUPT = 1 << 3;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub arr: f64,
    pub avol: f64,
    pub asr: f64,
    pub sor: f64,
    pub mdd: f64,
    pub cr: f64,
    pub flags: MetricFlags,
}

/// `num / den`, or a signed infinity (zero for a zero numerator) when `den` is zero.
fn guarded(num: f64, den: f64, flag: MetricFlags, flags: &mut MetricFlags) -> f64 {
    if den > 0.0 {
        return num / den;
    }
    *flags |= flag;
    if num > 0.0 {
        f64::INFINITY
    } else if num < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

fn population_std(x: &[f64]) -> f64 {
    if x.iter().all(|&v| v == x[0]) {
        return 0.0;
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Wealth curve from unit capital, `len = ror.len() + 1`.
pub fn wealth_curve(ror: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ror.len() + 1);
    let mut w = 1.0;
    out.push(w);
    for r in ror {
        w *= 1.0 + r;
        out.push(w);
    }
    out
}

/// Largest peak-to-trough loss fraction, capped at 1.
pub fn max_drawdown(wealth: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &w in wealth {
        peak = peak.max(w);
        if peak > 0.0 {
            worst = worst.max((peak - w) / peak);
        }
    }
    worst.min(1.0)
}

/// The six risk/return metrics of a per-period return series.
///
/// `n_y` is the number of periods per year and `rf` the per-period risk-free rate.
pub fn compute_metrics(ror: &[f64], n_y: f64, rf: f64) -> Result<Metrics> {
    if ror.len() < 2 {
        return Err(CoreError::Window(format!("metrics need at least 2 returns, got {}", ror.len())));
    }
    metrics_of(ror, n_y, rf)
}

/// [`compute_metrics`] without the length requirement, for runs cut short by bankruptcy.
pub(crate) fn metrics_of(ror: &[f64], n_y: f64, rf: f64) -> Result<Metrics> {
    if ror.is_empty() {
        return Err(CoreError::Window("metrics need at least one return".into()));
    }
    if ror.iter().any(|r| !r.is_finite()) {
        return Err(CoreError::Window("non-finite return in series".into()));
    }
    let t = ror.len() as f64;
    let mut flags = MetricFlags::empty();
    let arr = (ror.iter().sum::<f64>() / t - rf) * n_y;
    let avol = population_std(ror) * n_y.sqrt();
    let mdd = max_drawdown(&wealth_curve(ror));
    let downside: Vec<f64> = ror.iter().map(|r| r.min(0.0)).collect();
    let dd = population_std(&downside);
    let asr = guarded(arr, avol, MetricFlags::ASR_SENTINEL, &mut flags);
    let cr = guarded(arr, mdd, MetricFlags::CR_SENTINEL, &mut flags);
    let sor = guarded(arr, dd, MetricFlags::SOR_SENTINEL, &mut flags);
    Ok(Metrics { arr, avol, asr, sor, mdd, cr, flags })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_returns() {
        let m = compute_metrics(&[0.01; 12], 12.0, 0.0).unwrap();
        assert!((m.arr - 0.12).abs() < 1e-12);
        assert_eq!(m.avol, 0.0);
        assert_eq!(m.asr, f64::INFINITY);
        assert!(m.flags.contains(MetricFlags::ASR_SENTINEL | MetricFlags::CR_SENTINEL | MetricFlags::SOR_SENTINEL));
    }

    #[test]
    fn drawdown_of_example_curve() {
        assert!((max_drawdown(&[100.0, 120.0, 90.0, 110.0]) - 0.25).abs() < 1e-15);
        assert_eq!(max_drawdown(&[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(max_drawdown(&[1.0, -0.5]), 1.0);
    }

    #[test]
    fn two_point_volatility() {
        let m = compute_metrics(&[0.1, -0.1], 252.0, 0.0).unwrap();
        assert!((m.avol - 0.1 * 252f64.sqrt()).abs() < 1e-12);
        assert!((m.avol - 1.5875).abs() < 1e-4);
    }

    #[test]
    fn flat_run_is_all_zero() {
        let m = compute_metrics(&[0.0; 5], 252.0, 0.0).unwrap();
        assert_eq!((m.arr, m.avol, m.mdd, m.asr, m.cr, m.sor), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(compute_metrics(&[0.0], 252.0, 0.0).is_err());
    }
}
