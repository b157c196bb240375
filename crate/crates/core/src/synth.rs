//! Seeded regime-switching log-normal price generator.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::marketdata::{Bar, PriceTable};

/// How the regime label evolves over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeProcess {
    /// Explicit per-period labels; must cover every period.
    Fixed(Vec<usize>),
    /// Markov chain with row-stochastic `transition`, starting in `initial`.
    Markov { transition: Vec<Vec<f64>>, initial: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_assets: usize,
    pub periods: usize,
    /// `drift[r][i]`: per-period log drift of asset `i` in regime `r`.
    pub drift: Vec<Vec<f64>>,
    /// `vol[r][i]`: per-period log volatility of asset `i` in regime `r`.
    pub vol: Vec<Vec<f64>>,
    pub regimes: RegimeProcess,
    pub seed: u64,
    #[serde(default = "default_start_price")]
    pub start_price: f64,
    #[serde(default = "default_start_date")]
    pub start_date: NaiveDate,
}

fn default_start_price() -> f64 {
    100.0
}

fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date")
}

/// Generated prices and the regime label of every period.
///
/// `regimes[t]` is the regime that drives the move from `t` to `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthMarket {
    pub prices: PriceTable,
    pub regimes: Vec<usize>,
}

impl SynthMarket {
    /// Regime labels as a real-valued channel for the market features.
    pub fn regime_flag(&self) -> Vec<f64> {
        self.regimes.iter().map(|&r| r as f64).collect()
    }
}

impl SynthSpec {
    /// One regime with the same drift and volatility for every asset.
    pub fn random_walk(n_assets: usize, periods: usize, drift: f64, vol: f64, seed: u64) -> Self {
        Self {
            n_assets,
            periods,
            drift: vec![vec![drift; n_assets]],
            vol: vec![vec![vol; n_assets]],
            regimes: RegimeProcess::Fixed(vec![0; periods]),
            seed,
            start_price: default_start_price(),
            start_date: default_start_date(),
        }
    }

    pub fn n_regimes(&self) -> usize {
        self.drift.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.n_assets == 0 || self.periods < 2 {
            return bad(format!("need at least one asset and two periods, got {} and {}", self.n_assets, self.periods));
        }
        if self.drift.is_empty() || self.drift.len() != self.vol.len() {
            return bad(format!("{} drift rows but {} volatility rows", self.drift.len(), self.vol.len()));
        }
        for (r, (d, v)) in self.drift.iter().zip(&self.vol).enumerate() {
            if d.len() != self.n_assets || v.len() != self.n_assets {
                return bad(format!("regime {r} must list {} drifts and volatilities", self.n_assets));
            }
            if d.iter().any(|x| !x.is_finite()) || v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return bad(format!("regime {r} has a non-finite drift or negative volatility"));
            }
        }
        if !(self.start_price > 0.0 && self.start_price.is_finite()) {
            return bad(format!("start price {} must be positive", self.start_price));
        }
        let k = self.n_regimes();
        match &self.regimes {
            RegimeProcess::Fixed(seq) => {
                if seq.len() != self.periods {
                    return bad(format!("regime sequence has {} labels for {} periods", seq.len(), self.periods));
                }
                if let Some(r) = seq.iter().find(|&&r| r >= k) {
                    return bad(format!("regime label {r} out of range for {k} regimes"));
                }
            }
            RegimeProcess::Markov { transition, initial } => {
                if *initial >= k || transition.len() != k {
                    return bad(format!("transition matrix must be {k}x{k} with a valid initial regime"));
                }
                for row in transition {
                    let s: f64 = row.iter().sum();
                    if row.len() != k || row.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-9 {
                        return bad(format!("transition row {row:?} is not a probability vector"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Draws a market from `spec`. Identical specs give bit-identical output.
pub fn generate(spec: &SynthSpec) -> Result<SynthMarket> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let regimes = match &spec.regimes {
        RegimeProcess::Fixed(seq) => seq.clone(),
        RegimeProcess::Markov { transition, initial } => {
            let mut seq = Vec::with_capacity(spec.periods);
            let mut r = *initial;
            for _ in 0..spec.periods {
                seq.push(r);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let row = &transition[r];
                r = row.len() - 1;
                for (j, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        r = j;
                        break;
                    }
                }
            }
            seq
        }
    };
    let mut log_p = vec![vec![0.0; spec.periods]; spec.n_assets];
    for t in 1..spec.periods {
        let r = regimes[t - 1];
        for (i, series) in log_p.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            series[t] = series[t - 1] + spec.drift[r][i] + spec.vol[r][i] * z;
        }
    }
    let bars = log_p
        .iter()
        .map(|s| s.iter().map(|l| Bar::flat(spec.start_price * l.exp())).collect())
        .collect();
    let width = spec.n_assets.to_string().len();
    let symbols = (0..spec.n_assets).map(|i| format!("SYN{i:0width$}")).collect();
    let dates = (0..spec.periods).map(|t| spec.start_date + chrono::Days::new(t as u64)).collect();
    Ok(SynthMarket { prices: PriceTable::new(symbols, dates, bars)?, regimes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vol_is_pure_exponential() {
        let m = generate(&SynthSpec::random_walk(2, 50, 0.01, 0.0, 3)).unwrap();
        for t in 0..50 {
            let expected = 100.0 * (0.01 * t as f64).exp();
            assert!((m.prices.close(0)[t] - expected).abs() <= 1e-12 * expected);
        }
    }

    #[test]
    fn same_seed_same_table() {
        let spec = SynthSpec::random_walk(3, 100, 0.0, 0.02, 11);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SynthSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().prices, generate(&other).unwrap().prices);
    }

    #[test]
    fn momentum_ranking_follows_regime() {
        let regimes: Vec<usize> = (0..200).map(|t| (t / 50) % 2).collect();
        let spec = SynthSpec {
            n_assets: 2,
            periods: 200,
            drift: vec![vec![0.01, -0.01], vec![-0.01, 0.01]],
            vol: vec![vec![0.002; 2], vec![0.002; 2]],
            regimes: RegimeProcess::Fixed(regimes.clone()),
            seed: 5,
            start_price: 50.0,
            start_date: default_start_date(),
        };
        let m = generate(&spec).unwrap();
        for t in 0..199 {
            let r = m.prices.returns_at(t + 1);
            let a_leads = r[0] > r[1];
            assert_eq!(a_leads, regimes[t] == 0, "period {t}");
        }
    }

    #[test]
    fn markov_chain_respects_absorbing_state() {
        let spec = SynthSpec {
            regimes: RegimeProcess::Markov { transition: vec![vec![0.0, 1.0], vec![0.0, 1.0]], initial: 0 },
            drift: vec![vec![0.0], vec![0.0]],
            vol: vec![vec![0.01], vec![0.01]],
            ..SynthSpec::random_walk(1, 20, 0.0, 0.01, 1)
        };
        let m = generate(&spec).unwrap();
        assert_eq!(m.regimes[0], 0);
        assert!(m.regimes[1..].iter().all(|&r| r == 1));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = SynthSpec::random_walk(2, 10, 0.0, -0.1, 0);
        assert!(generate(&s).is_err());
        s.vol = vec![vec![0.1; 2]];
        s.regimes = RegimeProcess::Fixed(vec![1; 10]);
        assert!(generate(&s).is_err());
        s.regimes = RegimeProcess::Markov { transition: vec![vec![0.5]], initial: 0 };
        assert!(generate(&s).is_err());
    }

    #[test]
    fn sample_drift_converges() {
        let periods = 10_001;
        for seed in 0..12u64 {
            let drift = -0.01 + 0.002 * seed as f64;
            let vol = 0.002 + 0.004 * seed as f64;
            let m = generate(&SynthSpec::random_walk(1, periods, drift, vol, seed)).unwrap();
            let c = m.prices.close(0);
            let mean = (1..periods).map(|t| (c[t] / c[t - 1]).ln()).sum::<f64>() / (periods - 1) as f64;
            assert!((mean - drift).abs() <= 3.0 * vol / ((periods - 1) as f64).sqrt(), "seed {seed}: {mean} vs {drift}");
        }
    }
}
