//! Rule-based demonstration datasets: momentum, mean reversion, and a
//! hindsight oracle, plus the empty dataset.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::marketdata::PriceTable;
use crate::portfolio::{select_long_short, PortfolioVector};

/// Look-back of the momentum score, in periods.
pub const MOMENTUM_LAG: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertManifest {
    pub name: String,
    pub top_m: usize,
    pub rho: f64,
    pub window: Option<usize>,
    pub source_hash: String,
    pub pairs: usize,
}

/// Ordered `(timestep, action)` demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDataset {
    pub name: String,
    pub top_m: usize,
    pub rho: f64,
    pub window: Option<usize>,
    pub source_hash: String,
    pairs: Vec<(usize, PortfolioVector)>,
}

impl ExpertDataset {
    pub fn new(
        name: &str,
        top_m: usize,
        rho: f64,
        window: Option<usize>,
        source_hash: String,
        pairs: Vec<(usize, PortfolioVector)>,
    ) -> Result<Self> {
        if pairs.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(CoreError::InvalidPortfolio(format!("dataset {name}: timesteps must be strictly increasing")));
        }
        Ok(Self { name: name.to_string(), top_m, rho, window, source_hash, pairs })
    }

    pub fn pairs(&self) -> &[(usize, PortfolioVector)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn action_at(&self, t: usize) -> Option<&PortfolioVector> {
        self.pairs.binary_search_by_key(&t, |p| p.0).ok().map(|i| &self.pairs[i].1)
    }

    /// Pairs restricted to timesteps in `range`.
    pub fn restricted(&self, range: Range<usize>) -> Self {
        Self { pairs: self.pairs.iter().filter(|(t, _)| range.contains(t)).cloned().collect(), ..self.clone() }
    }

    pub fn manifest(&self) -> ExpertManifest {
        ExpertManifest {
            name: self.name.clone(),
            top_m: self.top_m,
            rho: self.rho,
            window: self.window,
            source_hash: self.source_hash.clone(),
            pairs: self.pairs.len(),
        }
    }

    /// Writes `t,asset,weight` rows for the nonzero weights. Short weights are negative.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "asset", "weight"])?;
        for (t, a) in &self.pairs {
            for (i, (&p, &m)) in a.w_plus().iter().zip(a.w_minus()).enumerate() {
                let wv = if p != 0.0 { p } else { m };
                if wv != 0.0 {
                    out.write_record([t.to_string(), i.to_string(), wv.to_string()])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads rows written by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(r: R, manifest: &ExpertManifest, n_assets: usize) -> Result<Self> {
        let mut rows: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        for (k, rec) in rd.records().enumerate() {
            let rec = rec?;
            let line = k as u64 + 2;
            let parse_err = |msg: String| CoreError::Parse { path: manifest.name.clone().into(), line, msg };
            if rec.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, found {}", rec.len())));
            }
            let t: usize = rec[0].parse().map_err(|e| parse_err(format!("timestep: {e}")))?;
            let i: usize = rec[1].parse().map_err(|e| parse_err(format!("asset: {e}")))?;
            let w: f64 = rec[2].parse().map_err(|e| parse_err(format!("weight: {e}")))?;
            if i >= n_assets {
                return Err(parse_err(format!("asset {i} out of range for {n_assets} assets")));
            }
            let entry = rows.entry(t).or_insert_with(|| (vec![0.0; n_assets], vec![0.0; n_assets]));
            if w > 0.0 {
                entry.0[i] = w;
            } else {
                entry.1[i] = w;
            }
        }
        let pairs = rows
            .into_iter()
            .map(|(t, (wp, wm))| {
                let rho = if wm.iter().any(|&w| w != 0.0) { manifest.rho } else { 0.0 };
                PortfolioVector::new(wp, wm, rho).map(|a| (t, a))
            })
            .collect::<Result<Vec<_>>>()?;
        if pairs.len() != manifest.pairs {
            return Err(CoreError::Config(format!(
                "dataset {} lists {} pairs but the manifest records {}",
                manifest.name,
                pairs.len(),
                manifest.pairs
            )));
        }
        Self::new(&manifest.name, manifest.top_m, manifest.rho, manifest.window, manifest.source_hash.clone(), pairs)
    }
}

fn check_rho(rho: f64) -> Result<bool> {
    if !(0.0..1.0).contains(&rho) {
        return Err(CoreError::Config(format!("expert short ratio {rho} outside [0, 1)")));
    }
    Ok(rho > 0.0)
}

fn ranked_equal_weight(
    name: &str,
    prices: &PriceTable,
    steps: Range<usize>,
    m: usize,
    rho: f64,
    window: Option<usize>,
    score: impl Fn(usize, usize) -> f64,
) -> Result<ExpertDataset> {
    let shorting = check_rho(rho)?;
    let n = prices.n_assets();
    let pairs = steps
        .map(|t| {
            let scores: Vec<f64> = (0..n).map(|i| score(i, t)).collect();
            let (long, short) = select_long_short(&scores, m, shorting)?;
            Ok((t, PortfolioVector::equal_weight(n, &long, &short, rho)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ExpertDataset::new(name, m, rho, window, prices.content_hash(), pairs)
}

fn check_steps(name: &str, prices: &PriceTable, steps: &Range<usize>, first: usize, last_exclusive: usize) -> Result<()> {
    if steps.start < first || steps.end > last_exclusive {
        return Err(CoreError::Window(format!(
            "{name} can emit only for timesteps in [{first}, {last_exclusive}), requested {steps:?} of {}",
            prices.n_periods()
        )));
    }
    Ok(())
}

/// Cross-sectional momentum: long the `m` largest `p_t / p_{t-3}`, short the `m` smallest.
pub fn gen_csm(prices: &PriceTable, steps: Range<usize>, m: usize, rho: f64) -> Result<ExpertDataset> {
    check_steps("momentum expert", prices, &steps, MOMENTUM_LAG, prices.n_periods())?;
    ranked_equal_weight("D1", prices, steps, m, rho, None, |i, t| {
        let c = prices.close(i);
        c[t] / c[t - MOMENTUM_LAG]
    })
}

/// Mean reversion: long the `m` assets furthest below their `window`-period average, short the furthest above.
pub fn gen_blsw(prices: &PriceTable, steps: Range<usize>, m: usize, rho: f64, window: usize) -> Result<ExpertDataset> {
    if window == 0 {
        return Err(CoreError::Config("mean-reversion window must be positive".into()));
    }
    check_steps("mean-reversion expert", prices, &steps, window - 1, prices.n_periods())?;
    ranked_equal_weight("D2", prices, steps, m, rho, Some(window), |i, t| {
        let c = prices.close(i);
        let ma = c[t + 1 - window..=t].iter().sum::<f64>() / window as f64;
        (ma - c[t]) / c[t]
    })
}

/// Hindsight oracle: ranks by the realized next-period growth and weights
/// each leg by a softmax of next-period log returns.
pub fn gen_hindsight(prices: &PriceTable, steps: Range<usize>, m: usize, rho: f64) -> Result<ExpertDataset> {
    let shorting = check_rho(rho)?;
    check_steps("hindsight expert", prices, &steps, 0, prices.n_periods() - 1)?;
    let n = prices.n_assets();
    let pairs = steps
        .map(|t| {
            let lg: Vec<f64> = (0..n).map(|i| (prices.close(i)[t + 1] / prices.close(i)[t]).ln()).collect();
            let (long, short) = select_long_short(&lg, m, shorting)?;
            let ll: Vec<f64> = long.iter().map(|&i| lg[i]).collect();
            let sl: Vec<f64> = short.iter().map(|&i| -lg[i]).collect();
            Ok((t, PortfolioVector::softmax_weighted(n, &long, &ll, &short, &sl, rho)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ExpertDataset::new("D3", m, rho, None, prices.content_hash(), pairs)
}

/// The dataset with no demonstrations.
pub fn empty_dataset() -> ExpertDataset {
    ExpertDataset {
        name: "D4".into(),
        top_m: 0,
        rho: 0.0,
        window: None,
        source_hash: String::new(),
        pairs: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::Bar;
    use crate::synth::{generate, SynthSpec};
    use chrono::NaiveDate;

    fn table(series: &[Vec<f64>]) -> PriceTable {
        let d0 = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
        let dates = (0..series[0].len()).map(|k| d0 + chrono::Days::new(k as u64)).collect();
        let syms = (0..series.len()).map(|i| format!("A{i}")).collect();
        PriceTable::new(syms, dates, series.iter().map(|s| s.iter().map(|&p| Bar::flat(p)).collect()).collect()).unwrap()
    }

    fn compounding(rates: &[f64], len: usize) -> Vec<Vec<f64>> {
        rates.iter().map(|r| (0..len).map(|k| 100.0 * (1.0 + r).powi(k as i32)).collect()).collect()
    }

    #[test]
    fn momentum_ranks_constant_returns() {
        let p = table(&compounding(&[0.02, 0.01, -0.01, -0.02], 8));
        let d = gen_csm(&p, 3..8, 1, 0.5).unwrap();
        assert_eq!(d.len(), 5);
        for (_, a) in d.pairs() {
            assert_eq!(a.w_plus(), &[1.0, 0.0, 0.0, 0.0]);
            assert_eq!(a.w_minus(), &[0.0, 0.0, 0.0, -0.5]);
        }
        assert!(gen_csm(&p, 2..8, 1, 0.5).is_err());
        assert!(matches!(gen_csm(&p, 3..8, 3, 0.5), Err(CoreError::Config(_))));
    }

    #[test]
    fn identical_assets_tie_to_lowest_index() {
        let p = table(&compounding(&[0.01, 0.01, 0.01, 0.01], 6));
        let d = gen_csm(&p, 4..6, 2, 0.0).unwrap();
        for (_, a) in d.pairs() {
            assert_eq!(a.w_plus(), &[0.5, 0.5, 0.0, 0.0]);
            assert!(a.w_minus().iter().all(|&w| w == 0.0));
        }
    }

    #[test]
    fn mean_reversion_longs_the_laggard() {
        let mut s = vec![vec![100.0; 25]; 3];
        s[1][24] = 100.0 * 0.9;
        let d = gen_blsw(&table(&s), 24..25, 1, 0.0, 20).unwrap();
        assert_eq!(d.pairs()[0].1.w_plus(), &[0.0, 1.0, 0.0]);
        let flat = gen_blsw(&table(&vec![vec![50.0; 25]; 3]), 24..25, 1, 0.5, 20).unwrap();
        assert_eq!(flat.pairs()[0].1.long_support(), vec![0]);
        assert_eq!(flat.pairs()[0].1.short_support(), vec![1]);
    }

    #[test]
    fn mirrored_paths_swap_mean_reversion_sets() {
        let up: Vec<f64> = (0..30).map(|k| 100.0 + 0.5 * k as f64 + (k as f64).sin()).collect();
        let down: Vec<f64> = up.iter().map(|p| 200.0 - p).collect();
        let a = gen_blsw(&table(&[up.clone(), down.clone()]), 19..30, 1, 0.5, 20).unwrap();
        let b = gen_blsw(&table(&[down, up]), 19..30, 1, 0.5, 20).unwrap();
        for ((_, x), (_, y)) in a.pairs().iter().zip(b.pairs()) {
            assert_eq!(x.long_support(), y.short_support());
            assert_eq!(x.short_support(), y.long_support());
        }
    }

    #[test]
    fn hindsight_examples() {
        let p = table(&[vec![1.0, 1.1], vec![1.0, 1.0], vec![1.0, 0.9]]);
        let d = gen_hindsight(&p, 0..1, 1, 0.5).unwrap();
        let a = &d.pairs()[0].1;
        assert_eq!(a.w_plus(), &[1.0, 0.0, 0.0]);
        assert_eq!(a.w_minus(), &[0.0, 0.0, -0.5]);
        assert!(gen_hindsight(&p, 0..2, 1, 0.5).is_err());

        let e = 0.1f64.exp();
        let p = table(&[vec![1.0, e], vec![1.0, 1.0], vec![1.0, 0.5], vec![1.0, 0.4]]);
        let d = gen_hindsight(&p, 0..1, 2, 0.0).unwrap();
        let a = &d.pairs()[0].1;
        assert!((a.w_plus()[0] - 0.52497918747894).abs() < 1e-12);
        assert!((a.w_plus()[1] - 0.47502081252106).abs() < 1e-12);
        let p = table(&[vec![1.0, 1.2], vec![1.0, 1.2], vec![1.0, 0.5]]);
        let d = gen_hindsight(&p, 0..1, 2, 0.0).unwrap();
        let a = &d.pairs()[0].1;
        assert_eq!(a.w_plus(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn empty_dataset_has_no_pairs() {
        assert!(empty_dataset().is_empty());
    }

    #[test]
    fn causal_experts_ignore_the_future() {
        let m = generate(&SynthSpec::random_walk(6, 120, 0.0, 0.02, 4)).unwrap();
        let short = m.prices.truncated(80);
        assert_eq!(gen_csm(&m.prices, 10..80, 2, 0.5).unwrap().pairs(), gen_csm(&short, 10..80, 2, 0.5).unwrap().pairs());
        assert_eq!(
            gen_blsw(&m.prices, 20..80, 2, 0.5, 20).unwrap().pairs(),
            gen_blsw(&short, 20..80, 2, 0.5, 20).unwrap().pairs()
        );
    }

    #[test]
    fn csv_round_trip() {
        let m = generate(&SynthSpec::random_walk(5, 60, 0.0, 0.02, 8)).unwrap();
        for d in [gen_hindsight(&m.prices, 10..59, 2, 0.5).unwrap(), gen_csm(&m.prices, 10..59, 2, 0.0).unwrap(), empty_dataset()] {
            let mut buf = Vec::new();
            d.write_csv(&mut buf).unwrap();
            let back = ExpertDataset::read_csv(buf.as_slice(), &d.manifest(), 5).unwrap();
            assert_eq!(back, d);
        }
    }
}
