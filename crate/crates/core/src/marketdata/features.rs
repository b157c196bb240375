use std::ops::Range;

use numcore::Tensor;

use super::indicators;
use super::PriceTable;
use crate::error::{CoreError, Result};

/// Leading timesteps reserved for indicator warm-up; never emitted as states.
pub const WARMUP: usize = 40;

pub const ASSET_CHANNELS: [&str; 9] =
    ["logret_1", "logret_5", "logret_20", "macd", "macd_hist", "kdj_k", "kdj_d", "rsi_14", "vol_20"];

pub const MARKET_CHANNELS: [&str; 5] = ["index_return", "index_ma5_ratio", "index_ma20_ratio", "dispersion", "advancing"];

const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    fn from_channels<'a>(channels: impl Iterator<Item = Box<dyn Iterator<Item = f64> + 'a>>) -> Self {
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for ch in channels {
            let vals: Vec<f64> = ch.collect();
            let n = vals.len().max(1) as f64;
            let m = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(var.sqrt().max(STD_FLOOR));
        }
        Self { mean, std }
    }

    fn apply(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }
}

/// Asset indicator cube, laid out `[asset][channel][time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetFeatures {
    n: usize,
    f: usize,
    t_total: usize,
    data: Vec<f64>,
    stats: Option<Standardizer>,
}

impl AssetFeatures {
    /// Unstandardized indicator values for every asset and timestep.
    pub fn raw(prices: &PriceTable) -> Self {
        let (n, t_total, f) = (prices.n_assets(), prices.n_periods(), ASSET_CHANNELS.len());
        let mut data = Vec::with_capacity(n * f * t_total);
        for i in 0..n {
            let c = prices.close(i);
            let (line, hist) = indicators::macd(c, 12, 26, 9);
            let (k, d) = indicators::kdj(prices.high(i), prices.low(i), c, 9, 3, 3);
            let rel = |x: Vec<f64>| -> Vec<f64> { x.iter().zip(c).map(|(v, p)| v / p).collect() };
            let chans = [
                indicators::log_return(c, 1),
                indicators::log_return(c, 5),
                indicators::log_return(c, 20),
                rel(line),
                rel(hist),
                k,
                d,
                indicators::rsi(c, 14),
                indicators::rolling_volatility(c, 20),
            ];
            for ch in chans {
                data.extend(ch);
            }
        }
        Self { n, f, t_total, data, stats: None }
    }

    pub fn n_assets(&self) -> usize {
        self.n
    }

    pub fn n_channels(&self) -> usize {
        self.f
    }

    pub fn n_periods(&self) -> usize {
        self.t_total
    }

    pub fn stats(&self) -> Option<&Standardizer> {
        self.stats.as_ref()
    }

    pub fn value(&self, asset: usize, channel: usize, t: usize) -> f64 {
        self.data[(asset * self.f + channel) * self.t_total + t]
    }

    /// Z-scores every channel with statistics over `cells` (all assets).
    pub fn standardize(mut self, cells: Range<usize>) -> Result<Self> {
        if cells.is_empty() || cells.end > self.t_total {
            return Err(CoreError::Window(format!("standardization range {cells:?} invalid for {} periods", self.t_total)));
        }
        let this = &self;
        let stats = Standardizer::from_channels((0..self.f).map(|ch| {
            let cells = cells.clone();
            Box::new((0..this.n).flat_map(move |i| cells.clone().map(move |t| this.value(i, ch, t))))
                as Box<dyn Iterator<Item = f64>>
        }));
        for i in 0..self.n {
            for ch in 0..self.f {
                let base = (i * self.f + ch) * self.t_total;
                for v in &mut self.data[base..base + self.t_total] {
                    *v = stats.apply(ch, *v);
                }
            }
        }
        self.stats = Some(stats);
        Ok(self)
    }

    /// `[N, F, lookback]` slice ending at (and including) `t`.
    pub fn window(&self, t: usize, lookback: usize) -> Result<Tensor> {
        if t + 1 < lookback || t >= self.t_total {
            return Err(CoreError::Window(format!("no {lookback}-step window ending at {t}")));
        }
        let from = t + 1 - lookback;
        let mut out = Vec::with_capacity(self.n * self.f * lookback);
        for i in 0..self.n {
            for ch in 0..self.f {
                let base = (i * self.f + ch) * self.t_total;
                out.extend_from_slice(&self.data[base + from..=base + t]);
            }
        }
        Ok(Tensor::new(&[self.n, self.f, lookback], out)?)
    }
}

/// Per-asset indicator features z-scored with training statistics.
///
/// `train` is the index range of the training split; statistics use its
/// post-warm-up cells only.
pub fn compute_asset_features(prices: &PriceTable, lookback: usize, train: Range<usize>) -> Result<AssetFeatures> {
    if lookback == 0 {
        return Err(CoreError::Config("lookback must be positive".into()));
    }
    if prices.n_periods() < lookback + WARMUP {
        return Err(CoreError::Window(format!(
            "{} periods cannot hold a {lookback}-step lookback after {WARMUP} warm-up steps",
            prices.n_periods()
        )));
    }
    AssetFeatures::raw(prices).standardize(WARMUP.max(train.start)..train.end)
}

/// Market-level feature matrix, laid out `[channel][time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketFeatures {
    names: Vec<String>,
    t_total: usize,
    data: Vec<f64>,
    stats: Option<Standardizer>,
}

/// Equal-weighted index return, index moving-average ratios, cross-sectional
/// dispersion, and the advancing fraction, unstandardized.
pub fn compute_market_features(prices: &PriceTable) -> MarketFeatures {
    let (n, t_total) = (prices.n_assets(), prices.n_periods());
    let mut ret = Vec::with_capacity(t_total);
    let mut disp = Vec::with_capacity(t_total);
    let mut adv = Vec::with_capacity(t_total);
    for t in 0..t_total {
        let r = prices.returns_at(t);
        let m = r.iter().sum::<f64>() / n as f64;
        ret.push(m);
        disp.push((r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt());
        adv.push(r.iter().filter(|&&x| x > 0.0).count() as f64 / n as f64);
    }
    let mut level = Vec::with_capacity(t_total);
    let mut acc = 1.0;
    for r in &ret {
        acc *= 1.0 + r;
        level.push(acc);
    }
    let ma_ratio = |w: usize| -> Vec<f64> {
        (0..t_total)
            .map(|t| {
                let from = (t + 1).saturating_sub(w);
                let ma = level[from..=t].iter().sum::<f64>() / (t + 1 - from) as f64;
                level[t] / ma - 1.0
            })
            .collect()
    };
    let mut data = Vec::with_capacity(MARKET_CHANNELS.len() * t_total);
    for ch in [ret, ma_ratio(5), ma_ratio(20), disp, adv] {
        data.extend(ch);
    }
    MarketFeatures { names: MARKET_CHANNELS.iter().map(|s| s.to_string()).collect(), t_total, data, stats: None }
}

impl MarketFeatures {
    pub fn n_channels(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_periods(&self) -> usize {
        self.t_total
    }

    pub fn value(&self, channel: usize, t: usize) -> f64 {
        self.data[channel * self.t_total + t]
    }

    pub fn stats(&self) -> Option<&Standardizer> {
        self.stats.as_ref()
    }

    /// Appends a channel, e.g. an observed regime flag.
    pub fn with_channel(mut self, name: &str, values: &[f64]) -> Result<Self> {
        if values.len() != self.t_total || values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Window(format!(
                "channel {name} has {} values for {} periods",
                values.len(),
                self.t_total
            )));
        }
        self.names.push(name.to_string());
        self.data.extend_from_slice(values);
        Ok(self)
    }

    pub fn standardize(mut self, cells: Range<usize>) -> Result<Self> {
        if cells.is_empty() || cells.end > self.t_total {
            return Err(CoreError::Window(format!("standardization range {cells:?} invalid for {} periods", self.t_total)));
        }
        let t_total = self.t_total;
        let data = &self.data;
        let stats = Standardizer::from_channels((0..self.names.len()).map(|ch| {
            Box::new(data[ch * t_total + cells.start..ch * t_total + cells.end].iter().copied())
                as Box<dyn Iterator<Item = f64>>
        }));
        for ch in 0..self.names.len() {
            for v in &mut self.data[ch * t_total..(ch + 1) * t_total] {
                *v = stats.apply(ch, *v);
            }
        }
        self.stats = Some(stats);
        Ok(self)
    }

    /// `[F_m, lookback]` slice ending at (and including) `t`.
    pub fn window(&self, t: usize, lookback: usize) -> Result<Tensor> {
        if t + 1 < lookback || t >= self.t_total {
            return Err(CoreError::Window(format!("no {lookback}-step market window ending at {t}")));
        }
        let from = t + 1 - lookback;
        let mut out = Vec::with_capacity(self.names.len() * lookback);
        for ch in 0..self.names.len() {
            out.extend_from_slice(&self.data[ch * self.t_total + from..=ch * self.t_total + t]);
        }
        Ok(Tensor::new(&[self.names.len(), lookback], out)?)
    }
}

/// Standardized asset and market features sharing one lookback.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub asset: AssetFeatures,
    pub market: MarketFeatures,
    lookback: usize,
}

impl FeatureSet {
    /// Builds both feature families, z-scored on the post-warm-up part of `train`.
    /// `extra_market` channels (such as a regime flag) are appended before standardization.
    pub fn build(
        prices: &PriceTable,
        lookback: usize,
        train: Range<usize>,
        extra_market: &[(&str, Vec<f64>)],
    ) -> Result<Self> {
        let asset = compute_asset_features(prices, lookback, train.clone())?;
        let mut market = compute_market_features(prices);
        for (name, vals) in extra_market {
            market = market.with_channel(name, vals)?;
        }
        let market = market.standardize(WARMUP.max(train.start)..train.end)?;
        Ok(Self { asset, market, lookback })
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn n_periods(&self) -> usize {
        self.asset.n_periods()
    }

    /// Earliest timestep whose whole lookback lies after the warm-up.
    pub fn first_state(&self) -> usize {
        WARMUP + self.lookback - 1
    }

    pub fn asset_window(&self, t: usize) -> Result<Tensor> {
        self.check_state(t)?;
        self.asset.window(t, self.lookback)
    }

    pub fn market_window(&self, t: usize) -> Result<Tensor> {
        self.check_state(t)?;
        self.market.window(t, self.lookback)
    }

    fn check_state(&self, t: usize) -> Result<()> {
        if t < self.first_state() || t >= self.n_periods() {
            return Err(CoreError::Window(format!(
                "timestep {t} outside valid states [{}, {})",
                self.first_state(),
                self.n_periods()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::Bar;
    use chrono::NaiveDate;

    fn table(series: &[Vec<f64>]) -> PriceTable {
        let t = series[0].len();
        let d0 = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
        let dates = (0..t).map(|k| d0 + chrono::Days::new(k as u64)).collect();
        let syms = (0..series.len()).map(|i| format!("S{i}")).collect();
        let bars = series.iter().map(|s| s.iter().map(|&p| Bar::flat(p)).collect()).collect();
        PriceTable::new(syms, dates, bars).unwrap()
    }

    #[test]
    fn flat_market_features_are_zero() {
        let m = compute_market_features(&table(&[vec![10.0; 30], vec![5.0; 30]]));
        for t in 0..30 {
            assert_eq!(m.value(0, t), 0.0);
            assert_eq!(m.value(3, t), 0.0);
            assert_eq!(m.value(4, t), 0.0);
        }
    }

    #[test]
    fn uniform_rise_has_full_advance_and_no_dispersion() {
        let s: Vec<f64> = (0..10).map(|k| 1.01f64.powi(k)).collect();
        let m = compute_market_features(&table(&[s.iter().map(|p| p * 3.0).collect(), s.clone()]));
        assert_eq!(m.value(4, 5), 1.0);
        assert!(m.value(3, 5).abs() < 1e-15);
        assert!((m.value(0, 5) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn mixed_returns_market_features() {
        let returns = [0.02, 0.01, -0.01, -0.02];
        let series: Vec<Vec<f64>> = returns.iter().map(|r| vec![100.0, 100.0 * (1.0 + r)]).collect();
        let m = compute_market_features(&table(&series));
        assert!(m.value(0, 1).abs() < 1e-15);
        assert_eq!(m.value(4, 1), 0.5);
        let expected = (returns.iter().map(|r| r * r).sum::<f64>() / 4.0).sqrt();
        assert!((m.value(3, 1) - expected).abs() < 1e-12);
    }

    #[test]
    fn insufficient_history_is_window_error() {
        let p = table(&[vec![1.0; WARMUP + 3]]);
        assert!(matches!(compute_asset_features(&p, 4, 0..WARMUP + 3), Err(CoreError::Window(_))));
        assert!(compute_asset_features(&p, 3, 0..WARMUP + 3).is_ok());
    }

    #[test]
    fn window_indexing() {
        let p: Vec<f64> = (0..60).map(|k| 10.0 + k as f64).collect();
        let fs = FeatureSet::build(&table(&[p]), 5, 0..60, &[]).unwrap();
        assert_eq!(fs.first_state(), WARMUP + 4);
        assert!(fs.asset_window(WARMUP + 3).is_err());
        let w = fs.asset_window(50).unwrap();
        assert_eq!(w.shape(), &[1, 9, 5]);
        assert_eq!(w.at(&[0, 0, 4]), fs.asset.value(0, 0, 50));
        assert_eq!(w.at(&[0, 0, 0]), fs.asset.value(0, 0, 46));
        assert_eq!(fs.market_window(50).unwrap().shape(), &[5, 5]);
    }

    fn walk(n: usize, t: usize, seed: u64) -> PriceTable {
        crate::synth::generate(&crate::synth::SynthSpec::random_walk(n, t, 0.0, 0.02, seed)).unwrap().prices
    }

    #[test]
    fn return_channels_of_simple_series() {
        let flat = AssetFeatures::raw(&table(&[vec![7.0; 50]]));
        for ch in 0..5 {
            assert!((0..50).all(|t| flat.value(0, ch, t) == 0.0), "channel {ch}");
        }
        let doubling: Vec<f64> = (0..50).map(|k| 2f64.powi(k)).collect();
        let f = AssetFeatures::raw(&table(&[doubling]));
        assert!((1..50).all(|t| (f.value(0, 0, t) - std::f64::consts::LN_2).abs() < 1e-12));
    }

    #[test]
    fn macd_matches_reference_recursion() {
        let p = walk(2, 300, 8);
        let f = AssetFeatures::raw(&p);
        for i in 0..2 {
            let c = p.close(i);
            let (mut fast, mut slow, mut sig) = (c[0], c[0], 0.0);
            for t in 0..c.len() {
                fast += 2.0 / 13.0 * (c[t] - fast);
                slow += 2.0 / 27.0 * (c[t] - slow);
                let line = fast - slow;
                sig = if t == 0 { line } else { sig + 0.2 * (line - sig) };
                assert!((f.value(i, 3, t) * c[t] - line).abs() < 1e-9);
                assert!((f.value(i, 4, t) * c[t] - (line - sig)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn training_cells_are_standardized() {
        let p = walk(3, 400, 9);
        let train = 0..250;
        let fs = FeatureSet::build(&p, 10, train.clone(), &[]).unwrap();
        for ch in 0..ASSET_CHANNELS.len() {
            let vals: Vec<f64> = (0..3).flat_map(|i| (WARMUP..train.end).map(move |t| (i, t))).map(|(i, t)| fs.asset.value(i, ch, t)).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(m.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6, "channel {ch}: mean {m}, std {sd}");
        }
        for ch in 0..fs.market.n_channels() {
            let vals: Vec<f64> = (WARMUP..train.end).map(|t| fs.market.value(ch, t)).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(m.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6, "market channel {ch}: mean {m}, std {sd}");
        }
        assert!(fs.asset_window(399).unwrap().is_finite());
    }

    #[test]
    fn test_data_does_not_leak_into_training_features() {
        let p = walk(3, 300, 10);
        let train = 0..200;
        let mut order: Vec<usize> = (200..300).collect();
        order.reverse();
        order.rotate_left(37);
        let series: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let c = p.close(i);
                c[..200].iter().copied().chain(order.iter().map(|&t| c[t])).collect()
            })
            .collect();
        let shuffled = table(&series);
        let raw = table(&(0..3).map(|i| p.close(i).to_vec()).collect::<Vec<_>>());
        let b = FeatureSet::build(&shuffled, 6, train.clone(), &[]).unwrap();
        let c = FeatureSet::build(&raw, 6, train.clone(), &[]).unwrap();
        for t in c.first_state()..200 {
            assert_eq!(b.asset_window(t).unwrap(), c.asset_window(t).unwrap());
            assert_eq!(b.market_window(t).unwrap(), c.market_window(t).unwrap());
        }
        assert_eq!(b.asset.stats(), c.asset.stats());
    }

    #[test]
    fn features_are_deterministic() {
        let p = walk(4, 200, 11);
        let a = FeatureSet::build(&p, 8, 0..150, &[]).unwrap();
        let b = FeatureSet::build(&p.clone(), 8, 0..150, &[]).unwrap();
        for t in a.first_state()..200 {
            let (x, y) = (a.asset_window(t).unwrap(), b.asset_window(t).unwrap());
            assert!(x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}
