//! Aligned OHLCV history, indicator features, and train/test splits.

mod features;
pub mod indicators;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

pub use features::{
    compute_asset_features, compute_market_features, AssetFeatures, FeatureSet, MarketFeatures, Standardizer,
    ASSET_CHANNELS, MARKET_CHANNELS, WARMUP,
};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Per-asset OHLCV matrices over a shared, strictly increasing date axis.
///
/// Matrices are stored asset-major: `close[i][t]` is asset `i` at date `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceTable {
    symbols: Vec<String>,
    dates: Vec<NaiveDate>,
    open: Vec<Vec<f64>>,
    high: Vec<Vec<f64>>,
    low: Vec<Vec<f64>>,
    close: Vec<Vec<f64>>,
    volume: Vec<Vec<f64>>,
}

/// One OHLCV bar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Bar {
    pub fn flat(price: f64) -> Self {
        Self { open: price, high: price, low: price, close: price, volume: 1.0 }
    }
}

impl PriceTable {
    /// Builds a table from per-asset bar series. Every series must cover every date.
    pub fn new(symbols: Vec<String>, dates: Vec<NaiveDate>, bars: Vec<Vec<Bar>>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(CoreError::EmptyUniverse);
        }
        if bars.len() != symbols.len() {
            return Err(CoreError::Window(format!("{} symbols but {} series", symbols.len(), bars.len())));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::Window("dates must be strictly increasing".into()));
        }
        let mut table = Self {
            symbols,
            dates,
            open: Vec::new(),
            high: Vec::new(),
            low: Vec::new(),
            close: Vec::new(),
            volume: Vec::new(),
        };
        for (sym, series) in table.symbols.iter().zip(&bars) {
            if series.len() != table.dates.len() {
                return Err(CoreError::Window(format!("{sym}: {} bars for {} dates", series.len(), table.dates.len())));
            }
            for (t, b) in series.iter().enumerate() {
                let prices = [b.open, b.high, b.low, b.close];
                if prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) || !(b.volume.is_finite() && b.volume >= 0.0) {
                    return Err(CoreError::Window(format!("{sym} at {}: invalid bar {b:?}", table.dates[t])));
                }
            }
            table.open.push(series.iter().map(|b| b.open).collect());
            table.high.push(series.iter().map(|b| b.high).collect());
            table.low.push(series.iter().map(|b| b.low).collect());
            table.close.push(series.iter().map(|b| b.close).collect());
            table.volume.push(series.iter().map(|b| b.volume).collect());
        }
        Ok(table)
    }

    pub fn n_assets(&self) -> usize {
        self.symbols.len()
    }

    pub fn n_periods(&self) -> usize {
        self.dates.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn open(&self, asset: usize) -> &[f64] {
        &self.open[asset]
    }

    pub fn high(&self, asset: usize) -> &[f64] {
        &self.high[asset]
    }

    pub fn low(&self, asset: usize) -> &[f64] {
        &self.low[asset]
    }

    pub fn close(&self, asset: usize) -> &[f64] {
        &self.close[asset]
    }

    pub fn volume(&self, asset: usize) -> &[f64] {
        &self.volume[asset]
    }

    /// Closing prices of every asset at date index `t`.
    pub fn closes_at(&self, t: usize) -> Vec<f64> {
        self.close.iter().map(|c| c[t]).collect()
    }

    /// Per-asset simple returns from `t - 1` to `t`.
    pub fn returns_at(&self, t: usize) -> Vec<f64> {
        self.close.iter().map(|c| if t == 0 { 0.0 } else { c[t] / c[t - 1] - 1.0 }).collect()
    }

    /// Same assets restricted to the first `len` dates.
    pub fn truncated(&self, len: usize) -> Self {
        let cut = |m: &Vec<Vec<f64>>| m.iter().map(|r| r[..len].to_vec()).collect();
        Self {
            symbols: self.symbols.clone(),
            dates: self.dates[..len].to_vec(),
            open: cut(&self.open),
            high: cut(&self.high),
            low: cut(&self.low),
            close: cut(&self.close),
            volume: cut(&self.volume),
        }
    }

    /// Replaces the close (and open/high/low) of asset `i` at date `t`.
    pub fn set_flat_price(&mut self, asset: usize, t: usize, price: f64) {
        assert!(price.is_finite() && price > 0.0);
        self.open[asset][t] = price;
        self.high[asset][t] = price;
        self.low[asset][t] = price;
        self.close[asset][t] = price;
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.symbols {
            h.update(s.as_bytes());
            h.update([0]);
        }
        for d in &self.dates {
            h.update(d.format(DATE_FORMAT).to_string().as_bytes());
        }
        for m in [&self.open, &self.high, &self.low, &self.close, &self.volume] {
            for row in m {
                for v in row {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Inclusive date bounds to the half-open index range they cover.
    pub fn index_range(&self, start: NaiveDate, end: NaiveDate) -> Range<usize> {
        let lo = self.dates.partition_point(|d| *d < start);
        let hi = self.dates.partition_point(|d| *d <= end);
        lo..hi.max(lo)
    }

    /// Writes the standard `date,symbol,open,high,low,close,volume` CSV.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["date", "symbol", "open", "high", "low", "close", "volume"])?;
        for (t, d) in self.dates.iter().enumerate() {
            let ds = d.format(DATE_FORMAT).to_string();
            for (i, s) in self.symbols.iter().enumerate() {
                wr.write_record([
                    ds.clone(),
                    s.clone(),
                    self.open[i][t].to_string(),
                    self.high[i][t].to_string(),
                    self.low[i][t].to_string(),
                    self.close[i][t].to_string(),
                    self.volume[i][t].to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    date: String,
    symbol: String,
    open: f64,
    high: f64,
    low: f64,
    close: f64,
    volume: f64,
}

/// Loads an OHLCV CSV, keeping symbols whose date coverage is at least
/// `min_coverage` and then the dates every kept symbol has.
pub fn load_ohlcv(path: &Path, min_coverage: f64) -> Result<PriceTable> {
    let file = std::fs::File::open(path)?;
    read_ohlcv(file, path, min_coverage)
}

pub fn read_ohlcv<R: std::io::Read>(reader: R, path: &Path, min_coverage: f64) -> Result<PriceTable> {
    if !(0.0..=1.0).contains(&min_coverage) {
        return Err(CoreError::Config(format!("min_coverage {min_coverage} outside [0, 1]")));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let mut by_symbol: BTreeMap<String, BTreeMap<NaiveDate, Bar>> = BTreeMap::new();
    let mut all_dates = BTreeSet::new();
    let parse_err = |line: u64, msg: String| CoreError::Parse { path: path.to_path_buf(), line, msg };

    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row: Row = rec.deserialize(None).map_err(|e| parse_err(line, e.to_string()))?;
        let date = NaiveDate::parse_from_str(&row.date, DATE_FORMAT)
            .map_err(|e| parse_err(line, format!("date {:?}: {e}", row.date)))?;
        let bar = Bar { open: row.open, high: row.high, low: row.low, close: row.close, volume: row.volume };
        let prices = [bar.open, bar.high, bar.low, bar.close];
        if prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(parse_err(line, "prices must be positive and finite".into()));
        }
        if !(bar.volume.is_finite() && bar.volume >= 0.0) {
            return Err(parse_err(line, "volume must be non-negative".into()));
        }
        if row.symbol.is_empty() {
            return Err(parse_err(line, "empty symbol".into()));
        }
        let series = by_symbol.entry(row.symbol.clone()).or_default();
        if series.insert(date, bar).is_some() {
            return Err(CoreError::Duplicate { date: row.date, symbol: row.symbol, line });
        }
        all_dates.insert(date);
    }

    let total = all_dates.len();
    if total == 0 {
        return Err(CoreError::EmptyUniverse);
    }
    let kept: Vec<(&String, &BTreeMap<NaiveDate, Bar>)> = by_symbol
        .iter()
        .filter(|(_, s)| s.len() as f64 / total as f64 >= min_coverage - 1e-12)
        .collect();
    if kept.is_empty() {
        return Err(CoreError::EmptyUniverse);
    }
    let dates: Vec<NaiveDate> =
        all_dates.into_iter().filter(|d| kept.iter().all(|(_, s)| s.contains_key(d))).collect();
    if dates.is_empty() {
        return Err(CoreError::EmptyUniverse);
    }
    let symbols = kept.iter().map(|(s, _)| (*s).clone()).collect();
    let bars = kept.iter().map(|(_, s)| dates.iter().map(|d| s[d]).collect()).collect();
    PriceTable::new(symbols, dates, bars)
}

/// Train/test date bounds, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

/// Date-index ranges of a resolved [`SplitSpec`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_start > self.train_end || self.test_start > self.test_end {
            return Err(CoreError::Config("split ranges must have start <= end".into()));
        }
        if self.train_end >= self.test_start {
            return Err(CoreError::Config(format!(
                "train_end {} must precede test_start {}",
                self.train_end, self.test_start
            )));
        }
        Ok(())
    }

    pub fn resolve(&self, prices: &PriceTable) -> Result<SplitIndices> {
        self.validate()?;
        let train = prices.index_range(self.train_start, self.train_end);
        let test = prices.index_range(self.test_start, self.test_end);
        if train.is_empty() || test.is_empty() {
            return Err(CoreError::Window(format!("split {self:?} selects train {train:?}, test {test:?}")));
        }
        Ok(SplitIndices { train, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(s: &str, cov: f64) -> Result<PriceTable> {
        read_ohlcv(s.as_bytes(), Path::new("mem.csv"), cov)
    }

    const HEADER: &str = "date,symbol,open,high,low,close,volume\n";

    #[test]
    fn drops_symbol_with_gap() {
        let mut s = HEADER.to_string();
        for d in ["2020-01-01", "2020-01-02", "2020-01-03"] {
            for sym in ["AAA", "BBB", "CCC"] {
                if sym == "BBB" && d == "2020-01-02" {
                    continue;
                }
                s.push_str(&format!("{d},{sym},1,1,1,1,10\n"));
            }
        }
        let t = load_str(&s, 1.0).unwrap();
        assert_eq!(t.symbols(), &["AAA", "CCC"]);
        assert_eq!(t.n_periods(), 3);
        let t = load_str(&s, 0.5).unwrap();
        assert_eq!(t.n_assets(), 3);
        assert_eq!(t.n_periods(), 2);
    }

    #[test]
    fn empty_file_is_empty_universe() {
        assert!(matches!(load_str("", 1.0), Err(CoreError::EmptyUniverse)));
        assert!(matches!(load_str(HEADER, 1.0), Err(CoreError::EmptyUniverse)));
    }

    #[test]
    fn malformed_row_reports_line() {
        let s = format!("{HEADER}2020-01-01,A,1,1,1,1,1\n2020-01-02,A,1,oops,1,1,1\n");
        match load_str(&s, 1.0) {
            Err(CoreError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let s = format!("{HEADER}2020-13-01,A,1,1,1,1,1\n");
        assert!(matches!(load_str(&s, 1.0), Err(CoreError::Parse { line: 2, .. })));
        let s = format!("{HEADER}2020-01-01,A,1,1,-1,1,1\n");
        assert!(matches!(load_str(&s, 1.0), Err(CoreError::Parse { line: 2, .. })));
    }

    #[test]
    fn duplicate_row_is_rejected() {
        let s = format!("{HEADER}2020-01-01,A,1,1,1,1,1\n2020-01-01,A,2,2,2,2,1\n");
        assert!(matches!(load_str(&s, 1.0), Err(CoreError::Duplicate { line: 3, .. })));
    }

    #[test]
    fn sorts_symbols_and_dates() {
        let s = format!("{HEADER}2020-01-02,B,1,1,1,2,1\n2020-01-01,B,1,1,1,1,1\n2020-01-02,A,1,1,1,4,1\n2020-01-01,A,1,1,1,3,1\n");
        let t = load_str(&s, 1.0).unwrap();
        assert_eq!(t.symbols(), &["A", "B"]);
        assert_eq!(t.close(0), &[3.0, 4.0]);
        assert_eq!(t.close(1), &[1.0, 2.0]);
    }

    #[test]
    fn split_resolution() {
        let d = |s: &str| NaiveDate::parse_from_str(s, DATE_FORMAT).unwrap();
        let dates: Vec<NaiveDate> = (1..=9).map(|k| d(&format!("2020-01-0{k}"))).collect();
        let t = PriceTable::new(vec!["A".into()], dates, vec![vec![Bar::flat(1.0); 9]]).unwrap();
        let sp = SplitSpec {
            train_start: d("2020-01-01"),
            train_end: d("2020-01-05"),
            test_start: d("2020-01-06"),
            test_end: d("2020-01-12"),
        };
        let r = sp.resolve(&t).unwrap();
        assert_eq!(r.train, 0..5);
        assert_eq!(r.test, 5..9);
        let bad = SplitSpec { test_start: d("2020-01-05"), ..sp };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn loads_large_synthetic_file() {
        let m = crate::synth::generate(&crate::synth::SynthSpec::random_walk(23, 5040, 0.0, 0.01, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("syn.csv");
        m.prices.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
        let p = load_ohlcv(&path, 1.0).unwrap();
        assert_eq!((p.n_assets(), p.n_periods()), (23, 5040));
        assert_eq!(p.content_hash(), m.prices.content_hash());
    }
}
