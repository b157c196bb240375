//! Running decision sources through the environment and scoring the result.

mod ablation;
mod metrics;

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;

use serde_json::{json, Value};

use crate::env::{EnvConfig, StateSnapshot, TradingEnv};
use crate::error::{CoreError, Result};
use crate::experts::ExpertDataset;
use crate::marketdata::{FeatureSet, PriceTable, DATE_FORMAT};
use crate::policy::{Actor, Policy};
use crate::portfolio::PortfolioVector;

pub use ablation::{ablation_average_weight, average_actions, ablation_random_pick, ablation_single_best, AverageWeight, RandomPick};
pub(crate) use metrics::metrics_of;
pub use metrics::{compute_metrics, max_drawdown, wealth_curve, MetricFlags, Metrics};

/// Anything that maps a state to an action.
pub trait Decider {
    fn decide(&mut self, state: &StateSnapshot) -> Result<PortfolioVector>;

    /// Index of the base policy behind the latest decision, for selectors.
    fn last_selection(&self) -> Option<usize> {
        None
    }
}

/// Always returns the same action.
#[derive(Debug, Clone)]
pub struct Constant(pub PortfolioVector);

impl Decider for Constant {
    fn decide(&mut self, _: &StateSnapshot) -> Result<PortfolioVector> {
        Ok(self.0.clone())
    }
}

/// Noiseless base policy.
#[derive(Debug, Clone, Copy)]
pub struct PolicyDecider<'a>(pub &'a Policy);

impl Decider for PolicyDecider<'_> {
    fn decide(&mut self, state: &StateSnapshot) -> Result<PortfolioVector> {
        Ok(self.0.act(state)?.action)
    }
}

/// Any frozen actor.
#[derive(Debug, Clone, Copy)]
pub struct ActorDecider<'a, A>(pub &'a A);

impl<A: Actor> Decider for ActorDecider<'_, A> {
    fn decide(&mut self, state: &StateSnapshot) -> Result<PortfolioVector> {
        self.0.action(state)
    }
}

/// Replays a demonstration dataset; every decision time must have a pair.
#[derive(Debug, Clone, Copy)]
pub struct DatasetDecider<'a>(pub &'a ExpertDataset);

impl Decider for DatasetDecider<'_> {
    fn decide(&mut self, state: &StateSnapshot) -> Result<PortfolioVector> {
        self.0
            .action_at(state.t)
            .cloned()
            .ok_or_else(|| CoreError::Window(format!("dataset {} has no action at t = {}", self.0.name, state.t)))
    }
}

impl<D: Decider + ?Sized> Decider for &mut D {
    fn decide(&mut self, state: &StateSnapshot) -> Result<PortfolioVector> {
        (**self).decide(state)
    }

    fn last_selection(&self) -> Option<usize> {
        (**self).last_selection()
    }
}

/// Periods per year and the per-period risk-free rate used for the metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSpec {
    pub periods_per_year: f64,
    pub risk_free: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub name: String,
    /// Decision timesteps, one per executed period.
    pub steps: Vec<usize>,
    pub dates: Vec<chrono::NaiveDate>,
    /// Capital before each period plus the final capital.
    pub wealth: Vec<f64>,
    pub ror: Vec<f64>,
    pub metrics: Metrics,
    pub periods_per_year: f64,
    pub risk_free: f64,
    pub selections: Option<Vec<usize>>,
    pub actions: Vec<PortfolioVector>,
}

impl BacktestReport {
    pub fn terminal_wealth(&self) -> f64 {
        *self.wealth.last().expect("wealth starts at AC_0")
    }

    pub fn bankrupt(&self) -> bool {
        self.metrics.flags.contains(MetricFlags::BANKRUPT)
    }

    /// Structured summary with metric names as keys; non-finite values are written as strings.
    pub fn to_json(&self, config_hash: &str) -> Value {
        let num = |v: f64| -> Value {
            if v.is_finite() {
                json!(v)
            } else if v > 0.0 {
                json!("+inf")
            } else if v < 0.0 {
                json!("-inf")
            } else {
                json!("nan")
            }
        };
        let m = &self.metrics;
        let mut metrics = BTreeMap::new();
        metrics.insert("ARR", num(m.arr));
        metrics.insert("AVol", num(m.avol));
        metrics.insert("ASR", num(m.asr));
        metrics.insert("SoR", num(m.sor));
        metrics.insert("MDD", num(m.mdd));
        metrics.insert("CR", num(m.cr));
        let flags: Vec<&str> = m.flags.iter_names().map(|(n, _)| n).collect();
        let mut out = json!({
            "name": self.name,
            "config_hash": config_hash,
            "metrics": metrics,
            "flags": flags,
            "periods": self.ror.len(),
            "periods_per_year": self.periods_per_year,
            "risk_free": self.risk_free,
            "terminal_wealth": num(self.terminal_wealth()),
        });
        if let Some(sel) = &self.selections {
            let mut counts = vec![0usize; sel.iter().max().map_or(0, |m| m + 1)];
            for &k in sel {
                counts[k] += 1;
            }
            out["selection_counts"] = json!(counts);
        }
        out
    }

    /// Writes `t,date,AC,RoR`; the final row carries the closing capital and an empty return.
    pub fn write_wealth_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "date", "AC", "RoR"])?;
        for (k, &t) in self.steps.iter().enumerate() {
            out.write_record([
                t.to_string(),
                self.dates[k].format(DATE_FORMAT).to_string(),
                self.wealth[k].to_string(),
                self.ror[k].to_string(),
            ])?;
        }
        if let Some(&last) = self.steps.last() {
            let k = self.steps.len();
            out.write_record([
                (last + 1).to_string(),
                self.dates[k].format(DATE_FORMAT).to_string(),
                self.wealth[k].to_string(),
                String::new(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `t,date,selected_k,AC` for selector runs.
    pub fn write_selection_csv<W: Write>(&self, w: W) -> Result<()> {
        let sel = self.selections.as_ref().ok_or_else(|| CoreError::Config(format!("{} made no selections", self.name)))?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "date", "selected_k", "AC"])?;
        for (k, (&t, &s)) in self.steps.iter().zip(sel).enumerate() {
            out.write_record([
                t.to_string(),
                self.dates[k].format(DATE_FORMAT).to_string(),
                s.to_string(),
                self.wealth[k + 1].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Executes `decider` at every decision time in `window` and scores the run.
pub fn run_backtest<D: Decider>(
    name: &str,
    mut decider: D,
    prices: &PriceTable,
    features: &FeatureSet,
    env_config: &EnvConfig,
    window: Range<usize>,
    spec: MetricSpec,
) -> Result<BacktestReport> {
    let mut env = TradingEnv::new(prices, features, env_config.clone())?;
    let mut state = env.reset(window.start, window.len())?;
    let mut steps = Vec::new();
    let mut wealth = vec![env.account().ac];
    let mut ror = Vec::new();
    let mut actions = Vec::new();
    let mut selections = Vec::new();
    let bankrupt = loop {
        let action = decider.decide(&state)?;
        if let Some(k) = decider.last_selection() {
            selections.push(k);
        }
        let out = env.step(&action)?;
        steps.push(state.t);
        wealth.push(env.account().ac);
        ror.push(out.ror);
        actions.push(action);
        state = out.state;
        if out.done {
            break out.bankrupt;
        }
    };
    let dates = steps.iter().map(|&t| prices.dates()[t]).chain(std::iter::once(prices.dates()[state.t])).collect();
    let mut metrics = metrics_of(&ror, spec.periods_per_year, spec.risk_free)?;
    if bankrupt {
        metrics.flags |= MetricFlags::BANKRUPT;
    }
    Ok(BacktestReport {
        name: name.to_string(),
        steps,
        dates,
        wealth,
        ror,
        metrics,
        periods_per_year: spec.periods_per_year,
        risk_free: spec.risk_free,
        selections: if selections.is_empty() { None } else { Some(selections) },
        actions,
    })
}

/// JSON text with a trailing newline; map keys are sorted.
pub fn render_json(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("values are serializable");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{gen_blsw, gen_csm, gen_hindsight};
    use crate::synth::{generate, SynthSpec};

    const SPEC: MetricSpec = MetricSpec { periods_per_year: 252.0, risk_free: 0.0 };

    fn setup(vol: f64, seed: u64) -> (PriceTable, FeatureSet) {
        let m = generate(&SynthSpec::random_walk(6, 160, 0.0, vol, seed)).unwrap();
        let fs = FeatureSet::build(&m.prices, 4, 0..100, &[]).unwrap();
        (m.prices, fs)
    }

    #[test]
    fn placeholder_on_flat_market() {
        let (p, fs) = setup(0.0, 1);
        let r = run_backtest("cash", Constant(PortfolioVector::uniform_long(6)), &p, &fs, &EnvConfig::default(), 50..80, SPEC)
            .unwrap();
        assert!(r.wealth.iter().all(|&w| (w - 1.0).abs() < 1e-12));
        assert_eq!(r.metrics.arr, 0.0);
        assert_eq!(r.metrics.asr, 0.0);
    }

    #[test]
    fn hindsight_beats_causal_experts() {
        let (p, fs) = setup(0.02, 2);
        let w = 50..150;
        let d1 = gen_csm(&p, w.clone(), 2, 0.5).unwrap();
        let d2 = gen_blsw(&p, w.clone(), 2, 0.5, 20).unwrap();
        let d3 = gen_hindsight(&p, w.clone(), 2, 0.5).unwrap();
        let cfg = EnvConfig::default();
        let arr = |d: &ExpertDataset| run_backtest("d", DatasetDecider(d), &p, &fs, &cfg, w.clone(), SPEC).unwrap().metrics.arr;
        assert!(arr(&d3) >= arr(&d1));
        assert!(arr(&d3) >= arr(&d2));
    }

    #[test]
    fn reports_are_reproducible_and_consistent() {
        let (p, fs) = setup(0.02, 3);
        let d = gen_csm(&p, 40..150, 2, 0.5).unwrap();
        let run = || run_backtest("csm", DatasetDecider(&d), &p, &fs, &EnvConfig::default(), 60..120, SPEC).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let prod: f64 = a.ror.iter().map(|r| 1.0 + r).product();
        assert!((prod - a.terminal_wealth() / a.wealth[0]).abs() < 1e-9);
        let mut csv = Vec::new();
        a.write_wealth_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 62);
        let js = a.to_json("abc");
        assert_eq!(js["config_hash"], "abc");
        assert!(js["metrics"]["ARR"].is_number());
    }

    #[test]
    fn infinite_metrics_serialize_as_strings() {
        let (p, fs) = setup(0.0, 1);
        let mut r =
            run_backtest("c", Constant(PortfolioVector::uniform_long(6)), &p, &fs, &EnvConfig::default(), 50..60, SPEC).unwrap();
        r.metrics.asr = f64::INFINITY;
        assert_eq!(r.to_json("h")["metrics"]["ASR"], "+inf");
    }
}
