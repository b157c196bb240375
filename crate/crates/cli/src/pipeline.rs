//! The seven pipeline stages and the on-disk layout they share.
//!
//! ```text
//! out/data/prices.csv, regimes.csv, manifest.json
//! out/experts/D{1..4}.csv + .json
//! out/policies/policy_D{1..4}.ckpt    out/curves/policy_D{1..4}.csv
//! out/meta/meta.ckpt                  out/curves/meta.csv
//! out/backtest/<run>.json, wealth_<run>.csv, selection_<run>.csv
//! out/report.json, out/report.csv
//! ```

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use rayon::prelude::*;
use serde_json::{json, Value};
use trader_core::backtest::{
    ablation_average_weight, ablation_random_pick, ablation_single_best, render_json, run_backtest, BacktestReport, Constant,
    MetricSpec, PolicyDecider,
};
use trader_core::experts::{empty_dataset, gen_blsw, gen_csm, gen_hindsight, ExpertDataset, ExpertManifest, MOMENTUM_LAG};
use trader_core::marketdata::{load_ohlcv, FeatureSet, PriceTable, SplitIndices};
use trader_core::meta::{write_meta_curve_csv, MetaDecider, QNetwork};
use trader_core::policy::Policy;
use trader_core::trainer::{train_policy, write_curve_csv};
use trader_core::{CoreError, PortfolioVector};

use crate::config::{RunConfig, DATASETS};
use crate::{ArtifactError, ValidationError};

/// Backtest runs in report order.
pub const RUNS: [&str; 9] = [
    "policy_D1",
    "policy_D2",
    "policy_D3",
    "policy_D4",
    "meta",
    "single_best",
    "random_pick",
    "average_weight",
    "uniform_long",
];

struct Layout(PathBuf);

impl Layout {
    fn prices(&self) -> PathBuf {
        self.0.join("data/prices.csv")
    }
    fn regimes(&self) -> PathBuf {
        self.0.join("data/regimes.csv")
    }
    fn data_manifest(&self) -> PathBuf {
        self.0.join("data/manifest.json")
    }
    fn expert_csv(&self, d: &str) -> PathBuf {
        self.0.join(format!("experts/{d}.csv"))
    }
    fn expert_json(&self, d: &str) -> PathBuf {
        self.0.join(format!("experts/{d}.json"))
    }
    fn policy(&self, d: &str) -> PathBuf {
        self.0.join(format!("policies/policy_{d}.ckpt"))
    }
    fn meta(&self) -> PathBuf {
        self.0.join("meta/meta.ckpt")
    }
    fn curve(&self, name: &str) -> PathBuf {
        self.0.join(format!("curves/{name}.csv"))
    }
    fn run_json(&self, run: &str) -> PathBuf {
        self.0.join(format!("backtest/{run}.json"))
    }
    fn wealth(&self, run: &str) -> PathBuf {
        self.0.join(format!("backtest/wealth_{run}.csv"))
    }
    fn selection(&self, run: &str) -> PathBuf {
        self.0.join(format!("backtest/selection_{run}.csv"))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_with<F>(path: &Path, f: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> trader_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_file(path, &buf)
}

fn save_checkpoint(path: &Path, params: &numcore::ParamStore, hash: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    numcore::checkpoint::save(path, params, hash).map_err(CoreError::from).with_context(|| format!("writing {}", path.display()))
}

fn require(path: &Path, kind: &'static str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ArtifactError::Missing { kind, path: path.to_path_buf() }.into())
    }
}

fn check_hash(path: &Path, found: &str, expected: &str) -> anyhow::Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(ArtifactError::Stale { path: path.to_path_buf(), found: found.to_string(), expected: expected.to_string() }.into())
    }
}

fn read_json(path: &Path, kind: &'static str) -> anyhow::Result<Value> {
    require(path, kind)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Reads a JSON artifact and checks its `config_hash` field.
fn read_stamped(path: &Path, kind: &'static str, hash: &str) -> anyhow::Result<Value> {
    let v = read_json(path, kind)?;
    let found = v.get("config_hash").and_then(Value::as_str).unwrap_or("");
    check_hash(path, found, hash)?;
    Ok(v)
}

fn write_market(cfg: &RunConfig, prices: &PriceTable, source: &str, regimes: Option<&[usize]>) -> anyhow::Result<()> {
    let lay = Layout(cfg.output_dir.clone());
    write_with(&lay.prices(), |b| prices.write_csv(b))?;
    match regimes {
        Some(r) => {
            let mut text = String::from("t,date,regime\n");
            for (t, (d, k)) in prices.dates().iter().zip(r).enumerate() {
                text.push_str(&format!("{t},{},{k}\n", d.format(trader_core::marketdata::DATE_FORMAT)));
            }
            write_file(&lay.regimes(), text.as_bytes())?;
        }
        None => {
            if lay.regimes().exists() {
                fs::remove_file(lay.regimes())?;
            }
        }
    }
    let manifest = json!({
        "config_hash": cfg.hash(),
        "source": source,
        "prices_hash": prices.content_hash(),
        "n_assets": prices.n_assets(),
        "n_periods": prices.n_periods(),
        "symbols": prices.symbols(),
    });
    write_file(&lay.data_manifest(), render_json(&manifest).as_bytes())?;
    log::info!("wrote {} assets x {} periods", prices.n_assets(), prices.n_periods());
    Ok(())
}

pub fn ingest(cfg: &RunConfig) -> anyhow::Result<()> {
    let path = cfg.data.prices.as_ref().ok_or_else(|| ValidationError("[data] prices is required by ingest".into()))?;
    let prices = load_ohlcv(path, cfg.data.min_coverage)?;
    write_market(cfg, &prices, &path.display().to_string(), None)
}

pub fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let spec = cfg.synth.as_ref().ok_or_else(|| ValidationError("[synth] section is required by synth".into()))?;
    let market = trader_core::synth::generate(spec)?;
    write_market(cfg, &market.prices, "synth", Some(&market.regimes))
}

/// Prices, split and features shared by every stage after ingestion.
struct Stage {
    layout: Layout,
    hash: String,
    prices: PriceTable,
    split: SplitIndices,
    features: FeatureSet,
}

impl Stage {
    fn load(cfg: &RunConfig) -> anyhow::Result<Self> {
        let layout = Layout(cfg.output_dir.clone());
        let hash = cfg.hash();
        let manifest = read_stamped(&layout.data_manifest(), "data manifest", &hash)?;
        require(&layout.prices(), "price file")?;
        let prices = load_ohlcv(&layout.prices(), 1.0)?;
        let recorded = manifest.get("prices_hash").and_then(Value::as_str).unwrap_or("");
        check_hash(&layout.prices(), &prices.content_hash(), recorded)?;
        let split = cfg.split.resolve(&prices)?;
        let mut extra = Vec::new();
        if cfg.features.regime_flag {
            extra.push(("regime", read_regimes(&layout.regimes(), prices.n_periods())?));
        }
        let features = FeatureSet::build(&prices, cfg.features.lookback, split.train.clone(), &extra)?;
        let stage = Self { layout, hash, prices, split, features };
        stage.policy_config(cfg).validate()?;
        Ok(stage)
    }

    /// Decision times of `range`: after the warm-up, leaving one period to settle.
    fn decisions(&self, range: &Range<usize>) -> anyhow::Result<Range<usize>> {
        let lo = range.start.max(self.features.first_state());
        let hi = range.end.saturating_sub(1);
        if lo >= hi {
            return Err(CoreError::Window(format!(
                "range {range:?} has no decision times after the warm-up ending at {}",
                self.features.first_state()
            ))
            .into());
        }
        Ok(lo..hi)
    }

    fn policy_config(&self, cfg: &RunConfig) -> trader_core::policy::PolicyConfig {
        cfg.policy_config(self.prices.n_assets(), self.features.asset.n_channels(), self.features.market.n_channels())
    }

    fn load_policies(&self, cfg: &RunConfig) -> anyhow::Result<Vec<Policy>> {
        let pcfg = self.policy_config(cfg);
        DATASETS
            .iter()
            .map(|d| {
                let path = self.layout.policy(d);
                require(&path, "policy checkpoint")?;
                let ck = numcore::checkpoint::load(&path).map_err(CoreError::from)?;
                check_hash(&path, &ck.config_hash, &self.hash)?;
                Ok(Policy::from_params(pcfg.clone(), ck.params)?)
            })
            .collect()
    }

    fn load_meta(&self, cfg: &RunConfig) -> anyhow::Result<QNetwork> {
        let path = self.layout.meta();
        require(&path, "meta checkpoint")?;
        let ck = numcore::checkpoint::load(&path).map_err(CoreError::from)?;
        check_hash(&path, &ck.config_hash, &self.hash)?;
        let qcfg = cfg.meta.q_config(self.features.market.n_channels(), cfg.features.lookback, DATASETS.len());
        Ok(QNetwork::from_params(qcfg, ck.params)?)
    }
}

fn read_regimes(path: &Path, n_periods: usize) -> anyhow::Result<Vec<f64>> {
    require(path, "regime file")?;
    let text = fs::read_to_string(path)?;
    let vals = text
        .lines()
        .skip(1)
        .enumerate()
        .map(|(k, line)| {
            line.rsplit(',').next().and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(|| CoreError::Parse {
                path: path.to_path_buf(),
                line: k as u64 + 2,
                msg: format!("bad regime row {line:?}"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if vals.len() != n_periods {
        return Err(CoreError::Window(format!("{} has {} rows for {n_periods} periods", path.display(), vals.len())).into());
    }
    Ok(vals)
}

fn stamped_manifest(m: &ExpertManifest, hash: &str) -> anyhow::Result<Value> {
    let mut v = serde_json::to_value(m)?;
    v["config_hash"] = json!(hash);
    Ok(v)
}

pub fn gen_experts(cfg: &RunConfig) -> anyhow::Result<()> {
    let ctx = Stage::load(cfg)?;
    let span = ctx.decisions(&ctx.split.train)?;
    let lo = span.start.max(MOMENTUM_LAG).max(cfg.experts.blsw_window - 1);
    let steps = lo..span.end;
    let (m, rho) = (cfg.policy.top_m, cfg.experts.rho);
    let sets = [
        gen_csm(&ctx.prices, steps.clone(), m, rho)?,
        gen_blsw(&ctx.prices, steps.clone(), m, rho, cfg.experts.blsw_window)?,
        gen_hindsight(&ctx.prices, steps, m, rho)?,
        empty_dataset(),
    ];
    for (d, set) in DATASETS.iter().zip(&sets) {
        write_with(&ctx.layout.expert_csv(d), |b| set.write_csv(b))?;
        let manifest = stamped_manifest(&set.manifest(), &ctx.hash)?;
        write_file(&ctx.layout.expert_json(d), render_json(&manifest).as_bytes())?;
        log::info!("{d}: {} pairs", set.len());
    }
    Ok(())
}

fn load_expert(ctx: &Stage, d: &str) -> anyhow::Result<ExpertDataset> {
    let json_path = ctx.layout.expert_json(d);
    let v = read_stamped(&json_path, "expert manifest", &ctx.hash)?;
    let manifest: ExpertManifest = serde_json::from_value(v).with_context(|| format!("parsing {}", json_path.display()))?;
    let csv_path = ctx.layout.expert_csv(d);
    require(&csv_path, "expert dataset")?;
    let file = fs::File::open(&csv_path)?;
    Ok(ExpertDataset::read_csv(file, &manifest, ctx.prices.n_assets())?)
}

pub fn train_diverse(cfg: &RunConfig) -> anyhow::Result<()> {
    let ctx = Stage::load(cfg)?;
    let datasets = DATASETS.iter().map(|d| load_expert(&ctx, d)).collect::<anyhow::Result<Vec<_>>>()?;
    let pcfg = ctx.policy_config(cfg);
    let outputs = datasets
        .par_iter()
        .enumerate()
        .map(|(k, data)| {
            let tcfg = cfg.train_config(k);
            let policy = Policy::init(pcfg.clone(), cfg.seed.wrapping_add(100 + k as u64))?;
            train_policy(policy, &ctx.prices, &ctx.features, &cfg.env, data, ctx.split.train.clone(), &tcfg)
        })
        .collect::<Vec<_>>();
    let mut diverged = Vec::new();
    for (d, out) in DATASETS.iter().zip(outputs) {
        let out = out?;
        save_checkpoint(&ctx.layout.policy(d), out.policy.params(), &ctx.hash)?;
        write_with(&ctx.layout.curve(&format!("policy_{d}")), |b| write_curve_csv(&out.curve, b))?;
        if let Some(ep) = out.diverged_at {
            log::error!("policy_{d} diverged at episode {ep}; kept the last finite parameters");
            diverged.push(format!("policy_{d} at episode {ep}"));
        }
    }
    if !diverged.is_empty() {
        return Err(CoreError::Divergence(diverged.join(", ")).into());
    }
    Ok(())
}

pub fn train_meta(cfg: &RunConfig) -> anyhow::Result<()> {
    let ctx = Stage::load(cfg)?;
    let policies = ctx.load_policies(cfg)?;
    let out = trader_core::meta::train_meta(&policies, &ctx.prices, &ctx.features, &cfg.env, ctx.split.train.clone(), &cfg.meta_config())?;
    save_checkpoint(&ctx.layout.meta(), &out.network.online, &ctx.hash)?;
    write_with(&ctx.layout.curve("meta"), |b| write_meta_curve_csv(&out.curve, b))?;
    log::info!("meta: {} steps, {} target syncs", out.curve.len(), out.target_syncs);
    if let Some(step) = out.diverged_at {
        return Err(CoreError::Divergence(format!("meta network at step {step}")).into());
    }
    Ok(())
}

fn save_run(ctx: &Stage, report: &BacktestReport, extra: Option<(&str, Value)>) -> anyhow::Result<()> {
    let name = report.name.as_str();
    let mut v = report.to_json(&ctx.hash);
    if let Some((k, x)) = extra {
        v[k] = x;
    }
    write_file(&ctx.layout.run_json(name), render_json(&v).as_bytes())?;
    write_with(&ctx.layout.wealth(name), |b| report.write_wealth_csv(b))?;
    if report.selections.is_some() {
        write_with(&ctx.layout.selection(name), |b| report.write_selection_csv(b))?;
    }
    Ok(())
}

pub fn backtest(cfg: &RunConfig) -> anyhow::Result<()> {
    let ctx = Stage::load(cfg)?;
    let policies = ctx.load_policies(cfg)?;
    let network = ctx.load_meta(cfg)?;
    let test = ctx.decisions(&ctx.split.test)?;
    let train = ctx.decisions(&ctx.split.train)?;
    let spec = MetricSpec { periods_per_year: cfg.backtest.periods_per_year, risk_free: cfg.env.risk_free };
    let (prices, features, env) = (&ctx.prices, &ctx.features, &cfg.env);

    for (d, p) in DATASETS.iter().zip(&policies) {
        let r = run_backtest(&format!("policy_{d}"), PolicyDecider(p), prices, features, env, test.clone(), spec)?;
        save_run(&ctx, &r, None)?;
    }
    let decider = MetaDecider::new(&network, &policies, prices, features, env.transaction_cost, cfg.meta.window)?;
    save_run(&ctx, &run_backtest("meta", decider, prices, features, env, test.clone(), spec)?, None)?;
    let (best, r) = ablation_single_best(&policies, prices, features, env, train, test.clone(), spec)?;
    save_run(&ctx, &r, Some(("chosen", json!(format!("policy_{}", DATASETS[best])))))?;
    let seed = cfg.backtest.random_pick_seed.unwrap_or(cfg.seed);
    save_run(&ctx, &ablation_random_pick(&policies, prices, features, env, test.clone(), spec, seed)?, None)?;
    save_run(&ctx, &ablation_average_weight(&policies, prices, features, env, test.clone(), spec)?, None)?;
    let uniform = Constant(PortfolioVector::uniform_long(prices.n_assets()));
    save_run(&ctx, &run_backtest("uniform_long", uniform, prices, features, env, test, spec)?, None)?;
    Ok(())
}

const REPORT_METRICS: [&str; 6] = ["ARR", "AVol", "ASR", "SoR", "MDD", "CR"];

fn csv_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

pub fn report(cfg: &RunConfig) -> anyhow::Result<()> {
    let lay = Layout(cfg.output_dir.clone());
    let hash = cfg.hash();
    read_stamped(&lay.data_manifest(), "data manifest", &hash)?;
    for d in DATASETS {
        read_stamped(&lay.expert_json(d), "expert manifest", &hash)?;
    }
    let checkpoints = DATASETS.iter().map(|d| lay.policy(d)).chain(std::iter::once(lay.meta()));
    for path in checkpoints {
        require(&path, "checkpoint")?;
        let ck = numcore::checkpoint::load(&path).map_err(CoreError::from)?;
        check_hash(&path, &ck.config_hash, &hash)?;
    }
    let runs = RUNS.iter().map(|r| read_stamped(&lay.run_json(r), "backtest result", &hash)).collect::<anyhow::Result<Vec<_>>>()?;

    let mut csv = String::from("run");
    for m in REPORT_METRICS {
        csv.push(',');
        csv.push_str(m);
    }
    csv.push_str(",terminal_wealth,periods,flags\n");
    for v in &runs {
        csv.push_str(&csv_cell(&v["name"]));
        for m in REPORT_METRICS {
            csv.push(',');
            csv.push_str(&csv_cell(&v["metrics"][m]));
        }
        let flags: Vec<String> = v["flags"].as_array().map(|a| a.iter().map(csv_cell).collect()).unwrap_or_default();
        csv.push_str(&format!(",{},{},{}\n", csv_cell(&v["terminal_wealth"]), csv_cell(&v["periods"]), flags.join("|")));
    }
    let report = json!({ "config_hash": hash, "runs": runs });
    write_file(&lay.0.join("report.json"), render_json(&report).as_bytes())?;
    write_file(&lay.0.join("report.csv"), csv.as_bytes())?;
    Ok(())
}
