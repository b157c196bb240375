//! Run configuration: one TOML file with a section per pipeline stage.
//!
//! Everything except `[split]` has defaults. Relative paths resolve against
//! the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trader_core::env::EnvConfig;
use trader_core::marketdata::SplitSpec;
use trader_core::meta::MetaConfig;
use trader_core::policy::PolicyConfig;
use trader_core::synth::SynthSpec;
use trader_core::trainer::TrainConfig;

use crate::ValidationError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    /// Synthetic market written by the `synth` stage.
    pub synth: Option<SynthSpec>,
    pub split: SplitSpec,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub experts: ExpertConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub backtest: BacktestConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// OHLCV CSV read by `ingest`.
    pub prices: Option<PathBuf>,
    pub min_coverage: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { prices: None, min_coverage: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub lookback: usize,
    /// Append the synthetic regime label as an extra market channel.
    pub regime_flag: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { lookback: 10, regime_flag: false }
    }
}

/// Network settings; data dimensions are filled in from the prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub hidden: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub top_m: usize,
    pub allow_short: bool,
    pub noise_std: f64,
    pub rho_scale: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { hidden: 8, kernel_size: 2, dilations: vec![1, 2, 4], top_m: 2, allow_short: true, noise_std: 0.1, rho_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    /// Short ratio of the rule-based demonstrations.
    pub rho: f64,
    pub blsw_window: usize,
    /// Per-dataset cloning weights keyed `D1`..`D4`; missing keys use `train.lambda`.
    pub lambda: BTreeMap<String, f64>,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { rho: 0.5, blsw_window: 20, lambda: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub periods_per_year: f64,
    /// Seed of the random-pick ablation; defaults to the global seed.
    pub random_pick_seed: Option<u64>,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self { periods_per_year: 252.0, random_pick_seed: None }
    }
}

pub const DATASETS: [&str; 4] = ["D1", "D2", "D3", "D4"];

impl RunConfig {
    /// Parses `path` and resolves its relative paths.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ValidationError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| ValidationError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(p) = &cfg.data.prices {
            if p.is_relative() {
                cfg.data.prices = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let field = |section: &str, e: trader_core::CoreError| ValidationError(format!("[{section}] {e}"));
        self.split.validate().map_err(|e| field("split", e))?;
        if let Some(p) = &self.data.prices {
            if !p.is_file() {
                return Err(ValidationError(format!("[data] prices: file {} does not exist", p.display())));
            }
        }
        if !(self.data.min_coverage > 0.0 && self.data.min_coverage <= 1.0) {
            return Err(ValidationError(format!("[data] min_coverage = {} outside (0, 1]", self.data.min_coverage)));
        }
        if let Some(s) = &self.synth {
            s.validate().map_err(|e| field("synth", e))?;
        }
        if self.features.lookback == 0 {
            return Err(ValidationError("[features] lookback must be positive".into()));
        }
        if self.features.regime_flag && self.synth.is_none() {
            return Err(ValidationError("[features] regime_flag needs a [synth] section".into()));
        }
        let probe = self.policy_config(2 * self.policy.top_m.max(1), 1, 1);
        probe.validate().map_err(|e| field("policy", e))?;
        if !(0.0..1.0).contains(&self.experts.rho) {
            return Err(ValidationError(format!("[experts] rho = {} outside [0, 1)", self.experts.rho)));
        }
        if !self.policy.allow_short && self.experts.rho != 0.0 {
            return Err(ValidationError("[experts] rho must be 0 when [policy] allow_short is false".into()));
        }
        if self.experts.blsw_window == 0 {
            return Err(ValidationError("[experts] blsw_window must be positive".into()));
        }
        for (k, l) in &self.experts.lambda {
            if !DATASETS.contains(&k.as_str()) {
                return Err(ValidationError(format!("[experts.lambda] unknown dataset {k}")));
            }
            if !(*l >= 0.0 && l.is_finite()) {
                return Err(ValidationError(format!("[experts.lambda] {k} = {l} must be non-negative")));
            }
        }
        self.train.validate().map_err(|e| field("train", e))?;
        self.meta.validate().map_err(|e| field("meta", e))?;
        self.env.validate().map_err(|e| field("env", e))?;
        if self.env.allow_short != self.policy.allow_short {
            return Err(ValidationError("[env] allow_short must match [policy] allow_short".into()));
        }
        if !(self.backtest.periods_per_year > 0.0) {
            return Err(ValidationError("[backtest] periods_per_year must be positive".into()));
        }
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
        self
    }

    pub fn policy_config(&self, n_assets: usize, in_channels: usize, market_channels: usize) -> PolicyConfig {
        let p = &self.policy;
        PolicyConfig {
            n_assets,
            in_channels,
            market_channels,
            hidden: p.hidden,
            lookback: self.features.lookback,
            kernel_size: p.kernel_size,
            dilations: p.dilations.clone(),
            top_m: p.top_m,
            allow_short: p.allow_short,
            noise_std: p.noise_std,
            rho_scale: p.rho_scale,
        }
    }

    /// Training settings for dataset `k` (0-based), with its own seed and cloning weight.
    pub fn train_config(&self, k: usize) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed.wrapping_add(1000 + k as u64);
        if let Some(l) = self.experts.lambda.get(DATASETS[k]) {
            t.lambda = *l;
        }
        t
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig { seed: self.seed.wrapping_add(7), ..self.meta.clone() }
    }

    /// Digest of every setting that affects results; file locations are left out.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            if let Some(d) = obj.get_mut("data").and_then(|d| d.as_object_mut()) {
                d.remove("prices");
            }
        }
        let text = serde_json::to_string(&v).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[split]
train_start = "2000-01-03"
train_end = "2000-12-31"
test_start = "2001-01-01"
test_end = "2001-06-30"
"#;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_config_has_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(&write(dir.path(), MINIMAL)).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.meta, MetaConfig::default());
        assert_eq!(cfg.features.lookback, 10);
    }

    #[test]
    fn hash_ignores_locations_but_not_settings() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunConfig::load(&write(dir.path(), MINIMAL)).unwrap();
        let b = a.clone().with_overrides(None, Some(PathBuf::from("/elsewhere")));
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.clone().with_overrides(Some(9), None).hash());
        let mut c = a.clone();
        c.train.lambda = 2.0;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{MINIMAL}\n[policy]\ntop_m = 0\n");
        let cfg = RunConfig::load(&write(dir.path(), &text)).unwrap();
        let e = cfg.validate().unwrap_err().0;
        assert!(e.starts_with("[policy]") && e.contains("top_m"), "{e}");

        let text = format!("{MINIMAL}\n[train]\nlamda = 1.0\n");
        let e = RunConfig::load(&write(dir.path(), &text)).unwrap_err().to_string();
        assert!(e.contains("lamda"), "{e}");

        let text = format!("{MINIMAL}\n[data]\nprices = \"missing.csv\"\n");
        let e = RunConfig::load(&write(dir.path(), &text)).unwrap().validate().unwrap_err().0;
        assert!(e.contains("[data] prices") && e.contains("missing.csv"), "{e}");
    }

    #[test]
    fn per_dataset_lambda_and_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{MINIMAL}\nseed = 3\n[experts.lambda]\nD3 = 5.0\n");
        let text = text.replacen("seed = 3\n", "", 1);
        let text = format!("seed = 3\n{text}");
        let cfg = RunConfig::load(&write(dir.path(), &text)).unwrap();
        assert_eq!(cfg.train_config(2).lambda, 5.0);
        assert_eq!(cfg.train_config(0).lambda, 1.0);
        assert_ne!(cfg.train_config(0).seed, cfg.train_config(1).seed);
    }
}
