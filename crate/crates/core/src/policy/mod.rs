//! Asset-scoring policy network with a learned short ratio and a top-M portfolio head.

pub mod network;

use numcore::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::StateSnapshot;
use crate::error::{CoreError, Result};
use crate::portfolio::PortfolioVector;

pub use network::{asset_scores, market_head, portfolio_from_scores, portfolio_head, spatial_attention, tcn_forward};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub n_assets: usize,
    /// Asset feature channels per timestep.
    pub in_channels: usize,
    pub market_channels: usize,
    /// Hidden feature width of the convolution stack and the market LSTM.
    pub hidden: usize,
    pub lookback: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub top_m: usize,
    pub allow_short: bool,
    /// Standard deviation of the exploration noise added to `v` in training rollouts.
    pub noise_std: f64,
    /// Multiplier on the market-branch short ratio.
    pub rho_scale: f64,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.n_assets == 0 || self.in_channels == 0 || self.market_channels == 0 {
            return bad("policy dimensions must be positive".into());
        }
        if self.hidden == 0 || self.lookback == 0 || self.kernel_size == 0 {
            return bad("policy.hidden, lookback and kernel_size must be positive".into());
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad(format!("policy.dilations {:?} must be non-empty and positive", self.dilations));
        }
        if self.top_m == 0 || self.top_m > self.n_assets {
            return bad(format!("policy.top_m = {} invalid for {} assets", self.top_m, self.n_assets));
        }
        if self.allow_short && 2 * self.top_m > self.n_assets {
            return bad(format!("policy.top_m = {} needs at least {} assets with shorting", self.top_m, 2 * self.top_m));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("policy.noise_std = {} must be non-negative", self.noise_std));
        }
        if !(self.rho_scale > 0.0 && self.rho_scale <= 1.0) {
            return bad(format!("policy.rho_scale = {} outside (0, 1]", self.rho_scale));
        }
        Ok(())
    }

    /// Every parameter name with its shape and initialization fan-in.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (n, f, t, fm, k) = (self.n_assets, self.hidden, self.lookback, self.market_channels, self.kernel_size);
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for l in 0..self.dilations.len() {
            out.push((format!("tcn.{l}.w"), vec![f, c_in, k], c_in * k));
            out.push((format!("tcn.{l}.b"), vec![f], c_in * k));
            c_in = f;
        }
        out.push(("proj.w".into(), vec![f, self.in_channels, 1], self.in_channels));
        out.push(("proj.b".into(), vec![f], self.in_channels));
        out.push(("sa.w1".into(), vec![t, 1], t));
        out.push(("sa.w2".into(), vec![f, t], f));
        out.push(("sa.w3".into(), vec![f, 1], f));
        out.push(("sa.vs".into(), vec![n, n], n));
        out.push(("sa.bs".into(), vec![n, n], n));
        out.push(("head.w4".into(), vec![f, 1], f));
        out.push(("head.b4".into(), vec![1], f));
        out.push(("head.wt".into(), vec![3 * n, n], 3 * n));
        out.push(("head.b".into(), vec![n], 3 * n));
        if self.allow_short {
            out.push(("mkt.lstm.w".into(), vec![fm + f, 4 * f], fm + f));
            out.push(("mkt.lstm.b".into(), vec![4 * f], fm + f));
            out.push(("mkt.w5".into(), vec![2 * f, f], 2 * f));
            out.push(("mkt.ve".into(), vec![f, 1], f));
            out.push(("mkt.w6".into(), vec![fm, 1], fm));
            out.push(("mkt.w7".into(), vec![f, 1], f));
            out.push(("mkt.bm".into(), vec![1], f));
        }
        out
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub h_hat: Var,
    pub s: Var,
    pub v: Var,
    pub rho: Option<Var>,
}

/// Deterministic outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutput {
    pub v: Vec<f64>,
    /// `[N, N]` spatial attention.
    pub s: Tensor,
    pub rho: f64,
    pub action: PortfolioVector,
}

/// A sampled training action and its log-density under the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyAction {
    pub v_sample: Vec<f64>,
    pub action: PortfolioVector,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    config: PolicyConfig,
    params: ParamStore,
}

impl Policy {
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in config.param_layout() {
            params.init_uniform(&name, &shape, fan_in, &mut rng);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against `config`.
    pub fn from_params(config: PolicyConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len() {
            return Err(CoreError::Config(format!(
                "checkpoint holds {} tensors, configuration expects {}",
                params.len(),
                layout.len()
            )));
        }
        for (name, shape, _) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(CoreError::Config(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(CoreError::Config(format!("checkpoint lacks parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    fn check_state(&self, state: &StateSnapshot) -> Result<()> {
        let c = &self.config;
        let xs = [c.n_assets, c.in_channels, c.lookback];
        let xm = [c.market_channels, c.lookback];
        if state.x_s.shape() != xs || state.x_m.shape() != xm || state.x_a.n_assets() != c.n_assets {
            return Err(CoreError::Config(format!(
                "state shapes x_s {:?}, x_m {:?} do not match policy {xs:?}, {xm:?}",
                state.x_s.shape(),
                state.x_m.shape()
            )));
        }
        Ok(())
    }

    /// Records the scoring network for `state` on `g` using parameters `p`.
    pub fn forward_with(&self, g: &mut Graph, p: &ParamStore, state: &StateSnapshot) -> Result<Forward> {
        self.check_state(state)?;
        let x_s = g.input(state.x_s.clone());
        let x_m = g.input(state.x_m.clone());
        let x_a = g.input(Tensor::vector(state.x_a.concat()));
        let h_hat = tcn_forward(g, p, &self.config, x_s)?;
        let s = spatial_attention(g, p, &self.config, h_hat)?;
        let v = asset_scores(g, p, &self.config, h_hat, s, x_s, x_a)?;
        let rho = market_head(g, p, &self.config, x_m)?;
        Ok(Forward { h_hat, s, v, rho })
    }

    pub fn forward(&self, g: &mut Graph, state: &StateSnapshot) -> Result<Forward> {
        self.forward_with(g, &self.params, state)
    }

    /// Noiseless evaluation.
    pub fn act(&self, state: &StateSnapshot) -> Result<ScoreOutput> {
        let mut g = Graph::new();
        let fw = self.forward(&mut g, state)?;
        let v = g.value(fw.v).data().to_vec();
        let rho = fw.rho.map(|r| g.value(r).data()[0]).unwrap_or(0.0);
        let action = portfolio_from_scores(&v, rho, self.config.top_m, self.config.allow_short)?;
        Ok(ScoreOutput { v, s: g.value(fw.s).clone(), rho, action })
    }

    /// Samples `v + noise_std * z` and builds the action from the sample.
    pub fn act_noisy<R: Rng + ?Sized>(&self, state: &StateSnapshot, rng: &mut R) -> Result<NoisyAction> {
        let out = self.act(state)?;
        let sigma = self.config.noise_std;
        let v_sample: Vec<f64> = out
            .v
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                m + sigma * z
            })
            .collect();
        let action = portfolio_from_scores(&v_sample, out.rho, self.config.top_m, self.config.allow_short)?;
        let log_prob = gaussian_log_prob(&v_sample, &out.v, sigma);
        Ok(NoisyAction { v_sample, action, log_prob })
    }
}

/// A frozen map from states to actions.
pub trait Actor: Sync {
    fn action(&self, state: &StateSnapshot) -> Result<PortfolioVector>;
}

impl Actor for Policy {
    fn action(&self, state: &StateSnapshot) -> Result<PortfolioVector> {
        Ok(self.act(state)?.action)
    }
}

/// Holds the same portfolio whatever the state.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedActor(pub PortfolioVector);

impl Actor for FixedActor {
    fn action(&self, _: &StateSnapshot) -> Result<PortfolioVector> {
        Ok(self.0.clone())
    }
}

/// Diagonal Gaussian log-density of `sample` around `mean`. Zero when `sigma` is zero.
pub fn gaussian_log_prob(sample: &[f64], mean: &[f64], sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let sq: f64 = sample.iter().zip(mean).map(|(s, m)| (s - m).powi(2)).sum();
    -sq / (2.0 * sigma * sigma) - sample.len() as f64 * (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// Tape version of [`gaussian_log_prob`] with gradient flowing into `mean`.
pub fn gaussian_log_prob_node(g: &mut Graph, sample: &[f64], mean: Var, sigma: f64) -> Result<Var> {
    if sigma == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let s = g.constant(Tensor::vector(sample.to_vec()));
    let d = g.sub(s, mean)?;
    let sq = g.mul(d, d)?;
    let total = g.sum(sq);
    let scaled = g.scale(total, -1.0 / (2.0 * sigma * sigma));
    let norm = sample.len() as f64 * (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    Ok(g.offset(scaled, -norm))
}
