//! Recurrent Q-network over the market window plus base-policy track records.

use numcore::{nn, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetaState;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    pub market_channels: usize,
    pub lookback: usize,
    pub n_policies: usize,
    pub hidden: usize,
    pub fc_hidden: usize,
}

impl QConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.market_channels, self.lookback, self.n_policies, self.hidden, self.fc_hidden].contains(&0) {
            return Err(CoreError::Config(format!("meta network dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (fm, h, k, d) = (self.market_channels, self.hidden, self.n_policies, self.fc_hidden);
        vec![
            ("q.lstm.w".into(), vec![fm + h, 4 * h], fm + h),
            ("q.lstm.b".into(), vec![4 * h], fm + h),
            ("q.wa".into(), vec![2 * h, h], 2 * h),
            ("q.va".into(), vec![h, 1], h),
            ("q.w1".into(), vec![h + k, d], h + k),
            ("q.b1".into(), vec![d], h + k),
            ("q.w2".into(), vec![d, k], d),
            ("q.b2".into(), vec![k], d),
        ]
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        for (name, shape, fan_in) in self.param_layout() {
            p.init_uniform(&name, &shape, fan_in, &mut rng);
        }
        Ok(p)
    }

    pub fn check_params(&self, p: &ParamStore) -> Result<()> {
        let layout = self.param_layout();
        if layout.len() != p.len() {
            return Err(CoreError::Config(format!("meta checkpoint holds {} tensors, expected {}", p.len(), layout.len())));
        }
        for (name, shape, _) in layout {
            match p.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(CoreError::Config(format!("meta checkpoint lacks {name} with shape {shape:?}"))),
            }
        }
        Ok(())
    }

    fn check_state(&self, s: &MetaState) -> Result<()> {
        if s.x_m.shape() != [self.market_channels, self.lookback] || s.x_p.len() != self.n_policies {
            return Err(CoreError::Config(format!(
                "meta state x_m {:?}, x_p {} does not match network ({}, {}), {}",
                s.x_m.shape(),
                s.x_p.len(),
                self.market_channels,
                self.lookback,
                self.n_policies
            )));
        }
        Ok(())
    }
}

/// Q values for a batch of states, `[B, K]`.
pub fn q_forward(g: &mut Graph, p: &ParamStore, cfg: &QConfig, states: &[&MetaState]) -> Result<Var> {
    let (fm, t_len, h, k) = (cfg.market_channels, cfg.lookback, cfg.hidden, cfg.n_policies);
    let b = states.len();
    if b == 0 {
        return Err(CoreError::Config("empty meta batch".into()));
    }
    for s in states {
        cfg.check_state(s)?;
    }
    let mut steps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut col = Vec::with_capacity(b * fm);
        for s in states {
            col.extend((0..fm).map(|c| s.x_m.at(&[c, t])));
        }
        steps.push(g.input(Tensor::new(&[b, fm], col)?));
    }
    let lw = g.param(p, "q.lstm.w")?;
    let lb = g.param(p, "q.lstm.b")?;
    let hs = nn::lstm_sequence(g, &steps, h, lw, lb)?;
    let h_last = hs[t_len - 1];

    let wa = g.param(p, "q.wa")?;
    let va = g.param(p, "q.va")?;
    let mut scores = Vec::with_capacity(t_len);
    for &ht in &hs {
        let pair = g.concat(&[ht, h_last], 1)?;
        let z = g.matmul(pair, wa)?;
        let z = g.tanh(z);
        scores.push(g.matmul(z, va)?);
    }
    let e = g.concat(&scores, 1)?;
    let alpha = g.softmax_rows(e)?;
    let ones = g.constant(Tensor::full(&[1, h], 1.0));
    let mut ctx = None;
    for (t, &ht) in hs.iter().enumerate() {
        let a = g.slice(alpha, 1, t, 1)?;
        let a = g.matmul(a, ones)?;
        let term = g.mul(a, ht)?;
        ctx = Some(match ctx {
            None => term,
            Some(c) => g.add(c, term)?,
        });
    }
    let ctx = ctx.expect("lookback is positive");

    let xp: Vec<f64> = states.iter().flat_map(|s| s.x_p.iter().copied()).collect();
    let xp = g.input(Tensor::new(&[b, k], xp)?);
    let joined = g.concat(&[ctx, xp], 1)?;
    let w1 = g.param(p, "q.w1")?;
    let b1 = g.param(p, "q.b1")?;
    let z = nn::linear(g, joined, w1, b1)?;
    let z = g.relu(z);
    let w2 = g.param(p, "q.w2")?;
    let b2 = g.param(p, "q.b2")?;
    Ok(nn::linear(g, z, w2, b2)?)
}

/// Values-only Q rows, one per state.
pub fn q_values(p: &ParamStore, cfg: &QConfig, states: &[&MetaState]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let q = q_forward(&mut g, p, cfg, states)?;
    Ok(g.value(q).data().chunks(cfg.n_policies).map(|r| r.to_vec()).collect())
}

/// One stored step of the selection problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: MetaState,
    pub selected: usize,
    pub reward: f64,
    pub next_state: MetaState,
    pub done: bool,
}

/// `mean_j (y_j - Q(s_j, k_j))^2` with `y_j = r_j + gamma max_k Q_target(s'_j, k)`, or `r_j` on terminal steps.
pub fn q_loss(
    g: &mut Graph,
    online: &ParamStore,
    target: &ParamStore,
    cfg: &QConfig,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Var> {
    let k = cfg.n_policies;
    let next: Vec<&MetaState> = batch.iter().map(|tr| &tr.next_state).collect();
    let next_q = q_values(target, cfg, &next)?;
    let y: Vec<f64> = batch
        .iter()
        .zip(&next_q)
        .map(|(tr, q)| {
            if tr.done {
                tr.reward
            } else {
                tr.reward + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect();
    let states: Vec<&MetaState> = batch.iter().map(|tr| &tr.state).collect();
    let q = q_forward(g, online, cfg, &states)?;
    let flat = g.reshape(q, &[batch.len() * k])?;
    let idx: Vec<usize> = batch.iter().enumerate().map(|(j, tr)| j * k + tr.selected).collect();
    let chosen = g.gather(flat, &idx)?;
    let y = g.constant(Tensor::vector(y));
    let d = g.sub(y, chosen)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}
