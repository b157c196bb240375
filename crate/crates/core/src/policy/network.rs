//! Tape-level building blocks of the scoring network.
//!
//! Every function records onto the caller's [`Graph`] so losses built on
//! top of the outputs can be differentiated back to the parameters.

use numcore::{nn, Graph, ParamStore, Tensor, Var};

use super::PolicyConfig;
use crate::error::Result;
use crate::portfolio::{select_long_short, PortfolioVector};

/// Causal dilated convolution stack: `[N, F_in, T]` to `[N, F, T]`.
///
/// ReLU follows every layer except the last.
pub fn tcn_forward(g: &mut Graph, p: &ParamStore, cfg: &PolicyConfig, x_s: Var) -> Result<Var> {
    let mut h = x_s;
    let layers = cfg.dilations.len();
    for (l, &d) in cfg.dilations.iter().enumerate() {
        let w = g.param(p, &format!("tcn.{l}.w"))?;
        let b = g.param(p, &format!("tcn.{l}.b"))?;
        h = g.conv1d_causal(h, w, b, d)?;
        if l + 1 < layers {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Row-stochastic `[N, N]` attention across assets.
pub fn spatial_attention(g: &mut Graph, p: &ParamStore, cfg: &PolicyConfig, h_hat: Var) -> Result<Var> {
    let (n, f, t) = (cfg.n_assets, cfg.hidden, cfg.lookback);
    let w1 = g.param(p, "sa.w1")?;
    let w2 = g.param(p, "sa.w2")?;
    let w3 = g.param(p, "sa.w3")?;
    let vs = g.param(p, "sa.vs")?;
    let bs = g.param(p, "sa.bs")?;

    let flat = g.reshape(h_hat, &[n * f, t])?;
    let hw1 = g.matmul(flat, w1)?;
    let hw1 = g.reshape(hw1, &[n, f])?;
    let left = g.matmul(hw1, w2)?;

    let ntf = g.permute(h_hat, &[0, 2, 1])?;
    let ntf = g.reshape(ntf, &[n * t, f])?;
    let right = g.matmul(ntf, w3)?;
    let right = g.reshape(right, &[n, t])?;
    let right_t = g.transpose(right)?;

    let logits = g.matmul(left, right_t)?;
    let logits = g.add(logits, bs)?;
    let gate = g.sigmoid(logits);
    let s_hat = g.matmul(vs, gate)?;
    Ok(g.softmax_rows(s_hat)?)
}

/// Per-asset rising potential `v` in `[-1, 1]^N`.
///
/// `x_a` is the previous action as a `[2N]` vector.
pub fn asset_scores(
    g: &mut Graph,
    p: &ParamStore,
    cfg: &PolicyConfig,
    h_hat: Var,
    s: Var,
    x_s: Var,
    x_a: Var,
) -> Result<Var> {
    let (n, f, t) = (cfg.n_assets, cfg.hidden, cfg.lookback);
    let flat = g.reshape(h_hat, &[n, f * t])?;
    let mixed = g.matmul(s, flat)?;
    let pw = g.param(p, "proj.w")?;
    let pb = g.param(p, "proj.b")?;
    let proj = g.conv1d_causal(x_s, pw, pb, 1)?;
    let proj = g.reshape(proj, &[n, f * t])?;
    let h = g.add(mixed, proj)?;

    let h = g.reshape(h, &[n * f, t])?;
    let last = g.slice(h, 1, t - 1, 1)?;
    let last = g.reshape(last, &[n, f])?;
    let w4 = g.param(p, "head.w4")?;
    let b4 = g.param(p, "head.b4")?;
    let v_hat = nn::linear(g, last, w4, b4)?;
    let v_hat = g.reshape(v_hat, &[n])?;

    let joined = g.concat(&[v_hat, x_a], 0)?;
    let joined = g.reshape(joined, &[1, 3 * n])?;
    let wt = g.param(p, "head.wt")?;
    let bt = g.param(p, "head.b")?;
    let z = nn::linear(g, joined, wt, bt)?;
    let z = g.reshape(z, &[n])?;
    let sig = g.sigmoid(z);
    let two = g.scale(sig, 2.0);
    Ok(g.offset(two, -1.0))
}

/// Short ratio from the market branch, shape `[1]`; `None` when shorting is off.
pub fn market_head(g: &mut Graph, p: &ParamStore, cfg: &PolicyConfig, x_m: Var) -> Result<Option<Var>> {
    if !cfg.allow_short {
        return Ok(None);
    }
    let (fm, f, t) = (cfg.market_channels, cfg.hidden, cfg.lookback);
    let lw = g.param(p, "mkt.lstm.w")?;
    let lb = g.param(p, "mkt.lstm.b")?;
    let mut steps = Vec::with_capacity(t);
    for k in 0..t {
        let col = g.slice(x_m, 1, k, 1)?;
        steps.push(g.reshape(col, &[1, fm])?);
    }
    let hs = nn::lstm_sequence(g, &steps, f, lw, lb)?;
    let h_last = hs[t - 1];
    let pairs = hs.iter().map(|&h| g.concat(&[h, h_last], 1)).collect::<Result<Vec<_>, _>>()?;
    let pairs = g.concat(&pairs, 0)?;
    let w5 = g.param(p, "mkt.w5")?;
    let ve = g.param(p, "mkt.ve")?;
    let proj = g.matmul(pairs, w5)?;
    let proj = g.tanh(proj);
    let e = g.matmul(proj, ve)?;

    let w6 = g.param(p, "mkt.w6")?;
    let drive = g.matmul(steps[t - 1], w6)?;
    let drive = g.concat(&vec![drive; t], 0)?;
    let e = g.add(e, drive)?;
    let e = g.reshape(e, &[1, t])?;
    let alpha = g.softmax_rows(e)?;

    let hmat = g.concat(&hs, 0)?;
    let ctx = g.matmul(alpha, hmat)?;
    let w7 = g.param(p, "mkt.w7")?;
    let bm = g.param(p, "mkt.bm")?;
    let z = nn::linear(g, ctx, w7, bm)?;
    let z = g.reshape(z, &[1])?;
    let sig = g.sigmoid(z);
    let half = g.scale(sig, 0.5);
    let rho = g.offset(half, 0.5);
    Ok(Some(g.scale(rho, cfg.rho_scale)))
}

/// Top-M softmax weighting on the tape. Returns `[w+; w-]` as a `[2N]` node
/// together with the same action as a validated vector.
pub fn portfolio_head(
    g: &mut Graph,
    v: Var,
    rho: Option<Var>,
    m: usize,
) -> Result<(Var, PortfolioVector)> {
    let vals = g.value(v).data().to_vec();
    let n = vals.len();
    let (long, short) = select_long_short(&vals, m, rho.is_some())?;
    let lv = g.gather(v, &long)?;
    let lw = g.softmax_rows(lv)?;
    let w_plus = g.scatter(lw, &long, n)?;
    let w_minus = match rho {
        Some(r) => {
            let sv = g.gather(v, &short)?;
            let sv = g.neg(sv);
            let sw = g.softmax_rows(sv)?;
            let sw = g.scatter(sw, &short, n)?;
            let sw = g.scale_by(sw, r)?;
            g.neg(sw)
        }
        None => g.constant(Tensor::zeros(&[n])),
    };
    let rho_val = rho.map(|r| g.value(r).data()[0]).unwrap_or(0.0);
    let action = PortfolioVector::new(g.value(w_plus).data().to_vec(), g.value(w_minus).data().to_vec(), rho_val)?;
    Ok((g.concat(&[w_plus, w_minus], 0)?, action))
}

/// Value-only counterpart of [`portfolio_head`].
pub fn portfolio_from_scores(v: &[f64], rho: f64, m: usize, shorting: bool) -> Result<PortfolioVector> {
    let (long, short) = select_long_short(v, m, shorting)?;
    let ll: Vec<f64> = long.iter().map(|&i| v[i]).collect();
    let sl: Vec<f64> = short.iter().map(|&i| -v[i]).collect();
    PortfolioVector::softmax_weighted(v.len(), &long, &ll, &short, &sl, if shorting { rho } else { 0.0 })
}
