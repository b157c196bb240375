//! Layers composed from tape primitives.

use crate::graph::{Graph, Var};
use crate::NumError;

/// `x @ w + b` with `x: [B, I]`, `w: [I, O]`, `b: [O]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// One LSTM step.
///
/// `x: [B, I]`, `h`, `c: [B, H]`, `w: [I + H, 4H]`, `b: [4H]`. Gate blocks of
/// `w` are ordered input, forget, candidate, output.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<(Var, Var), NumError> {
    let hidden = g.shape(h)[1];
    let xh = g.concat(&[x, h], 1)?;
    let gates = linear(g, xh, w, b)?;
    let i = g.slice(gates, 1, 0, hidden)?;
    let f = g.slice(gates, 1, hidden, hidden)?;
    let cand = g.slice(gates, 1, 2 * hidden, hidden)?;
    let o = g.slice(gates, 1, 3 * hidden, hidden)?;
    let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
    let cand = g.tanh(cand);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let tc = g.tanh(c_next);
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Runs an LSTM from zero state over `steps`, each `[B, I]`. Returns every hidden state.
pub fn lstm_sequence(g: &mut Graph, steps: &[Var], hidden: usize, w: Var, b: Var) -> Result<Vec<Var>, NumError> {
    let batch = match steps.first() {
        Some(&s) => g.shape(s)[0],
        None => return Ok(Vec::new()),
    };
    let mut h = g.constant(crate::Tensor::zeros(&[batch, hidden]));
    let mut c = g.constant(crate::Tensor::zeros(&[batch, hidden]));
    let mut out = Vec::with_capacity(steps.len());
    for &x in steps {
        let (hn, cn) = lstm_cell(g, x, h, c, w, b)?;
        out.push(hn);
        h = hn;
        c = cn;
    }
    Ok(out)
}
