//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of the reverse sweep it is checking.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::NumError;

/// Worst disagreement found by [`check_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error, so exactly-zero gradients compare by absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of the scalar built by `loss` against central differences.
pub fn check_params<F>(store: &ParamStore, step: f64, loss: F) -> Result<GradCheck, NumError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let grads = g.backward(l)?;

    let eval = |s: &ParamStore| -> Result<f64, NumError> {
        let mut g = Graph::new();
        let l = loss(&mut g, s)?;
        Ok(g.value(l).data()[0])
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = store.clone();
    for name in store.names() {
        let analytic = grads.param(name).cloned().unwrap_or_else(|| Tensor::zeros(store.get(name).unwrap().shape()));
        for i in 0..analytic.len() {
            let orig = store.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst_param.is_empty() {
                report = GradCheck {
                    max_rel_err: e.max(report.max_rel_err),
                    worst_param: name.to_string(),
                    worst_index: i,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("finite")
}

fn dim<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(1..=8)
}

/// Reduces an arbitrary tensor to a scalar with fixed random weights so
/// that every output element contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var, NumError> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Builder = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var, NumError>>;

/// A randomly drawn instance of one primitive, ready for [`check_params`].
pub struct Case {
    pub primitive: &'static str,
    pub store: ParamStore,
    pub loss: Builder,
}

pub const PRIMITIVES: &[&str] = &[
    "add", "sub", "mul", "scale_by", "matmul", "sigmoid", "tanh", "relu", "exp", "softmax_rows", "add_bias",
    "concat", "slice", "sum", "mean", "permute", "conv1d_causal", "gather", "scatter", "lstm_cell",
];

/// Draws one instance of `primitive` with values in `[-2, 2]` and dims at most 8.
pub fn random_case<R: Rng + ?Sized>(primitive: &'static str, rng: &mut R) -> Case {
    let mut store = ParamStore::new();
    let loss: Builder = match primitive {
        "add" | "sub" | "mul" => {
            let shape = [dim(rng), dim(rng)];
            store.insert("a", random_tensor(rng, &shape)).unwrap();
            store.insert("b", random_tensor(rng, &shape)).unwrap();
            let r = random_tensor(rng, &shape);
            Box::new(move |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let y = match primitive {
                    "add" => g.add(a, b)?,
                    "sub" => g.sub(a, b)?,
                    _ => g.mul(a, b)?,
                };
                weighted_sum(g, y, &r)
            })
        }
        "scale_by" => {
            let shape = [dim(rng), dim(rng)];
            store.insert("x", random_tensor(rng, &shape)).unwrap();
            store.insert("s", random_tensor(rng, &[1])).unwrap();
            let r = random_tensor(rng, &shape);
            Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let k = g.param(s, "s")?;
                let y = g.scale_by(x, k)?;
                weighted_sum(g, y, &r)
            })
        }
        "matmul" => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            store.insert("a", random_tensor(rng, &[m, k])).unwrap();
            store.insert("b", random_tensor(rng, &[k, n])).unwrap();
            let r = random_tensor(rng, &[m, n]);
            Box::new(move |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let y = g.matmul(a, b)?;
                weighted_sum(g, y, &r)
            })
        }
        "sigmoid" | "tanh" | "relu" | "exp" | "softmax_rows" | "sum" | "mean" => {
            let shape = [dim(rng), dim(rng)];
            let mut x = random_tensor(rng, &shape);
            if primitive == "relu" {
                // keep clear of the kink so central differences are valid
                for v in x.data_mut() {
                    if v.abs() < 0.05 {
                        *v += 0.1;
                    }
                }
            }
            store.insert("x", x).unwrap();
            let r = random_tensor(rng, &shape);
            Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let y = match primitive {
                    "sigmoid" => g.sigmoid(x),
                    "tanh" => g.tanh(x),
                    "relu" => g.relu(x),
                    "exp" => g.exp(x),
                    "softmax_rows" => g.softmax_rows(x)?,
                    "sum" => {
                        let w = g.constant(r.clone());
                        let p = g.mul(x, w)?;
                        return Ok(g.sum(p));
                    }
                    _ => {
                        let w = g.constant(r.clone());
                        let p = g.mul(x, w)?;
                        let m = g.mean(p);
                        return Ok(g.scale(m, 3.0));
                    }
                };
                weighted_sum(g, y, &r)
            })
        }
        "add_bias" => {
            let shape = [dim(rng), dim(rng)];
            store.insert("x", random_tensor(rng, &shape)).unwrap();
            store.insert("b", random_tensor(rng, &[shape[1]])).unwrap();
            let r = random_tensor(rng, &shape);
            Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let b = g.param(s, "b")?;
                let y = g.add_bias(x, b)?;
                weighted_sum(g, y, &r)
            })
        }
        "concat" => {
            let axis = rng.random_range(0..3);
            let mut sa = [dim(rng), dim(rng), dim(rng)];
            let mut sb = sa;
            sb[axis] = dim(rng);
            store.insert("a", random_tensor(rng, &sa)).unwrap();
            store.insert("b", random_tensor(rng, &sb)).unwrap();
            sa[axis] += sb[axis];
            let r = random_tensor(rng, &sa);
            Box::new(move |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let y = g.concat(&[a, b, a], axis)?;
                let y = g.slice(y, axis, 0, r.shape()[axis])?;
                weighted_sum(g, y, &r)
            })
        }
        "slice" => {
            let shape = [dim(rng), dim(rng) + 1, dim(rng)];
            let axis = rng.random_range(0..3);
            let start = rng.random_range(0..shape[axis]);
            let len = rng.random_range(1..=shape[axis] - start);
            store.insert("x", random_tensor(rng, &shape)).unwrap();
            let mut out = shape;
            out[axis] = len;
            let r = random_tensor(rng, &out);
            Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let y = g.slice(x, axis, start, len)?;
                weighted_sum(g, y, &r)
            })
        }
        "permute" => {
            let shape = [dim(rng), dim(rng), dim(rng)];
            let perms: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = perms[rng.random_range(0..6)];
            store.insert("x", random_tensor(rng, &shape)).unwrap();
            let r = random_tensor(rng, &perm.map(|p| shape[p]));
            Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let y = g.permute(x, &perm)?;
                let y = g.sigmoid(y);
                weighted_sum(g, y, &r)
            })
        }
        "conv1d_causal" => {
            let (b, cin, cout, t) = (dim(rng).min(3), dim(rng).min(4), dim(rng).min(4), dim(rng));
            let k = rng.random_range(1..=3);
            let dilation = rng.random_range(1..=3);
            store.insert("x", random_tensor(rng, &[b, cin, t])).unwrap();
            store.insert("w", random_tensor(rng, &[cout, cin, k])).unwrap();
            store.insert("b", random_tensor(rng, &[cout])).unwrap();
            let r = random_tensor(rng, &[b, cout, t]);
            Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let w = g.param(s, "w")?;
                let bb = g.param(s, "b")?;
                let y = g.conv1d_causal(x, w, bb, dilation)?;
                weighted_sum(g, y, &r)
            })
        }
        "gather" | "scatter" => {
            let n = dim(rng) + 1;
            let mut idx: Vec<usize> = (0..n).collect();
            let m = rng.random_range(1..=n);
            for i in 0..m {
                let j = rng.random_range(i..n);
                idx.swap(i, j);
            }
            idx.truncate(m);
            let (xs, rs) = if primitive == "gather" { (n, m) } else { (m, n) };
            store.insert("x", random_tensor(rng, &[xs])).unwrap();
            let r = random_tensor(rng, &[rs]);
            Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let y = if primitive == "gather" { g.gather(x, &idx)? } else { g.scatter(x, &idx, n)? };
                weighted_sum(g, y, &r)
            })
        }
        "lstm_cell" => {
            let (b, i, h) = (dim(rng).min(3), dim(rng).min(5), dim(rng).min(4));
            store.insert("x", random_tensor(rng, &[b, i])).unwrap();
            store.insert("h", random_tensor(rng, &[b, h])).unwrap();
            store.insert("c", random_tensor(rng, &[b, h])).unwrap();
            store.insert("w", random_tensor(rng, &[i + h, 4 * h])).unwrap();
            store.insert("bias", random_tensor(rng, &[4 * h])).unwrap();
            let rh = random_tensor(rng, &[b, h]);
            let rc = random_tensor(rng, &[b, h]);
            Box::new(move |g, s| {
                let x = g.param(s, "x")?;
                let hh = g.param(s, "h")?;
                let c = g.param(s, "c")?;
                let w = g.param(s, "w")?;
                let bias = g.param(s, "bias")?;
                let (hn, cn) = crate::nn::lstm_cell(g, x, hh, c, w, bias)?;
                let a = weighted_sum(g, hn, &rh)?;
                let bsum = weighted_sum(g, cn, &rc)?;
                g.add(a, bsum)
            })
        }
        other => panic!("unknown primitive {other}"),
    };
    Case { primitive, store, loss }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_uses_floor_for_zero_gradients() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(0.0, 1e-12) < 1e-6);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
