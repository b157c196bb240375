//! Dynamically recorded computation tape with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value, so node inputs
//! always precede the node itself and the tape is acyclic by construction.
//! [`Graph::backward`] sweeps the tape in reverse and accumulates adjoints.

use std::collections::BTreeMap;

use crate::param::ParamStore;
use crate::tensor::{strides, Tensor};
use crate::NumError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    AddBias(Var, Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Conv1d { x: Var, w: Var, b: Var, dilation: usize },
    Gather(Var, Vec<usize>),
    Scatter(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A computation tape. Build one per forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn shape_err(op: &'static str, node: usize, detail: String) -> NumError {
    NumError::Shape { op, node: Some(node), detail }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Names of all parameters registered on this tape.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    /// Leaf holding data that is not trained (inputs, constants).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name).ok_or_else(|| NumError::MissingParam(name.to_string()))?.clone();
        let v = self.push(Op::Param, value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                self.next_id(),
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&p| f(p)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, NumError> {
        let k = self.value(s).item().ok_or_else(|| {
            shape_err("scale_by", self.next_id(), format!("scale must have one element, got {:?}", self.shape(s)))
        })?;
        let v = self.map(x, |p| p * k);
        Ok(self.push(Op::ScaleBy(x, s), v))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.map(x, |p| p * k);
        self.push(Op::Scale(x, k), v)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let v = self.map(x, |p| p + c);
        self.push(Op::Offset(x), v)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", self.next_id(), format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let xv = x[i * k + p];
                if xv == 0.0 {
                    continue;
                }
                let row = &y[p * n..(p + 1) * n];
                for (o, &yv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += xv * yv;
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", self.next_id(), format!("expected a matrix, got {s:?}")));
        }
        self.permute(x, &[1, 0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::tanh);
        self.push(Op::Tanh(x), v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |p| p.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::exp);
        self.push(Op::Exp(x), v)
    }

    /// Softmax over the last axis. A vector is treated as a single row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x);
        let cols = *t.shape().last().ok_or_else(|| {
            shape_err("softmax_rows", self.next_id(), "cannot take softmax of a scalar".into())
        })?;
        if cols == 0 {
            return Err(shape_err("softmax_rows", self.next_id(), "empty row".into()));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                z += *r;
            }
            for r in row.iter_mut() {
                *r /= z;
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(Op::SoftmaxRows(x), v))
    }

    /// Adds `b` (shape `[C]`) to every row of `x` (shape `[.., C]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape_err("add_bias", self.next_id(), format!("bias {sb:?} does not match {sx:?}")));
        }
        let c = sb[0];
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddBias(x, b), Tensor::from_parts(sx, out)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, NumError> {
        let first = xs.first().ok_or_else(|| shape_err("concat", self.next_id(), "no operands".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", self.next_id(), format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", self.next_id(), format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let a = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Op::Concat(xs.to_vec(), axis), Tensor::from_parts(shape, out)))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", self.next_id(), format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let a = s[axis];
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * a + start) * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Op::Slice { x, axis, start }, Tensor::from_parts(shape, out)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum(x), v)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len().max(1) as f64);
        self.push(Op::Mean(x), v)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumError> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(shape_err("reshape", self.next_id(), format!("{:?} -> {shape:?}", t.shape())));
        }
        let v = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        Ok(self.push(Op::Reshape(x), v))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NumError> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len() && perm.iter().all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err("permute", self.next_id(), format!("{perm:?} is not a permutation of {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let map = permute_map(&s, perm);
        let d = self.value(x).data();
        let out = map.iter().map(|&src| d[src]).collect();
        Ok(self.push(Op::Permute(x, perm.to_vec()), Tensor::from_parts(out_shape, out)))
    }

    /// Dilated causal 1-D convolution.
    ///
    /// `x: [B, C_in, T]`, `w: [C_out, C_in, K]`, `b: [C_out]`. Tap `k` reads
    /// `x[.., t - k * dilation]`; taps before the series start read zero.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var, NumError> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sb.len() != 1 || sw[1] != sx[1] || sb[0] != sw[0] || dilation == 0 {
            return Err(shape_err(
                "conv1d_causal",
                self.next_id(),
                format!("x {sx:?}, w {sw:?}, b {sb:?}, dilation {dilation}"),
            ));
        }
        let (bn, cin, t) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bn * cout * t];
        for n in 0..bn {
            for o in 0..cout {
                let orow = &mut out[(n * cout + o) * t..(n * cout + o + 1) * t];
                orow.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..cin {
                    let xrow = &xd[(n * cin + c) * t..(n * cin + c + 1) * t];
                    for tap in 0..k {
                        let wv = wd[(o * cin + c) * k + tap];
                        let lag = tap * dilation;
                        for ti in lag..t {
                            orow[ti] += wv * xrow[ti - lag];
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::Conv1d { x, w, b, dilation }, Tensor::from_parts(vec![bn, cout, t], out)))
    }

    /// Picks entries of a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumError> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || idx.iter().any(|&i| i >= s[0]) {
            return Err(shape_err("gather", self.next_id(), format!("indices {idx:?} into {s:?}")));
        }
        let d = self.value(x).data();
        let v = Tensor::vector(idx.iter().map(|&i| d[i]).collect());
        Ok(self.push(Op::Gather(x, idx.to_vec()), v))
    }

    /// Places the entries of vector `x` at distinct positions `idx` of a zero vector of length `len`.
    pub fn scatter(&mut self, x: Var, idx: &[usize], len: usize) -> Result<Var, NumError> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; len];
        let valid = s.len() == 1
            && s[0] == idx.len()
            && idx.iter().all(|&i| i < len && !std::mem::replace(&mut seen[i], true));
        if !valid {
            return Err(shape_err("scatter", self.next_id(), format!("{s:?} into length {len} at {idx:?}")));
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; len];
        for (j, &i) in idx.iter().enumerate() {
            out[i] = d[j];
        }
        Ok(self.push(Op::Scatter(x, idx.to_vec()), Tensor::vector(out)))
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g, self);
                    acc(&mut grads, *b, &g, self);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &g, self);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc(&mut grads, *b, &neg, self);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, x)| g * x).collect();
                    acc(&mut grads, *a, &ga, self);
                    acc(&mut grads, *b, &gb, self);
                }
                Op::ScaleBy(x, s) => {
                    let k = self.value(*s).data()[0];
                    let xv = self.value(*x).data();
                    let gx: Vec<f64> = g.iter().map(|g| g * k).collect();
                    let gs: f64 = g.iter().zip(xv).map(|(g, x)| g * x).sum();
                    acc(&mut grads, *x, &gx, self);
                    acc(&mut grads, *s, &[gs], self);
                }
                Op::Scale(x, k) => {
                    let gx: Vec<f64> = g.iter().map(|g| g * k).collect();
                    acc(&mut grads, *x, &gx, self);
                }
                Op::Offset(x) | Op::Reshape(x) => acc(&mut grads, *x, &g, self),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[r * k + p] += gv * bv[p * n + c];
                                gb[p * n + c] += av[r * k + p] * gv;
                            }
                        }
                    }
                    acc(&mut grads, *a, &ga, self);
                    acc(&mut grads, *b, &gb, self);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    acc(&mut grads, *x, &gx, self);
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    acc(&mut grads, *x, &gx, self);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx: Vec<f64> = g.iter().zip(xv).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                    acc(&mut grads, *x, &gx, self);
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                    acc(&mut grads, *x, &gx, self);
                }
                Op::SoftmaxRows(x) => {
                    let cols = *node.value.shape().last().unwrap();
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, &gx, self);
                }
                Op::AddBias(x, b) => {
                    let c = self.shape(*b)[0];
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, &g, self);
                    acc(&mut grads, *b, &gb, self);
                }
                Op::Concat(xs, axis) => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis];
                    let mut off = 0;
                    for &x in xs {
                        let a = self.shape(x)[*axis];
                        let mut gx = Vec::with_capacity(outer * a * inner);
                        for o in 0..outer {
                            let from = (o * total + off) * inner;
                            gx.extend_from_slice(&g[from..from + a * inner]);
                        }
                        acc(&mut grads, x, &gx, self);
                        off += a;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let s = self.shape(*x);
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let a = s[*axis];
                    let len = node.value.shape()[*axis];
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for o in 0..outer {
                        let to = (o * a + start) * inner;
                        let from = o * len * inner;
                        gx[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                    }
                    acc(&mut grads, *x, &gx, self);
                }
                Op::Sum(x) => {
                    let gx = vec![g[0]; self.value(*x).len()];
                    acc(&mut grads, *x, &gx, self);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let gx = vec![g[0] / n.max(1) as f64; n];
                    acc(&mut grads, *x, &gx, self);
                }
                Op::Permute(x, perm) => {
                    let map = permute_map(self.shape(*x), perm);
                    let mut gx = vec![0.0; g.len()];
                    for (o, &src) in map.iter().enumerate() {
                        gx[src] += g[o];
                    }
                    acc(&mut grads, *x, &gx, self);
                }
                Op::Conv1d { x, w, b, dilation } => {
                    let (sx, sw) = (self.shape(*x), self.shape(*w));
                    let (bn, cin, t) = (sx[0], sx[1], sx[2]);
                    let (cout, k) = (sw[0], sw[2]);
                    let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                    let mut gx = vec![0.0; xd.len()];
                    let mut gw = vec![0.0; wd.len()];
                    let mut gb = vec![0.0; cout];
                    for n in 0..bn {
                        for o in 0..cout {
                            let grow = &g[(n * cout + o) * t..(n * cout + o + 1) * t];
                            gb[o] += grow.iter().sum::<f64>();
                            for c in 0..cin {
                                let xoff = (n * cin + c) * t;
                                for tap in 0..k {
                                    let widx = (o * cin + c) * k + tap;
                                    let lag = tap * dilation;
                                    let mut sw_acc = 0.0;
                                    for ti in lag..t {
                                        gx[xoff + ti - lag] += wd[widx] * grow[ti];
                                        sw_acc += xd[xoff + ti - lag] * grow[ti];
                                    }
                                    gw[widx] += sw_acc;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, &gx, self);
                    acc(&mut grads, *w, &gw, self);
                    acc(&mut grads, *b, &gb, self);
                }
                Op::Gather(x, idx) => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (j, &i) in idx.iter().enumerate() {
                        gx[i] += g[j];
                    }
                    acc(&mut grads, *x, &gx, self);
                }
                Op::Scatter(x, idx) => {
                    let gx: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
                    acc(&mut grads, *x, &gx, self);
                }
            }
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|(name, &v)| {
                let shape = self.shape(v).to_vec();
                let data = grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.value(v).len()]);
                (name.clone(), Tensor::from_parts(shape, data))
            })
            .collect();
        Ok(Gradients { nodes: grads, shapes: self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect(), params })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], graph: &Graph) {
    debug_assert_eq!(g.len(), graph.value(v).len());
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// For each output flat index of the permuted tensor, the source flat index.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

/// Adjoints from one reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any node recorded before the loss.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        let shape = self.shapes.get(v.0)?.clone();
        let data = self.nodes[v.0].clone().unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        Some(Tensor::from_parts(shape, data))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}
