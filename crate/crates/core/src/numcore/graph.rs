//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order, so the backward sweep is a single reverse
//! pass that visits each node once. Parameters are pulled in from a
//! [`ParamStore`] and deduplicated, so a parameter used in several places
//! accumulates its gradient in one slot.
//!
//! Most operations treat their operand as a stack of rows along the trailing
//! axis (`outer × last`). Anything else is expressed with [`Graph::reshape`].

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Arguments of `exp` are clamped to this range.
pub const EXP_CLAMP: f64 = 30.0;
/// Arguments of `log` are floored here.
pub const LOG_FLOOR: f64 = 1e-300;
const NORM_FLOOR: f64 = 1e-12;

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    BatchMatMulNt { a: Var, b: Var, batch: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sin(Var),
    Softplus(Var),
    Gelu(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    MeanLast(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        weights: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    GroupMean(Var, Vec<Vec<usize>>),
    Concat(Vec<Var>),
    Reshape(Var),
    Pick(Var, Vec<usize>),
}

/// Batch layout of a fused attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub heads: usize,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation over tensors, differentiable in reverse mode.
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Tensor>,
}

impl Gradients {
    /// Gradient for a parameter; zeros when the parameter was unreachable.
    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.index()]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    /// Gradient with respect to any recorded node, if it was reached.
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// A graph without trainable parameters.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.outer(), t.last_dim())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    /// `a[n×p] · b[p×q]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[n, q]);
        gemm(
            n,
            p,
            q,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            out.data_mut(),
        );
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Per batch element: `a_i[m×d] · b_i[n×d]ᵀ`, with `a` laid out as
    /// `[batch·m × d]` and `b` as `[batch·n × d]`. Output is `[batch·m × n]`.
    pub fn batch_matmul_nt(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (ra, da) = self.rows_cols(a);
        let (rb, db) = self.rows_cols(b);
        if batch == 0 || da != db || ra % batch != 0 || rb % batch != 0 {
            return Err(Error::shape("batch_matmul_nt", self.shape(a), self.shape(b)));
        }
        let (m, n, d) = (ra / batch, rb / batch, da);
        let mut out = Tensor::zeros(&[batch * m, n]);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            for i in 0..batch {
                gemm(
                    m,
                    d,
                    n,
                    &ad[i * m * d..(i + 1) * m * d],
                    false,
                    &bd[i * n * d..(i + 1) * n * d],
                    true,
                    0.0,
                    &mut od[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push(out, Op::BatchMatMulNt { a, b, batch }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        r: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let tx = self.value(x);
        let tr = self.value(r);
        let c = tx.last_dim();
        if tr.len() != c {
            return Err(Error::shape(name, tx.shape(), tr.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, &b) in row.iter_mut().zip(tr.data()) {
                *o = f(*o, b);
            }
        }
        Ok(out)
    }

    /// `x[..×q] + b[q]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, b, |a, b| a + b)?;
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// `x[..×q] ⊙ g[q]`, broadcasting `g` over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, g, |a, b| a * b)?;
        Ok(self.push(out, Op::MulRow(x, g)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// `exp` with the argument clamped to `[-30, 30]`.
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.clamp(-EXP_CLAMP, EXP_CLAMP).exp(), Op::Exp(x))
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(LOG_FLOOR).ln(), Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0).sqrt(), Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    /// `max(x, 0)`.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Sum over the trailing axis: `[..×q] → [..]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut shape = t.shape().to_vec();
        shape.pop();
        let data = (0..t.outer()).map(|i| t.row(i).iter().sum()).collect();
        let out = Tensor::new(shape, data).expect("reduced shape");
        self.push(out, Op::SumLast(x))
    }

    /// Mean over the trailing axis: `[..×q] → [..]`.
    pub fn mean_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let q = t.last_dim() as f64;
        let mut shape = t.shape().to_vec();
        shape.pop();
        let data = (0..t.outer()).map(|i| t.row(i).iter().sum::<f64>() / q).collect();
        let out = Tensor::new(shape, data).expect("reduced shape");
        self.push(out, Op::MeanLast(x))
    }

    /// Softmax of `x / temperature` over the trailing axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::param(format!("temperature must be > 0, got {temperature}")));
        }
        let out = softmax_rows(self.value(x), temperature);
        Ok(self.push(out, Op::Softmax(x, temperature)))
    }

    /// Log-softmax of `x / temperature` over the trailing axis.
    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::param(format!("temperature must be > 0, got {temperature}")));
        }
        let t = self.value(x);
        let mut out = t.clone();
        for i in 0..t.outer() {
            let row = out.row_mut(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / temperature;
            let lse = row.iter().map(|&v| (v / temperature - m).exp()).sum::<f64>().ln() + m;
            for v in row.iter_mut() {
                *v = *v / temperature - lse;
            }
        }
        Ok(self.push(out, Op::LogSoftmax(x, temperature)))
    }

    /// Per-row standardization followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gain)));
        }
        if d == 0 || !(eps > 0.0) {
            return Err(Error::param("layer_norm needs d >= 1 and eps > 0"));
        }
        let rows = t.outer();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(t.shape());
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        for i in 0..rows {
            let r = t.row(i);
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            let o = out.row_mut(i);
            for j in 0..d {
                let xh = (r[j] - mean) * is;
                xhat[i * d + j] = xh;
                o[j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Scale every row to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.outer());
        for i in 0..t.outer() {
            let row = out.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x, norms })
    }

    /// Scaled dot-product attention split over `heads`, batched.
    ///
    /// `q` is `[batch·tq × d]`; `k` and `v` are `[batch·tk × d]`. No
    /// projections are applied here.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let AttentionShape {
            batch,
            tq,
            tk,
            heads,
        } = shape;
        let (rq, d) = self.rows_cols(q);
        let (rk, dk) = self.rows_cols(k);
        let (rv, dv) = self.rows_cols(v);
        if rq != batch * tq || rk != batch * tk || rv != rk || dk != d || dv != d {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::param(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        if tk == 0 {
            return Err(Error::input("attention over zero keys"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut weights = vec![0.0; batch * heads * tq * tk];
        let mut out = Tensor::zeros(&[batch * tq, d]);
        let od = out.data_mut();
        let mut scores = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let qrow = &qd[(b * tq + i) * d + c0..(b * tq + i) * d + c0 + dh];
                    let mut m = f64::NEG_INFINITY;
                    for t in 0..tk {
                        let krow = &kd[(b * tk + t) * d + c0..(b * tk + t) * d + c0 + dh];
                        let s = dot(qrow, krow) * scale;
                        scores[t] = s;
                        m = m.max(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    let w = &mut weights[((b * heads + h) * tq + i) * tk..][..tk];
                    let orow = &mut od[(b * tq + i) * d + c0..(b * tq + i) * d + c0 + dh];
                    for t in 0..tk {
                        let a = scores[t] / z;
                        w[t] = a;
                        let vrow = &vd[(b * tk + t) * d + c0..(b * tk + t) * d + c0 + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += a * vv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                weights,
            },
        ))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, laid out
    /// `[batch, heads, tq, tk]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Select rows (trailing-axis slices) by index; output is `[idx.len() × q]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = (t.outer(), t.last_dim());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::input(format!("gather index {bad} out of {rows} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data).expect("gather shape");
        Ok(self.push(out, Op::Gather(x, idx)))
    }

    /// Output row `i` is the mean of input rows `groups[i]`.
    pub fn group_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = (t.outer(), t.last_dim());
        let mut out = Tensor::zeros(&[groups.len(), c]);
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::input("group_mean over an empty group"));
            }
            let inv = 1.0 / members.len() as f64;
            let o = out.row_mut(g);
            for &m in members {
                if m >= rows {
                    return Err(Error::input(format!("group index {m} out of {rows} rows")));
                }
                for (a, &b) in o.iter_mut().zip(t.row(m)) {
                    *a += b * inv;
                }
            }
        }
        Ok(self.push(out, Op::GroupMean(x, groups)))
    }

    /// Stack rows of all inputs (equal trailing width).
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::input("concat of no tensors"));
        };
        let c = self.value(first).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.last_dim() != c {
                return Err(Error::shape("concat", self.shape(xs[0]), t.shape()));
            }
            rows += t.outer();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, c], data).expect("concat shape");
        Ok(self.push(out, Op::Concat(xs.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `out[i] = x[i, idx[i]]` for `x` of shape `[n × C]`.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = (t.outer(), t.last_dim());
        if idx.len() != rows {
            return Err(Error::shape("pick", t.shape(), &[idx.len()]));
        }
        let mut data = Vec::with_capacity(rows);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::input(format!("class index {j} out of range [0, {c})")));
            }
            data.push(t.row(i)[j]);
        }
        Ok(self.push(Tensor::vector(data), Op::Pick(x, idx)))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let n_params = self.store.map_or(0, ParamStore::len);
        let mut params: Vec<Tensor> = match self.store {
            Some(s) => s.ids().map(|id| Tensor::zeros(s.get(id).shape())).collect(),
            None => Vec::new(),
        };
        debug_assert_eq!(params.len(), n_params);
        for (&id, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                params[id.index()] = g.clone();
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn backprop_node(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let g = gy.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (n, p, q) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut da = Tensor::zeros(ta.shape());
                gemm(n, q, p, g, false, tb.data(), true, 0.0, da.data_mut());
                let mut db = Tensor::zeros(tb.shape());
                gemm(p, n, q, ta.data(), true, g, false, 0.0, db.data_mut());
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::BatchMatMulNt { a, b, batch } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let batch = *batch;
                let d = ta.last_dim();
                let m = ta.outer() / batch;
                let n = tb.outer() / batch;
                let mut da = Tensor::zeros(ta.shape());
                let mut db = Tensor::zeros(tb.shape());
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ta.data()[i * m * d..(i + 1) * m * d];
                    let bi = &tb.data()[i * n * d..(i + 1) * n * d];
                    gemm(m, n, d, gi, false, bi, false, 0.0, &mut da.data_mut()[i * m * d..(i + 1) * m * d]);
                    gemm(n, m, d, gi, true, ai, false, 0.0, &mut db.data_mut()[i * n * d..(i + 1) * n * d]);
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                accumulate(grads, *a, zip_map(gy, tb, |g, b| g * b));
                accumulate(grads, *b, zip_map(gy, ta, |g, a| g * a));
            }
            Op::AddRow(x, b) => {
                let c = gy.last_dim();
                let mut db = Tensor::zeros(self.shape(*b));
                for row in g.chunks(c.max(1)) {
                    for (o, &v) in db.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, gy.clone());
                accumulate(grads, *b, db);
            }
            Op::MulRow(x, r) => {
                let tx = self.value(*x);
                let tr = self.value(*r);
                let c = gy.last_dim();
                let mut dx = gy.clone();
                let mut dr = Tensor::zeros(tr.shape());
                for (i, row) in dx.data_mut().chunks_mut(c.max(1)).enumerate() {
                    let xr = tx.row(i);
                    for j in 0..c {
                        dr.data_mut()[j] += row[j] * xr[j];
                        row[j] *= tr.data()[j];
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *r, dr);
            }
            Op::Scale(x, s) => accumulate(grads, *x, gy.map(|v| v * s)),
            Op::AddScalar(x) => accumulate(grads, *x, gy.clone()),
            Op::Exp(x) => {
                let tx = self.value(*x);
                let mut dx = zip_map(gy, y, |g, y| g * y);
                for (d, &xv) in dx.data_mut().iter_mut().zip(tx.data()) {
                    if !(-EXP_CLAMP..=EXP_CLAMP).contains(&xv) {
                        *d = 0.0;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Log(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, zip_map(gy, tx, |g, x| g / x.max(LOG_FLOOR)));
            }
            Op::Sqrt(x) => {
                accumulate(grads, *x, zip_map(gy, y, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 }));
            }
            Op::Square(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, zip_map(gy, tx, |g, x| 2.0 * g * x));
            }
            Op::Sin(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, zip_map(gy, tx, |g, x| g * x.cos()));
            }
            Op::Softplus(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, zip_map(gy, tx, |g, x| g * sigmoid(x)));
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, zip_map(gy, tx, |g, x| g * gelu_grad(x)));
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, zip_map(gy, tx, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Clamp(x, lo, hi) => {
                let tx = self.value(*x);
                let (lo, hi) = (*lo, *hi);
                accumulate(
                    grads,
                    *x,
                    zip_map(gy, tx, |g, x| if x >= lo && x <= hi { g } else { 0.0 }),
                );
            }
            Op::SumAll(x) => {
                accumulate(grads, *x, Tensor::full(self.shape(*x), g[0]));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len().max(1) as f64;
                accumulate(grads, *x, Tensor::full(self.shape(*x), g[0] / n));
            }
            Op::SumLast(x) | Op::MeanLast(x) => {
                let tx = self.value(*x);
                let q = tx.last_dim();
                let f = if matches!(node.op, Op::MeanLast(_)) {
                    1.0 / q as f64
                } else {
                    1.0
                };
                let mut dx = Tensor::zeros(tx.shape());
                for (i, row) in dx.data_mut().chunks_mut(q.max(1)).enumerate() {
                    row.fill(g[i] * f);
                }
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x, tau) => {
                let c = y.last_dim();
                let mut dx = Tensor::zeros(y.shape());
                for i in 0..y.outer() {
                    let (yr, gr) = (y.row(i), &g[i * c..(i + 1) * c]);
                    let s = dot(yr, gr);
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - s) / tau;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x, tau) => {
                let c = y.last_dim();
                let mut dx = Tensor::zeros(y.shape());
                for i in 0..y.outer() {
                    let (yr, gr) = (y.row(i), &g[i * c..(i + 1) * c]);
                    let s: f64 = gr.iter().sum();
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = (gr[j] - yr[j].exp() * s) / tau;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = y.last_dim();
                let gn = self.value(*gain).data();
                let mut dx = Tensor::zeros(y.shape());
                let mut dg = Tensor::zeros(self.shape(*gain));
                let mut db = Tensor::zeros(self.shape(*bias));
                let mut dxhat = vec![0.0; d];
                for i in 0..y.outer() {
                    let gr = &g[i * d..(i + 1) * d];
                    let xh = &xhat[i * d..(i + 1) * d];
                    for j in 0..d {
                        dxhat[j] = gr[j] * gn[j];
                        dg.data_mut()[j] += gr[j] * xh[j];
                        db.data_mut()[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dot(&dxhat, xh) / d as f64;
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = inv_std[i] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dg);
                accumulate(grads, *bias, db);
            }
            Op::L2Normalize { x, norms } => {
                let c = y.last_dim();
                let mut dx = Tensor::zeros(y.shape());
                for i in 0..y.outer() {
                    let (yr, gr) = (y.row(i), &g[i * c..(i + 1) * c]);
                    let s = dot(yr, gr);
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = (gr[j] - yr[j] * s) / norms[i];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                weights,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *shape,
                    weights,
                    g,
                );
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::Gather(x, idx) => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let c = dx.last_dim();
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in dx.row_mut(i).iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GroupMean(x, groups) => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let c = dx.last_dim();
                for (gi, members) in groups.iter().enumerate() {
                    let inv = 1.0 / members.len() as f64;
                    let gr = &g[gi * c..(gi + 1) * c];
                    for &m in members {
                        for (o, &v) in dx.row_mut(m).iter_mut().zip(gr) {
                            *o += v * inv;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let shape = self.shape(x).to_vec();
                    let n = self.value(x).len();
                    let part = Tensor::new(shape, g[off..off + n].to_vec()).expect("slice");
                    off += n;
                    accumulate(grads, x, part);
                }
            }
            Op::Reshape(x) => {
                let dx = gy.clone().reshape(self.shape(*x)).expect("reshape back");
                accumulate(grads, *x, dx);
            }
            Op::Pick(x, idx) => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (i, &j) in idx.iter().enumerate() {
                    dx.row_mut(i)[j] += g[i];
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax of `x / temperature` with max subtraction.
pub(crate) fn softmax_rows(x: &Tensor, temperature: f64) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.outer() {
        let row = out.row_mut(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - m) / temperature).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    shape: AttentionShape,
    weights: &[f64],
    g: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let AttentionShape {
        batch,
        tq,
        tk,
        heads,
    } = shape;
    let d = q.last_dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut da = vec![0.0; tk];
    for b in 0..batch {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..tq {
                let w = &weights[((b * heads + h) * tq + i) * tk..][..tk];
                let qi = (b * tq + i) * d + c0;
                let grow = &g[qi..qi + dh];
                for t in 0..tk {
                    let vi = (b * tk + t) * d + c0;
                    da[t] = dot(grow, &vd[vi..vi + dh]);
                    let dvr = &mut dv.data_mut()[vi..vi + dh];
                    for (o, &gg) in dvr.iter_mut().zip(grow) {
                        *o += w[t] * gg;
                    }
                }
                let s = dot(w, &da);
                for t in 0..tk {
                    let ds = w[t] * (da[t] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ki = (b * tk + t) * d + c0;
                    {
                        let dqr = &mut dq.data_mut()[qi..qi + dh];
                        for (o, &kk) in dqr.iter_mut().zip(&kd[ki..ki + dh]) {
                            *o += ds * kk;
                        }
                    }
                    let dkr = &mut dk.data_mut()[ki..ki + dh];
                    for (o, &qq) in dkr.iter_mut().zip(&qd[qi..qi + dh]) {
                        *o += ds * qq;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
