//! Reverse-mode tape.
//!
//! Every op evaluates eagerly and pushes a node holding its value. The node
//! also records how to route an incoming adjoint back to its inputs. Inputs always have
//! smaller ids than the node consuming them, so a single reverse sweep over
//! the id range is a valid topological order.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

/// Stability epsilon used by `log`, divisions and cosine denominators.
pub const EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// In-neighbour lists in CSR form: the neighbours of target `i` are
/// `nbrs[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub offsets: Vec<usize>,
    pub nbrs: Vec<usize>,
}

impl Adjacency {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut nbrs = Vec::new();
        offsets.push(0);
        for l in lists {
            nbrs.extend_from_slice(l);
            offsets.push(nbrs.len());
        }
        Self { offsets, nbrs }
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.nbrs[self.offsets[i]..self.offsets[i + 1]]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Tensor),
    Affine(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    RowL2Normalize(Var),
    CosineSim(Var, Var),
    GatherRows(Var, Vec<usize>),
    GroupMaxRows {
        x: Var,
        argmax: Vec<usize>,
        offsets: Vec<usize>,
    },
    GroupMeanRows(Var, usize),
    LogSumExpMasked(Var, Vec<bool>),
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        lq: usize,
        lk: usize,
        probs: Vec<f64>,
    },
    SignedGat {
        wh: Var,
        a_self: Var,
        a_nbr: Var,
        adj: Arc<Adjacency>,
        slope: f64,
        pre: Vec<f64>,
        alpha: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a single forward pass. Not `Sync`: one tape per training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub(crate) fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.with(x, |t| t.map(f));
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with2(a, b, |ta, tb| {
            let (m, k) = ta.dims2("matmul")?;
            let (k2, n) = tb.dims2("matmul")?;
            if k != k2 {
                return Err(shape_err("matmul", ta, tb));
            }
            Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))
        })?;
        Ok(self.push(value, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    fn zip(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.with2(a, b, |ta, tb| {
            if ta.shape() != tb.shape() {
                return Err(shape_err(name, ta, tb));
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), self.needs(&[a, b])))
    }

    /// Broadcasts a `[1, n]` (or `[n]`) row over every row of `x[m×n]`.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let value = self.with2(x, row, |tx, tr| {
            let (m, n) = tx.dims2("add_row")?;
            if tr.numel() != n {
                return Err(shape_err("add_row", tx, tr));
            }
            let mut out = tx.clone();
            for i in 0..m {
                for (o, b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                    *o += b;
                }
            }
            Ok(out)
        })?;
        Ok(self.push(value, Op::AddRow(x, row), self.needs(&[x, row])))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&self, x: Var, c: Tensor) -> Result<Var> {
        let value = self.with(x, |tx| {
            if tx.shape() != c.shape() {
                return Err(shape_err("mul_const", tx, &c));
            }
            let data = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
            Tensor::new(tx.shape().to_vec(), data)
        })?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::MulConst(x, c), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log of `max(x, EPS)`.
    pub fn log(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(EPS).ln(), Op::Log(x))
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let value = self.with(x, |t| {
            let (m, n) = t.dims2("softmax_rows")?;
            let mut out = t.clone();
            for i in 0..m {
                softmax_in_place(&mut out.data_mut()[i * n..(i + 1) * n]);
            }
            Ok::<_, Error>(out)
        })?;
        Ok(self.push(value, Op::SoftmaxRows(x), self.needs(&[x])))
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.with(x, Tensor::sum));
        let rg = self.needs(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.with(x, |t| t.sum() / t.numel() as f64));
        let rg = self.needs(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sum across columns, `[m×n] -> [m×1]`.
    pub fn sum_rows(&self, x: Var) -> Result<Var> {
        let value = self.with(x, |t| {
            let (m, _) = t.dims2("sum_rows")?;
            let data = (0..m).map(|i| t.row_slice(i).iter().sum()).collect();
            Tensor::new(vec![m, 1], data)
        })?;
        Ok(self.push(value, Op::SumRows(x), self.needs(&[x])))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of nothing"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let (m, _) = first.dims2("concat_cols")?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                let (r, c) = t.dims2("concat_cols")?;
                if r != m {
                    return Err(shape_err("concat_cols", first, t));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * total);
            for i in 0..m {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row_slice(i));
                }
            }
            Tensor::new(vec![m, total], data)?
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), self.needs(parts)))
    }

    pub fn slice_cols(&self, x: Var, start: usize, width: usize) -> Result<Var> {
        let value = self.with(x, |t| {
            let (m, n) = t.dims2("slice_cols")?;
            if start + width > n {
                return Err(Error::Shape {
                    op: "slice_cols",
                    left: t.shape().to_vec(),
                    right: vec![start, width],
                });
            }
            let mut data = Vec::with_capacity(m * width);
            for i in 0..m {
                data.extend_from_slice(&t.row_slice(i)[start..start + width]);
            }
            Tensor::new(vec![m, width], data)
        })?;
        Ok(self.push(value, Op::SliceCols(x, start), self.needs(&[x])))
    }

    /// Inverse of [`concat_cols`](Self::concat_cols) for the given widths.
    pub fn split_cols(&self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_cols(x, start, w)?);
            start += w;
        }
        Ok(out)
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = self.with(x, Tensor::transpose)?;
        Ok(self.push(value, Op::Transpose(x), self.needs(&[x])))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.with(x, |t| t.reshaped(shape))?;
        Ok(self.push(value, Op::Reshape(x), self.needs(&[x])))
    }

    /// Each row divided by `(‖row‖ + EPS)`.
    pub fn row_l2_normalize(&self, x: Var) -> Result<Var> {
        let value = self.with(x, |t| {
            let (m, n) = t.dims2("row_l2_normalize")?;
            let mut out = t.clone();
            for i in 0..m {
                let row = &mut out.data_mut()[i * n..(i + 1) * n];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= norm + EPS);
            }
            Ok::<_, Error>(out)
        })?;
        Ok(self.push(value, Op::RowL2Normalize(x), self.needs(&[x])))
    }

    /// Cosine similarity `a·b / (‖a‖‖b‖ + EPS)`; two zero vectors give 0.
    pub fn cosine_sim(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with2(a, b, |ta, tb| {
            if ta.numel() != tb.numel() {
                return Err(shape_err("cosine_sim", ta, tb));
            }
            Ok(Tensor::scalar(cosine(ta.data(), tb.data())))
        })?;
        Ok(self.push(value, Op::CosineSim(a, b), self.needs(&[a, b])))
    }

    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.with(x, |t| {
            let (m, n) = t.dims2("gather_rows")?;
            let mut data = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                if i >= m {
                    return Err(Error::invalid(format!(
                        "gather_rows: row {i} out of range for {m} rows"
                    )));
                }
                data.extend_from_slice(t.row_slice(i));
            }
            Tensor::new(vec![idx.len(), n], data)
        })?;
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), self.needs(&[x])))
    }

    /// Column-wise max over consecutive row groups `[offsets[g], offsets[g+1])`.
    pub fn group_max_rows(&self, x: Var, offsets: &[usize]) -> Result<Var> {
        let (value, argmax) = self.with(x, |t| {
            let (m, n) = t.dims2("group_max_rows")?;
            if offsets.first() != Some(&0) || offsets.last() != Some(&m) {
                return Err(Error::invalid("group_max_rows: offsets must span all rows"));
            }
            let groups = offsets.len() - 1;
            let mut data = vec![f64::NEG_INFINITY; groups * n];
            let mut argmax = vec![0usize; groups * n];
            for g in 0..groups {
                let (lo, hi) = (offsets[g], offsets[g + 1]);
                if hi <= lo {
                    return Err(Error::invalid("group_max_rows: empty group"));
                }
                for r in lo..hi {
                    for (j, &v) in t.row_slice(r).iter().enumerate() {
                        if v > data[g * n + j] {
                            data[g * n + j] = v;
                            argmax[g * n + j] = r;
                        }
                    }
                }
            }
            Ok((Tensor::new(vec![groups, n], data)?, argmax))
        })?;
        Ok(self.push(
            value,
            Op::GroupMaxRows {
                x,
                argmax,
                offsets: offsets.to_vec(),
            },
            self.needs(&[x]),
        ))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean_rows(&self, x: Var, group: usize) -> Result<Var> {
        let value = self.with(x, |t| {
            let (m, n) = t.dims2("group_mean_rows")?;
            if group == 0 || m % group != 0 {
                return Err(Error::invalid(format!(
                    "group_mean_rows: {m} rows not divisible into groups of {group}"
                )));
            }
            let groups = m / group;
            let mut data = vec![0.0; groups * n];
            for r in 0..m {
                let g = r / group;
                for (o, v) in data[g * n..(g + 1) * n].iter_mut().zip(t.row_slice(r)) {
                    *o += v / group as f64;
                }
            }
            Tensor::new(vec![groups, n], data)
        })?;
        Ok(self.push(value, Op::GroupMeanRows(x, group), self.needs(&[x])))
    }

    /// Row-wise `log Σ_j exp(x_ij)` over entries where `mask` is set; `[m×n] -> [m×1]`.
    pub fn logsumexp_masked(&self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let value = self.with(x, |t| {
            let (m, n) = t.dims2("logsumexp_masked")?;
            if mask.len() != m * n {
                return Err(Error::invalid("logsumexp_masked: mask size mismatch"));
            }
            let mut data = Vec::with_capacity(m);
            for i in 0..m {
                let row = t.row_slice(i);
                let sel = &mask[i * n..(i + 1) * n];
                let max = row
                    .iter()
                    .zip(sel)
                    .filter(|(_, &s)| s)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::invalid(format!(
                        "logsumexp_masked: row {i} has no entries"
                    )));
                }
                let s: f64 = row
                    .iter()
                    .zip(sel)
                    .filter(|(_, &s)| s)
                    .map(|(&v, _)| (v - max).exp())
                    .sum();
                data.push(max + s.ln());
            }
            Tensor::new(vec![m, 1], data)
        })?;
        Ok(self.push(value, Op::LogSumExpMasked(x, mask), self.needs(&[x])))
    }

    /// Multi-head scaled dot-product attention over independent blocks.
    ///
    /// `q` is `[blocks·lq × D]`, `k` and `v` are `[blocks·lk × D]`; the
    /// columns split into `heads` groups of `D / heads` and each block
    /// attends only within itself with scale `1/√(D/heads)`.
    pub fn block_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        lq: usize,
        lk: usize,
    ) -> Result<Var> {
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let (mq, d) = tq.dims2("block_attention")?;
            let (mk, dk) = tk.dims2("block_attention")?;
            if tk.shape() != tv.shape() || dk != d {
                return Err(shape_err("block_attention", tk, tv));
            }
            if heads == 0
                || d % heads != 0
                || lq == 0
                || lk == 0
                || mq % lq != 0
                || mk % lk != 0
                || mq / lq != mk / lk
            {
                return Err(Error::Shape {
                    op: "block_attention",
                    left: tq.shape().to_vec(),
                    right: tk.shape().to_vec(),
                });
            }
            let blocks = mq / lq;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
            let mut out = vec![0.0; mq * d];
            let mut probs = vec![0.0; blocks * heads * lq * lk];
            let mut scores = vec![0.0; lk];
            for b in 0..blocks {
                for h in 0..heads {
                    let c0 = h * dh;
                    for i in 0..lq {
                        let qi = &qd[(b * lq + i) * d + c0..(b * lq + i) * d + c0 + dh];
                        for (j, s) in scores.iter_mut().enumerate() {
                            let kj = &kd[(b * lk + j) * d + c0..(b * lk + j) * d + c0 + dh];
                            *s = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                        }
                        softmax_in_place(&mut scores);
                        let p_base = ((b * heads + h) * lq + i) * lk;
                        probs[p_base..p_base + lk].copy_from_slice(&scores);
                        let o = &mut out[(b * lq + i) * d + c0..(b * lq + i) * d + c0 + dh];
                        for (j, &p) in scores.iter().enumerate() {
                            let vj = &vd[(b * lk + j) * d + c0..(b * lk + j) * d + c0 + dh];
                            for (oc, vc) in o.iter_mut().zip(vj) {
                                *oc += p * vc;
                            }
                        }
                    }
                }
            }
            (Tensor::new(vec![mq, d], out)?, probs)
        };
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            value,
            Op::BlockAttention {
                q,
                k,
                v,
                heads,
                lq,
                lk,
                probs,
            },
            rg,
        ))
    }

    /// Signed graph attention aggregation.
    ///
    /// `wh` is `[N × H·dh]` (already projected), `a_self`/`a_nbr` are `[H × dh]`.
    /// For target `i`, head `h` and in-neighbour `j`:
    /// `e = leaky(a_self·wh_i + a_nbr·wh_j)`,
    /// `α = sign(e) · softmax_j(|e|)` with `sign(0) = +1`,
    /// `out_i = Σ_j α · wh_j`.
    pub fn signed_gat(
        &self,
        wh: Var,
        a_self: Var,
        a_nbr: Var,
        adj: Arc<Adjacency>,
        slope: f64,
    ) -> Result<Var> {
        let (value, pre, alpha, probs) = {
            let nodes = self.nodes.borrow();
            let (tw, ts, tn) = (
                &nodes[wh.0].value,
                &nodes[a_self.0].value,
                &nodes[a_nbr.0].value,
            );
            let (n, width) = tw.dims2("signed_gat")?;
            let (heads, dh) = ts.dims2("signed_gat")?;
            if ts.shape() != tn.shape() || heads * dh != width {
                return Err(shape_err("signed_gat", tw, ts));
            }
            if adj.node_count() != n {
                return Err(Error::invalid(format!(
                    "signed_gat: adjacency has {} nodes, features have {n}",
                    adj.node_count()
                )));
            }
            let (wd, sd, nd) = (tw.data(), ts.data(), tn.data());
            // per-node, per-head projections onto a_self and a_nbr
            let mut self_score = vec![0.0; n * heads];
            let mut nbr_score = vec![0.0; n * heads];
            for i in 0..n {
                for h in 0..heads {
                    let w = &wd[i * width + h * dh..i * width + (h + 1) * dh];
                    self_score[i * heads + h] = w
                        .iter()
                        .zip(&sd[h * dh..(h + 1) * dh])
                        .map(|(a, b)| a * b)
                        .sum();
                    nbr_score[i * heads + h] = w
                        .iter()
                        .zip(&nd[h * dh..(h + 1) * dh])
                        .map(|(a, b)| a * b)
                        .sum();
                }
            }
            let edges = adj.nbrs.len();
            let mut pre = vec![0.0; edges * heads];
            let mut alpha = vec![0.0; edges * heads];
            let mut probs = vec![0.0; edges * heads];
            let mut out = vec![0.0; n * width];
            let mut buf = Vec::new();
            for i in 0..n {
                let (lo, hi) = (adj.offsets[i], adj.offsets[i + 1]);
                if hi == lo {
                    return Err(Error::invalid(format!(
                        "signed_gat: node {i} has no in-edges"
                    )));
                }
                for h in 0..heads {
                    buf.clear();
                    for e in lo..hi {
                        let j = adj.nbrs[e];
                        let p = self_score[i * heads + h] + nbr_score[j * heads + h];
                        pre[e * heads + h] = p;
                        let act = if p > 0.0 { p } else { slope * p };
                        buf.push(act.abs());
                    }
                    softmax_in_place(&mut buf);
                    for (off, e) in (lo..hi).enumerate() {
                        let sign = if pre[e * heads + h] < 0.0 { -1.0 } else { 1.0 };
                        probs[e * heads + h] = buf[off];
                        alpha[e * heads + h] = sign * buf[off];
                        let j = adj.nbrs[e];
                        let a = alpha[e * heads + h];
                        let src = &wd[j * width + h * dh..j * width + (h + 1) * dh];
                        let dst = &mut out[i * width + h * dh..i * width + (h + 1) * dh];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += a * s;
                        }
                    }
                }
            }
            (Tensor::new(vec![n, width], out)?, pre, alpha, probs)
        };
        let rg = self.needs(&[wh, a_self, a_nbr]);
        Ok(self.push(
            value,
            Op::SignedGat {
                wh,
                a_self,
                a_nbr,
                adj,
                slope,
                pre,
                alpha,
                probs,
            },
            rg,
        ))
    }

    /// Attention coefficients of the most recent `signed_gat` node `out`,
    /// laid out `[edge][head]` in adjacency order.
    pub fn gat_coefficients(&self, out: Var) -> Option<Vec<f64>> {
        match &self.nodes.borrow()[out.0].op {
            Op::SignedGat { alpha, .. } => Some(alpha.clone()),
            _ => None,
        }
    }

    /// Inverted dropout: in training mode keeps each entry with probability
    /// `1 - rate` and rescales survivors; identity otherwise.
    pub fn dropout<R: Rng>(&self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !training || rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x);
        let mask = dropout_mask(&shape, rate, rng);
        self.mul_const(x, mask)
    }

    /// Smallest distance from a trainable input of a non-smooth op to the
    /// point where that op is not differentiable.
    ///
    /// Covers `relu`, `leaky_relu` and the signed GAT scores (distance to
    /// zero), `clamp` (distance to either bound) and `group_max_rows` (gap
    /// between the largest and the runner-up in a group; exact ties are
    /// plateaus and are ignored). Returns infinity when no such op depends
    /// on a parameter.
    pub fn kink_margin(&self) -> f64 {
        let nodes = self.nodes.borrow();
        let mut margin = f64::INFINITY;
        let mut note = |d: f64| margin = margin.min(d);
        for node in nodes.iter().filter(|n| n.requires_grad) {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    nodes[x.0].value.data().iter().for_each(|v| note(v.abs()))
                }
                Op::Clamp(x, lo, hi) => nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .for_each(|v| note((v - lo).abs().min((v - hi).abs()))),
                Op::SignedGat { pre, .. } => pre.iter().for_each(|v| note(v.abs())),
                Op::GroupMaxRows { x, offsets, .. } => {
                    let t = &nodes[x.0].value;
                    let n = t.cols();
                    for g in offsets.windows(2) {
                        for j in 0..n {
                            let (mut best, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                            for r in g[0]..g[1] {
                                let v = t.get(r, j);
                                if v > best {
                                    second = best;
                                    best = v;
                                } else if v > second {
                                    second = v;
                                }
                            }
                            let gap = best - second;
                            if gap > 0.0 && gap.is_finite() {
                                note(gap);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub fn dropout_mask<R: Rng>(shape: &[usize], rate: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 - rate;
    let mut mask = Tensor::zeros(shape);
    for m in mask.data_mut() {
        if rng.gen::<f64>() < keep {
            *m = 1.0 / keep;
        }
    }
    mask
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + EPS)
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("same numel as source")
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = ta.dims2("matmul")?;
            let (_, n) = tb.dims2("matmul")?;
            if nodes[a.0].requires_grad {
                accumulate(
                    nodes,
                    grads,
                    *a,
                    like(ta, matmul_nt_raw(gd, tb.data(), m, n, k)),
                );
            }
            if nodes[b.0].requires_grad {
                accumulate(
                    nodes,
                    grads,
                    *b,
                    like(tb, matmul_tn_raw(ta.data(), gd, m, k, n)),
                );
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            accumulate(
                nodes,
                grads,
                *a,
                like(ta, gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect()),
            );
            accumulate(
                nodes,
                grads,
                *b,
                like(tb, gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect()),
            );
        }
        Op::AddRow(x, row) => {
            accumulate(nodes, grads, *x, g.clone());
            let tr = val(*row);
            let n = tr.numel();
            let mut acc = vec![0.0; n];
            for chunk in gd.chunks(n) {
                for (a, v) in acc.iter_mut().zip(chunk) {
                    *a += v;
                }
            }
            accumulate(nodes, grads, *row, like(tr, acc));
        }
        Op::MulConst(x, c) => {
            accumulate(
                nodes,
                grads,
                *x,
                like(c, gd.iter().zip(c.data()).map(|(a, b)| a * b).collect()),
            );
        }
        Op::Affine(x, s) => accumulate(nodes, grads, *x, g.map(|v| v * s)),
        Op::Relu(x) => {
            let tx = val(*x);
            let d = gd
                .iter()
                .zip(tx.data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, like(tx, d));
        }
        Op::LeakyRelu(x, slope) => {
            let tx = val(*x);
            let d = gd
                .iter()
                .zip(tx.data())
                .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                .collect();
            accumulate(nodes, grads, *x, like(tx, d));
        }
        Op::Tanh(x) => {
            let d = gd
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            accumulate(nodes, grads, *x, like(out, d));
        }
        Op::Exp(x) => {
            let d = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
            accumulate(nodes, grads, *x, like(out, d));
        }
        Op::Log(x) => {
            let tx = val(*x);
            let d = gd
                .iter()
                .zip(tx.data())
                .map(|(g, &v)| if v > EPS { g / v } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, like(tx, d));
        }
        Op::Clamp(x, lo, hi) => {
            let tx = val(*x);
            let d = gd
                .iter()
                .zip(tx.data())
                .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, like(tx, d));
        }
        Op::SoftmaxRows(x) => {
            let (m, n) = out.dims2("softmax_rows")?;
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                let y = out.row_slice(i);
                let gr = &gd[i * n..(i + 1) * n];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    d[i * n + j] = y[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *x, like(out, d));
        }
        Op::Sum(x) => {
            let tx = val(*x);
            accumulate(nodes, grads, *x, Tensor::full(tx.shape(), gd[0]));
        }
        Op::Mean(x) => {
            let tx = val(*x);
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::full(tx.shape(), gd[0] / tx.numel() as f64),
            );
        }
        Op::SumRows(x) => {
            let tx = val(*x);
            let (m, n) = tx.dims2("sum_rows")?;
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                d[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = gd[i]);
            }
            accumulate(nodes, grads, *x, like(tx, d));
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut start = 0;
            for p in parts {
                let tp = val(*p);
                let (m, w) = tp.dims2("concat_cols")?;
                if nodes[p.0].requires_grad {
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&gd[i * total + start..i * total + start + w]);
                    }
                    accumulate(nodes, grads, *p, like(tp, d));
                }
                start += w;
            }
        }
        Op::SliceCols(x, start) => {
            let tx = val(*x);
            let (m, n) = tx.dims2("slice_cols")?;
            let w = out.cols();
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                d[i * n + start..i * n + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
            }
            accumulate(nodes, grads, *x, like(tx, d));
        }
        Op::Transpose(x) => accumulate(nodes, grads, *x, g.transpose()?),
        Op::Reshape(x) => {
            let tx = val(*x);
            accumulate(nodes, grads, *x, like(tx, gd.to_vec()));
        }
        Op::RowL2Normalize(x) => {
            let tx = val(*x);
            let (m, n) = tx.dims2("row_l2_normalize")?;
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                let xr = tx.row_slice(i);
                let gr = &gd[i * n..(i + 1) * n];
                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let denom = norm + EPS;
                let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    let radial = if norm > 0.0 {
                        xr[j] * gx / (norm * denom * denom)
                    } else {
                        0.0
                    };
                    d[i * n + j] = gr[j] / denom - radial;
                }
            }
            accumulate(nodes, grads, *x, like(tx, d));
        }
        Op::CosineSim(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (ad, bd) = (ta.data(), tb.data());
            let dot: f64 = ad.iter().zip(bd).map(|(x, y)| x * y).sum();
            let na = ad.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = bd.iter().map(|x| x * x).sum::<f64>().sqrt();
            let den = na * nb + EPS;
            let s = gd[0];
            let grad_for = |own: &[f64], other: &[f64], n_own: f64, n_other: f64| -> Vec<f64> {
                own.iter()
                    .zip(other)
                    .map(|(&o, &t)| {
                        let radial = if n_own > 0.0 {
                            dot * n_other * o / (n_own * den * den)
                        } else {
                            0.0
                        };
                        s * (t / den - radial)
                    })
                    .collect()
            };
            accumulate(nodes, grads, *a, like(ta, grad_for(ad, bd, na, nb)));
            accumulate(nodes, grads, *b, like(tb, grad_for(bd, ad, nb, na)));
        }
        Op::GatherRows(x, idx) => {
            let tx = val(*x);
            let (m, n) = tx.dims2("gather_rows")?;
            let mut d = vec![0.0; m * n];
            for (r, &i) in idx.iter().enumerate() {
                for (o, v) in d[i * n..(i + 1) * n]
                    .iter_mut()
                    .zip(&gd[r * n..(r + 1) * n])
                {
                    *o += v;
                }
            }
            accumulate(nodes, grads, *x, like(tx, d));
        }
        Op::GroupMaxRows { x, argmax, .. } => {
            let tx = val(*x);
            let (m, n) = tx.dims2("group_max_rows")?;
            let mut d = vec![0.0; m * n];
            for (pos, &r) in argmax.iter().enumerate() {
                d[r * n + pos % n] += gd[pos];
            }
            accumulate(nodes, grads, *x, like(tx, d));
        }
        Op::GroupMeanRows(x, group) => {
            let tx = val(*x);
            let (m, n) = tx.dims2("group_mean_rows")?;
            let mut d = vec![0.0; m * n];
            for r in 0..m {
                let gidx = r / group;
                for (o, v) in d[r * n..(r + 1) * n]
                    .iter_mut()
                    .zip(&gd[gidx * n..(gidx + 1) * n])
                {
                    *o = v / *group as f64;
                }
            }
            accumulate(nodes, grads, *x, like(tx, d));
        }
        Op::LogSumExpMasked(x, mask) => {
            let tx = val(*x);
            let (m, n) = tx.dims2("logsumexp_masked")?;
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                let lse = out.data()[i];
                for j in 0..n {
                    if mask[i * n + j] {
                        d[i * n + j] = gd[i] * (tx.get(i, j) - lse).exp();
                    }
                }
            }
            accumulate(nodes, grads, *x, like(tx, d));
        }
        Op::BlockAttention {
            q,
            k,
            v,
            heads,
            lq,
            lk,
            probs,
        } => {
            let (tq, tk, tv) = (val(*q), val(*k), val(*v));
            let (mq, d) = tq.dims2("block_attention")?;
            let (mk, _) = tk.dims2("block_attention")?;
            let (heads, lq, lk) = (*heads, *lq, *lk);
            let blocks = mq / lq;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
            let mut dq = vec![0.0; mq * d];
            let mut dk = vec![0.0; mk * d];
            let mut dv = vec![0.0; mk * d];
            let mut dp = vec![0.0; lk];
            for b in 0..blocks {
                for h in 0..heads {
                    let c0 = h * dh;
                    for i in 0..lq {
                        let qrow = (b * lq + i) * d + c0;
                        let gi = &gd[qrow..qrow + dh];
                        let p = &probs
                            [((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                        for j in 0..lk {
                            let vrow = (b * lk + j) * d + c0;
                            dp[j] = gi
                                .iter()
                                .zip(&vd[vrow..vrow + dh])
                                .map(|(x, y)| x * y)
                                .sum();
                            for c in 0..dh {
                                dv[vrow + c] += p[j] * gi[c];
                            }
                        }
                        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for j in 0..lk {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = (b * lk + j) * d + c0;
                            for c in 0..dh {
                                dq[qrow + c] += ds * kd[krow + c];
                                dk[krow + c] += ds * qd[qrow + c];
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, *q, like(tq, dq));
            accumulate(nodes, grads, *k, like(tk, dk));
            accumulate(nodes, grads, *v, like(tv, dv));
        }
        Op::SignedGat {
            wh,
            a_self,
            a_nbr,
            adj,
            slope,
            pre,
            alpha,
            probs,
        } => {
            let (tw, ts, tn) = (val(*wh), val(*a_self), val(*a_nbr));
            let (n, width) = tw.dims2("signed_gat")?;
            let (heads, dh) = ts.dims2("signed_gat")?;
            let (wd, sd, nd) = (tw.data(), ts.data(), tn.data());
            let mut dw = vec![0.0; n * width];
            let mut ds = vec![0.0; heads * dh];
            let mut dn = vec![0.0; heads * dh];
            let mut dalpha = Vec::new();
            for i in 0..n {
                let (lo, hi) = (adj.offsets[i], adj.offsets[i + 1]);
                for h in 0..heads {
                    let gi = &gd[i * width + h * dh..i * width + (h + 1) * dh];
                    dalpha.clear();
                    for e in lo..hi {
                        let j = adj.nbrs[e];
                        let wj = j * width + h * dh;
                        dalpha.push(
                            gi.iter()
                                .zip(&wd[wj..wj + dh])
                                .map(|(a, b)| a * b)
                                .sum::<f64>(),
                        );
                        let a = alpha[e * heads + h];
                        for c in 0..dh {
                            dw[wj + c] += a * gi[c];
                        }
                    }
                    // α = s·p, so dp = s·dα and |e| carries the softmax adjoint.
                    let mut dot = 0.0;
                    for (off, e) in (lo..hi).enumerate() {
                        let sgn = if pre[e * heads + h] < 0.0 { -1.0 } else { 1.0 };
                        dalpha[off] *= sgn;
                        dot += probs[e * heads + h] * dalpha[off];
                    }
                    for (off, e) in (lo..hi).enumerate() {
                        let p = pre[e * heads + h];
                        let sgn = if p < 0.0 { -1.0 } else { 1.0 };
                        let du = probs[e * heads + h] * (dalpha[off] - dot);
                        let dpre = sgn * du * if p > 0.0 { 1.0 } else { *slope };
                        if dpre == 0.0 {
                            continue;
                        }
                        let j = adj.nbrs[e];
                        let wi = i * width + h * dh;
                        let wj = j * width + h * dh;
                        for c in 0..dh {
                            dw[wi + c] += dpre * sd[h * dh + c];
                            dw[wj + c] += dpre * nd[h * dh + c];
                            ds[h * dh + c] += dpre * wd[wi + c];
                            dn[h * dh + c] += dpre * wd[wj + c];
                        }
                    }
                }
            }
            accumulate(nodes, grads, *wh, like(tw, dw));
            accumulate(nodes, grads, *a_self, like(ts, ds));
            accumulate(nodes, grads, *a_nbr, like(tn, dn));
        }
    }
    Ok(())
}
