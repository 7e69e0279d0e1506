//! Reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Tape`] records every operation in execution order, so the node list
//! is already topologically sorted; `backward` walks it once in reverse.

use std::collections::HashMap;
use std::rc::Rc;

use super::param::{ParamId, ParamStore};
use super::tensor::{gemm, gemm_strided, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row ranges of queries and keys for block-diagonal attention: segment `i`
/// of the queries attends only to segment `i` of the keys.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub q_segments: Vec<(usize, usize)>,
    pub k_segments: Vec<(usize, usize)>,
    pub causal: bool,
}

impl AttnLayout {
    pub fn self_attention(segments: Vec<(usize, usize)>, causal: bool) -> Self {
        AttnLayout {
            q_segments: segments.clone(),
            k_segments: segments,
            causal,
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttnLayout>, heads: usize, probs: Vec<Vec<f64>> },
    Mmd { q: Var, prior: Tensor, bandwidth_sq: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LN_EPS: f64 = 1e-5;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax in place.
pub fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Layer norm of each row; returns (normalized, rstd) for reuse in backward.
pub fn layer_norm_rows(x: &[f64], cols: usize, gain: &[f64], bias: &[f64], out: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        rstds.push(rstd);
        for c in 0..cols {
            let h = (row[c] - mean) * rstd;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (xhat, rstds)
}

/// Block-diagonal multi-head scaled dot-product attention. Returns the
/// output and the attention probabilities per (segment, head).
pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, layout: &AttnLayout, heads: usize) -> (Tensor, Vec<Vec<f64>>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[q.rows(), d]);
    let mut all_probs = Vec::with_capacity(layout.q_segments.len() * heads);
    for (&(qs, ql), &(ks, kl)) in layout.q_segments.iter().zip(&layout.k_segments) {
        for h in 0..heads {
            let mut scores = vec![0.0; ql * kl];
            // SAFETY: blocks lie within q/k/out by construction of the layout.
            gemm_strided(
                ql,
                dh,
                kl,
                unsafe { q.data().as_ptr().add(qs * d + h * dh) },
                d as isize,
                1,
                unsafe { k.data().as_ptr().add(ks * d + h * dh) },
                1,
                d as isize,
                0.0,
                scores.as_mut_ptr(),
                kl as isize,
                1,
            );
            for (i, row) in scores.chunks_mut(kl).enumerate() {
                for (j, s) in row.iter_mut().enumerate() {
                    *s *= scale;
                    if layout.causal && j + ql > i + kl {
                        *s = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(&mut scores, kl);
            gemm_strided(
                ql,
                kl,
                dh,
                scores.as_ptr(),
                kl as isize,
                1,
                unsafe { v.data().as_ptr().add(ks * d + h * dh) },
                d as isize,
                1,
                0.0,
                unsafe { out.data_mut().as_mut_ptr().add(qs * d + h * dh) },
                d as isize,
                1,
            );
            all_probs.push(scores);
        }
    }
    (out, all_probs)
}

/// Gaussian kernel `exp(-|a-b|^2 / (2 bw))` between all rows of `a` and `b`.
fn gaussian_gram(a: &Tensor, b: &Tensor, bandwidth_sq: f64) -> Vec<f64> {
    let (n, m, d) = (a.rows(), b.rows(), a.cols());
    let mut dots = vec![0.0; n * m];
    gemm(n, d, m, a.data(), false, b.data(), true, &mut dots, false);
    let na: Vec<f64> = (0..n).map(|i| a.row(i).iter().map(|x| x * x).sum()).collect();
    let nb: Vec<f64> = (0..m).map(|j| b.row(j).iter().map(|x| x * x).sum()).collect();
    for i in 0..n {
        for j in 0..m {
            let d2 = (na[i] + nb[j] - 2.0 * dots[i * m + j]).max(0.0);
            dots[i * m + j] = (-d2 / (2.0 * bandwidth_sq)).exp();
        }
    }
    dots
}

fn mean_offdiag(gram: &[f64], n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += gram[i * n + j];
            }
        }
    }
    s / (n * (n - 1)) as f64
}

/// Unbiased (U-statistic) squared MMD with a Gaussian kernel.
pub fn mmd_value(q: &Tensor, p: &Tensor, bandwidth_sq: f64) -> f64 {
    let (n, m) = (q.rows(), p.rows());
    let kqq = gaussian_gram(q, q, bandwidth_sq);
    let kpp = gaussian_gram(p, p, bandwidth_sq);
    let kqp = gaussian_gram(q, p, bandwidth_sq);
    mean_offdiag(&kqq, n) + mean_offdiag(&kpp, m) - 2.0 * kqp.iter().sum::<f64>() / (n * m) as f64
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable free input (used by gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err(format!("matmul {:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err(format!("matmul_t {:?} x {:?}ᵀ", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a bias row (`[cols]` or `[1, cols]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err(format!("add_row {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        let cols = ta.cols();
        for row in out.data_mut().chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let ta = self.value(a);
        let data = ta.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu_scalar, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        let cols = t.cols();
        softmax_rows(out.data_mut(), cols);
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(shape_err(format!("layer_norm over {cols} columns")));
        }
        let mut out = Tensor::zeros(tx.shape());
        let (xhat, rstd) = layer_norm_rows(tx.data(), cols, self.value(gain).data(), self.value(bias).data(), out.data_mut());
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(shape_err(format!("embedding id {id} >= {rows}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), cols, data)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Mean token cross-entropy of row-wise logits against target ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if rows != targets.len() || rows == 0 {
            return Err(shape_err(format!("cross_entropy: {rows} rows, {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= cols) {
            return Err(shape_err(format!("target {bad} >= {cols} classes")));
        }
        let mut probs = t.data().to_vec();
        softmax_rows(&mut probs, cols);
        let mut loss = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            // log-sum-exp form keeps large-margin logits exact.
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= rows as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or_else(|| shape_err("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err(format!("concat_rows: {} vs {cols} columns", t.cols())));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(shape_err(format!("slice_rows {start}+{len} > {}", t.rows())));
        }
        let cols = t.cols();
        let out = Tensor::matrix(len, cols, t.data()[start * cols..(start + len) * cols].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= t.rows() {
                return Err(shape_err(format!("gather row {r} >= {}", t.rows())));
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::matrix(rows.len(), cols, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttnLayout>, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if heads == 0 || d % heads != 0 || tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(shape_err(format!(
                "attention q{:?} k{:?} v{:?} heads {heads}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if layout.q_segments.len() != layout.k_segments.len() {
            return Err(shape_err("attention segment count mismatch".into()));
        }
        for (&(qs, ql), &(ks, kl)) in layout.q_segments.iter().zip(&layout.k_segments) {
            if qs + ql > tq.rows() || ks + kl > tk.rows() || kl == 0 || (layout.causal && kl < ql) {
                return Err(shape_err(format!("attention segment ({qs},{ql}) / ({ks},{kl})")));
            }
        }
        let (out, probs) = attention_forward(tq, tk, tv, &layout, heads);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, layout, heads, probs }, rg))
    }

    /// Unbiased Gaussian-kernel MMD² between the rows of `q` and fixed `prior` samples.
    pub fn mmd(&mut self, q: Var, prior: Tensor, bandwidth_sq: f64) -> Result<Var> {
        let tq = self.value(q);
        if tq.cols() != prior.cols() || tq.rows() == 0 || prior.rows() == 0 {
            return Err(shape_err(format!("mmd {:?} vs {:?}", tq.shape(), prior.shape())));
        }
        let value = mmd_value(tq, &prior, bandwidth_sq);
        let rg = self.rg(q);
        Ok(self.push(Tensor::scalar(value), Op::Mmd { q, prior, bandwidth_sq }, rg))
    }

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds parameter gradients from the last `backward` into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    acc(*a, Tensor::new(ta.shape().to_vec(), da).unwrap(), grads);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    acc(*b, Tensor::new(tb.shape().to_vec(), db).unwrap(), grads);
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), false, &mut da, false);
                    acc(*a, Tensor::new(ta.shape().to_vec(), da).unwrap(), grads);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, ta.data(), false, &mut db, false);
                    acc(*b, Tensor::new(tb.shape().to_vec(), db).unwrap(), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone(), grads);
                if self.rg(*bias) {
                    let tb = self.value(*bias);
                    let mut db = Tensor::zeros(tb.shape());
                    let cols = tb.cols();
                    for row in g.data().chunks(cols) {
                        for (d, x) in db.data_mut().iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(*bias, db, grads);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                acc(*a, Tensor::new(ta.shape().to_vec(), da).unwrap(), grads);
                acc(*b, Tensor::new(tb.shape().to_vec(), db).unwrap(), grads);
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|x| x * c).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d).unwrap(), grads);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d).unwrap(), grads);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d).unwrap(), grads);
            }
            Op::Exp(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d).unwrap(), grads);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(g, x)| g / x).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d).unwrap(), grads);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.data().chunks(cols)).zip(g.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, Tensor::new(y.shape().to_vec(), d).unwrap(), grads);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = self.value(*gain);
                let cols = tg.len();
                let rows = xhat.len() / cols;
                let mut dx = vec![0.0; xhat.len()];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..cols {
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        dxhat[c] = gr[c] * tg.data()[c];
                        m1 += dxhat[c];
                        m2 += dxhat[c] * hr[c];
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = rstd[r] * (dxhat[c] - m1 - hr[c] * m2);
                    }
                }
                acc(*x, Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(), grads);
                acc(*gain, Tensor::new(tg.shape().to_vec(), dgain).unwrap(), grads);
                acc(*bias, Tensor::new(self.value(*bias).shape().to_vec(), dbias).unwrap(), grads);
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let cols = tt.cols();
                let mut d = Tensor::zeros(tt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * cols..(r + 1) * cols];
                    for (x, s) in d.row_mut(id).iter_mut().zip(src) {
                        *x += s;
                    }
                }
                acc(*table, d, grads);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let tl = self.value(*logits);
                let (rows, cols) = (tl.rows(), tl.cols());
                let scale = g.item() / rows as f64;
                let mut d = probs.clone();
                for (r, &y) in targets.iter().enumerate() {
                    d[r * cols + y] -= 1.0;
                }
                d.iter_mut().for_each(|x| *x *= scale);
                acc(*logits, Tensor::new(tl.shape().to_vec(), d).unwrap(), grads);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.len();
                    acc(p, Tensor::new(tp.shape().to_vec(), g.data()[offset..offset + n].to_vec()).unwrap(), grads);
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut d = Tensor::zeros(tx.shape());
                d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                acc(*x, d, grads);
            }
            Op::GatherRows { x, rows } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut d = Tensor::zeros(tx.shape());
                for (i, &r) in rows.iter().enumerate() {
                    for (dst, s) in d.row_mut(r).iter_mut().zip(&g.data()[i * cols..(i + 1) * cols]) {
                        *dst += s;
                    }
                }
                acc(*x, d, grads);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                acc(*a, Tensor::full(ta.shape(), g.item()), grads);
            }
            Op::Attention { q, k, v, layout, heads, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, *heads, probs, g);
                acc(*q, dq, grads);
                acc(*k, dk, grads);
                acc(*v, dv, grads);
            }
            Op::Mmd { q, prior, bandwidth_sq } => {
                let tq = self.value(*q);
                let (n, m, d) = (tq.rows(), prior.rows(), tq.cols());
                let kqq = gaussian_gram(tq, tq, *bandwidth_sq);
                let kqp = gaussian_gram(tq, prior, *bandwidth_sq);
                let mut dq = Tensor::zeros(tq.shape());
                let cqq = if n >= 2 { 2.0 / (n * (n - 1)) as f64 } else { 0.0 };
                let cqp = 2.0 / (n * m) as f64;
                let s = g.item() / bandwidth_sq;
                for i in 0..n {
                    let qi = tq.row(i);
                    let mut row = vec![0.0; d];
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let kij = kqq[i * n + j];
                        for (c, r) in row.iter_mut().enumerate() {
                            *r -= cqq * kij * (qi[c] - tq.row(j)[c]);
                        }
                    }
                    for j in 0..m {
                        let kij = kqp[i * m + j];
                        for (c, r) in row.iter_mut().enumerate() {
                            *r += cqp * kij * (qi[c] - prior.row(j)[c]);
                        }
                    }
                    for (dst, r) in dq.row_mut(i).iter_mut().zip(row) {
                        *dst = r * s;
                    }
                }
                acc(*q, dq, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        heads: usize,
        probs: &[Vec<f64>],
        g: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(tq.shape());
        let mut dk = Tensor::zeros(tk.shape());
        let mut dv = Tensor::zeros(tv.shape());
        let mut idx = 0;
        for (&(qs, ql), &(ks, kl)) in layout.q_segments.iter().zip(&layout.k_segments) {
            for h in 0..heads {
                let p = &probs[idx];
                idx += 1;
                let go = unsafe { g.data().as_ptr().add(qs * d + h * dh) };
                // dV += Pᵀ dO
                gemm_strided(
                    kl,
                    ql,
                    dh,
                    p.as_ptr(),
                    1,
                    kl as isize,
                    go,
                    d as isize,
                    1,
                    1.0,
                    unsafe { dv.data_mut().as_mut_ptr().add(ks * d + h * dh) },
                    d as isize,
                    1,
                );
                // dP = dO Vᵀ
                let mut dp = vec![0.0; ql * kl];
                gemm_strided(
                    ql,
                    dh,
                    kl,
                    go,
                    d as isize,
                    1,
                    unsafe { tv.data().as_ptr().add(ks * d + h * dh) },
                    1,
                    d as isize,
                    0.0,
                    dp.as_mut_ptr(),
                    kl as isize,
                    1,
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), pre-scaled.
                for (dpr, pr) in dp.chunks_mut(kl).zip(p.chunks(kl)) {
                    let dot: f64 = dpr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (x, &pv) in dpr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                // dQ += dS K
                gemm_strided(
                    ql,
                    kl,
                    dh,
                    dp.as_ptr(),
                    kl as isize,
                    1,
                    unsafe { tk.data().as_ptr().add(ks * d + h * dh) },
                    d as isize,
                    1,
                    1.0,
                    unsafe { dq.data_mut().as_mut_ptr().add(qs * d + h * dh) },
                    d as isize,
                    1,
                );
                // dK += dSᵀ Q
                gemm_strided(
                    kl,
                    ql,
                    dh,
                    dp.as_ptr(),
                    1,
                    kl as isize,
                    unsafe { tq.data().as_ptr().add(qs * d + h * dh) },
                    d as isize,
                    1,
                    1.0,
                    unsafe { dk.data_mut().as_mut_ptr().add(ks * d + h * dh) },
                    d as isize,
                    1,
                );
            }
        }
        (dq, dk, dv)
    }
}
