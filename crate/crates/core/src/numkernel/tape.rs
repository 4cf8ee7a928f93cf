//! Reverse-mode differentiation over dense rank-2 tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the records in exact reverse order
//! and accumulates gradients into the named parameters of a
//! [`ParamStore`]. Constants never receive gradients.

use std::collections::BTreeMap;

use super::tensor::{gemm, Operand};
use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for row normalization and cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Argument(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Total number of scalar coordinates.
    pub fn coordinate_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (m x n) + b (1 x n)` broadcast over rows.
    AddRow(Var, Var),
    /// `a (m x n) * c (m x 1)` broadcast over columns.
    MulCol(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// Output row `rows[k]` takes part row `k`.
    ScatterRows(Vec<(Var, Vec<usize>)>),
    SoftmaxRows(Var),
    /// Stores the clamped row norms.
    NormalizeRows(Var, Vec<f64>),
    /// Optional inclusion mask; the stored weights are the masked softmax.
    LogSumExpRows(Var, Tensor),
    SumCols(Var),
    Sum(Var),
    Softplus(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-threaded operation record with per-parameter gradient accumulators.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: BTreeMap<ParamId, Tensor>,
    degenerate_norms: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all records and zeroes every gradient accumulator.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.degenerate_norms = 0;
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Count of row norms (or cosine denominators) that were clamped to
    /// [`NORM_EPS`] since the last reset.
    pub fn degenerate_norms(&self) -> usize {
        self.degenerate_norms
    }

    /// Accumulated gradient for a parameter, if it took part in a backward pass.
    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn grads(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.grads
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.val(v).require_matrix(op)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_t")?;
        let (n, k2) = self.mat(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::dim("matmul_t", self.val(a).shape(), self.val(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Operand::new(self.val(a).data(), k, false),
            Operand::new(self.val(b).data(), k, true),
            &mut out,
            false,
        );
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::dim(op, self.val(a).shape(), self.val(b).shape()));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.val(a), self.val(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "add_row")?;
        if self.val(bias).len() != n {
            return Err(Error::dim("add_row", self.val(a).shape(), self.val(bias).shape()));
        }
        let mut out = self.val(a).clone();
        let b = self.val(bias).data();
        for r in 0..m {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, _) = self.mat(a, "mul_col")?;
        if self.val(c).len() != m {
            return Err(Error::dim("mul_col", self.val(a).shape(), self.val(c).shape()));
        }
        let mut out = self.val(a).clone();
        for r in 0..m {
            let s = self.val(c).data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::MulCol(a, c)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.val(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("concat_cols of nothing".into()))?;
        let (m, _) = self.mat(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.val(first).shape(), self.val(p).shape()));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.val(p).row(r));
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Argument("concat_rows of nothing".into()))?;
        let (_, n) = self.mat(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_rows")?;
            if pn != n {
                return Err(Error::dim("concat_rows", self.val(first).shape(), self.val(p).shape()));
            }
            out.extend_from_slice(self.val(p).data());
            m += pm;
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat(a, "slice_cols")?;
        if start > end || end > n {
            return Err(Error::Index { index: end, len: n });
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&self.val(a).row(r)[start..end]);
        }
        let out = Tensor::matrix(m, end - start, out)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(a, "gather_rows")?;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index { index: r, len: m });
            }
            out.extend_from_slice(self.val(a).row(r));
        }
        let out = Tensor::matrix(rows.len(), n, out)?;
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec())))
    }

    /// Assembles a `total_rows x n` matrix where row `rows[k]` of the output is
    /// row `k` of the corresponding part. Every output row must be covered
    /// exactly once.
    pub fn scatter_rows(&mut self, parts: &[(Var, Vec<usize>)], total_rows: usize) -> Result<Var> {
        let mut n = None;
        let mut covered = vec![false; total_rows];
        for (p, rows) in parts {
            let (pm, pn) = self.mat(*p, "scatter_rows")?;
            if pm != rows.len() {
                return Err(Error::dim("scatter_rows", self.val(*p).shape(), &[rows.len()]));
            }
            if *n.get_or_insert(pn) != pn {
                return Err(Error::dim("scatter_rows", &[n.unwrap()], &[pn]));
            }
            for &r in rows {
                if r >= total_rows {
                    return Err(Error::Index { index: r, len: total_rows });
                }
                if std::mem::replace(&mut covered[r], true) {
                    return Err(Error::Argument(format!("scatter_rows: row {r} covered twice")));
                }
            }
        }
        if let Some(r) = covered.iter().position(|c| !c) {
            return Err(Error::Argument(format!("scatter_rows: row {r} not covered")));
        }
        let n = n.unwrap_or(0);
        let mut out = Tensor::zeros(&[total_rows, n]);
        for (p, rows) in parts {
            for (k, &r) in rows.iter().enumerate() {
                out.row_mut(r).copy_from_slice(self.val(*p).row(k));
            }
        }
        Ok(self.push(out, Op::ScatterRows(parts.to_vec())))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).softmax_rows()?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// Divides each row by `max(||row||_2, NORM_EPS)`; clamped rows are counted
    /// in [`Tape::degenerate_norms`].
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.mat(a, "normalize_rows")?;
        let mut out = self.val(a).clone();
        let mut norms = Vec::with_capacity(m);
        for r in 0..m {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = if norm < NORM_EPS {
                self.degenerate_norms += 1;
                NORM_EPS
            } else {
                norm
            };
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(denom);
        }
        Ok(self.push(out, Op::NormalizeRows(a, norms)))
    }

    /// Row-wise `log sum_j exp(a_ij)` over the entries where `mask` is nonzero
    /// (all entries when `mask` is `None`). Returns an `m x 1` column.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (m, n) = self.mat(a, "logsumexp_rows")?;
        let mask = match mask {
            Some(mk) => {
                if mk.shape() != self.val(a).shape() {
                    return Err(Error::dim("logsumexp_rows", self.val(a).shape(), mk.shape()));
                }
                mk.clone()
            }
            None => Tensor::full(&[m, n], 1.0),
        };
        let mut weights = Tensor::zeros(&[m, n]);
        let mut out = Vec::with_capacity(m);
        let x = self.val(a);
        for r in 0..m {
            let (xr, kr) = (x.row(r), mask.row(r));
            let max = xr
                .iter()
                .zip(kr)
                .filter(|(_, &k)| k != 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Argument(format!("logsumexp_rows: row {r} fully masked")));
            }
            let w = weights.row_mut(r);
            let mut sum = 0.0;
            for j in 0..n {
                if kr[j] != 0.0 {
                    w[j] = (xr[j] - max).exp();
                    sum += w[j];
                }
            }
            w.iter_mut().for_each(|v| *v /= sum);
            out.push(max + sum.ln());
        }
        let out = Tensor::matrix(m, 1, out)?;
        Ok(self.push(out, Op::LogSumExpRows(a, weights)))
    }

    /// Row sums as an `m x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.mat(a, "sum_cols")?;
        let out: Vec<f64> = (0..m).map(|r| self.val(a).row(r).iter().sum()).collect();
        let out = Tensor::matrix(m, 1, out)?;
        Ok(self.push(out, Op::SumCols(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.val(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `log(1 + exp(a))`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.val(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// Weighted sum of scalars (`sum_k w_k s_k`).
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            if self.val(v).len() != 1 {
                return Err(Error::dim("weighted_sum", self.val(v).shape(), &[]));
            }
            let v = self.sum(v);
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::Argument("weighted_sum of nothing".into()))
    }

    /// Back-propagates from a one-element `loss`, accumulating into the
    /// parameter gradients. Nodes are visited in exact reverse recording order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(Error::dim("backward", self.val(loss).shape(), &[]));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::full(self.val(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match self.grads.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        self.grads.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    // dA = G B^T ; dB = A^T G
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, Operand::new(g.data(), n, false), Operand::new(bv.data(), n, true), &mut da, false);
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, Operand::new(av.data(), k, true), Operand::new(g.data(), n, false), &mut db, false);
                    accumulate(&mut adj, *a, Tensor::matrix(m, k, da)?);
                    accumulate(&mut adj, *b, Tensor::matrix(k, n, db)?);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.rows();
                    // C = A B^T: dA = G B ; dB = G^T A
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, Operand::new(g.data(), n, false), Operand::new(bv.data(), k, false), &mut da, false);
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, Operand::new(g.data(), n, true), Operand::new(av.data(), k, false), &mut db, false);
                    accumulate(&mut adj, *a, Tensor::matrix(m, k, da)?);
                    accumulate(&mut adj, *b, Tensor::matrix(n, k, db)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.map(|v| -v));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = elementwise(&g, bv, |x, y| x * y);
                    let gb = elementwise(&g, av, |x, y| x * y);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let bshape = self.nodes[b.0].value.shape().to_vec();
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (acc, &v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut adj, *b, Tensor::new(bshape, gb)?);
                    accumulate(&mut adj, *a, g);
                }
                Op::MulCol(a, c) => {
                    let (av, cv) = (&self.nodes[a.0].value, &self.nodes[c.0].value);
                    let mut ga = g.clone();
                    let mut gc = vec![0.0; cv.len()];
                    for r in 0..g.rows() {
                        let s = cv.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        gc[r] = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                    }
                    let cshape = cv.shape().to_vec();
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *c, Tensor::new(cshape, gc)?);
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    accumulate(&mut adj, *a, g.map(|v| v * f));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = &self.nodes[p.0].value;
                        let (m, w) = (pv.rows(), pv.cols());
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut adj, *p, Tensor::matrix(m, w, gp)?);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for p in parts {
                        let pv = &self.nodes[p.0].value;
                        let (m, n) = (pv.rows(), pv.cols());
                        let gp = g.data()[row * n..(row + m) * n].to_vec();
                        row += m;
                        accumulate(&mut adj, *p, Tensor::matrix(m, n, gp)?);
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(av.shape());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let av = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(av.shape());
                    for (k, &r) in rows.iter().enumerate() {
                        for (acc, &v) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::ScatterRows(parts) => {
                    for (p, rows) in parts {
                        let n = g.cols();
                        let mut gp = Vec::with_capacity(rows.len() * n);
                        for &r in rows {
                            gp.extend_from_slice(g.row(r));
                        }
                        accumulate(&mut adj, *p, Tensor::matrix(rows.len(), n, gp)?);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (&yv, &gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let denom = norms[r];
                        if denom <= NORM_EPS {
                            // clamped: y = x / eps is linear in x
                            for (o, &gv) in ga.row_mut(r).iter_mut().zip(gr) {
                                *o = gv / denom;
                            }
                        } else {
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for (o, (&yv, &gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                                *o = (gv - yv * dot) / denom;
                            }
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::LogSumExpRows(a, weights) => {
                    let mut ga = weights.clone();
                    for r in 0..ga.rows() {
                        let s = g.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SumCols(a) => {
                    let av = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(av.shape());
                    for r in 0..ga.rows() {
                        let s = g.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|v| *v = s);
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g.item();
                    let ga = Tensor::full(self.nodes[a.0].value.shape(), s);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Softplus(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = elementwise(&g, av, |gv, x| gv * sigmoid(x));
                    accumulate(&mut adj, *a, ga);
                }
            }
        }
        for (id, g) in &self.grads {
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter #{}",
                    id.index()
                )));
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| s.register(*n, t.clone()).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn quadratic_gradient() {
        let (store, ids) = store_with(&[("theta", Tensor::matrix(1, 1, vec![3.0]).unwrap())]);
        let mut tape = Tape::new();
        let t = tape.param(&store, ids[0]);
        let sq = tape.mul(t, t).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(ids[0]).unwrap().item(), 6.0);
    }

    #[test]
    fn accumulation_is_additive_and_reset_zeroes() {
        let (store, ids) = store_with(&[("w", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap())]);
        let mut tape = Tape::new();
        for _ in 0..2 {
            let w = tape.param(&store, ids[0]);
            let l = tape.sum(w);
            tape.backward(l).unwrap();
        }
        assert_eq!(tape.grad(ids[0]).unwrap().data(), &[2.0, 2.0]);
        tape.reset();
        assert!(tape.grad(ids[0]).is_none());
        assert!(tape.is_empty());
    }

    #[test]
    fn constants_get_no_gradient_slot() {
        let (store, ids) = store_with(&[("w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let w = tape.param(&store, ids[0]);
        let y = tape.matmul(x, w).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(ids[0]).unwrap().data(), &[3.0, 3.0, 4.0, 4.0]);
        assert_eq!(tape.grads().len(), 1);
    }

    #[test]
    fn zero_row_normalization_is_flagged() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let n = tape.normalize_rows(x).unwrap();
        assert_eq!(tape.degenerate_norms(), 1);
        assert_eq!(tape.value(n).data(), &[0.0, 0.0, 0.6, 0.8]);
    }

    #[test]
    fn masked_logsumexp() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let mask = Tensor::matrix(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let l = tape.logsumexp_rows(x, Some(&mask)).unwrap();
        let expected = (1f64.exp() + 3f64.exp()).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-14);
        let none = Tensor::zeros(&[1, 3]);
        assert!(tape.logsumexp_rows(x, Some(&none)).is_err());
    }

    #[test]
    fn scatter_requires_full_cover() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(tape.scatter_rows(&[(a, vec![0])], 2).is_err());
        assert!(tape.scatter_rows(&[(a, vec![1]), (a, vec![1])], 2).is_err());
        let b = tape.constant(Tensor::full(&[1, 2], 1.0));
        let s = tape.scatter_rows(&[(a, vec![1]), (b, vec![0])], 2).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
