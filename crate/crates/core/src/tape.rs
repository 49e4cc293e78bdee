//! Reverse-mode automatic differentiation over an explicit recorded graph.
//!
//! Operations append nodes to a [`Tape`]; nodes are therefore topologically
//! ordered by construction and `backward` visits each exactly once, in
//! reverse. Values are dense [`Tensor`]s; a graph is confined to one logical
//! thread.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// C = A · B
    Matmul { a: Var, b: Var },
    /// C = A · Bᵀ (linear layers store weights as [out, in])
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    /// y[i] = a[i] + row
    AddRowBroadcast { a: Var, row: Var },
    /// y[i] = a[i] ⊙ row
    MulRowBroadcast { a: Var, row: Var },
    /// y = a + k, k constant (no gradient path)
    AddConst { a: Var },
    Gelu { a: Var },
    /// Per-row mean-0 variance-1 standardization.
    StandardizeRows { a: Var },
    SoftmaxRows { a: Var },
    /// y = table[ids], one output row per id.
    GatherRows { table: Var, ids: Vec<usize> },
    SliceCols { a: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    /// y = a with row `row` replaced by vector v.
    ReplaceRow { a: Var, v: Var, row: usize },
    /// y = a with the listed rows replaced by constant payload rows.
    ReplaceRowsConst { a: Var, rows: Vec<usize> },
    /// y = a with constant payload rows added at the listed positions.
    AddRowsConst { a: Var },
    Sum { a: Var },
    /// Mean cross-entropy over (position, token) targets of a logit matrix.
    CeMean { logits: Var, targets: Vec<(usize, usize)> },
    /// softmax(logits[pos])[token], as a scalar.
    TargetProb { logits: Var, pos: usize, token: usize },
    /// Fused multi-head causal self-attention over independent row segments.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        lengths: Vec<usize>,
        n_heads: usize,
    },
}

struct Node {
    op: Op,
    value: std::sync::Arc<Tensor>,
}

/// Recorded computation graph.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: std::sync::Arc::new(value),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Records a shared input without copying its payload.
    pub fn leaf_shared(&mut self, t: std::sync::Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul { a, b }, v))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatmulNT { a, b }, v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub { a, b }, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul { a, b }, v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = tensor::scale(self.value(a), c);
        self.push(Op::Scale { a, c }, v)
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        if self.value(row).numel() != n {
            return Err(Error::Dimension(
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(row).shape()),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (v, rv) in out.row_mut(i).iter_mut().zip(&r) {
                *v += rv;
            }
        }
        Ok(self.push(Op::AddRowBroadcast { a, row }, out))
    }

    pub fn mul_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        if self.value(row).numel() != n {
            return Err(Error::Dimension(
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(row).shape()),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (v, rv) in out.row_mut(i).iter_mut().zip(&r) {
                *v *= rv;
            }
        }
        Ok(self.push(Op::MulRowBroadcast { a, row }, out))
    }

    /// Adds a constant tensor (e.g. a causal mask). No gradient flows to `k`.
    pub fn add_const(&mut self, a: Var, k: &Tensor) -> Result<Var> {
        let v = tensor::add(self.value(a), k)?;
        Ok(self.push(Op::AddConst { a }, v))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = tensor::gelu(self.value(a));
        self.push(Op::Gelu { a }, v)
    }

    pub fn standardize_rows(&mut self, a: Var) -> Result<Var> {
        let v = tensor::standardize_rows(self.value(a))?;
        Ok(self.push(Op::StandardizeRows { a }, v))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = tensor::softmax(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows { a }, v))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::Contract(format!(
                    "gather index {id} out of {rows} rows"
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let v = Tensor::new(vec![ids.len(), n], data)?;
        Ok(self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            v,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if start + len > n {
            return Err(Error::Contract(format!(
                "column slice {start}..{} out of {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let v = Tensor::new(vec![m, len], data)?;
        Ok(self.push(Op::SliceCols { a, start, len }, v))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".into()));
        }
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let v = Tensor::new(vec![m, total], data)?;
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            v,
        ))
    }

    pub fn replace_row(&mut self, a: Var, v: Var, row: usize) -> Result<Var> {
        let t = self.value(a);
        if row >= t.rows() || self.value(v).numel() != t.cols() {
            return Err(Error::Dimension(
                format!("{:?} row {row}", t.shape()),
                format!("{:?}", self.value(v).shape()),
            ));
        }
        let mut out = t.clone();
        out.row_mut(row).copy_from_slice(self.value(v).data());
        Ok(self.push(Op::ReplaceRow { a, v, row }, out))
    }

    /// Replace rows with constant payload rows (payload is [rows.len(), n]).
    pub fn replace_rows_const(&mut self, a: Var, rows: &[usize], payload: &Tensor) -> Result<Var> {
        let t = self.value(a);
        if payload.rows() != rows.len() || payload.cols() != t.cols() {
            return Err(Error::Dimension(
                format!("{:?} at {} rows", t.shape(), rows.len()),
                format!("{:?}", payload.shape()),
            ));
        }
        let mut out = t.clone();
        for (k, &r) in rows.iter().enumerate() {
            if r >= out.rows() {
                return Err(Error::Contract(format!("row {r} out of range")));
            }
            out.row_mut(r).copy_from_slice(payload.row(k));
        }
        Ok(self.push(
            Op::ReplaceRowsConst {
                a,
                rows: rows.to_vec(),
            },
            out,
        ))
    }

    /// Add constant payload rows at positions (payload is [rows.len(), n]).
    pub fn add_rows_const(&mut self, a: Var, rows: &[usize], payload: &Tensor) -> Result<Var> {
        let t = self.value(a);
        if payload.rows() != rows.len() || payload.cols() != t.cols() {
            return Err(Error::Dimension(
                format!("{:?} at {} rows", t.shape(), rows.len()),
                format!("{:?}", payload.shape()),
            ));
        }
        let mut out = t.clone();
        for (k, &r) in rows.iter().enumerate() {
            if r >= out.rows() {
                return Err(Error::Contract(format!("row {r} out of range")));
            }
            for (v, p) in out.row_mut(r).iter_mut().zip(payload.row(k)) {
                *v += p;
            }
        }
        Ok(self.push(Op::AddRowsConst { a }, out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(tensor::sum(self.value(a)));
        self.push(Op::Sum { a }, v)
    }

    /// Mean of −log softmax(logits[pos])[token] over the targets.
    pub fn ce_mean(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Contract("cross-entropy over zero targets".into()));
        }
        let l = self.value(logits);
        let mut total = 0.0;
        for &(pos, tok) in targets {
            if pos >= l.rows() {
                return Err(Error::Contract(format!("target position {pos} out of range")));
            }
            total += tensor::cross_entropy(&Tensor::vector(l.row(pos).to_vec()), tok)?;
        }
        let v = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            Op::CeMean {
                logits,
                targets: targets.to_vec(),
            },
            v,
        ))
    }

    /// Multi-head causal self-attention. `q`, `k`, `v` are [T, d] with heads
    /// laid out along columns; rows are grouped into independent segments
    /// (causal inside a segment, no attention across segments).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        lengths: &[usize],
        n_heads: usize,
    ) -> Result<Var> {
        let d = self.value(q).cols();
        let t: usize = lengths.iter().sum();
        if self.value(q).shape() != self.value(k).shape()
            || self.value(q).shape() != self.value(v).shape()
            || self.value(q).rows() != t
        {
            return Err(Error::Dimension(
                format!("{:?}", self.value(q).shape()),
                format!("[{t}, {d}] for q/k/v"),
            ));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Contract(format!(
                "{d} columns not divisible into {n_heads} heads"
            )));
        }
        let out = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            lengths,
            n_heads,
        );
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                lengths: lengths.to_vec(),
                n_heads,
            },
            out,
        ))
    }

    /// Probability of `token` at `pos`, softmaxed over the row.
    pub fn target_prob(&mut self, logits: Var, pos: usize, token: usize) -> Result<Var> {
        let l = self.value(logits);
        if pos >= l.rows() || token >= l.cols() {
            return Err(Error::Contract(format!(
                "target ({pos}, {token}) out of logits {:?}",
                l.shape()
            )));
        }
        let s = tensor::softmax(&Tensor::vector(l.row(pos).to_vec()))?;
        let v = Tensor::scalar(s.data()[token]);
        Ok(self.push(Op::TargetProb { logits, pos, token }, v))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per node
    /// (None where no gradient flowed).
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let add_into = |slot: &mut Option<Tensor>, t: Tensor| {
            match slot {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                None => *slot = Some(t),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let da = tensor::matmul_nt(g, self.value(*b))?;
                let db = tensor::matmul_tn(self.value(*a), g)?;
                add_into(&mut grads[a.0], da);
                add_into(&mut grads[b.0], db);
            }
            Op::MatmulNT { a, b } => {
                let da = tensor::matmul(g, self.value(*b))?;
                let db = tensor::matmul_tn(g, self.value(*a))?;
                add_into(&mut grads[a.0], da);
                add_into(&mut grads[b.0], db);
            }
            Op::Add { a, b } => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], g.clone());
            }
            Op::Sub { a, b } => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], tensor::scale(g, -1.0));
            }
            Op::Mul { a, b } => {
                add_into(&mut grads[a.0], tensor::hadamard(g, self.value(*b))?);
                add_into(&mut grads[b.0], tensor::hadamard(g, self.value(*a))?);
            }
            Op::Scale { a, c } => {
                add_into(&mut grads[a.0], tensor::scale(g, *c));
            }
            Op::AddRowBroadcast { a, row } => {
                add_into(&mut grads[a.0], g.clone());
                let n = self.value(*row).numel();
                let mut dr = vec![0.0; n];
                for i in 0..g.rows() {
                    for (s, v) in dr.iter_mut().zip(g.row(i)) {
                        *s += v;
                    }
                }
                add_into(&mut grads[row.0], Tensor::vector(dr));
            }
            Op::MulRowBroadcast { a, row } => {
                let av = self.value(*a);
                let rv = self.value(*row);
                let mut da = g.clone();
                for i in 0..da.rows() {
                    for (v, r) in da.row_mut(i).iter_mut().zip(rv.data()) {
                        *v *= r;
                    }
                }
                add_into(&mut grads[a.0], da);
                let mut dr = vec![0.0; rv.numel()];
                for i in 0..g.rows() {
                    for ((s, gv), avv) in dr.iter_mut().zip(g.row(i)).zip(av.row(i)) {
                        *s += gv * avv;
                    }
                }
                add_into(&mut grads[row.0], Tensor::vector(dr));
            }
            Op::AddConst { a } => {
                add_into(&mut grads[a.0], g.clone());
            }
            Op::Gelu { a } => {
                let x = self.value(*a);
                let mut da = g.clone();
                for (dv, xv) in da.data_mut().iter_mut().zip(x.data()) {
                    *dv *= tensor::gelu_grad_scalar(*xv);
                }
                add_into(&mut grads[a.0], da);
            }
            Op::StandardizeRows { a } => {
                let x = self.value(*a);
                let y = &self.nodes[idx].value;
                let n = x.cols();
                let mut da = Tensor::zeros(x.shape());
                for i in 0..x.rows() {
                    let xr = x.row(i);
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let mean = xr.iter().sum::<f64>() / n as f64;
                    let var =
                        xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + tensor::LAYERNORM_EPS).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / n as f64;
                    let gy_mean =
                        gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    let dr = da.row_mut(i);
                    for j in 0..n {
                        dr[j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                add_into(&mut grads[a.0], da);
            }
            Op::SoftmaxRows { a } => {
                let y = &self.nodes[idx].value;
                let n = y.cols();
                let mut da = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dr = da.row_mut(i);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut grads[a.0], da);
            }
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let mut dt = Tensor::zeros(t.shape());
                for (k, &id) in ids.iter().enumerate() {
                    for (s, v) in dt.row_mut(id).iter_mut().zip(g.row(k)) {
                        *s += v;
                    }
                }
                add_into(&mut grads[table.0], dt);
            }
            Op::SliceCols { a, start, len } => {
                let t = self.value(*a);
                let mut da = Tensor::zeros(t.shape());
                for i in 0..t.rows() {
                    da.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                add_into(&mut grads[a.0], da);
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0usize;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut dp = Tensor::zeros(self.value(*p).shape());
                    for i in 0..g.rows() {
                        dp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    add_into(&mut grads[p.0], dp);
                    offset += w;
                }
            }
            Op::ReplaceRow { a, v, row } => {
                let mut da = g.clone();
                for x in da.row_mut(*row) {
                    *x = 0.0;
                }
                add_into(&mut grads[a.0], da);
                add_into(&mut grads[v.0], Tensor::vector(g.row(*row).to_vec()));
            }
            Op::ReplaceRowsConst { a, rows } => {
                let mut da = g.clone();
                for &r in rows {
                    for x in da.row_mut(r) {
                        *x = 0.0;
                    }
                }
                add_into(&mut grads[a.0], da);
            }
            Op::AddRowsConst { a } => {
                add_into(&mut grads[a.0], g.clone());
            }
            Op::Sum { a } => {
                let gv = g.item();
                add_into(&mut grads[a.0], Tensor::filled(self.value(*a).shape(), gv));
            }
            Op::CeMean { logits, targets } => {
                let l = self.value(*logits);
                let mut dl = Tensor::zeros(l.shape());
                let w = g.item() / targets.len() as f64;
                for &(pos, tok) in targets {
                    let s = tensor::softmax(&Tensor::vector(l.row(pos).to_vec()))?;
                    let dr = dl.row_mut(pos);
                    for (j, sv) in s.data().iter().enumerate() {
                        dr[j] += w * (sv - if j == tok { 1.0 } else { 0.0 });
                    }
                }
                add_into(&mut grads[logits.0], dl);
            }
            Op::Attention {
                q,
                k,
                v,
                lengths,
                n_heads,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    lengths,
                    *n_heads,
                    g,
                );
                add_into(&mut grads[q.0], dq);
                add_into(&mut grads[k.0], dk);
                add_into(&mut grads[v.0], dv);
            }
            Op::TargetProb { logits, pos, token } => {
                let l = self.value(*logits);
                let s = tensor::softmax(&Tensor::vector(l.row(*pos).to_vec()))?;
                let p = s.data()[*token];
                let mut dl = Tensor::zeros(l.shape());
                let dr = dl.row_mut(*pos);
                let gv = g.item();
                for (j, sv) in s.data().iter().enumerate() {
                    dr[j] = gv * p * (if j == *token { 1.0 } else { 0.0 } - sv);
                }
                add_into(&mut grads[logits.0], dl);
            }
        }
        Ok(())
    }

    /// Gradient of a scalar loss with respect to the given leaves. A leaf the
    /// loss does not depend on gets a zero tensor (documented, not an error).
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.backward(loss)?;
        Ok(wrt
            .iter()
            .map(|v| match &grads[v.0] {
                Some(t) => t.clone(),
                None => Tensor::zeros(self.value(*v).shape()),
            })
            .collect())
    }
}

/// Softmax attention weights for one query row against keys 0..=i of its
/// segment. Writes into `probs[0..=i]`.
fn attention_probs(qi: &[f64], keys: &Tensor, base: usize, i: usize, cols: std::ops::Range<usize>, inv_sqrt: f64, probs: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, p) in probs.iter_mut().enumerate().take(i + 1) {
        let s = tensor::dot(qi, &keys.row(base + j)[cols.clone()]) * inv_sqrt;
        *p = s;
        if s > max {
            max = s;
        }
    }
    let mut z = 0.0;
    for p in probs.iter_mut().take(i + 1) {
        *p = (*p - max).exp();
        z += *p;
    }
    for p in probs.iter_mut().take(i + 1) {
        *p /= z;
    }
}

fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    lengths: &[usize],
    n_heads: usize,
) -> Tensor {
    let d = q.cols();
    let dh = d / n_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[q.rows(), d]);
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let mut probs = vec![0.0f64; max_len];

    let mut base = 0usize;
    for &len in lengths {
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..len {
                let qi = &q.row(base + i)[cols.clone()];
                attention_probs(qi, k, base, i, cols.clone(), inv_sqrt, &mut probs);
                let orow = &mut out.row_mut(base + i)[cols.clone()];
                for (j, &a) in probs.iter().enumerate().take(i + 1) {
                    tensor::axpy(a, &v.row(base + j)[cols.clone()], orow);
                }
            }
        }
        base += len;
    }
    out
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    lengths: &[usize],
    n_heads: usize,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = q.cols();
    let dh = d / n_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[q.rows(), d]);
    let mut dk = Tensor::zeros(&[q.rows(), d]);
    let mut dv = Tensor::zeros(&[q.rows(), d]);
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let mut probs = vec![0.0f64; max_len];
    let mut dscore = vec![0.0f64; max_len];

    let mut base = 0usize;
    for &len in lengths {
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..len {
                let qi: Vec<f64> = q.row(base + i)[cols.clone()].to_vec();
                attention_probs(&qi, k, base, i, cols.clone(), inv_sqrt, &mut probs);
                let go: Vec<f64> = g.row(base + i)[cols.clone()].to_vec();

                // dA and the softmax Jacobian contraction.
                let mut dot_sum = 0.0;
                for j in 0..=i {
                    let da = tensor::dot(&go, &v.row(base + j)[cols.clone()]);
                    dscore[j] = da;
                    dot_sum += da * probs[j];
                }
                for j in 0..=i {
                    dscore[j] = probs[j] * (dscore[j] - dot_sum);
                }

                for j in 0..=i {
                    let a = probs[j];
                    let ds = dscore[j] * inv_sqrt;
                    tensor::axpy(
                        ds,
                        &k.row(base + j)[cols.clone()],
                        &mut dq.row_mut(base + i)[cols.clone()],
                    );
                    tensor::axpy(ds, &qi, &mut dk.row_mut(base + j)[cols.clone()]);
                    tensor::axpy(a, &go, &mut dv.row_mut(base + j)[cols.clone()]);
                }
            }
        }
        base += len;
    }
    (dq, dk, dv)
}
