//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding the forward value and enough
//! bookkeeping to replay gradients. Nodes only reference earlier nodes, so a
//! single reverse scan visits the graph in reverse topological order exactly
//! once. A tape is confined to one thread; independent tapes may run in
//! parallel.

use super::ops::{
    axpy, conv2d_backward, conv2d_forward, conv_out_len, matmul_acc, matmul_nt_acc, matmul_tn_acc,
};
use super::{check_2d, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean attention mask over query x key positions; `true` means the
/// position may be attended to.
#[derive(Clone, Debug)]
pub struct RowMask {
    pub t_q: usize,
    pub t_k: usize,
    allowed: Vec<bool>,
}

impl RowMask {
    pub fn causal(t: usize) -> Self {
        let mut allowed = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                allowed[i * t + j] = true;
            }
        }
        RowMask { t_q: t, t_k: t, allowed }
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.t_k + k]
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: F },
    Conv2d { x: Var, kernels: Var, bias: Var },
    Embedding { table: Var, ids: Vec<u32> },
    Reshape(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy { logits: Var, targets: Vec<u32>, smoothing: F },
    Dropout { x: Var, mask: Vec<F> },
    FlattenChannels(Var),
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), check_finite: false }
    }

    /// A tape that validates every op output for NaN/Inf.
    pub fn with_finite_checks() -> Self {
        Tape { nodes: Vec::new(), check_finite: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Zeroes every allocated gradient buffer.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                for v in g.iter_mut() {
                    *v = F::zero();
                }
            }
        }
    }

    fn push_node(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<F>, inputs: &[Var], op: Op<F>) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::Divergence("non-finite value in op output".to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, requires_grad, op))
    }

    // ---- elementwise and shape ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "add: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_op(value, &[a, b], Op::Add(a, b))
    }

    /// `[t x d] + [d]` with the row vector broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (t, d) = check_2d(&self.nodes[a.0].value, "add_row")?;
        let tr = &self.nodes[row.0].value;
        if tr.shape() != [d] {
            return Err(Error::dim(format!(
                "add_row: matrix {:?} needs row [{}], got {:?}",
                self.nodes[a.0].value.shape(),
                d,
                tr.shape()
            )));
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        let row_data = tr.data();
        for r in 0..t {
            for (o, &v) in data[r * d..(r + 1) * d].iter_mut().zip(row_data) {
                *o = *o + v;
            }
        }
        let value = Tensor::new(vec![t, d], data)?;
        self.push_op(value, &[a, row], Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "mul: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_op(value, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data: Vec<F> = ta.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_op(value, &[a], Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data: Vec<F> = ta.data().iter().map(|&x| x.max(F::zero())).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_op(value, &[a], Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(Error::dim(format!(
                "reshape: {:?} has {} elements, target {:?} needs {}",
                ta.shape(),
                ta.numel(),
                shape,
                numel
            )));
        }
        let value = Tensor::new(shape, ta.data().to_vec())?;
        self.push_op(value, &[a], Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = check_2d(&self.nodes[a.0].value, "transpose")?;
        let src = self.nodes[a.0].value.data();
        let mut data = vec![F::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        let value = Tensor::new(vec![cols, rows], data)?;
        self.push_op(value, &[a], Op::Transpose(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (t, d) = check_2d(&self.nodes[a.0].value, "slice_cols")?;
        if start + len > d {
            return Err(Error::dim(format!(
                "slice_cols: columns {}..{} out of range for {:?}",
                start,
                start + len,
                self.nodes[a.0].value.shape()
            )));
        }
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(t * len);
        for r in 0..t {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let value = Tensor::new(vec![t, len], data)?;
        self.push_op(value, &[a], Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols: no inputs".to_string()));
        }
        let t = check_2d(&self.nodes[parts[0].0].value, "concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (tp, dp) = check_2d(&self.nodes[p.0].value, "concat_cols")?;
            if tp != t {
                return Err(Error::dim(format!(
                    "concat_cols: row counts differ ({t} vs {tp})"
                )));
            }
            total += dp;
        }
        let mut data = Vec::with_capacity(t * total);
        for r in 0..t {
            for &p in parts {
                let tp = &self.nodes[p.0].value;
                let dp = tp.shape()[1];
                data.extend_from_slice(&tp.data()[r * dp..(r + 1) * dp]);
            }
        }
        let value = Tensor::new(vec![t, total], data)?;
        self.push_op(value, parts, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows: no inputs".to_string()));
        }
        let d = check_2d(&self.nodes[parts[0].0].value, "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (tp, dp) = check_2d(&self.nodes[p.0].value, "concat_rows")?;
            if dp != d {
                return Err(Error::dim(format!(
                    "concat_rows: column counts differ ({d} vs {dp})"
                )));
            }
            rows += tp;
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let value = Tensor::new(vec![rows, d], data)?;
        self.push_op(value, parts, Op::ConcatRows(parts.to_vec()))
    }

    /// `[C x T x M] -> [T x (C*M)]`, the channel flattening after a conv stack.
    pub fn flatten_channels(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 3 {
            return Err(Error::dim(format!(
                "flatten_channels expects [C x T x M], got {:?}",
                ta.shape()
            )));
        }
        let (c, t, m) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let src = ta.data();
        let mut data = vec![F::zero(); c * t * m];
        for ci in 0..c {
            for ti in 0..t {
                for mi in 0..m {
                    data[ti * (c * m) + ci * m + mi] = src[ci * t * m + ti * m + mi];
                }
            }
        }
        let value = Tensor::new(vec![t, c * m], data)?;
        self.push_op(value, &[a], Op::FlattenChannels(a))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d(&self.nodes[a.0].value, "matmul lhs")?;
        let (kb, n) = check_2d(&self.nodes[b.0].value, "matmul rhs")?;
        if k != kb {
            return Err(Error::dim(format!(
                "matmul: inner dimensions disagree, lhs {:?} vs rhs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let mut data = vec![F::zero(); m * n];
        matmul_acc(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n, &mut data);
        let value = Tensor::new(vec![m, n], data)?;
        self.push_op(value, &[a, b], Op::Matmul(a, b))
    }

    /// `a * b^T` without materializing the transpose; `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d(&self.nodes[a.0].value, "matmul_nt lhs")?;
        let (n, kb) = check_2d(&self.nodes[b.0].value, "matmul_nt rhs")?;
        if k != kb {
            return Err(Error::dim(format!(
                "matmul_nt: inner dimensions disagree, lhs {:?} vs rhs^T {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let mut data = vec![F::zero(); m * n];
        matmul_nt_acc(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n, &mut data);
        let value = Tensor::new(vec![m, n], data)?;
        self.push_op(value, &[a, b], Op::MatmulNT(a, b))
    }

    // ---- neural-net ops ----

    /// Row-wise softmax with max subtraction. Masked-out positions produce 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&RowMask>) -> Result<Var> {
        let (t, d) = check_2d(&self.nodes[a.0].value, "softmax_rows")?;
        if let Some(m) = mask {
            if m.t_q != t || m.t_k != d {
                return Err(Error::dim(format!(
                    "softmax mask is {}x{}, scores are {t}x{d}",
                    m.t_q, m.t_k
                )));
            }
        }
        let src = self.nodes[a.0].value.data();
        let mut data = vec![F::zero(); t * d];
        for r in 0..t {
            let row = &src[r * d..(r + 1) * d];
            let mut max = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if mask.map_or(true, |m| m.allows(r, j)) && v > max {
                    max = v;
                }
            }
            if max == F::neg_infinity() {
                return Err(Error::dim(format!("softmax row {r} has no unmasked positions")));
            }
            let out_row = &mut data[r * d..(r + 1) * d];
            let mut sum = F::zero();
            for (j, &v) in row.iter().enumerate() {
                if mask.map_or(true, |m| m.allows(r, j)) {
                    let e = (v - max).exp();
                    out_row[j] = e;
                    sum = sum + e;
                }
            }
            for v in out_row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(vec![t, d], data)?;
        // the mask is not recorded: masked outputs are exactly 0, so they
        // contribute nothing in backward
        self.push_op(value, &[a], Op::SoftmaxRows(a))
    }

    /// Per-row normalization to zero mean / unit variance, then `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (t, d) = check_2d(&self.nodes[x.0].value, "layer_norm")?;
        if self.nodes[gain.0].value.shape() != [d] || self.nodes[bias.0].value.shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} must both be [{d}]",
                self.nodes[gain.0].value.shape(),
                self.nodes[bias.0].value.shape()
            )));
        }
        let src = self.nodes[x.0].value.data();
        let gain_d = self.nodes[gain.0].value.data();
        let bias_d = self.nodes[bias.0].value.data();
        let dn = F::from_f64c(d as f64);
        let mut data = vec![F::zero(); t * d];
        for r in 0..t {
            let row = &src[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = F::zero();
            for &v in row {
                var = var + (v - mean) * (v - mean);
            }
            var = var / dn;
            let inv_std = (var + eps).sqrt().recip();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * gain_d[j] + bias_d[j];
            }
        }
        let value = Tensor::new(vec![t, d], data)?;
        self.push_op(value, &[x, gain, bias], Op::LayerNorm { x, gain, bias, eps })
    }

    /// Stride-2, padding-1 cross-correlation; `x: [C_in x H x W]`,
    /// `kernels: [C_out x C_in x kh x kw]`, `bias: [C_out]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let tk = &self.nodes[kernels.0].value;
        if tx.rank() != 3 || tk.rank() != 4 {
            return Err(Error::dim(format!(
                "conv2d: input {:?} must be rank 3 and kernels {:?} rank 4",
                tx.shape(),
                tk.shape()
            )));
        }
        let (c_in, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c_out, kc, kh, kw) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv2d: kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if self.nodes[bias.0].value.shape() != [c_out] {
            return Err(Error::dim(format!(
                "conv2d: bias {:?} must be [{c_out}]",
                self.nodes[bias.0].value.shape()
            )));
        }
        let data = conv2d_forward(
            tx.data(),
            tk.data(),
            self.nodes[bias.0].value.data(),
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
        );
        let value = Tensor::new(vec![c_out, conv_out_len(h), conv_out_len(w)], data)?;
        self.push_op(value, &[x, kernels, bias], Op::Conv2d { x, kernels, bias })
    }

    /// Gathers rows of `table` by token id; gradient scatters back.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = check_2d(&self.nodes[table.0].value, "embedding table")?;
        for &id in ids {
            if id as usize >= v {
                return Err(Error::config(format!(
                    "token id {id} out of range for vocabulary of {v}"
                )));
            }
        }
        let src = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push_op(value, &[table], Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Multiplies by a fixed, already-scaled dropout mask (entries are 0 or
    /// `1/(1-rate)`), so a training run can be replayed exactly.
    pub fn dropout(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if mask.len() != tx.numel() {
            return Err(Error::dim(format!(
                "dropout mask has {} entries, tensor has {}",
                mask.len(),
                tx.numel()
            )));
        }
        let data: Vec<F> = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_op(value, &[x], Op::Dropout { x, mask })
    }

    // ---- reductions and losses ----

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut acc = F::zero();
        for &v in self.nodes[a.0].value.data() {
            acc = acc + v;
        }
        self.push_op(Tensor::scalar(acc), &[a], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(Error::dim("mean_all of empty tensor".to_string()));
        }
        let mut acc = F::zero();
        for &v in self.nodes[a.0].value.data() {
            acc = acc + v;
        }
        let value = Tensor::scalar(acc / F::from_f64c(n as f64));
        self.push_op(value, &[a], Op::MeanAll(a))
    }

    /// `[t x d] -> [d]`, the mean over rows (time pooling).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (t, d) = check_2d(&self.nodes[a.0].value, "mean_rows")?;
        if t == 0 {
            return Err(Error::dim("mean_rows of empty tensor".to_string()));
        }
        let src = self.nodes[a.0].value.data();
        let tn = F::from_f64c(t as f64);
        let mut data = vec![F::zero(); d];
        for r in 0..t {
            for (o, &v) in data.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                *o = *o + v;
            }
        }
        for v in data.iter_mut() {
            *v = *v / tn;
        }
        let value = Tensor::new(vec![d], data)?;
        self.push_op(value, &[a], Op::MeanRows(a))
    }

    /// Summed token-level negative log-likelihood of `targets` under row-wise
    /// softmax of `logits` (`[t x vocab]`), computed in log-sum-exp form.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        self.cross_entropy_smoothed(logits, targets, F::zero())
    }

    /// Cross entropy against targets mixed with the uniform distribution:
    /// weight `1 - smoothing` on the target token, `smoothing / v` elsewhere.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, targets: &[u32], smoothing: F) -> Result<Var> {
        let (t, v) = check_2d(&self.nodes[logits.0].value, "cross_entropy logits")?;
        if targets.len() != t {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {} logit rows",
                targets.len(),
                t
            )));
        }
        for &id in targets {
            if id as usize >= v {
                return Err(Error::config(format!(
                    "target id {id} out of range for vocabulary of {v}"
                )));
            }
        }
        let src = self.nodes[logits.0].value.data();
        let vn = F::from_f64c(v as f64);
        let one_minus = F::one() - smoothing;
        let mut loss = F::zero();
        for r in 0..t {
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            let mut mean_logit = F::zero();
            for &x in row {
                sum = sum + (x - max).exp();
                mean_logit = mean_logit + x;
            }
            mean_logit = mean_logit / vn;
            let lse = max + sum.ln();
            let nll = lse - row[targets[r] as usize];
            loss = loss + one_minus * nll + smoothing * (lse - mean_logit);
        }
        self.push_op(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing },
        )
    }

    // ---- backward ----

    fn add_to_grad(&mut self, v: Var, contribution: &[F]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let grad = self.nodes[v.0].grad.get_or_insert_with(|| vec![F::zero(); numel]);
        for (g, &c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Accumulates `d loss / d node` into every gradient buffer reachable from
    /// `loss`, which must be scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // nothing trainable feeds this loss
        }
        {
            let grad = self.nodes[loss.0].grad.get_or_insert_with(|| vec![F::zero(); 1]);
            grad[0] += F::one();
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let grad = self.nodes[idx].grad.clone().expect("checked above");
            self.backward_step(idx, &grad)?;
        }
        Ok(())
    }

    fn backward_step(&mut self, idx: usize, grad: &[F]) -> Result<()> {
        // Ops never capture owned tensors, so taking the op apart is cheap
        // relative to the math below.
        match &self.nodes[idx].op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_to_grad(a, grad);
                self.add_to_grad(b, grad);
            }

            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                self.add_to_grad(a, grad);
                if self.nodes[row.0].requires_grad {
                    let d = self.nodes[row.0].value.numel();
                    let mut acc = vec![F::zero(); d];
                    for chunk in grad.chunks_exact(d) {
                        for (o, &g) in acc.iter_mut().zip(chunk) {
                            *o = *o + g;
                        }
                    }
                    self.add_to_grad(row, &acc);
                }
            }

            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let da: Vec<F> = grad
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.add_to_grad(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<F> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.add_to_grad(b, &db);
                }
            }

            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let da: Vec<F> = grad.iter().map(|&g| g * c).collect();
                self.add_to_grad(a, &da);
            }

            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a.0].value.shape()[0];
                let k = self.nodes[a.0].value.shape()[1];
                let n = self.nodes[b.0].value.shape()[1];
                if self.nodes[a.0].requires_grad {
                    // dA = dC * B^T
                    let mut da = vec![F::zero(); m * k];
                    matmul_nt_acc(grad, self.nodes[b.0].value.data(), m, n, k, &mut da);
                    self.add_to_grad(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T * dC
                    let mut db = vec![F::zero(); k * n];
                    matmul_tn_acc(self.nodes[a.0].value.data(), grad, m, k, n, &mut db);
                    self.add_to_grad(b, &db);
                }
            }

            Op::MatmulNT(a, b) => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a.0].value.shape()[0];
                let k = self.nodes[a.0].value.shape()[1];
                let n = self.nodes[b.0].value.shape()[0];
                if self.nodes[a.0].requires_grad {
                    // dA = dC * B
                    let mut da = vec![F::zero(); m * k];
                    matmul_acc(grad, self.nodes[b.0].value.data(), m, n, k, &mut da);
                    self.add_to_grad(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = dC^T * A
                    let mut db = vec![F::zero(); n * k];
                    matmul_tn_acc(grad, self.nodes[a.0].value.data(), m, n, k, &mut db);
                    self.add_to_grad(b, &db);
                }
            }

            Op::Relu(a) => {
                let a = *a;
                let da: Vec<F> = grad
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                    .collect();
                self.add_to_grad(a, &da);
            }

            Op::SoftmaxRows(x) => {
                let x = *x;
                let out = self.nodes[idx].value.data();
                let d = self.nodes[idx].value.shape()[1];
                let mut dx = vec![F::zero(); out.len()];
                for r in 0..out.len() / d {
                    let s = &out[r * d..(r + 1) * d];
                    let g = &grad[r * d..(r + 1) * d];
                    let mut dot = F::zero();
                    for (sv, gv) in s.iter().zip(g) {
                        dot = dot + *sv * *gv;
                    }
                    for j in 0..d {
                        dx[r * d + j] = s[j] * (g[j] - dot);
                    }
                }
                self.add_to_grad(x, &dx);
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let d = self.nodes[x.0].value.shape()[1];
                let t = self.nodes[x.0].value.shape()[0];
                let dn = F::from_f64c(d as f64);
                let src = self.nodes[x.0].value.data().to_vec();
                let gain_d = self.nodes[gain.0].value.data().to_vec();
                let mut dx = vec![F::zero(); t * d];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                for r in 0..t {
                    let row = &src[r * d..(r + 1) * d];
                    let g = &grad[r * d..(r + 1) * d];
                    let mut mean = F::zero();
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean / dn;
                    let mut var = F::zero();
                    for &v in row {
                        var = var + (v - mean) * (v - mean);
                    }
                    var = var / dn;
                    let inv_std = (var + eps).sqrt().recip();
                    let mut dxhat_sum = F::zero();
                    let mut dxhat_xhat_sum = F::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = g[j] * gain_d[j];
                        dgain[j] = dgain[j] + g[j] * xhat;
                        dbias[j] = dbias[j] + g[j];
                        dxhat_sum = dxhat_sum + dxhat;
                        dxhat_xhat_sum = dxhat_xhat_sum + dxhat * xhat;
                    }
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = g[j] * gain_d[j];
                        dx[r * d + j] =
                            inv_std / dn * (dn * dxhat - dxhat_sum - xhat * dxhat_xhat_sum);
                    }
                }
                self.add_to_grad(x, &dx);
                self.add_to_grad(gain, &dgain);
                self.add_to_grad(bias, &dbias);
            }

            Op::Conv2d { x, kernels, bias } => {
                let (x, kernels, bias) = (*x, *kernels, *bias);
                let xs = self.nodes[x.0].value.shape().to_vec();
                let ks = self.nodes[kernels.0].value.shape().to_vec();
                let mut dx = vec![F::zero(); self.nodes[x.0].value.numel()];
                let mut dk = vec![F::zero(); self.nodes[kernels.0].value.numel()];
                let mut db = vec![F::zero(); self.nodes[bias.0].value.numel()];
                conv2d_backward(
                    grad,
                    self.nodes[x.0].value.data(),
                    self.nodes[kernels.0].value.data(),
                    xs[0],
                    xs[1],
                    xs[2],
                    ks[0],
                    ks[2],
                    ks[3],
                    &mut dx,
                    &mut dk,
                    &mut db,
                );
                self.add_to_grad(x, &dx);
                self.add_to_grad(kernels, &dk);
                self.add_to_grad(bias, &db);
            }

            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                if self.nodes[table.0].requires_grad {
                    let d = self.nodes[table.0].value.shape()[1];
                    let mut dt = vec![F::zero(); self.nodes[table.0].value.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(F::one(), &grad[r * d..(r + 1) * d], &mut dt[id as usize * d..(id as usize + 1) * d]);
                    }
                    self.add_to_grad(table, &dt);
                }
            }

            Op::Reshape(a) => {
                let a = *a;
                self.add_to_grad(a, grad);
            }

            Op::Transpose(a) => {
                let a = *a;
                let (cols, rows) = (self.nodes[idx].value.shape()[0], self.nodes[idx].value.shape()[1]);
                let mut da = vec![F::zero(); grad.len()];
                for i in 0..cols {
                    for j in 0..rows {
                        da[j * cols + i] = grad[i * rows + j];
                    }
                }
                self.add_to_grad(a, &da);
            }

            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let (t, len) = (self.nodes[idx].value.shape()[0], self.nodes[idx].value.shape()[1]);
                let d = self.nodes[x.0].value.shape()[1];
                let mut dx = vec![F::zero(); self.nodes[x.0].value.numel()];
                for r in 0..t {
                    for j in 0..len {
                        dx[r * d + start + j] = grad[r * len + j];
                    }
                }
                self.add_to_grad(x, &dx);
            }

            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let t = self.nodes[idx].value.shape()[0];
                let total = self.nodes[idx].value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let dp = self.nodes[p.0].value.shape()[1];
                    if self.nodes[p.0].requires_grad {
                        let mut dpart = vec![F::zero(); t * dp];
                        for r in 0..t {
                            dpart[r * dp..(r + 1) * dp]
                                .copy_from_slice(&grad[r * total + offset..r * total + offset + dp]);
                        }
                        self.add_to_grad(p, &dpart);
                    }
                    offset += dp;
                }
            }

            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let d = self.nodes[idx].value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let tp = self.nodes[p.0].value.shape()[0];
                    if self.nodes[p.0].requires_grad {
                        self.add_to_grad(p, &grad[offset * d..(offset + tp) * d]);
                    }
                    offset += tp;
                }
            }

            Op::MeanRows(a) => {
                let a = *a;
                let (t, d) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let inv = F::from_f64c(1.0 / t as f64);
                let mut da = vec![F::zero(); t * d];
                for r in 0..t {
                    for j in 0..d {
                        da[r * d + j] = grad[j] * inv;
                    }
                }
                self.add_to_grad(a, &da);
            }

            Op::SumAll(a) => {
                let a = *a;
                let da = vec![grad[0]; self.nodes[a.0].value.numel()];
                self.add_to_grad(a, &da);
            }

            Op::MeanAll(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.numel();
                let da = vec![grad[0] / F::from_f64c(n as f64); n];
                self.add_to_grad(a, &da);
            }

            Op::CrossEntropy { logits, targets, smoothing } => {
                let logits = *logits;
                let targets = targets.clone();
                let smoothing = *smoothing;
                let (t, v) = (self.nodes[logits.0].value.shape()[0], self.nodes[logits.0].value.shape()[1]);
                let src = self.nodes[logits.0].value.data();
                let g = grad[0];
                let uniform = smoothing / F::from_f64c(v as f64);
                let one_minus = F::one() - smoothing;
                let mut dl = vec![F::zero(); t * v];
                for r in 0..t {
                    let row = &src[r * v..(r + 1) * v];
                    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                    let mut sum = F::zero();
                    for &x in row {
                        sum = sum + (x - max).exp();
                    }
                    for c in 0..v {
                        let p = (row[c] - max).exp() / sum;
                        let target_mass = if c == targets[r] as usize {
                            one_minus + uniform
                        } else {
                            uniform
                        };
                        dl[r * v + c] = g * (p - target_mass);
                    }
                }
                self.add_to_grad(logits, &dl);
            }

            Op::Dropout { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                let dx: Vec<F> = grad.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                self.add_to_grad(x, &dx);
            }

            Op::FlattenChannels(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let (c, t, m) = (shape[0], shape[1], shape[2]);
                let mut da = vec![F::zero(); c * t * m];
                for ci in 0..c {
                    for ti in 0..t {
                        for mi in 0..m {
                            da[ci * t * m + ti * m + mi] = grad[ti * (c * m) + ci * m + mi];
                        }
                    }
                }
                self.add_to_grad(a, &da);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2<F: Scalar>(rows: &[Vec<F>]) -> Tensor<F> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape: Tape<f64> = Tape::new();
        let eye = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_dot_product_case() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(t2(&[vec![1.0, 2.0]]));
        let b = tape.constant(t2(&[vec![3.0], vec![4.0]]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t2(&[vec![0.0, 0.0]]));
        let y = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.constant(t2(&[vec![1000.0, 0.0]]));
        let yb = tape.softmax_rows(big, None).unwrap();
        let out = tape.value(yb).data();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1] < 1e-12);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_direct_evaluation() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t2(&[vec![1.0, 2.0, 3.0]]));
        let y = tape.softmax_rows(x, None).unwrap();
        let out = tape.value(y).data();
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let sum: f64 = out.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t2(&[vec![5.0, 5.0, 5.0]]));
        let gain = tape.constant(Tensor::filled(vec![3], 1.0));
        let bias = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_case() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t2(&[vec![1.0, 3.0]]));
        let gain = tape.constant(Tensor::filled(vec![2], 1.0));
        let bias = tape.constant(Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-3);
        assert!((out[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t2(&[vec![-1.0, 2.0]]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(t2(&[vec![0.0, 0.0]]));
        let loss = tape.cross_entropy_from_logits(logits, &[0]).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn backward_of_simple_product_sums() {
        // loss = sum(a * b); dL/da = b, dL/db = a
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(t2(&[vec![1.0, 2.0]]), true);
        let b = tape.leaf(t2(&[vec![3.0, 4.0]]), true);
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn frozen_leaves_receive_no_grad() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(t2(&[vec![1.0, 2.0]]), true);
        let frozen = tape.leaf(t2(&[vec![3.0, 4.0]]), false);
        let prod = tape.mul(a, frozen).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert!(tape.grad(a).is_some());
    }

    #[test]
    fn gradient_flows_through_frozen_ops_to_earlier_trainables() {
        // trainable -> op with frozen weight -> loss: the trainable input
        // still receives a gradient even though the weight does not.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0]]), true);
        let w = tape.leaf(t2(&[vec![1.0], vec![1.0]]), false);
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn zero_grad_clears_buffers() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(t2(&[vec![2.0]]), true);
        let loss = tape.sum_all(a).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(a).unwrap(), &[0.0]);
    }

    #[test]
    fn causal_mask_zeroes_future_positions() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t2(&[vec![1.0, 5.0, 2.0], vec![0.5, 0.5, 9.0], vec![1.0, 1.0, 1.0]]));
        let mask = RowMask::causal(3);
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[5], 0.0);
        for r in 0..3 {
            let sum: f64 = out[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_checks_flag_nan_outputs() {
        let mut tape: Tape<f64> = Tape::with_finite_checks();
        let x = tape.constant(t2(&[vec![f64::MAX, f64::MAX]]));
        // overflow to +inf
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
    }
}
