//! Reverse-mode autodiff tape.
//!
//! Forward values are computed eagerly as operations are pushed; a call to
//! [`Graph::backward`] walks the tape in reverse and fills per-node
//! gradients. Parameter nodes remember their [`ParamId`] so gradients can
//! be folded back into the owning [`ParamSet`] in a deterministic order.

use crate::scalar::Scalar;
use crate::tensor::params::{ParamId, ParamSet};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_slice, Tensor};
use crate::{CoreError, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Param(ParamId),
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, S),
    /// [r,c] + [c], broadcast over rows.
    AddRowVec(Var, Var),
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, inv_std: Vec<S>, xhat: Vec<S> },
    Gelu(Var),
    Tanh(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    NarrowRows { x: Var, start: usize },
    NarrowCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Dropout { x: Var, keep: Vec<bool>, scale: S },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    /// Fused `x·w + b` (bias broadcast over rows).
    Linear { x: Var, w: Var, b: Var },
    /// Fused multi-head scaled-dot-product self-attention over projected
    /// q/k/v; caches the post-softmax weights (flat `[head][query][key]`).
    Attention { q: Var, k: Var, v: Var, heads: usize, weights: Vec<S> },
}

struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Autodiff tape. One graph per example keeps lifetimes trivial; re-use
/// via [`Graph::clear`] avoids churn in the training loop.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite values entering the tape"
        );
        self.nodes.push(Node { shape, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.node(v).data
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        Tensor::new(self.node(v).shape.clone(), self.node(v).data.clone())
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed.
    pub fn grad_of(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.node(v).shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("rank-{} tensor where rank <= 2 expected", s.len()),
        }
    }

    // -- inputs ------------------------------------------------------------

    /// Untracked input (no gradient will be accumulated for it).
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let (shape, data) = (t.shape().to_vec(), t.data().to_vec());
        self.push(shape, data, Op::Leaf, false)
    }

    /// Tracked input that is not a parameter (used by gradient checks).
    pub fn tracked_leaf(&mut self, t: Tensor<S>) -> Var {
        let (shape, data) = (t.shape().to_vec(), t.data().to_vec());
        self.push(shape, data, Op::Leaf, true)
    }

    /// Inject a parameter; its gradient is folded back by
    /// [`accumulate_param_grads`](Self::accumulate_param_grads).
    pub fn param(&mut self, set: &ParamSet<S>, id: ParamId) -> Var {
        let p = set.get(id);
        self.push(
            p.value.shape().to_vec(),
            p.value.data().to_vec(),
            Op::Param(id),
            p.trainable,
        )
    }

    // -- operations ----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if k != k2 {
            return Err(CoreError::dimension("matmul", self.shape(a), self.shape(b)));
        }
        let mut data = vec![S::zero(); m * n];
        gemm_acc(&self.node(a).data, &self.node(b).data, m, k, n, &mut data);
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![m, n], data, Op::Matmul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(CoreError::dimension("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(self.node(a).shape.clone(), data, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(CoreError::dimension("sub", self.shape(a), self.shape(b)));
        }
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| x - y)
            .collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(self.node(a).shape.clone(), data, Op::Sub(a, b), needs))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(CoreError::dimension("mul_elem", self.shape(a), self.shape(b)));
        }
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(self.node(a).shape.clone(), data, Op::MulElem(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let data = self.node(x).data.iter().map(|&v| v * factor).collect();
        let needs = self.node(x).needs_grad;
        self.push(self.node(x).shape.clone(), data, Op::Scale(x, factor), needs)
    }

    /// `[r,c] + [c]` with the vector broadcast over rows.
    pub fn add_row_vec(&mut self, x: Var, vec: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if self.node(vec).shape != [c] {
            return Err(CoreError::dimension("add_row_vec", self.shape(x), self.shape(vec)));
        }
        let mut data = self.node(x).data.clone();
        for row in data.chunks_mut(c) {
            for (o, &v) in row.iter_mut().zip(&self.node(vec).data) {
                *o = *o + v;
            }
        }
        let needs = self.node(x).needs_grad || self.node(vec).needs_grad;
        Ok(self.push(vec![r, c], data, Op::AddRowVec(x, vec), needs))
    }

    /// Row-wise softmax over the last axis. Rank-1 input is treated as a
    /// single row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x);
        if c == 0 {
            return Err(CoreError::dimension("softmax", self.shape(x), &[]));
        }
        let mut data = self.node(x).data.clone();
        for row in data.chunks_mut(c) {
            softmax_slice(row);
        }
        let needs = self.node(x).needs_grad;
        Ok(self.push(self.node(x).shape.clone(), data, Op::Softmax { x }, needs))
    }

    /// Layer normalization over the last axis with per-feature gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if c < 2 {
            return Err(CoreError::dimension("layer_norm", self.shape(x), &[c]));
        }
        if self.node(gain).shape != [c] || self.node(bias).shape != [c] {
            return Err(CoreError::dimension("layer_norm", self.shape(gain), &[c]));
        }
        let inv_c = S::from_f64_lossy(1.0 / c as f64);
        let mut data = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        let mut xhat = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &self.node(x).data[i * c..(i + 1) * c];
            let mean = row.iter().cloned().sum::<S>() * inv_c;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<S>()
                * inv_c;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[i * c + j] = xh;
                data[i * c + j] = xh * self.node(gain).data[j] + self.node(bias).data[j];
            }
        }
        let needs = self.node(x).needs_grad
            || self.node(gain).needs_grad
            || self.node(bias).needs_grad;
        Ok(self.push(
            vec![r, c],
            data,
            Op::LayerNorm { x, gain, bias, inv_std, xhat },
            needs,
        ))
    }

    /// GELU with the tanh approximation (smooth, finite-difference friendly).
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.node(x).data.iter().map(|&v| gelu_fwd(v)).collect();
        let needs = self.node(x).needs_grad;
        self.push(self.node(x).shape.clone(), data, Op::Gelu(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.node(x).data.iter().map(|&v| v.tanh()).collect();
        let needs = self.node(x).needs_grad;
        self.push(self.node(x).shape.clone(), data, Op::Tanh(x), needs)
    }

    /// Embedding lookup: gather rows of `table` by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(CoreError::Data(format!(
                "gather index {bad} out of range for table with {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&self.node(table).data[i * c..(i + 1) * c]);
        }
        let needs = self.node(table).needs_grad;
        Ok(self.push(
            vec![ids.len(), c],
            data,
            Op::GatherRows { table, ids: ids.to_vec() },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.rows_cols(parts[0]).1;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (r, pc) = self.rows_cols(p);
            if pc != c {
                return Err(CoreError::dimension("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(&self.node(p).data);
            needs |= self.node(p).needs_grad;
        }
        Ok(self.push(vec![rows, c], data, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Contiguous row slice `[start, start+len)`.
    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if start + len > r {
            return Err(CoreError::dimension("narrow_rows", self.shape(x), &[start, len]));
        }
        let data = self.node(x).data[start * c..(start + len) * c].to_vec();
        let needs = self.node(x).needs_grad;
        Ok(self.push(vec![len, c], data, Op::NarrowRows { x, start }, needs))
    }

    /// Contiguous column slice `[start, start+len)`.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if start + len > c {
            return Err(CoreError::dimension("narrow_cols", self.shape(x), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.node(x).data[i * c + start..i * c + start + len]);
        }
        let needs = self.node(x).needs_grad;
        Ok(self.push(vec![r, len], data, Op::NarrowCols { x, start, len }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.rows_cols(parts[0]).0;
        let mut total_c = 0;
        let mut needs = false;
        for &p in parts {
            let (pr, pc) = self.rows_cols(p);
            if pr != r {
                return Err(CoreError::dimension("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            total_c += pc;
            needs |= self.node(p).needs_grad;
        }
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                let pc = self.rows_cols(p).1;
                data.extend_from_slice(&self.node(p).data[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(vec![r, total_c], data, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.rows_cols(x);
        let src = &self.node(x).data;
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.node(x).needs_grad;
        self.push(vec![c, r], data, Op::Transpose(x), needs)
    }

    /// Inverted dropout: kept activations are rescaled by 1/keep_prob so
    /// expectations match eval mode. `keep` must have one entry per value.
    pub fn dropout(&mut self, x: Var, keep: Vec<bool>, keep_prob: S) -> Result<Var> {
        if keep.len() != self.node(x).data.len() {
            return Err(CoreError::dimension("dropout", self.shape(x), &[keep.len()]));
        }
        let scale = S::one() / keep_prob;
        let data = self
            .node(x)
            .data
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { S::zero() })
            .collect();
        let needs = self.node(x).needs_grad;
        Ok(self.push(self.node(x).shape.clone(), data, Op::Dropout { x, keep, scale }, needs))
    }

    /// Mean negative log-likelihood of `targets` under row-stochastic
    /// softmax of `logits` ([B,C]). Returns a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.rows_cols(logits);
        if targets.len() != b {
            return Err(CoreError::dimension("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(CoreError::Data(format!(
                "cross-entropy target {bad} out of range for {c} classes"
            )));
        }
        let mut probs = self.node(logits).data.clone();
        let mut loss = S::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            softmax_slice(row);
            // ln through the stabilized softmax keeps the loss finite.
            loss = loss - row[targets[i]].max(S::min_positive_value()).ln();
        }
        loss = loss / S::from_f64_lossy(b as f64);
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            needs,
        ))
    }

    /// Fused affine map: `x[m,k] · w[k,n] + b[n]` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(x);
        let (k2, n) = self.rows_cols(w);
        if k != k2 {
            return Err(CoreError::dimension("linear", self.shape(x), self.shape(w)));
        }
        if self.node(b).shape != [n] {
            return Err(CoreError::dimension("linear", self.shape(w), self.shape(b)));
        }
        let mut data = vec![S::zero(); m * n];
        gemm_acc(&self.node(x).data, &self.node(w).data, m, k, n, &mut data);
        let bias = &self.node(b).data;
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let needs =
            self.node(x).needs_grad || self.node(w).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![m, n], data, Op::Linear { x, w, b }, needs))
    }

    /// Fused multi-head self-attention over already-projected q/k/v
    /// ([L,d] each, d divisible by `heads`): per head, softmax(Qₕ Kₕᵀ /
    /// sqrt(d/heads)) · Vₕ, heads re-concatenated along columns. The
    /// post-softmax weights are cached on the node for capture via
    /// [`attention_weights`](Self::attention_weights).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (l, d) = self.rows_cols(q);
        if self.node(k).shape != [l, d] || self.node(v).shape != [l, d] {
            return Err(CoreError::dimension("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(CoreError::Config(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = S::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut weights = vec![S::zero(); heads * l * l];
        let mut out = vec![S::zero(); l * d];
        let mut qh = vec![S::zero(); l * dh];
        let mut kh = vec![S::zero(); l * dh];
        let mut vh = vec![S::zero(); l * dh];
        let mut ctx = vec![S::zero(); l * dh];
        for h in 0..heads {
            gather_head(&self.node(q).data, l, d, h * dh, dh, &mut qh);
            gather_head(&self.node(k).data, l, d, h * dh, dh, &mut kh);
            gather_head(&self.node(v).data, l, d, h * dh, dh, &mut vh);
            let s = &mut weights[h * l * l..(h + 1) * l * l];
            gemm_nt_acc(&qh, &kh, l, dh, l, s);
            for val in s.iter_mut() {
                *val = *val * scale;
            }
            for row in s.chunks_mut(l) {
                softmax_slice(row);
            }
            ctx.iter_mut().for_each(|c| *c = S::zero());
            gemm_acc(s, &vh, l, l, dh, &mut ctx);
            scatter_head(&ctx, l, d, h * dh, dh, &mut out);
        }
        let needs =
            self.node(q).needs_grad || self.node(k).needs_grad || self.node(v).needs_grad;
        Ok(self.push(vec![l, d], out, Op::Attention { q, k, v, heads, weights }, needs))
    }

    /// Cached post-softmax weights of an [`attention`](Self::attention)
    /// node: (flat `[heads][L][L]` weights, heads, L).
    pub fn attention_weights(&self, node: Var) -> Option<(&[S], usize, usize)> {
        match &self.node(node).op {
            Op::Attention { heads, weights, .. } => {
                let l = self.node(node).shape[0];
                Some((weights.as_slice(), *heads, l))
            }
            _ => None,
        }
    }

    // -- backward ------------------------------------------------------------

    /// Backpropagate from scalar `target` with upstream gradient `seed`
    /// (use `1/batch` to average example losses outside the tape).
    pub fn backward_scaled(&mut self, target: Var, seed: S) {
        assert_eq!(self.node(target).data.len(), 1, "backward target must be scalar");
        self.grads = self.nodes.iter().map(|_| None).collect();
        self.grads[target.0] = Some(vec![seed]);

        for idx in (0..=target.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = self.grads[idx].take() else { continue };
            self.propagate(idx, &dy);
            self.grads[idx] = Some(dy);
        }
    }

    pub fn backward(&mut self, target: Var) {
        self.backward_scaled(target, S::one());
    }

    fn add_grad(&mut self, v: Var, contrib: &[S]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => {
                for (g, &c) in buf.iter_mut().zip(contrib) {
                    *g = *g + c;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    /// First contribution moves in without a zero-fill + add pass.
    fn add_grad_owned(&mut self, v: Var, contrib: Vec<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => {
                for (g, c) in buf.iter_mut().zip(contrib) {
                    *g = *g + c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, idx: usize, dy: &[S]) {
        // The op is moved out for the duration of the match so cached
        // buffers can be borrowed without cloning; it is restored after.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        self.propagate_op(idx, &op, dy);
        self.nodes[idx].op = op;
    }

    fn propagate_op(&mut self, idx: usize, op: &Op<S>, dy: &[S]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.rows_cols(a);
                let n = self.rows_cols(b).1;
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![S::zero(); m * k];
                    gemm_nt_acc(dy, &self.nodes[b.0].data, m, n, k, &mut da);
                    self.add_grad(a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![S::zero(); k * n];
                    gemm_tn_acc(&self.nodes[a.0].data, dy, m, k, n, &mut db);
                    self.add_grad(b, &db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, dy);
                self.add_grad(b, dy);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, dy);
                if self.nodes[b.0].needs_grad {
                    let neg: Vec<S> = dy.iter().map(|&v| -v).collect();
                    self.add_grad(b, &neg);
                }
            }
            Op::MulElem(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let da: Vec<S> = dy
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.add_grad(a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db: Vec<S> = dy
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.add_grad(b, &db);
                }
            }
            Op::Scale(x, f) => {
                let (x, f) = (*x, *f);
                let dx: Vec<S> = dy.iter().map(|&v| v * f).collect();
                self.add_grad(x, &dx);
            }
            Op::AddRowVec(x, vecv) => {
                let (x, vecv) = (*x, *vecv);
                let c = self.rows_cols(x).1;
                self.add_grad(x, dy);
                if self.nodes[vecv.0].needs_grad {
                    let mut dv = vec![S::zero(); c];
                    for row in dy.chunks(c) {
                        for (g, &d) in dv.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                    self.add_grad(vecv, &dv);
                }
            }
            Op::Softmax { x } => {
                let x = *x;
                let c = self.rows_cols(x).1;
                let probs = &self.nodes[idx].data;
                let mut dx = vec![S::zero(); probs.len()];
                for (r, (p_row, dy_row)) in probs.chunks(c).zip(dy.chunks(c)).enumerate() {
                    let dot: S = p_row.iter().zip(dy_row).map(|(&p, &d)| p * d).sum();
                    for j in 0..c {
                        dx[r * c + j] = p_row[j] * (dy_row[j] - dot);
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::LayerNorm { x, gain, bias, inv_std, xhat } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let inv_std = inv_std.clone();
                let xhat = xhat.clone();
                let c = self.rows_cols(x).1;
                let inv_c = S::from_f64_lossy(1.0 / c as f64);
                let gain_data = self.nodes[gain.0].data.clone();

                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![S::zero(); xhat.len()];
                    for (r, dy_row) in dy.chunks(c).enumerate() {
                        let xh_row = &xhat[r * c..(r + 1) * c];
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for j in 0..c {
                            let dxh = dy_row[j] * gain_data[j];
                            sum_dxhat = sum_dxhat + dxh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh_row[j];
                        }
                        for j in 0..c {
                            let dxh = dy_row[j] * gain_data[j];
                            dx[r * c + j] = inv_std[r]
                                * (dxh - inv_c * sum_dxhat - inv_c * xh_row[j] * sum_dxhat_xhat);
                        }
                    }
                    self.add_grad(x, &dx);
                }
                if self.nodes[gain.0].needs_grad {
                    let mut dg = vec![S::zero(); c];
                    for (r, dy_row) in dy.chunks(c).enumerate() {
                        for j in 0..c {
                            dg[j] = dg[j] + dy_row[j] * xhat[r * c + j];
                        }
                    }
                    self.add_grad(gain, &dg);
                }
                if self.nodes[bias.0].needs_grad {
                    let mut db = vec![S::zero(); c];
                    for dy_row in dy.chunks(c) {
                        for (g, &d) in db.iter_mut().zip(dy_row) {
                            *g = *g + d;
                        }
                    }
                    self.add_grad(bias, &db);
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                let dx: Vec<S> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| d * gelu_bwd(v))
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::Tanh(x) => {
                let x = *x;
                let dx: Vec<S> = self.nodes[idx]
                    .data
                    .iter()
                    .zip(dy)
                    .map(|(&y, &d)| d * (S::one() - y * y))
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                if self.nodes[table.0].needs_grad {
                    let c = self.rows_cols(table).1;
                    let n = self.nodes[table.0].data.len();
                    let mut dt = vec![S::zero(); n];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[id * c + j] = dt[id * c + j] + dy[row * c + j];
                        }
                    }
                    self.add_grad(table, &dt);
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    let slice = dy[offset..offset + len].to_vec();
                    self.add_grad(p, &slice);
                    offset += len;
                }
            }
            Op::NarrowRows { x, start } => {
                let (x, start) = (*x, *start);
                if self.nodes[x.0].needs_grad {
                    let c = self.rows_cols(x).1;
                    let n = self.nodes[x.0].data.len();
                    let mut dx = vec![S::zero(); n];
                    dx[start * c..start * c + dy.len()].copy_from_slice(dy);
                    self.add_grad(x, &dx);
                }
            }
            Op::NarrowCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                if self.nodes[x.0].needs_grad {
                    let (r, c) = self.rows_cols(x);
                    let mut dx = vec![S::zero(); r * c];
                    for i in 0..r {
                        for j in 0..len {
                            dx[i * c + start + j] = dy[i * len + j];
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let r = self.rows_cols(parts[0]).0;
                let total_c: usize = parts.iter().map(|&p| self.rows_cols(p).1).sum();
                let mut col_offset = 0;
                for p in parts {
                    let pc = self.rows_cols(p).1;
                    if self.nodes[p.0].needs_grad {
                        let mut dp = vec![S::zero(); r * pc];
                        for i in 0..r {
                            for j in 0..pc {
                                dp[i * pc + j] = dy[i * total_c + col_offset + j];
                            }
                        }
                        self.add_grad(p, &dp);
                    }
                    col_offset += pc;
                }
            }
            Op::Transpose(x) => {
                let x = *x;
                if self.nodes[x.0].needs_grad {
                    let (r, c) = self.rows_cols(x);
                    // dy has shape [c, r]
                    let mut dx = vec![S::zero(); r * c];
                    for i in 0..c {
                        for j in 0..r {
                            dx[j * c + i] = dy[i * r + j];
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::Dropout { x, keep, scale } => {
                let (x, scale) = (*x, *scale);
                let keep = keep.clone();
                let dx: Vec<S> = dy
                    .iter()
                    .zip(&keep)
                    .map(|(&d, &k)| if k { d * scale } else { S::zero() })
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (m, k) = self.rows_cols(x);
                let n = self.rows_cols(w).1;
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![S::zero(); m * k];
                    gemm_nt_acc(dy, &self.nodes[w.0].data, m, n, k, &mut dx);
                    self.add_grad(x, &dx);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![S::zero(); k * n];
                    gemm_tn_acc(&self.nodes[x.0].data, dy, m, k, n, &mut dw);
                    self.add_grad(w, &dw);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![S::zero(); n];
                    for row in dy.chunks(n) {
                        for (g, &d) in db.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Attention { q, k, v, heads, weights } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let weights = weights.clone();
                let (l, d) = self.rows_cols(q);
                let dh = d / heads;
                let scale = S::from_f64_lossy(1.0 / (dh as f64).sqrt());
                let mut dq = vec![S::zero(); l * d];
                let mut dk = vec![S::zero(); l * d];
                let mut dv = vec![S::zero(); l * d];
                let mut qh = vec![S::zero(); l * dh];
                let mut kh = vec![S::zero(); l * dh];
                let mut vh = vec![S::zero(); l * dh];
                let mut dctx = vec![S::zero(); l * dh];
                let mut dhh = vec![S::zero(); l * dh];
                let mut da = vec![S::zero(); l * l];
                for h in 0..heads {
                    gather_head(&self.nodes[q.0].data, l, d, h * dh, dh, &mut qh);
                    gather_head(&self.nodes[k.0].data, l, d, h * dh, dh, &mut kh);
                    gather_head(&self.nodes[v.0].data, l, d, h * dh, dh, &mut vh);
                    gather_head(dy, l, d, h * dh, dh, &mut dctx);
                    let a = &weights[h * l * l..(h + 1) * l * l];

                    // dV = Aᵀ · dCtx
                    dhh.iter_mut().for_each(|x| *x = S::zero());
                    gemm_tn_acc(a, &dctx, l, l, dh, &mut dhh);
                    scatter_head_acc(&dhh, l, d, h * dh, dh, &mut dv);

                    // dA = dCtx · Vᵀ, then softmax backward into dS (in da)
                    da.iter_mut().for_each(|x| *x = S::zero());
                    gemm_nt_acc(&dctx, &vh, l, dh, l, &mut da);
                    for (a_row, da_row) in a.chunks(l).zip(da.chunks_mut(l)) {
                        let dot: S = a_row.iter().zip(da_row.iter()).map(|(&p, &g)| p * g).sum();
                        for (ds, &p) in da_row.iter_mut().zip(a_row) {
                            *ds = p * (*ds - dot) * scale;
                        }
                    }

                    // dQ = dS · K, dK = dSᵀ · Q
                    dhh.iter_mut().for_each(|x| *x = S::zero());
                    gemm_acc(&da, &kh, l, l, dh, &mut dhh);
                    scatter_head_acc(&dhh, l, d, h * dh, dh, &mut dq);
                    dhh.iter_mut().for_each(|x| *x = S::zero());
                    gemm_tn_acc(&da, &qh, l, l, dh, &mut dhh);
                    scatter_head_acc(&dhh, l, d, h * dh, dh, &mut dk);
                }
                self.add_grad(q, &dq);
                self.add_grad(k, &dk);
                self.add_grad(v, &dv);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let logits = *logits;
                let targets = targets.clone();
                let probs = probs.clone();
                if self.nodes[logits.0].needs_grad {
                    let (b, c) = self.rows_cols(logits);
                    let inv_b = S::from_f64_lossy(1.0 / b as f64);
                    let mut dl = vec![S::zero(); b * c];
                    for i in 0..b {
                        for j in 0..c {
                            let p = probs[i * c + j];
                            let onehot = if targets[i] == j { S::one() } else { S::zero() };
                            dl[i * c + j] = dy[0] * inv_b * (p - onehot);
                        }
                    }
                    self.add_grad(logits, &dl);
                }
            }
        }
    }

    /// Fold parameter gradients on this tape back into the set, in tape
    /// order (deterministic).
    pub fn accumulate_param_grads(&self, set: &mut ParamSet<S>) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(Some(g)) = self.grads.get(idx) {
                    let p = set.get_mut(id);
                    for (pg, &ng) in p.grad.iter_mut().zip(g) {
                        *pg = *pg + ng;
                    }
                }
            }
        }
    }

    /// Fold parameter gradients into a flat buffer laid out like
    /// [`ParamSet::flat_grads`]; used by chunked batch-parallel training.
    pub fn accumulate_param_grads_flat(&self, set: &ParamSet<S>, flat: &mut [S]) {
        // Offsets by id order.
        let mut offsets = Vec::with_capacity(set.len());
        let mut acc = 0;
        for (_, p) in set.iter() {
            offsets.push(acc);
            acc += p.value.numel();
        }
        debug_assert_eq!(acc, flat.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(Some(g)) = self.grads.get(idx) {
                    let off = offsets[id.0];
                    for (fg, &ng) in flat[off..off + g.len()].iter_mut().zip(g) {
                        *fg = *fg + ng;
                    }
                }
            }
        }
    }
}

/// Copy a column block `[col0, col0+width)` of `src[rows, stride]` into a
/// contiguous `[rows, width]` buffer.
fn gather_head<S: Scalar>(src: &[S], rows: usize, stride: usize, col0: usize, width: usize, out: &mut [S]) {
    for r in 0..rows {
        out[r * width..(r + 1) * width]
            .copy_from_slice(&src[r * stride + col0..r * stride + col0 + width]);
    }
}

/// Write a contiguous `[rows, width]` buffer into a column block.
fn scatter_head<S: Scalar>(src: &[S], rows: usize, stride: usize, col0: usize, width: usize, out: &mut [S]) {
    for r in 0..rows {
        out[r * stride + col0..r * stride + col0 + width]
            .copy_from_slice(&src[r * width..(r + 1) * width]);
    }
}

/// Accumulate a contiguous `[rows, width]` buffer into a column block.
fn scatter_head_acc<S: Scalar>(src: &[S], rows: usize, stride: usize, col0: usize, width: usize, out: &mut [S]) {
    for r in 0..rows {
        for c in 0..width {
            out[r * stride + col0 + c] = out[r * stride + col0 + c] + src[r * width + c];
        }
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let c = S::from_f64_lossy(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64_lossy(0.044_715);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let c = S::from_f64_lossy(0.797_884_560_802_865_4);
    let a = S::from_f64_lossy(0.044_715);
    let three = S::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}
