use super::{
    dot, gelu_grad_scalar, gelu_scalar, layer_norm_with_stats, matmul, matmul_t, matmul_tn,
    softmax, softmax_in_place, Result, Tensor, TensorError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        rstd: Vec<f64>,
    },
    Softmax(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatCols(NodeId, NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<usize>,
        // Per segment, per head, lower-triangular probabilities (row i has i+1 entries).
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of tensor operations. Node ids are handed out in
/// build order, which is a valid topological order, so backward is a single
/// reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`; `b` is a weight stored as `[out, in]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_t(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let v = super::finite("add", Tensor::from_parts_unchecked(va.shape().to_vec(), data))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let v = super::finite(
            "scale",
            Tensor::from_parts_unchecked(va.shape().to_vec(), data),
        )?;
        Ok(self.push(v, Op::Scale(a, s)))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu_scalar(x)).collect();
        let v = super::finite("gelu", Tensor::from_parts_unchecked(va.shape().to_vec(), data))?;
        Ok(self.push(v, Op::Gelu(a)))
    }

    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (v, rstd) = layer_norm_with_stats(self.value(x), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, rstd }))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = softmax(self.value(x))?;
        Ok(self.push(v, Op::Softmax(x)))
    }

    /// Rows of a `[n, d]` table selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (n, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    bound: n,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let v = Tensor::from_parts_unchecked(vec![ids.len(), d], data);
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let mut data = Vec::with_capacity(va.rows() * (ca + cb));
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let v = Tensor::from_parts_unchecked(vec![va.rows(), ca + cb], data);
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[n, d]` with `n = segments.iter().sum()`; each
    /// segment is an independent sequence and row `i` of a segment attends to
    /// rows `0..=i` of the same segment. Queries may come from a different
    /// stream than keys and values (cross-attention).
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: &[usize],
    ) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let n: usize = segments.iter().sum();
        let d = vq.cols();
        for t in [vq, vk, vv] {
            if t.rows() != n || t.cols() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    left: vec![n, d],
                    right: t.shape().to_vec(),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("width {d} not divisible into {heads} heads"),
            });
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s * (s + 1) / 2).sum::<usize>() * heads);
        let mut offset = 0;
        for &len in segments {
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                for i in 0..len {
                    let qi = &vq.row(offset + i)[cols.clone()];
                    let start = probs.len();
                    for j in 0..=i {
                        probs.push(dot(qi, &vk.row(offset + j)[cols.clone()]) * scale);
                    }
                    let p = &mut probs[start..];
                    softmax_in_place(p);
                    let orow = &mut out[(offset + i) * d + h * dk..(offset + i) * d + (h + 1) * dk];
                    for (j, &pij) in p.iter().enumerate() {
                        let vj = &vv.row(offset + j)[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
            }
            offset += len;
        }
        let value = super::finite("attention", Tensor::from_parts_unchecked(vec![n, d], out))?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    /// Weighted mean next-token negative log-likelihood. Rows with weight 0
    /// condition nothing and contribute nothing; the mean is over the total
    /// weight.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let weights = match weights {
            Some(w) if w.len() != rows => {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    left: vec![rows],
                    right: vec![w.len()],
                })
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; rows],
        };
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: "no positions selected".into(),
            });
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: vocab,
                });
            }
            if weights[r] == 0.0 {
                continue;
            }
            let row = lv.row(r);
            loss += weights[r] * (super::log_sum_exp(row) - row[t]);
            softmax_in_place(&mut probs[r * vocab..(r + 1) * vocab]);
        }
        let value = super::finite("cross_entropy", Tensor::scalar(loss / total))?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        let v = super::finite("sum", Tensor::scalar(s))?;
        Ok(self.push(v, Op::Sum(a)))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts_unchecked(lv.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = matmul_t(&gy, self.value(*b))?;
                    let db = matmul_tn(self.value(*a), &gy);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = matmul(&gy, self.value(*b))?;
                    let db = matmul_tn(&gy, self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::Scale(a, s) => {
                    let data = gy.data().iter().map(|g| g * s).collect();
                    accumulate(&mut grads, *a, Tensor::from_parts_unchecked(gy.shape().to_vec(), data));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = gy
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &xv)| g * gelu_grad_scalar(xv))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::from_parts_unchecked(gy.shape().to_vec(), data));
                }
                Op::LayerNorm { x, rstd } => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = gy.row(r);
                        let mean_g = gr.iter().sum::<f64>() / cols as f64;
                        let mean_gy = dot(gr, yr) / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = rs * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts_unchecked(y.shape().to_vec(), dx));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = gy.row(r);
                        let s = dot(gr, yr);
                        for c in 0..cols {
                            dx[r * cols + c] = yr[c] * (gr[c] - s);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts_unchecked(y.shape().to_vec(), dx));
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let d = t.cols();
                    let mut dt = Tensor::zeros(t.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                        for (o, g) in dst.iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let rows = gy.rows();
                    let mut da = Vec::with_capacity(rows * ca);
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let g = gy.row(r);
                        da.extend_from_slice(&g[..ca]);
                        db.extend_from_slice(&g[ca..]);
                    }
                    accumulate(&mut grads, *a, Tensor::from_parts_unchecked(vec![rows, ca], da));
                    accumulate(&mut grads, *b, Tensor::from_parts_unchecked(vec![rows, cb], db));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    segments,
                    probs,
                } => {
                    let (dq, dk_, dv) =
                        self.attention_backward(&gy, *q, *k, *v, *heads, segments, probs);
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk_);
                    accumulate(&mut grads, *v, dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let lv = self.value(*logits);
                    let vocab = lv.cols();
                    let total: f64 = weights.iter().sum();
                    let g = gy.item() / total;
                    let mut dl = vec![0.0; lv.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        let w = g * weights[r];
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        for (o, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *o = w * p;
                        }
                        row[t] -= w;
                    }
                    accumulate(&mut grads, *logits, Tensor::from_parts_unchecked(lv.shape().to_vec(), dl));
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    let n = shape.iter().product();
                    accumulate(&mut grads, *a, Tensor::from_parts_unchecked(shape, vec![gy.item(); n]));
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gy: &Tensor,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: &[usize],
        probs: &[f64],
    ) -> (Tensor, Tensor, Tensor) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (vq.rows(), vq.cols());
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dkm = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = Vec::new();
        let mut cursor = 0;
        let mut offset = 0;
        for &len in segments {
            for h in 0..heads {
                let c0 = h * dk;
                for i in 0..len {
                    let p = &probs[cursor..cursor + i + 1];
                    cursor += i + 1;
                    let gi = &gy.row(offset + i)[c0..c0 + dk];
                    dp.clear();
                    for (j, &pij) in p.iter().enumerate() {
                        let r = (offset + j) * d + c0;
                        dp.push(dot(gi, &vv.data()[r..r + dk]));
                        for (o, g) in dv[r..r + dk].iter_mut().zip(gi) {
                            *o += pij * g;
                        }
                    }
                    let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi = (offset + i) * d + c0;
                    for (j, &pij) in p.iter().enumerate() {
                        let ds = pij * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let r = (offset + j) * d + c0;
                        for c in 0..dk {
                            dq[qi + c] += ds * vk.data()[r + c];
                            dkm[r + c] += ds * vq.data()[qi + c];
                        }
                    }
                }
            }
            offset += len;
        }
        let shape = vec![n, d];
        (
            Tensor::from_parts_unchecked(shape.clone(), dq),
            Tensor::from_parts_unchecked(shape.clone(), dkm),
            Tensor::from_parts_unchecked(shape, dv),
        )
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar with respect to every node reachable from it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; zeros when the node does not influence the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads.get_mut(id.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}
