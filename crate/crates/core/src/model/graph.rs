//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value and whatever the backward pass needs. [`Graph::backward`] walks
//! the nodes in reverse creation order, which is a valid topological order
//! because a node only ever refers to earlier nodes.

use super::tensor::{axpy, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place, Tensor};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;
/// Added to squared norms before the square root in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    Gather { table: NodeId, ids: Vec<u32> },
    Add(NodeId, NodeId),
    AddBias { x: NodeId, bias: NodeId },
    MatMul { x: NodeId, w: NodeId },
    MatMulNt { x: NodeId, w: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Tensor, rstd: Vec<f64> },
    Gelu(NodeId),
    Tanh(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, offsets: Vec<usize>, probs: Vec<Vec<f64>> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    Dropout { x: NodeId, mask: Vec<f64> },
    CrossEntropy { logits: NodeId, targets: Vec<u32>, probs: Tensor },
    NegMeanCosine { table: NodeId, pairs: Vec<(u32, u32)> },
    Scale(NodeId, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every parameter leaf, indexed by
/// parameter slot. Parameters the output does not depend on are `None`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub per_param: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.shape(), (1, 1));
        v.data[0]
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf whose gradient is reported under parameter slot `slot`.
    pub fn param(&mut self, slot: usize, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id].param = Some(slot);
        id
    }

    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let t = &self.nodes[table].value;
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        v.add_assign(&self.nodes[b].value);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        let b = &self.nodes[bias].value;
        debug_assert_eq!(b.len(), v.cols);
        for r in 0..v.rows {
            for (a, bb) in v.row_mut(r).iter_mut().zip(&b.data) {
                *a += bb;
            }
        }
        self.push(v, Op::AddBias { x, bias })
    }

    /// `x[m,k] · w[k,n]`
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        assert_eq!(xv.cols, wv.rows, "matmul inner dimension");
        let mut out = Tensor::zeros(xv.rows, wv.cols);
        matmul_acc(&xv.data, &wv.data, &mut out.data, xv.rows, xv.cols, wv.cols);
        self.push(out, Op::MatMul { x, w })
    }

    /// `x[m,k] · w[n,k]ᵀ`
    pub fn matmul_nt(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        assert_eq!(xv.cols, wv.cols, "matmul_nt inner dimension");
        let mut out = Tensor::zeros(xv.rows, wv.rows);
        matmul_nt_acc(&xv.data, &wv.data, &mut out.data, xv.rows, xv.cols, wv.rows);
        self.push(out, Op::MatMulNt { x, w })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (g, b) = (&self.nodes[gain].value, &self.nodes[bias].value);
        let n = xv.cols as f64;
        let mut xhat = Tensor::zeros(xv.rows, xv.cols);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        let mut rstd = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (j, v) in row.iter().enumerate() {
                xh[j] = (v - mean) * rs;
            }
            let o = out.row_mut(r);
            for j in 0..o.len() {
                o[j] = xh[j] * g.data[j] + b.data[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        v.data.iter_mut().for_each(|a| *a = gelu(*a));
        self.push(v, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        v.data.iter_mut().for_each(|a| *a = a.tanh());
        self.push(v, Op::Tanh(x))
    }

    /// Multi-head scaled dot-product attention over variable-length
    /// sequences stored back to back: sequence `s` occupies rows
    /// `offsets[s]..offsets[s + 1]` and attends only within itself.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, offsets: &[usize]) -> NodeId {
        let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let d = qv.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows, d);
        let mut probs = Vec::with_capacity((offsets.len() - 1) * heads);
        for s in 0..offsets.len() - 1 {
            let (lo, len) = (offsets[s], offsets[s + 1] - offsets[s]);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let (qh, kh, vh) = (block(qv, lo, len, &cols), block(kv, lo, len, &cols), block(vv, lo, len, &cols));
                let mut p = vec![0.0; len * len];
                matmul_nt_acc(&qh, &kh, &mut p, len, dh, len);
                for pi in p.chunks_mut(len.max(1)) {
                    pi.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(pi);
                }
                let mut o = vec![0.0; len * dh];
                matmul_acc(&p, &vh, &mut o, len, len, dh);
                add_block(&mut out, lo, &cols, &o);
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, offsets: offsets.to_vec(), probs })
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut out = Tensor::zeros(rows.len(), xv.cols);
        for (r, &src) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(src));
        }
        self.push(out, Op::SelectRows { x, rows: rows.to_vec() })
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for (a, m) in v.data.iter_mut().zip(&mask) {
            *a *= m;
        }
        self.push(v, Op::Dropout { x, mask })
    }

    /// Mean cross-entropy of `logits` rows against `targets`; 0 for no rows.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> NodeId {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.rows, targets.len(), "one target per logits row");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            softmax_in_place(row);
            let lrow = lv.row(r);
            let max = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lrow.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - lrow[t as usize];
        }
        let loss = if targets.is_empty() { 0.0 } else { total / targets.len() as f64 };
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// `−(1/|pairs|) Σ cos(table[a], table[b])`, with [`COSINE_EPS`] inside
    /// each norm. An empty pair list yields 0.
    pub fn neg_mean_cosine(&mut self, table: NodeId, pairs: &[(u32, u32)]) -> NodeId {
        let t = &self.nodes[table].value;
        let sum: f64 = pairs.iter().map(|&(a, b)| cosine(t.row(a as usize), t.row(b as usize))).sum();
        let loss = if pairs.is_empty() { 0.0 } else { -sum / pairs.len() as f64 };
        self.push(Tensor::scalar(loss), Op::NegMeanCosine { table, pairs: pairs.to_vec() })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        v.data.iter_mut().for_each(|a| *a *= c);
        self.push(v, Op::Scale(x, c))
    }

    /// Gradients of the scalar node `output` with respect to every leaf
    /// registered with [`Graph::param`]; `n_params` sizes the result.
    pub fn backward(&self, output: NodeId, n_params: usize) -> Gradients {
        assert_eq!(self.nodes[output].value.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(Tensor::scalar(1.0));
        let mut per_param: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    if let Some(slot) = node.param {
                        accumulate(&mut per_param[slot], g, node.value.shape());
                    }
                }
                Op::Gather { table, ids } => {
                    let tv = &self.nodes[*table].value;
                    let dt = slot(&mut grads[*table], tv.shape());
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(1.0, g.row(r), dt.row_mut(i as usize));
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[*a], &g);
                    add_into(&mut grads[*b], &g);
                }
                Op::AddBias { x, bias } => {
                    let db = slot(&mut grads[*bias], self.nodes[*bias].value.shape());
                    for r in 0..g.rows {
                        axpy(1.0, g.row(r), &mut db.data);
                    }
                    add_into(&mut grads[*x], &g);
                }
                Op::MatMul { x, w } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (m, k, n) = (xv.rows, xv.cols, wv.cols);
                    let dx = slot(&mut grads[*x], xv.shape());
                    matmul_nt_acc(&g.data, &wv.data, &mut dx.data, m, n, k);
                    let dw = slot(&mut grads[*w], wv.shape());
                    matmul_tn_acc(&xv.data, &g.data, &mut dw.data, m, k, n);
                }
                Op::MatMulNt { x, w } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (m, k, n) = (xv.rows, xv.cols, wv.rows);
                    let dx = slot(&mut grads[*x], xv.shape());
                    matmul_acc(&g.data, &wv.data, &mut dx.data, m, n, k);
                    let dw = slot(&mut grads[*w], wv.shape());
                    matmul_tn_acc(&g.data, &xv.data, &mut dw.data, m, n, k);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = &self.nodes[*gain].value;
                    let cols = g.cols;
                    let n = cols as f64;
                    {
                        let dg = slot(&mut grads[*gain], gv.shape());
                        for r in 0..g.rows {
                            for j in 0..cols {
                                dg.data[j] += g.row(r)[j] * xhat.row(r)[j];
                            }
                        }
                    }
                    {
                        let db = slot(&mut grads[*bias], gv.shape());
                        for r in 0..g.rows {
                            axpy(1.0, g.row(r), &mut db.data);
                        }
                    }
                    let dx = slot(&mut grads[*x], (g.rows, cols));
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..g.rows {
                        let (gr, xh) = (g.row(r), xhat.row(r));
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gv.data[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dot(&dxhat, xh) / n;
                        let out = dx.row_mut(r);
                        for j in 0..cols {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = &self.nodes[*x].value;
                    let dx = slot(&mut grads[*x], xv.shape());
                    for ((d, &gi), &xi) in dx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                        *d += gi * gelu_grad(xi);
                    }
                }
                Op::Tanh(x) => {
                    let dx = slot(&mut grads[*x], node.value.shape());
                    for ((d, &gi), &yi) in dx.data.iter_mut().zip(&g.data).zip(&node.value.data) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
                Op::Attention { q, k, v, heads, offsets, probs } => {
                    let (qv, kv, vv) = (&self.nodes[*q].value, &self.nodes[*k].value, &self.nodes[*v].value);
                    let shape = qv.shape();
                    let dh = shape.1 / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Tensor::zeros(shape.0, shape.1);
                    let mut dk = Tensor::zeros(shape.0, shape.1);
                    let mut dv = Tensor::zeros(shape.0, shape.1);
                    let mut pi_idx = 0;
                    for s in 0..offsets.len() - 1 {
                        let (lo, len) = (offsets[s], offsets[s + 1] - offsets[s]);
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[pi_idx];
                            pi_idx += 1;
                            let (qh, kh, vh, gh) = (block(qv, lo, len, &cols), block(kv, lo, len, &cols), block(vv, lo, len, &cols), block(&g, lo, len, &cols));
                            let mut dvh = vec![0.0; len * dh];
                            matmul_tn_acc(p, &gh, &mut dvh, len, len, dh);
                            let mut ds = vec![0.0; len * len];
                            matmul_nt_acc(&gh, &vh, &mut ds, len, dh, len);
                            for (dsi, pi) in ds.chunks_mut(len.max(1)).zip(p.chunks(len.max(1))) {
                                let inner = dot(pi, dsi);
                                for (x, &pij) in dsi.iter_mut().zip(pi) {
                                    *x = pij * (*x - inner) * scale;
                                }
                            }
                            let mut dqh = vec![0.0; len * dh];
                            matmul_acc(&ds, &kh, &mut dqh, len, len, dh);
                            let mut dkh = vec![0.0; len * dh];
                            matmul_tn_acc(&ds, &qh, &mut dkh, len, len, dh);
                            add_block(&mut dq, lo, &cols, &dqh);
                            add_block(&mut dk, lo, &cols, &dkh);
                            add_block(&mut dv, lo, &cols, &dvh);
                        }
                    }
                    add_into(&mut grads[*q], &dq);
                    add_into(&mut grads[*k], &dk);
                    add_into(&mut grads[*v], &dv);
                }
                Op::SelectRows { x, rows } => {
                    let xv = &self.nodes[*x].value;
                    let dx = slot(&mut grads[*x], xv.shape());
                    for (r, &src) in rows.iter().enumerate() {
                        axpy(1.0, g.row(r), dx.row_mut(src));
                    }
                }
                Op::Dropout { x, mask } => {
                    let dx = slot(&mut grads[*x], g.shape());
                    for ((d, &gi), &m) in dx.data.iter_mut().zip(&g.data).zip(mask) {
                        *d += gi * m;
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    if !targets.is_empty() {
                        let c = g.data[0] / targets.len() as f64;
                        let dl = slot(&mut grads[*logits], probs.shape());
                        for (r, &t) in targets.iter().enumerate() {
                            let row = dl.row_mut(r);
                            axpy(c, probs.row(r), row);
                            row[t as usize] -= c;
                        }
                    }
                }
                Op::NegMeanCosine { table, pairs } => {
                    if !pairs.is_empty() {
                        let tv = &self.nodes[*table].value;
                        let c = -g.data[0] / pairs.len() as f64;
                        let dt = slot(&mut grads[*table], tv.shape());
                        for &(a, b) in pairs {
                            let (u, v) = (tv.row(a as usize), tv.row(b as usize));
                            let (du, dv) = cosine_grad(u, v);
                            axpy(c, &du, dt.row_mut(a as usize));
                            axpy(c, &dv, dt.row_mut(b as usize));
                        }
                    }
                }
                Op::Scale(x, c) => {
                    let dx = slot(&mut grads[*x], g.shape());
                    axpy(*c, &g.data, &mut dx.data);
                }
            }
        }
        Gradients { per_param }
    }
}

fn slot(g: &mut Option<Tensor>, shape: (usize, usize)) -> &mut Tensor {
    g.get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn add_into(dst: &mut Option<Tensor>, g: &Tensor) {
    match dst {
        Some(t) => t.add_assign(g),
        None => *dst = Some(g.clone()),
    }
}

fn accumulate(dst: &mut Option<Tensor>, g: Tensor, shape: (usize, usize)) {
    debug_assert_eq!(g.shape(), shape);
    match dst {
        Some(t) => t.add_assign(&g),
        None => *dst = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Rows `lo..lo + len`, columns `cols` of `t`, as a contiguous block.
fn block(t: &Tensor, lo: usize, len: usize, cols: &std::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * cols.len());
    for r in lo..lo + len {
        out.extend_from_slice(&t.row(r)[cols.clone()]);
    }
    out
}

fn add_block(t: &mut Tensor, lo: usize, cols: &std::ops::Range<usize>, b: &[f64]) {
    let w = cols.len();
    for (i, src) in b.chunks(w.max(1)).enumerate() {
        axpy(1.0, src, &mut t.row_mut(lo + i)[cols.clone()]);
    }
}

/// Cosine similarity with [`COSINE_EPS`] added under each square root.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let nu = (dot(u, u) + COSINE_EPS).sqrt();
    let nv = (dot(v, v) + COSINE_EPS).sqrt();
    dot(u, v) / (nu * nv)
}

fn cosine_grad(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nu2 = dot(u, u) + COSINE_EPS;
    let nv2 = dot(v, v) + COSINE_EPS;
    let inv = 1.0 / (nu2.sqrt() * nv2.sqrt());
    let c = dot(u, v) * inv;
    let du = u.iter().zip(v).map(|(ui, vi)| vi * inv - c * ui / nu2).collect();
    let dv = u.iter().zip(v).map(|(ui, vi)| ui * inv - c * vi / nv2).collect();
    (du, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, seed: f64) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|i| ((i as f64 + seed) * 0.731).sin()).collect())
    }

    /// Central differences of `f` over every entry of every input.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().enumerate().map(|(i, x)| g.param(i, x.clone())).collect();
        let out = f(&mut g, &ids);
        let grads = g.backward(out, inputs.len());
        let eval = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs.iter().enumerate().map(|(i, x)| g.param(i, x.clone())).collect();
            let out = f(&mut g, &ids);
            g.scalar(out)
        };
        let eps = 1e-5;
        for (pi, x) in inputs.iter().enumerate() {
            for e in 0..x.len() {
                let mut plus = inputs.clone();
                plus[pi].data[e] += eps;
                let mut minus = inputs.clone();
                minus[pi].data[e] -= eps;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let ana = grads.per_param[pi].as_ref().map_or(0.0, |g| g.data[e]);
                assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "input {pi} entry {e}: numeric {num} analytic {ana}");
            }
        }
    }

    /// Reduces any matrix to a scalar with a fixed random projection.
    fn reduce(g: &mut Graph, x: NodeId) -> NodeId {
        let (r, c) = g.value(x).shape();
        let w = g.constant(t(c, 1, 99.0));
        let y = g.matmul(x, w);
        let ones = g.constant(Tensor::from_vec(1, r, vec![1.0; r]));
        g.matmul(ones, y)
    }

    #[test]
    fn matmul_and_bias() {
        check(vec![t(3, 4, 0.0), t(4, 2, 1.0), t(1, 2, 2.0)], |g, ids| {
            let y = g.matmul(ids[0], ids[1]);
            let y = g.add_bias(y, ids[2]);
            reduce(g, y)
        });
        check(vec![t(3, 4, 0.0), t(5, 4, 1.0)], |g, ids| {
            let y = g.matmul_nt(ids[0], ids[1]);
            reduce(g, y)
        });
    }

    #[test]
    fn layer_norm_gelu_tanh() {
        check(vec![t(3, 5, 0.0), t(1, 5, 3.0), t(1, 5, 4.0)], |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2]);
            let y = g.gelu(y);
            let y = g.tanh(y);
            reduce(g, y)
        });
    }

    #[test]
    fn attention_grad() {
        check(vec![t(5, 4, 0.0), t(5, 4, 1.0), t(5, 4, 2.0)], |g, ids| {
            let y = g.attention(ids[0], ids[1], ids[2], 2, &[0, 2, 5]);
            reduce(g, y)
        });
    }

    #[test]
    fn gather_select_ce() {
        check(vec![t(6, 3, 0.0)], |g, ids| {
            let x = g.gather(ids[0], &[1, 4, 1, 0]);
            let x = g.select_rows(x, &[2, 0, 3]);
            let logits = g.matmul_nt(x, ids[0]);
            g.cross_entropy(logits, &[5, 1, 2])
        });
    }

    #[test]
    fn cosine_and_scale() {
        check(vec![t(5, 3, 0.0)], |g, ids| {
            let a = g.neg_mean_cosine(ids[0], &[(0, 3), (1, 4)]);
            let b = g.scale(a, 10.0);
            g.add(a, b)
        });
    }

    #[test]
    fn dropout_mask_applies() {
        check(vec![t(2, 3, 0.0)], |g, ids| {
            let y = g.dropout(ids[0], vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
            reduce(g, y)
        });
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut g = Graph::new();
        let q = g.constant(t(4, 4, 0.0));
        let k = g.constant(t(4, 4, 1.0));
        let ones = g.constant(Tensor::from_vec(4, 4, vec![1.0; 16]));
        let y = g.attention(q, k, ones, 2, &[0, 1, 4]);
        assert!(g.value(y).data.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
