use rand::Rng;

use super::kernels::{self, AttnLayout};
use super::{gemm, Float, MatView, MatViewMut, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Gelu(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    PickRows {
        picks: Vec<(Var, usize)>,
    },
    Attention {
        qkv: Var,
        bias: Var,
        layout: AttnLayout,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records one forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Constant leaf: never accumulates a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.req(v)
    }

    /// Saved attention weights `[batch, heads, seq, seq]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatView::dense(self.value(a).data(), m, k),
            MatView::dense(self.value(b).data(), k, n),
            T::zero(),
            MatViewMut::dense(&mut out, m, n),
        );
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul_nt", sa, sb)),
        };
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatView::dense(self.value(a).data(), m, k),
            MatView::dense(self.value(b).data(), n, k).t(),
            T::zero(),
            MatViewMut::dense(&mut out, m, n),
        );
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMulNt(a, b)))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x * s).collect()).expect("same numel");
        let rg = self.req(a);
        self.push(t, rg, Op::Scale(a, s))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = match (tx.shape(), tb.shape()) {
            ([_, n], [nb]) if n == nb => *n,
            (sx, sb) => return Err(shape_err("add_row", sx, sb)),
        };
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.req(x) || self.req(bias);
        Ok(self.push(t, rg, Op::AddRow(x, bias)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| kernels::gelu(v)).collect(),
        )
        .expect("same numel");
        let rg = self.req(x);
        self.push(t, rg, Op::Gelu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.req(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() || eps.is_nan() {
            return Err(Error::invalid(format!("layer_norm eps must be > 0, got {eps:?}")));
        }
        let tx = self.value(x);
        let n = *tx
            .shape()
            .last()
            .ok_or_else(|| shape_err("layer_norm", tx.shape(), &[]))?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [n] {
                return Err(shape_err("layer_norm", tx.shape(), self.value(p).shape()));
            }
        }
        let rows = tx.numel().checked_div(n).unwrap_or(0);
        let mut out = vec![T::zero(); tx.numel()];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        kernels::layer_norm(
            tx.data(),
            n,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            &mut out,
            &mut mean,
            &mut rstd,
        );
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n, inner) = axis_split(tx.shape(), axis)?;
        let mut data = tx.data().to_vec();
        let mut buf = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..n {
                    buf[a] = data[(o * n + a) * inner + i];
                }
                kernels::softmax_in_place(&mut buf);
                for a in 0..n {
                    data[(o * n + a) * inner + i] = buf[a];
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.req(x);
        Ok(self.push(t, rg, Op::Softmax { x, axis }))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, v) = tl.dims2()?;
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err("cross_entropy", tl.shape(), &[targets.len(), mask.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                size: v,
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy mask selects no positions"));
        }
        let mut probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        let mut lsm = vec![T::zero(); v];
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            kernels::log_softmax(tl.row(r), &mut lsm);
            total -= lsm[targets[r]];
            for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(&lsm) {
                *p = l.exp();
            }
        }
        let loss = total / T::of(count as f64);
        let rg = self.req(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Row gather from a `[V×d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = tt.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id: id as u32, size: v });
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.req(table);
        Ok(self.push(
            t,
            rg,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Builds a 2-D tensor whose row `i` is row `picks[i].1` of `picks[i].0`.
    /// Covers concatenation, interleaving and row subsetting.
    pub fn pick_rows(&mut self, picks: &[(Var, usize)]) -> Result<Var> {
        let cols = match picks.first() {
            Some(&(v, _)) => self.value(v).dims2()?.1,
            None => return Err(Error::invalid("pick_rows needs at least one row")),
        };
        let mut data = Vec::with_capacity(picks.len() * cols);
        let mut rg = false;
        for &(v, r) in picks {
            let t = self.value(v);
            let (rows, c) = t.dims2()?;
            if c != cols || r >= rows {
                return Err(shape_err("pick_rows", t.shape(), &[r, cols]));
            }
            data.extend_from_slice(t.row(r));
            rg |= self.req(v);
        }
        let t = Tensor::new(vec![picks.len(), cols], data)?;
        Ok(self.push(t, rg, Op::PickRows { picks: picks.to_vec() }))
    }

    /// Fused multi-head causal self-attention with a learned relative-position
    /// bias. `qkv` is `[batch*seq, 3*d]`; `bias` is `[heads, clip+1]`.
    pub fn causal_attention(&mut self, qkv: Var, bias: Var, layout: AttnLayout) -> Result<Var> {
        let (tq, tb) = (self.value(qkv), self.value(bias));
        let rows = layout.batch * layout.seq;
        if layout.heads == 0 || !layout.d_model.is_multiple_of(layout.heads) {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by heads {}",
                layout.d_model, layout.heads
            )));
        }
        if tq.shape() != [rows, 3 * layout.d_model] {
            return Err(shape_err("causal_attention", tq.shape(), &[rows, 3 * layout.d_model]));
        }
        if tb.shape() != [layout.heads, layout.buckets()] {
            return Err(shape_err(
                "causal_attention",
                tb.shape(),
                &[layout.heads, layout.buckets()],
            ));
        }
        let mut out = vec![T::zero(); rows * layout.d_model];
        let mut probs = vec![T::zero(); layout.batch * layout.heads * layout.seq * layout.seq];
        kernels::causal_attention(tq.data(), tb.data(), layout, &mut out, &mut probs);
        let t = Tensor::new(vec![rows, layout.d_model], out)?;
        let rg = self.req(qkv) || self.req(bias);
        Ok(self.push(
            t,
            rg,
            Op::Attention {
                qkv,
                bias,
                layout,
                probs,
            },
        ))
    }

    /// Inverted dropout. `rate == 0` records an identity node.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let tx = self.value(x);
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..tx.numel())
            .map(|_| {
                if rate > 0.0 && rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.req(x);
        Ok(self.push(t, rg, Op::Dropout { x, mask }))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// trainable leaf (zeros for leaves the loss does not depend on).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.req(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf if n.requires_grad => {
                    let data = grads[i].take().unwrap_or_else(|| vec![T::zero(); n.value.numel()]);
                    Some(Tensor::new(n.value.shape().to_vec(), data).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("2d");
                let n = val(*b).dims2().expect("2d").1;
                let gv = MatView::dense(g, m, n);
                if let Some(ga) = self.acc(grads, *a) {
                    let bt = MatView::dense(val(*b).data(), k, n).t();
                    gemm(T::one(), gv, bt, T::one(), MatViewMut::dense(ga, m, k));
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let at = MatView::dense(val(*a).data(), m, k).t();
                    gemm(T::one(), at, gv, T::one(), MatViewMut::dense(gb, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(*a).dims2().expect("2d");
                let n = val(*b).dims2().expect("2d").0;
                let gv = MatView::dense(g, m, n);
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = MatView::dense(val(*b).data(), n, k);
                    gemm(T::one(), gv, bv, T::one(), MatViewMut::dense(ga, m, k));
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = MatView::dense(val(*a).data(), m, k);
                    gemm(T::one(), gv.t(), av, T::one(), MatViewMut::dense(gb, n, k));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        add_into(ga, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                        *x += gi * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                        *x += gi * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi * *s;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                        *o += gi * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xs = val(*x).data();
                let gam = val(*gamma).data();
                let n = gam.len();
                let nf = T::of(n as f64);
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (r, (xr, gr)) in xs.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                        for c in 0..n {
                            gg[c] += gr[c] * (xr[c] - mean[r]) * rstd[r];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gr in g.chunks_exact(n) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![T::zero(); n];
                    for (r, ((xr, gr), or)) in xs
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            dxhat[c] = gr[c] * gam[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * (xr[c] - mu) * rs;
                        }
                        let (m1, m2) = (s1 / nf, s2 / nf);
                        for c in 0..n {
                            let xhat = (xr[c] - mu) * rs;
                            or[c] += rs * (dxhat[c] - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let y = node.value.data();
                    let (outer, n, inner) = axis_split(node.value.shape(), *axis).expect("axis");
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * n + a) * inner + i;
                            let dot: T = (0..n).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..n {
                                gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let v = val(*logits).dims2().expect("2d").1;
                    let w = g[0] / T::of(*count as f64);
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (o, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *o += w * p;
                        }
                        row[targets[r]] -= w;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(gt) = self.acc(grads, *table) {
                    let d = val(*table).dims2().expect("2d").1;
                    for (t, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[t * d..(t + 1) * d]);
                    }
                }
            }
            Op::PickRows { picks } => {
                let cols = node.value.dims2().expect("2d").1;
                for (i, &(src, r)) in picks.iter().enumerate() {
                    if let Some(gs) = self.acc(grads, src) {
                        add_into(&mut gs[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                }
            }
            Op::Attention {
                qkv,
                bias,
                layout,
                probs,
            } => {
                // Both inputs may need buffers at once; take the bias buffer
                // out temporarily to satisfy the borrow checker.
                let mut db = self.acc(grads, *bias).map(std::mem::take);
                let dq = self.acc(grads, *qkv);
                kernels::causal_attention_backward(
                    val(*qkv).data(),
                    probs,
                    g,
                    *layout,
                    dq.map(|v| v.as_mut_slice()),
                    db.as_deref_mut(),
                );
                if let Some(db) = db {
                    grads[bias.0] = Some(db);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` if `v`
    /// does not require a gradient.
    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.req(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Gradients of trainable leaves produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// `None` for constants and non-leaf values.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
