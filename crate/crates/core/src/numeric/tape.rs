//! Reverse-mode differentiation over a recorded tape of matrix ops.
//!
//! Every value on the tape is a `rows × cols` matrix (scalars are `1 × 1`).
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` is a single reverse sweep.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::float::cast;
use crate::numeric::{kernels, Float, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Variable,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Mask(Var, Vec<T>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::gradients`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
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

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn grad_of(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.node(*v).needs_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        check_len("constant", rows, cols, data.len())?;
        Ok(self.push(data, rows, cols, Op::Constant, false))
    }

    /// Leaf that receives a gradient but is not bound to a parameter store.
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        check_len("variable", rows, cols, data.len())?;
        Ok(self.push(data, rows, cols, Op::Variable, true))
    }

    /// Copies every parameter of `store` onto the tape, in store order.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        (0..store.len())
            .map(|i| {
                let t: &Tensor<T> = store.get(i);
                let (rows, cols) = t.rows_cols();
                self.push(t.data().to_vec(), rows, cols, Op::Param(i), t.requires_grad)
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(out, m, n, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape {
                op: "add",
                left: vec![sa.0, sa.1],
                right: vec![sb.0, sb.1],
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(out, sa.0, sa.1, Op::Add(a, b), g))
    }

    /// Adds a `1 × n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let sb = self.shape(bias);
        if sb != (1, n) {
            return Err(Error::Shape {
                op: "add_bias",
                left: vec![m, n],
                right: vec![sb.0, sb.1],
            });
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        let g = self.grad_of(&[x, bias]);
        Ok(self.push(out, m, n, Op::AddBias(x, bias), g))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let g = self.grad_of(&[x]);
        self.push(out, m, n, Op::Scale(x, c), g)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let g = self.grad_of(&[x]);
        self.push(out, m, n, Op::Gelu(x), g)
    }

    /// Inverted dropout; a no-op when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let (m, n) = self.shape(x);
        let keep: T = cast(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..m * n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &k)| v * k)
            .collect();
        let g = self.grad_of(&[x]);
        self.push(out, m, n, Op::Mask(x, mask), g)
    }

    /// Row-wise layer normalisation with affine `gain`/`bias` of shape `1 × n`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        for p in [gain, bias] {
            let s = self.shape(p);
            if s != (1, n) {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: vec![m, n],
                    right: vec![s.0, s.1],
                });
            }
        }
        let eps: T = cast(LAYER_NORM_EPS);
        let nf: T = cast(n as f64);
        let xs = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        let g = self.grad_of(&[x, gain, bias]);
        Ok(self.push(
            out,
            m,
            n,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            g,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let xs = self.value(x);
        if xs.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input"));
        }
        let mut out = Vec::with_capacity(m * n);
        for row in xs.chunks_exact(n) {
            out.extend(kernels::softmax(row));
        }
        let g = self.grad_of(&[x]);
        Ok(self.push(out, m, n, Op::SoftmaxRows(x), g))
    }

    /// Multi-head scaled dot-product attention where position `i` only sees
    /// positions `0..=i`. `q`, `k`, `v` are `n × d` with `d` split into `heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.shape(q);
        for other in [k, v] {
            let s = self.shape(other);
            if s != (n, d) {
                return Err(Error::Shape {
                    op: "causal_attention",
                    left: vec![n, d],
                    right: vec![s.0, s.1],
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} columns do not split into {heads} heads")));
        }
        let (out, probs) =
            kernels::causal_attention(self.value(q), self.value(k), self.value(v), n, d, heads);
        let g = self.grad_of(&[q, k, v]);
        Ok(self.push(
            out,
            n,
            d,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            g,
        ))
    }

    /// Embedding lookup: row `r` of the output is row `ids[r]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfRange {
                    what: "gather row",
                    index: id,
                    limit: vocab,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let g = self.grad_of(&[table]);
        Ok(self.push(
            out,
            ids.len(),
            d,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::OutOfRange {
                    what: "row",
                    index: r,
                    limit: m,
                });
            }
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let g = self.grad_of(&[x]);
        Ok(self.push(
            out,
            rows.len(),
            n,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            g,
        ))
    }

    /// Weighted negative log-likelihood `−Σ_i w_i · log softmax(logits_i)[t_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (m, n) = self.shape(logits);
        if targets.len() != m || weights.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![m, n],
                right: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::OutOfRange {
                what: "target id",
                index: t,
                limit: n,
            });
        }
        if weights.iter().any(|w| w.is_nan() || *w < T::zero()) {
            return Err(Error::Config("cross-entropy weights must be non-negative".into()));
        }
        let lv = self.value(logits);
        if lv.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("cross-entropy logits"));
        }
        let mut probs = Vec::with_capacity(m * n);
        let mut loss = T::zero();
        for (r, row) in lv.chunks_exact(n).enumerate() {
            let (lse, p) = kernels::log_sum_exp_and_softmax(row);
            loss += weights[r] * (lse - row[targets[r]]);
            probs.extend(p);
        }
        let g = self.grad_of(&[logits]);
        Ok(self.push(
            vec![loss],
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            g,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let g = self.grad_of(&[x]);
        self.push(vec![s], 1, 1, Op::Sum(x), g)
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalar(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Variable | Op::Param(_)) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs the reverse sweep and accumulates parameter gradients into `store`.
    /// Gradients add onto whatever is already there; callers zero them.
    /// Parameters the loss does not depend on keep their current gradient,
    /// so after `zero_grad` they stay at `None` and the optimizer skips them.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(p) = node.op {
                let t = store.get_mut(p);
                if !t.requires_grad {
                    continue;
                }
                if let Some(g) = &grads.grads[idx] {
                    t.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let wants = |v: Var| self.node(v).needs_grad;
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                if wants(*a) {
                    let da = kernels::matmul_grad_a(g, self.value(*b), m, k, n);
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    let db = kernels::matmul_grad_b(self.value(*a), g, m, k, n);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    accumulate(grads, *x, g);
                }
                if wants(*bias) {
                    let mut db = vec![T::zero(); node.cols];
                    for row in g.chunks_exact(node.cols) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    accumulate(grads, *bias, &db);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<T> = g.iter().map(|&v| v * *c).collect();
                accumulate(grads, *x, &dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<T> = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| gv * kernels::gelu_grad(xv))
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Op::Mask(x, mask) => {
                let dx: Vec<T> = g.iter().zip(mask).map(|(&gv, &k)| gv * k).collect();
                accumulate(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.cols;
                let gv = self.value(*gain);
                if wants(*gain) || wants(*bias) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for c in 0..n {
                            dg[c] += grow[c] * hrow[c];
                            db[c] += grow[c];
                        }
                    }
                    if wants(*gain) {
                        accumulate(grads, *gain, &dg);
                    }
                    if wants(*bias) {
                        accumulate(grads, *bias, &db);
                    }
                }
                if wants(*x) {
                    let nf: T = cast(n as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..node.rows {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..n {
                            let dh = grow[c] * gv[c];
                            mean_d += dh;
                            mean_dh += dh * hrow[c];
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        for c in 0..n {
                            let dh = grow[c] * gv[c];
                            dx[r * n + c] = rstd[r] * (dh - mean_d - hrow[c] * mean_dh);
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::SoftmaxRows(x) => {
                let n = node.cols;
                let mut dx = vec![T::zero(); g.len()];
                for ((drow, yrow), grow) in dx
                    .chunks_exact_mut(n)
                    .zip(node.value.chunks_exact(n))
                    .zip(g.chunks_exact(n))
                {
                    let dot: T = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                    for c in 0..n {
                        drow[c] = yrow[c] * (grow[c] - dot);
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = kernels::causal_attention_grad(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    node.rows,
                    node.cols,
                    *heads,
                );
                if wants(*q) {
                    accumulate(grads, *q, &dq);
                }
                if wants(*k) {
                    accumulate(grads, *k, &dk);
                }
                if wants(*v) {
                    accumulate(grads, *v, &dv);
                }
            }
            Op::Gather { table, ids } => {
                let (vocab, d) = self.shape(*table);
                let mut dt = vec![T::zero(); vocab * d];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a += b);
                }
                accumulate(grads, *table, &dt);
            }
            Op::SelectRows { x, rows } => {
                let (m, n) = self.shape(*x);
                let mut dx = vec![T::zero(); m * n];
                for (i, &r) in rows.iter().enumerate() {
                    dx[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&g[i * n..(i + 1) * n])
                        .for_each(|(a, &b)| *a += b);
                }
                accumulate(grads, *x, &dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let n = self.shape(*logits).1;
                let scale = g[0];
                let mut dl = probs.clone();
                for (r, row) in dl.chunks_exact_mut(n).enumerate() {
                    row[targets[r]] -= T::one();
                    let w = weights[r] * scale;
                    row.iter_mut().for_each(|v| *v *= w);
                }
                accumulate(grads, *logits, &dl);
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                accumulate(grads, *x, &vec![g[0]; len]);
            }
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn check_len(op: &'static str, rows: usize, cols: usize, len: usize) -> Result<()> {
    if rows == 0 || cols == 0 || rows * cols != len {
        return Err(Error::Shape {
            op,
            left: vec![rows, cols],
            right: vec![len],
        });
    }
    Ok(())
}
