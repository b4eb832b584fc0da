//! Tape-based reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! Every operation appends a node holding its value and enough saved state to
//! compute the vector-Jacobian product later. [`Graph::backward`] walks the tape
//! in reverse, keeps the gradient of every node that needs one, and accumulates
//! leaf gradients into the bound [`ParamStore`] tensors.
//!
//! Values are matrices `(rows, cols)`; a scalar is `(1, 1)`.

use crate::error::{NnError, Result};
use crate::tensor::{ParamId, ParamStore};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of rows that attends only within itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    DivRows(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<f64>,
    },
    LogSoftmaxRows(Var),
    Exp(Var),
    Ln(Var),
    SumRows(Var),
    Sum(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    PickPerRow {
        x: Var,
        idx: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRows(..) => "mul_rows",
            Op::DivRows(..) => "div_rows",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Attention { .. } => "attention",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::SumRows(_) => "sum_rows",
            Op::Sum(_) => "sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::PickPerRow { .. } => "pick_per_row",
        }
    }
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// The operation tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    grads: Vec<Option<Vec<f64>>>,
    non_finite: Option<(usize, &'static str)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            grads: Vec::new(),
            non_finite: None,
        }
    }

    /// A graph that never tracks gradients; used for inference and scoring.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a `(1, 1)` node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last backward's loss with respect to `v`, if `v` needed one.
    pub fn grad_of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Fails if any node produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((idx, op)) => Err(NnError::NonFinite(format!("node {idx} ({op})"))),
            None => Ok(()),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len(), "{}", op.name());
        if self.non_finite.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---- leaves -------------------------------------------------------------

    /// Binds a stored parameter; its gradient flows back into `store` on backward.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (rows, cols) = t.matrix_dims();
        let needs = t.requires_grad();
        self.push(rows, cols, t.data().to_vec(), Op::Leaf(Some(id)), needs)
    }

    /// Free-standing differentiable input not backed by a parameter.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "leaf shape");
        self.push(rows, cols, data, Op::Leaf(None), true)
    }

    /// Detached input: never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "constant shape");
        self.push(rows, cols, data, Op::Constant, false)
    }

    // ---- elementwise --------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.dims(a), self.dims(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let (r, c) = self.dims(a);
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        self.push(r, c, v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let (r, c) = self.dims(a);
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        self.push(r, c, v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let (r, c) = self.dims(a);
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        self.push(r, c, v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let (r, c) = self.dims(x);
        let v = self.value(x).iter().map(|a| a * factor).collect();
        let g = self.any_grad(&[x]);
        self.push(r, c, v, Op::Scale(x, factor), g)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let v = self.value(x).iter().map(|a| a.exp()).collect();
        let g = self.any_grad(&[x]);
        self.push(r, c, v, Op::Exp(x), g)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let v = self.value(x).iter().map(|a| a.ln()).collect();
        let g = self.any_grad(&[x]);
        self.push(r, c, v, Op::Ln(x), g)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let v = self.value(x).iter().map(|&a| gelu(a)).collect();
        let g = self.any_grad(&[x]);
        self.push(r, c, v, Op::Gelu(x), g)
    }

    // ---- broadcasting -------------------------------------------------------

    /// `x[r, c] + b[1, c]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(b), (1, c), "add_row: bias shape");
        let bv = self.value(b);
        let v = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let g = self.any_grad(&[x, b]);
        self.push(r, c, v, Op::AddRow(x, b), g)
    }

    /// `x[r, c] * s[r, 1]`, scaling each row by its own factor.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(s), (r, 1), "mul_rows: factor shape");
        let sv = self.value(s);
        let v = self
            .value(x)
            .chunks_exact(c)
            .zip(sv)
            .flat_map(|(row, &f)| row.iter().map(move |a| a * f))
            .collect();
        let g = self.any_grad(&[x, s]);
        self.push(r, c, v, Op::MulRows(x, s), g)
    }

    /// `x[r, c] / s[r, 1]`, dividing each row by its own divisor.
    pub fn div_rows(&mut self, x: Var, s: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(s), (r, 1), "div_rows: divisor shape");
        let sv = self.value(s);
        let v = self
            .value(x)
            .chunks_exact(c)
            .zip(sv)
            .flat_map(|(row, &d)| row.iter().map(move |a| a / d))
            .collect();
        let g = self.any_grad(&[x, s]);
        self.push(r, c, v, Op::DivRows(x, s), g)
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul: inner dimension");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::rows(self.value(a), k),
            MatRef::rows(self.value(b), n),
            &mut out,
            n,
            false,
        );
        let g = self.any_grad(&[a, b]);
        self.push(m, n, out, Op::MatMul(a, b), g)
    }

    /// `a[m, k] b[n, k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_t: inner dimension");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::rows(self.value(a), k),
            MatRef::strided(self.value(b), 1, k),
            &mut out,
            n,
            false,
        );
        let g = self.any_grad(&[a, b]);
        self.push(m, n, out, Op::MatMulT(a, b), g)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, d) = self.dims(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < rows, "embedding: id {id} out of range {rows}");
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let g = self.any_grad(&[table]);
        self.push(
            ids.len(),
            d,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            g,
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, c), "layer_norm: gamma");
        assert_eq!(self.dims(beta), (1, c), "layer_norm: beta");
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        )
    }

    /// Multi-head causal self-attention over packed rows.
    ///
    /// `q`, `k`, `v` are `[N, d]`; rows are grouped into `segments`, each an
    /// independent sequence. Row `i` of a segment attends to rows `0..=i` of the
    /// same segment only.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
    ) -> Var {
        let (n, d) = self.dims(q);
        assert_eq!(self.dims(k), (n, d), "attention: k shape");
        assert_eq!(self.dims(v), (n, d), "attention: v shape");
        assert!(heads > 0 && d % heads == 0, "attention: heads must divide width");
        assert_eq!(
            segments.iter().map(|s| s.len).sum::<usize>(),
            n,
            "attention: segments must cover all rows"
        );
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let probs_len: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![0.0; probs_len];
        let mut out = vec![0.0; n * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut off = 0;
        for seg in segments {
            let len = seg.len;
            for h in 0..heads {
                let base = seg.start * d + h * dh;
                let p = &mut probs[off..off + len * len];
                // scores = Q_h K_h^T
                gemm(
                    len,
                    dh,
                    len,
                    MatRef::strided(&qv[base..], d, 1),
                    MatRef::strided(&kv[base..], 1, d),
                    p,
                    len,
                    false,
                );
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    let mut max = f64::NEG_INFINITY;
                    for s in row[..=i].iter_mut() {
                        *s *= scale;
                        max = max.max(*s);
                    }
                    let mut total = 0.0;
                    for s in row[..=i].iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    for s in row[..=i].iter_mut() {
                        *s /= total;
                    }
                    row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
                }
                // O_h = P V_h
                gemm_strided_out(
                    len,
                    len,
                    dh,
                    MatRef::rows(p, len),
                    MatRef::strided(&vv[base..], d, 1),
                    &mut out[base..],
                    d,
                    false,
                );
                off += len * len;
            }
        }
        let g = self.any_grad(&[q, k, v]);
        if !self.grad_enabled {
            probs = Vec::new();
        }
        self.push(
            n,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            g,
        )
    }

    // ---- reductions and indexing -------------------------------------------

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|a| *a -= lse);
        }
        let g = self.any_grad(&[x]);
        self.push(r, c, out, Op::LogSoftmaxRows(x), g)
    }

    /// `[r, c] -> [r, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let v = self.value(x).chunks_exact(c).map(|row| row.iter().sum()).collect();
        let g = self.any_grad(&[x]);
        self.push(r, 1, v, Op::SumRows(x), g)
    }

    /// Sum of every element, `(1, 1)`.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = vec![self.value(x).iter().sum()];
        let g = self.any_grad(&[x]);
        self.push(1, 1, v, Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows: row {i} out of range {r}");
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let g = self.any_grad(&[x]);
        self.push(
            idx.len(),
            c,
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            g,
        )
    }

    /// `out[i] = x[i, idx[i]]`, shape `[r, 1]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(idx.len(), r, "pick_per_row: one index per row");
        let xv = self.value(x);
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "pick_per_row: column {j} out of range {c}");
                xv[i * c + j]
            })
            .collect();
        let g = self.any_grad(&[x]);
        self.push(
            r,
            1,
            out,
            Op::PickPerRow {
                x,
                idx: idx.to_vec(),
            },
            g,
        )
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Parameter leaves accumulate into `params`; intermediate gradients stay
    /// readable through [`Graph::grad_of`] until the next call.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(NnError::NonScalarLoss(vec![r, c]));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
            return Err(NnError::NonFinite("backward".into()));
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, &grads[i]) {
                params.get_mut(*id).accumulate_grad(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf(_) | Op::Constant => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(bv) {
                        *g += d * y;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((g, d), x) in g.iter_mut().zip(gy).zip(av) {
                        *g += d * x;
                    }
                });
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, |g| add_into(g, gy));
                self.acc(grads, *b, |g| {
                    for row in gy.chunks_exact(cols) {
                        add_into(g, row);
                    }
                });
            }
            Op::MulRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                self.acc(grads, *x, |g| {
                    for (r, f) in sv.iter().enumerate() {
                        for j in 0..cols {
                            g[r * cols + j] += gy[r * cols + j] * f;
                        }
                    }
                });
                self.acc(grads, *s, |g| {
                    for r in 0..rows {
                        g[r] += dot(&gy[r * cols..(r + 1) * cols], &xv[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::DivRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                self.acc(grads, *x, |g| {
                    for (r, d) in sv.iter().enumerate() {
                        for j in 0..cols {
                            g[r * cols + j] += gy[r * cols + j] / d;
                        }
                    }
                });
                self.acc(grads, *s, |g| {
                    for r in 0..rows {
                        let d = sv[r];
                        g[r] -= dot(&gy[r * cols..(r + 1) * cols], &xv[r * cols..(r + 1) * cols])
                            / (d * d);
                    }
                });
            }
            Op::Scale(x, f) => {
                self.acc(grads, *x, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * f));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA += dC B^T ; dB += A^T dC
                self.acc(grads, *a, |g| {
                    gemm(m, n, k, MatRef::rows(gy, n), MatRef::strided(bv, 1, n), g, k, true)
                });
                self.acc(grads, *b, |g| {
                    gemm(k, m, n, MatRef::strided(av, 1, k), MatRef::rows(gy, n), g, n, true)
                });
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA += dC B ; dB += dC^T A
                self.acc(grads, *a, |g| {
                    gemm(m, n, k, MatRef::rows(gy, n), MatRef::rows(bv, k), g, k, true)
                });
                self.acc(grads, *b, |g| {
                    gemm(n, m, k, MatRef::strided(gy, 1, n), MatRef::rows(av, k), g, k, true)
                });
            }
            Op::Embedding { table, ids } => {
                self.acc(grads, *table, |g| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * cols..(id + 1) * cols], &gy[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                self.acc(grads, *gamma, |g| {
                    for (dy, h) in gy.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for j in 0..cols {
                            g[j] += dy[j] * h[j];
                        }
                    }
                });
                self.acc(grads, *beta, |g| {
                    for dy in gy.chunks_exact(cols) {
                        add_into(g, dy);
                    }
                });
                self.acc(grads, *x, |g| {
                    let n = cols as f64;
                    for r in 0..rows {
                        let dy = &gy[r * cols..(r + 1) * cols];
                        let h = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..cols {
                            let dh = dy[j] * gv[j];
                            mean_d += dh;
                            mean_dh += dh * h[j];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        for j in 0..cols {
                            let dh = dy[j] * gv[j];
                            g[r * cols + j] += rstd[r] * (dh - mean_d - h[j] * mean_dh);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |g| {
                    for ((g, d), &a) in g.iter_mut().zip(gy).zip(xv) {
                        *g += d * gelu_grad(a);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, segments, probs, gy, grads),
            Op::LogSoftmaxRows(x) => {
                let yv = &node.value;
                self.acc(grads, *x, |g| {
                    for r in 0..rows {
                        let dy = &gy[r * cols..(r + 1) * cols];
                        let y = &yv[r * cols..(r + 1) * cols];
                        let total: f64 = dy.iter().sum();
                        for j in 0..cols {
                            g[r * cols + j] += dy[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let yv = &node.value;
                self.acc(grads, *x, |g| {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(yv) {
                        *g += d * y;
                    }
                });
            }
            Op::Ln(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |g| {
                    for ((g, d), a) in g.iter_mut().zip(gy).zip(xv) {
                        *g += d / a;
                    }
                });
            }
            Op::SumRows(x) => {
                let c = self.dims(*x).1;
                self.acc(grads, *x, |g| {
                    for (row, d) in g.chunks_exact_mut(c).zip(gy) {
                        row.iter_mut().for_each(|g| *g += d);
                    }
                });
            }
            Op::Sum(x) => {
                let d = gy[0];
                self.acc(grads, *x, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::GatherRows { x, idx } => {
                self.acc(grads, *x, |g| {
                    for (i, &src) in idx.iter().enumerate() {
                        add_into(&mut g[src * cols..(src + 1) * cols], &gy[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::PickPerRow { x, idx } => {
                let c = self.dims(*x).1;
                self.acc(grads, *x, |g| {
                    for (i, &j) in idx.iter().enumerate() {
                        g[i * c + j] += gy[i];
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        probs: &[f64],
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, d) = self.dims(q);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut off = 0;
        for seg in segments {
            let len = seg.len;
            let mut ds = vec![0.0; len * len];
            for h in 0..heads {
                let base = seg.start * d + h * dh;
                let p = &probs[off..off + len * len];
                let go = MatRef::strided(&gy[base..], d, 1);
                // dV_h += P^T dO_h
                gemm_strided_out(len, len, dh, MatRef::strided(p, 1, len), go, &mut dv[base..], d, true);
                // dP = dO_h V_h^T
                gemm(len, dh, len, go, MatRef::strided(&vv[base..], 1, d), &mut ds, len, false);
                for i in 0..len {
                    let pr = &p[i * len..(i + 1) * len];
                    let dr = &mut ds[i * len..(i + 1) * len];
                    let inner = dot(&pr[..=i], &dr[..=i]);
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - inner) * scale;
                    }
                    dr[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                // dQ_h += dS K_h ; dK_h += dS^T Q_h
                gemm_strided_out(
                    len,
                    len,
                    dh,
                    MatRef::rows(&ds, len),
                    MatRef::strided(&kv[base..], d, 1),
                    &mut dq[base..],
                    d,
                    true,
                );
                gemm_strided_out(
                    len,
                    len,
                    dh,
                    MatRef::strided(&ds, 1, len),
                    MatRef::strided(&qv[base..], d, 1),
                    &mut dk[base..],
                    d,
                    true,
                );
                off += len * len;
            }
        }
        self.acc(grads, q, |g| add_into(g, &dq));
        self.acc(grads, k, |g| add_into(g, &dk));
        self.acc(grads, v, |g| add_into(g, &dv));
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = self.node(v);
        if !node.needs_grad {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(g);
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(g: &mut [f64], d: &[f64]) {
    g.iter_mut().zip(d).for_each(|(g, d)| *g += d);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Borrowed matrix with explicit row and column strides.
#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols,
            cs: 1,
        }
    }

    fn strided(data: &'a [f64], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c[m, n] (+)= a[m, k] b[k, n]` with `c` dense row-major of row stride `ldc`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, c: &mut [f64], ldc: usize, accumulate: bool) {
    gemm_strided_out(m, k, n, a, b, c, ldc, accumulate)
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided_out(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef,
    b: MatRef,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!((m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every view was bounds-checked above for the requested extents,
    // and `c` does not alias `a` or `b` (it is a distinct mutable borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
