//! A small reverse-mode tape over [`Mat`] values.
//!
//! Every forward pass of the model records onto a fresh [`Tape`]; parameters are
//! referenced by index into a borrowed [`ParamStore`] so nothing is copied. A
//! backward pass returns gradients for every tracked input and, when enabled,
//! for every parameter touched by the graph.

use crate::model::params::{ParamGrads, ParamStore};
use crate::tensor::{matmul_acc, matmul_t_acc, t_matmul_acc, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Silu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Embed {
        table: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    LogSoftmaxPick {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    SumAll(Var),
}

struct Node {
    op: Op,
    value: Option<Mat>,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    track_params: bool,
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    pub params: Option<ParamGrads>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `v`, or `None` if `v` did not influence it.
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore, track_params: bool) -> Self {
        Tape {
            params,
            track_params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].op {
            Op::Param(id) => &self.params.get(*id).value,
            _ => self.nodes[v.0]
                .value
                .as_ref()
                .expect("non-parameter nodes carry values"),
        }
    }

    fn push(&mut self, op: Op, value: Option<Mat>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(Op::Const, Some(m), false)
    }

    /// A leaf whose gradient is reported by [`Gradients::of`].
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(Op::Input, Some(m), true)
    }

    pub fn param(&mut self, id: usize) -> Var {
        let ng = self.track_params;
        self.push(Op::Param(id), None, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), Some(v), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMulT(a, b), Some(v), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), self.value(b).shape(), "add shape");
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), Some(v), ng)
    }

    /// Adds the row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        let bias = self.value(b);
        assert_eq!((1, v.cols), bias.shape(), "add_row shape");
        for r in 0..v.rows {
            for (o, bv) in v.row_mut(r).iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::AddRow(a, b), Some(v), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), Some(v), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale_assign(k);
        let ng = self.ng(a);
        self.push(Op::Scale(a, k), Some(v), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x += c);
        let ng = self.ng(a);
        self.push(Op::AddConst(a), Some(v), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| x * sigmoid(x)).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        let ng = self.ng(a);
        self.push(Op::Silu(a), Some(v), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| sigmoid(x)).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        let ng = self.ng(a);
        self.push(Op::Sigmoid(a), Some(v), ng)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| log_sigmoid(x)).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        let ng = self.ng(a);
        self.push(Op::LogSigmoid(a), Some(v), ng)
    }

    /// Per-row layer normalization with learned gain and bias (both `1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gv + bv;
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            Some(out),
            ng,
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked when
    /// `j > i + (cols - rows)`, which is the usual lower-triangular mask for
    /// square score matrices.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let offset = cols.saturating_sub(rows);
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let limit = if causal { (r + offset + 1).min(cols) } else { cols };
            let row = &va.row(r)[..limit];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = out.row_mut(r);
            let mut total = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in &mut orow[..limit] {
                *o /= total;
            }
        }
        let ng = self.ng(a);
        self.push(Op::Softmax(a), Some(out), ng)
    }

    /// Gathers rows `idx` of `table`.
    pub fn embed(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(idx.len(), t.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let ng = self.ng(table);
        self.push(
            Op::Embed {
                table,
                idx: idx.to_vec(),
            },
            Some(out),
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let mut out = Mat::zeros(vx.rows, len);
        for r in 0..vx.rows {
            out.row_mut(r)
                .copy_from_slice(&vx.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(Op::SliceCols { x, start }, Some(out), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat_cols rows");
            for r in 0..rows {
                out.row_mut(r)[off..off + vp.cols].copy_from_slice(vp.row(r));
            }
            off += vp.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), Some(out), ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x).clone().reshaped(rows, cols);
        let ng = self.ng(x);
        self.push(Op::Reshape(x), Some(v), ng)
    }

    /// Row-wise log-softmax followed by picking `targets[r]` in row `r`.
    ///
    /// Only the first `allowed[r]` classes of row `r` take part in the
    /// normalization; the rest have probability zero. Returns a `1 × rows`
    /// vector of log-probabilities.
    pub fn log_softmax_pick(&mut self, logits: Var, targets: &[usize], allowed: &[usize]) -> Var {
        let vl = self.value(logits);
        let (rows, cols) = vl.shape();
        assert_eq!(targets.len(), rows);
        assert_eq!(allowed.len(), rows);
        let mut probs = Mat::zeros(rows, cols);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let k = allowed[r];
            assert!(targets[r] < k, "target outside the allowed classes");
            let row = &vl.row(r)[..k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            out.push(row[targets[r]] - lse);
        }
        let ng = self.ng(logits);
        self.push(
            Op::LogSoftmaxPick {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Some(Mat::row_vector(out)),
            ng,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(Op::SumAll(a), Some(v), ng)
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        let mut pgrads = self.track_params.then(|| ParamGrads::zeros_like(self.params));
        grads[out.0] = Some(Mat::scalar(1.0));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Const => {}
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    if let Some(pg) = pgrads.as_mut() {
                        pg.accumulate(*id, &g);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let va = self.value(*a);
                        let slot = slot(&mut grads, *a, va.rows, va.cols);
                        matmul_t_acc(&g, self.value(*b), slot);
                    }
                    if self.ng(*b) {
                        let vb = self.value(*b);
                        let slot = slot(&mut grads, *b, vb.rows, vb.cols);
                        t_matmul_acc(self.value(*a), &g, slot);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        let va = self.value(*a);
                        let slot = slot(&mut grads, *a, va.rows, va.cols);
                        matmul_acc(&g, self.value(*b), slot);
                    }
                    if self.ng(*b) {
                        let vb = self.value(*b);
                        let slot = slot(&mut grads, *b, vb.rows, vb.cols);
                        t_matmul_acc(&g, self.value(*a), slot);
                    }
                }
                Op::Add(a, b) => {
                    for p in [*a, *b] {
                        if self.ng(p) {
                            add_into(&mut grads, p, &g);
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    if self.ng(*a) {
                        add_into(&mut grads, *a, &g);
                    }
                    if self.ng(*b) {
                        let slot = slot(&mut grads, *b, 1, g.cols);
                        for r in 0..g.rows {
                            for (s, v) in slot.data.iter_mut().zip(g.row(r)) {
                                *s += v;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (p, q) in [(*a, *b), (*b, *a)] {
                        if self.ng(p) {
                            let vq = self.value(q);
                            let slot = slot(&mut grads, p, g.rows, g.cols);
                            for ((s, gv), qv) in slot.data.iter_mut().zip(&g.data).zip(&vq.data) {
                                *s += gv * qv;
                            }
                        }
                    }
                }
                Op::Scale(a, k) => {
                    let slot = slot(&mut grads, *a, g.rows, g.cols);
                    slot.axpy(*k, &g);
                }
                Op::AddConst(a) => add_into(&mut grads, *a, &g),
                Op::Silu(a) => {
                    let va = self.value(*a);
                    let slot = slot(&mut grads, *a, g.rows, g.cols);
                    for ((s, gv), &x) in slot.data.iter_mut().zip(&g.data).zip(&va.data) {
                        let sg = sigmoid(x);
                        *s += gv * sg * (1.0 + x * (1.0 - sg));
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let slot = slot(&mut grads, *a, g.rows, g.cols);
                    for ((s, gv), &yv) in slot.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *s += gv * yv * (1.0 - yv);
                    }
                }
                Op::LogSigmoid(a) => {
                    let va = self.value(*a);
                    let slot = slot(&mut grads, *a, g.rows, g.cols);
                    for ((s, gv), &x) in slot.data.iter_mut().zip(&g.data).zip(&va.data) {
                        *s += gv * sigmoid(-x);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gv = self.value(*gain);
                    if self.ng(*gain) {
                        let slot = slot(&mut grads, *gain, 1, cols);
                        for r in 0..rows {
                            for ((s, gr), xh) in slot.data.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                                *s += gr * xh;
                            }
                        }
                    }
                    if self.ng(*bias) {
                        let slot = slot(&mut grads, *bias, 1, cols);
                        for r in 0..rows {
                            for (s, gr) in slot.data.iter_mut().zip(g.row(r)) {
                                *s += gr;
                            }
                        }
                    }
                    if self.ng(*x) {
                        let slot = slot(&mut grads, *x, rows, cols);
                        let nf = cols as f64;
                        let mut dxhat = vec![0.0; cols];
                        for r in 0..rows {
                            let xh = xhat.row(r);
                            for ((d, gr), gg) in dxhat.iter_mut().zip(g.row(r)).zip(&gv.data) {
                                *d = gr * gg;
                            }
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 = dxhat.iter().zip(xh).map(|(d, v)| d * v).sum();
                            let k = inv_std[r] / nf;
                            for ((s, d), v) in slot.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
                                *s += k * (nf * d - sum_d - v * sum_dx);
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let p = node.value.as_ref().unwrap();
                    let slot = slot(&mut grads, *a, g.rows, g.cols);
                    for r in 0..g.rows {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for ((s, pv), gv) in slot.row_mut(r).iter_mut().zip(pr).zip(gr) {
                            *s += pv * (gv - dot);
                        }
                    }
                }
                Op::Embed { table, idx } => {
                    let vt = self.value(*table);
                    let slot = slot(&mut grads, *table, vt.rows, vt.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (s, gv) in slot.row_mut(i).iter_mut().zip(g.row(r)) {
                            *s += gv;
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let vx = self.value(*x);
                    let slot = slot(&mut grads, *x, vx.rows, vx.cols);
                    for r in 0..g.rows {
                        for (s, gv) in slot.row_mut(r)[*start..*start + g.cols].iter_mut().zip(g.row(r)) {
                            *s += gv;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let vp = self.value(p);
                        let w = vp.cols;
                        if self.ng(p) {
                            let slot = slot(&mut grads, p, vp.rows, w);
                            for r in 0..g.rows {
                                for (s, gv) in slot.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                    *s += gv;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::Reshape(a) => {
                    let va = self.value(*a);
                    let g = g.reshaped(va.rows, va.cols);
                    add_into(&mut grads, *a, &g);
                }
                Op::LogSoftmaxPick {
                    logits,
                    targets,
                    probs,
                } => {
                    let slot = slot(&mut grads, *logits, probs.rows, probs.cols);
                    for r in 0..probs.rows {
                        let gr = g.data[r];
                        for (s, p) in slot.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *s -= gr * p;
                        }
                        slot.data[r * probs.cols + targets[r]] += gr;
                    }
                }
                Op::SumAll(a) => {
                    let va = self.value(*a);
                    let gv = g.data[0];
                    let slot = slot(&mut grads, *a, va.rows, va.cols);
                    slot.data.iter_mut().for_each(|s| *s += gv);
                }
            }
        }
        Gradients {
            nodes: grads,
            params: pgrads,
        }
    }
}

fn slot(grads: &mut [Option<Mat>], v: Var, rows: usize, cols: usize) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

fn add_into(grads: &mut [Option<Mat>], v: Var, g: &Mat) {
    match &mut grads[v.0] {
        Some(m) => m.add_assign(g),
        none => *none = Some(g.clone()),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
