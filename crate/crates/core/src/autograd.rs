//! Reverse-mode gradient engine over row-major matrices.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse. Parameters enter the tape through [`Tape::bind`];
//! anything else is a constant and receives no gradient. Softmax normalizers
//! and scalar reductions accumulate in `f64` regardless of `T`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor<T>) -> Self {
        let (rows, cols) = t.dims2();
        Self {
            rows,
            cols,
            data: t.data.clone(),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn scalar(&self) -> T {
        self.data[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Gather { table: Var, ids: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    PickSum { x: Var, entries: Vec<(usize, usize)> },
    KlRows { logp: Var, rows: Vec<usize>, logq: Vec<f64> },
    Linear(Vec<(Var, f64)>),
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    param: Option<String>,
}

/// Parameter name → tape variable.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("tensor `{name}` not bound on tape")))
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Puts every tensor of `params` on the tape. With `trainable` the
    /// leaves collect gradients under their names.
    pub fn bind(&mut self, params: &ParamSet<T>, trainable: bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            let v = self.push(Mat::from_tensor(t), Op::Leaf);
            if trainable {
                self.nodes[v.0].param = Some(name.clone());
            }
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {} rows",
                t.rows
            )));
        }
        let cols = t.cols;
        let mut out = Mat::zeros(ids.len(), cols);
        for (r, &i) in ids.iter().enumerate() {
            out.data[r * cols..(r + 1) * cols].copy_from_slice(t.row(i));
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row slice of a matrix as a constant-free view (a gather of rows).
    pub fn rows(&mut self, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let ids: Vec<usize> = range.collect();
        self.gather(x, &ids)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add: shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p + q).collect();
        let out = Mat {
            rows: x.rows,
            cols: x.cols,
            data,
        };
        self.push(out, Op::Add(a, b))
    }

    /// `a + 1·bias` with `bias` a single row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!(b.rows * b.cols, x.cols, "add_row: bias width mismatch");
        let mut out = x.clone();
        for r in 0..out.rows {
            for (o, &bv) in out.data[r * out.cols..(r + 1) * out.cols]
                .iter_mut()
                .zip(&b.data)
            {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let x = self.value(a);
        let out = Mat {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&v| v * k).collect(),
        };
        self.push(out, Op::Scale(a, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_t(self.value(a), self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Mat {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&v| v.max(T::zero())).collect(),
        };
        self.push(out, Op::Relu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xm = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let (rows, cols) = (xm.rows, xm.cols);
        let mut out = Mat::zeros(rows, cols);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            rstds.push(rstd);
            for c in 0..cols {
                let h = T::of((row[c].f64() - mean) * rstd);
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd: rstds,
            },
        )
    }

    /// Row-wise softmax; with `causal`, entry (i, j) for j > i is masked out.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let width = if causal { (r + 1).min(x.cols) } else { x.cols };
            let row = &x.row(r)[..width];
            let probs = softmax_f64(row);
            for (c, p) in probs.into_iter().enumerate() {
                out.data[r * x.cols + c] = T::of(p);
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let lse = log_sum_exp(row);
            for c in 0..x.cols {
                out.data[r * x.cols + c] = T::of(row[c].f64() - lse);
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.cols, "slice_cols out of range");
        let mut out = Mat::zeros(m.rows, len);
        for r in 0..m.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let mut acc = vec![0f64; m.cols];
        for r in 0..m.rows {
            for (a, v) in acc.iter_mut().zip(m.row(r)) {
                *a += v.f64();
            }
        }
        let n = m.rows as f64;
        let out = Mat {
            rows: 1,
            cols: m.cols,
            data: acc.into_iter().map(|a| T::of(a / n)).collect(),
        };
        self.push(out, Op::MeanRows(x))
    }

    /// Scalar sum of the selected `(row, col)` entries.
    pub fn pick_sum(&mut self, x: Var, entries: &[(usize, usize)]) -> Var {
        let m = self.value(x);
        let s: f64 = entries.iter().map(|&(r, c)| m.at(r, c).f64()).sum();
        let out = Mat {
            rows: 1,
            cols: 1,
            data: vec![T::of(s)],
        };
        self.push(
            out,
            Op::PickSum {
                x,
                entries: entries.to_vec(),
            },
        )
    }

    /// Mean over `rows` of KL(exp(logp[row]) ‖ exp(logq[i])), `logq` constant.
    pub fn kl_rows(&mut self, logp: Var, rows: &[usize], logq: Vec<f64>) -> Var {
        let m = self.value(logp);
        assert_eq!(logq.len(), rows.len() * m.cols, "kl_rows: reference shape");
        let mut total = 0f64;
        for (i, &r) in rows.iter().enumerate() {
            let q = &logq[i * m.cols..(i + 1) * m.cols];
            for (lp, lq) in m.row(r).iter().zip(q) {
                let lp = lp.f64();
                total += lp.exp() * (lp - lq);
            }
        }
        let out = Mat {
            rows: 1,
            cols: 1,
            data: vec![T::of(total / rows.len().max(1) as f64)],
        };
        self.push(
            out,
            Op::KlRows {
                logp,
                rows: rows.to_vec(),
                logq,
            },
        )
    }

    /// Scalar `Σ kᵢ·aᵢ` over 1×1 inputs.
    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Var {
        let s: f64 = terms
            .iter()
            .map(|&(v, k)| k * self.value(v).scalar().f64())
            .sum();
        let out = Mat {
            rows: 1,
            cols: 1,
            data: vec![T::of(s)],
        };
        self.push(out, Op::Linear(terms.to_vec()))
    }

    /// Gradients of scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> BTreeMap<String, Vec<T>> {
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one(); self.nodes[loss.0].value.data.len()]);
        let mut out = BTreeMap::new();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.param {
                        out.insert(name.clone(), g);
                    }
                }
                Op::Gather { table, ids } => {
                    let cols = node.value.cols;
                    let gt = self.grad_slot(&mut grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[id * cols + c] += g[r * cols + c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(self.grad_slot(&mut grads, *a), &g);
                    accumulate(self.grad_slot(&mut grads, *b), &g);
                }
                Op::AddRow(a, bias) => {
                    accumulate(self.grad_slot(&mut grads, *a), &g);
                    let cols = node.value.cols;
                    let gb = self.grad_slot(&mut grads, *bias);
                    for r in 0..node.value.rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                }
                Op::Scale(a, k) => {
                    let ga = self.grad_slot(&mut grads, *a);
                    for (x, &y) in ga.iter_mut().zip(&g) {
                        *x += y * *k;
                    }
                }
                Op::MatMul(a, b) => {
                    let gm = Mat {
                        rows: node.value.rows,
                        cols: node.value.cols,
                        data: g,
                    };
                    let am = &self.nodes[a.0].value;
                    let bm = &self.nodes[b.0].value;
                    // dA = dC · Bᵀ ; dB = Aᵀ · dC
                    let da = matmul_t(&gm, bm);
                    let db = matmul_tn(am, &gm);
                    accumulate(self.grad_slot(&mut grads, *a), &da.data);
                    accumulate(self.grad_slot(&mut grads, *b), &db.data);
                }
                Op::MatMulT(a, b) => {
                    let gm = Mat {
                        rows: node.value.rows,
                        cols: node.value.cols,
                        data: g,
                    };
                    let am = &self.nodes[a.0].value;
                    let bm = &self.nodes[b.0].value;
                    // C = A·Bᵀ: dA = dC · B ; dB = dCᵀ · A
                    let da = matmul(&gm, bm);
                    let db = matmul_tn(&gm, am);
                    accumulate(self.grad_slot(&mut grads, *a), &da.data);
                    accumulate(self.grad_slot(&mut grads, *b), &db.data);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value.data;
                    let ga = self.grad_slot(&mut grads, *a);
                    for ((d, &xv), &gv) in ga.iter_mut().zip(x).zip(&g) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = (node.value.rows, node.value.cols);
                    let gain_v = self.nodes[gain.0].value.data.clone();
                    {
                        let gb = self.grad_slot(&mut grads, *bias);
                        for r in 0..rows {
                            for c in 0..cols {
                                gb[c] += g[r * cols + c];
                            }
                        }
                    }
                    {
                        let gg = self.grad_slot(&mut grads, *gain);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg[c] += g[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    }
                    let gx = self.grad_slot(&mut grads, *x);
                    for r in 0..rows {
                        let mut mean_d = 0f64;
                        let mut mean_dx = 0f64;
                        for c in 0..cols {
                            let d = (g[r * cols + c] * gain_v[c]).f64();
                            mean_d += d;
                            mean_dx += d * xhat[r * cols + c].f64();
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            let d = (g[r * cols + c] * gain_v[c]).f64();
                            let h = xhat[r * cols + c].f64();
                            gx[r * cols + c] += T::of(rstd[r] * (d - mean_d - h * mean_dx));
                        }
                    }
                }
                Op::Softmax(a) => {
                    let (rows, cols) = (node.value.rows, node.value.cols);
                    let y = &node.value.data;
                    let ga = self.grad_slot(&mut grads, *a);
                    for r in 0..rows {
                        let dot: f64 = (0..cols)
                            .map(|c| y[r * cols + c].f64() * g[r * cols + c].f64())
                            .sum();
                        for c in 0..cols {
                            let yi = y[r * cols + c].f64();
                            ga[r * cols + c] += T::of(yi * (g[r * cols + c].f64() - dot));
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let (rows, cols) = (node.value.rows, node.value.cols);
                    let y = &node.value.data;
                    let ga = self.grad_slot(&mut grads, *a);
                    for r in 0..rows {
                        let gsum: f64 = (0..cols).map(|c| g[r * cols + c].f64()).sum();
                        for c in 0..cols {
                            let p = y[r * cols + c].f64().exp();
                            ga[r * cols + c] += T::of(g[r * cols + c].f64() - p * gsum);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, len) = (node.value.rows, node.value.cols);
                    let src_cols = self.nodes[x.0].value.cols;
                    let gx = self.grad_slot(&mut grads, *x);
                    for r in 0..rows {
                        for c in 0..len {
                            gx[r * src_cols + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, cols) = (node.value.rows, node.value.cols);
                    let mut off = 0;
                    for p in parts {
                        let pc = self.nodes[p.0].value.cols;
                        let gp = self.grad_slot(&mut grads, *p);
                        for r in 0..rows {
                            for c in 0..pc {
                                gp[r * pc + c] += g[r * cols + off + c];
                            }
                        }
                        off += pc;
                    }
                }
                Op::MeanRows(x) => {
                    let xm = &self.nodes[x.0].value;
                    let (rows, cols) = (xm.rows, xm.cols);
                    let inv = T::of(1.0 / rows as f64);
                    let gx = self.grad_slot(&mut grads, *x);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c] * inv;
                        }
                    }
                }
                Op::PickSum { x, entries } => {
                    let cols = self.nodes[x.0].value.cols;
                    let gx = self.grad_slot(&mut grads, *x);
                    for &(r, c) in entries {
                        gx[r * cols + c] += g[0];
                    }
                }
                Op::KlRows { logp, rows, logq } => {
                    let lm = &self.nodes[logp.0].value;
                    let cols = lm.cols;
                    let scale = g[0].f64() / rows.len().max(1) as f64;
                    let lp_vals: Vec<(usize, Vec<f64>)> = rows
                        .iter()
                        .map(|&r| (r, lm.row(r).iter().map(|v| v.f64()).collect()))
                        .collect();
                    let gl = self.grad_slot(&mut grads, *logp);
                    for (i, (r, lp)) in lp_vals.iter().enumerate() {
                        for c in 0..cols {
                            let lq = logq[i * cols + c];
                            let d = lp[c].exp() * (lp[c] - lq + 1.0);
                            gl[r * cols + c] += T::of(scale * d);
                        }
                    }
                }
                Op::Linear(terms) => {
                    for &(v, k) in terms {
                        let gv = self.grad_slot(&mut grads, v);
                        gv[0] += T::of(k * g[0].f64());
                    }
                }
            }
        }
        out
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> &'a mut Vec<T> {
        grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.data.len()])
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.cols, b.rows, "matmul: inner dimension mismatch");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(n, m);
    for i in 0..n {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
pub(crate) fn matmul_t<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.cols, b.cols, "matmul_t: inner dimension mismatch");
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = Mat::zeros(n, m);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out.data[i * m + j] = s;
        }
    }
    out
}

/// `aᵀ · b`
pub(crate) fn matmul_tn<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.rows, b.rows, "matmul_tn: inner dimension mismatch");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(k, m);
    for i in 0..n {
        let brow = &b.data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row
        .iter()
        .map(|v| v.f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Evaluates `loss` on a fresh tape with `params` bound as trainable leaves
/// and returns the loss value and a gradient map mirroring `params`.
pub fn grad<T, F>(params: &ParamSet<T>, loss: F) -> Result<(f64, ParamSet<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params, true);
    let out = loss(&mut tape, &bound)?;
    let value = tape.value(out).scalar().f64();
    if !value.is_finite() {
        let culprit = params.first_non_finite().unwrap_or("loss");
        return Err(Error::NonFinite {
            tensor: culprit.to_string(),
        });
    }
    let mut raw = tape.backward(out);
    let mut grads = params.zeros_like();
    for (name, g) in grads.iter_mut() {
        if let Some(v) = raw.remove(name) {
            g.data = v;
        }
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: name.to_string(),
        });
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn params(seed: u64) -> ParamSet<f64> {
        let mut rng = seeded(seed);
        let mut p = ParamSet::new();
        p.insert("w", Tensor::gaussian(&[3, 4], 0.7, &mut rng));
        p.insert("b", Tensor::gaussian(&[4], 0.7, &mut rng));
        p.insert("g", Tensor::gaussian(&[4], 0.7, &mut rng));
        p.insert("e", Tensor::gaussian(&[5, 3], 0.7, &mut rng));
        p
    }

    /// Exercises every op on one graph.
    fn everything(tape: &mut Tape<f64>, b: &Bound) -> Result<Var> {
        let x = tape.gather(b.var("e")?, &[0, 3, 3, 1])?;
        let h = tape.matmul(x, b.var("w")?);
        let h = tape.add_row(h, b.var("b")?);
        let h = tape.layer_norm(h, b.var("g")?, b.var("b")?);
        let r = tape.relu(h);
        let s = tape.matmul_t(r, h);
        let s = tape.scale(s, 0.5);
        let p = tape.softmax(s, true);
        let o = tape.matmul(p, h);
        let o = tape.add(o, r);
        let left = tape.slice_cols(o, 0, 2);
        let right = tape.slice_cols(o, 2, 2);
        let cat = tape.concat_cols(&[right, left]);
        let lp = tape.log_softmax(cat);
        let picked = tape.pick_sum(lp, &[(0, 1), (2, 3), (3, 0)]);
        let kl = tape.kl_rows(lp, &[1, 3], vec![(0.25f64).ln(); 8]);
        let pooled = tape.mean_rows(o);
        let pooled_lp = tape.log_softmax(pooled);
        let pick2 = tape.pick_sum(pooled_lp, &[(0, 2)]);
        Ok(tape.linear(&[(picked, -1.0), (kl, 0.3), (pick2, 0.7)]))
    }

    #[test]
    fn every_op_matches_central_differences() {
        let p = params(3);
        let (_, g) = grad(&p, everything).unwrap();
        let h = 1e-5;
        for (name, t) in p.iter() {
            for i in 0..t.len() {
                let mut plus = p.clone();
                plus.get_mut(name).unwrap().data[i] += h;
                let mut minus = p.clone();
                minus.get_mut(name).unwrap().data[i] -= h;
                let f = |q: &ParamSet<f64>| grad(q, everything).unwrap().0;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = g.get(name).unwrap().data[i];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{name}[{i}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn constant_closure_has_zero_gradient() {
        let p = params(1);
        let (v, g) = grad(&p, |tape, _| {
            Ok(tape.constant(Mat {
                rows: 1,
                cols: 1,
                data: vec![2.5],
            }))
        })
        .unwrap();
        assert_eq!(v, 2.5);
        assert!(g.iter().all(|(_, t)| t.data.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let p = params(2);
        let (_, g) = grad(&p, |tape, b| {
            let w = b.var("w")?;
            // ½‖W‖² = ½ Σ diag(W Wᵀ)
            let wwt = tape.matmul_t(w, w);
            let diag: Vec<(usize, usize)> = (0..3).map(|i| (i, i)).collect();
            let s = tape.pick_sum(wwt, &diag);
            Ok(tape.linear(&[(s, 0.5)]))
        })
        .unwrap();
        let w = p.get("w").unwrap();
        for (a, b) in g.get("w").unwrap().data.iter().zip(&w.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_loss_names_tensor() {
        let mut p = params(4);
        p.get_mut("b").unwrap().data[1] = f64::NAN;
        let err = grad(&p, |tape, b| {
            let v = b.var("b")?;
            let s = tape.pick_sum(v, &[(0, 1)]);
            Ok(s)
        })
        .unwrap_err();
        match err {
            Error::NonFinite { tensor } => assert_eq!(tensor, "b"),
            e => panic!("unexpected {e:?}"),
        }
    }
}
