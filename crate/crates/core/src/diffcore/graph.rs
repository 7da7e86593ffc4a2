use std::borrow::Cow;
use std::sync::Arc;

use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

const GN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse row-mixing matrix: output row `i` is `Σ w · input[j]` over `rows[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub in_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Gather(Var, Arc<Vec<usize>>),
    Sparse(Var, Arc<SparseRows>),
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Silu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        weights: Option<Arc<Vec<f64>>>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Transpose(Var),
    Reshape(Var),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation graph. Parameter values are borrowed from the
/// owning [`ParamSet`] for the lifetime `'a`.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        _ => {
            let cols = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, with transposes expressed via strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked by the callers against m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let Tensor { shape, data } = t;
        self.push(shape, Cow::Owned(data), Op::Leaf, false)
    }

    /// Differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        let Tensor { shape, data } = t;
        self.push(shape, Cow::Owned(data), Op::Leaf, true)
    }

    /// Parameter leaf borrowed from `params`.
    pub fn param(&mut self, params: &'a ParamSet, id: ParamId) -> Var {
        let t = params.get(id);
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), ng))
    }

    /// Selects rows of a 2-d tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows needs 2-d input, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::range("gather row", bad, format!("0..{rows}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![idx.len(), cols], Cow::Owned(out), Op::Gather(x, idx), ng))
    }

    pub fn sparse_rows(&mut self, x: Var, map: Arc<SparseRows>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != map.in_rows {
            return Err(Error::Shape(format!(
                "sparse map over {} rows applied to {s:?}",
                map.in_rows
            )));
        }
        let cols = s[1];
        let src = self.value(x);
        let mut out = vec![0.0; map.rows.len() * cols];
        for (i, row) in map.rows.iter().enumerate() {
            let dst = &mut out[i * cols..(i + 1) * cols];
            for &(j, w) in row {
                for (d, s) in dst.iter_mut().zip(&src[j * cols..(j + 1) * cols]) {
                    *d += w * s;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![map.rows.len(), cols], Cow::Owned(out), Op::Sparse(x, map), ng))
    }

    fn bcast(&self, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (rows, cols) = rows_cols(sa);
        let nb = self.value(b).len();
        if sa == sb {
            Ok(Bcast::Same)
        } else if nb == 1 {
            Ok(Bcast::Scalar)
        } else if nb == cols && (sb.len() == 1 || sb[0] == 1) {
            Ok(Bcast::Row)
        } else if sb.len() == 2 && sb[0] == rows && sb[1] == 1 {
            Ok(Bcast::Col)
        } else {
            Err(Error::Shape(format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    fn broadcast_zip(&self, a: Var, b: Var, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        let (_, cols) = rows_cols(self.shape(a));
        va.iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match mode {
                    Bcast::Same => vb[i],
                    Bcast::Row => vb[i % cols],
                    Bcast::Col => vb[i / cols],
                    Bcast::Scalar => vb[0],
                };
                f(x, y)
            })
            .collect()
    }

    /// Elementwise sum; `b` may broadcast as a row vector, a column vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast(a, b)?;
        let out = self.broadcast_zip(a, b, mode, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Add(a, b, mode), ng))
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = self.bcast(a, b)?;
        let out = self.broadcast_zip(a, b, mode, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Mul(a, b, mode), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        self.push(shape, Cow::Owned(out), Op::Scale(x, s), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        self.push(shape, Cow::Owned(out), Op::Silu(x), ng)
    }

    /// Group normalisation of a `[rows, channels]` tensor. Statistics run over
    /// all rows and the channels of each group; `row_weights` (0/1) excludes
    /// rows from the statistics.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        row_weights: Option<Arc<Vec<f64>>>,
    ) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape(format!("group_norm needs 2-d input, got {s:?}")));
        }
        let (rows, ch) = (s[0], s[1]);
        if groups == 0 || ch % groups != 0 {
            return Err(Error::Shape(format!("{groups} groups do not divide {ch} channels")));
        }
        if self.value(gamma).len() != ch || self.value(beta).len() != ch {
            return Err(Error::Shape(format!(
                "group_norm affine parameters must have {ch} entries"
            )));
        }
        if let Some(w) = &row_weights {
            if w.len() != rows {
                return Err(Error::Shape(format!("{} row weights for {rows} rows", w.len())));
            }
        }
        let per = ch / groups;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let weight = |r: usize| row_weights.as_ref().map_or(1.0, |w| w[r]);
        let mut xhat = vec![0.0; rows * ch];
        let mut rstd = vec![0.0; groups];
        for g in 0..groups {
            let cs = g * per..(g + 1) * per;
            let (mut n, mut sum) = (0.0, 0.0);
            for r in 0..rows {
                let w = weight(r);
                n += w * per as f64;
                sum += w * xv[r * ch + cs.start..r * ch + cs.end].iter().sum::<f64>();
            }
            let mean = if n > 0.0 { sum / n } else { 0.0 };
            let mut var = 0.0;
            for r in 0..rows {
                let w = weight(r);
                if w != 0.0 {
                    var += w * xv[r * ch + cs.start..r * ch + cs.end]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
            }
            let var = if n > 0.0 { var / n } else { 0.0 };
            let rs = 1.0 / (var + GN_EPS).sqrt();
            rstd[g] = rs;
            for r in 0..rows {
                for c in cs.clone() {
                    xhat[r * ch + c] = (xv[r * ch + c] - mean) * rs;
                }
            }
        }
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i % ch] + bv[i % ch])
            .collect();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            weights: row_weights,
            xhat,
            rstd,
        };
        Ok(self.push(vec![rows, ch], Cow::Owned(out), op, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        self.push(shape, Cow::Owned(out), Op::Softmax(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(x);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Mean(x), ng)
    }

    /// Concatenates 2-d tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .first()
            .copied()
            .unwrap_or(1);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape(format!("concat part {s:?} with {rows} rows")));
            }
            cols += s[1];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, cols], Cow::Owned(out), Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..end` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::Shape(format!("slice {start}..{end} of {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + end]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows, end - start], Cow::Owned(out), Op::Slice(x, start, end), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs 2-d input, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![cols, rows], Cow::Owned(out), Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape(format!("reshape {:?} to {shape:?}", self.shape(x))));
        }
        let ng = self.ng(x);
        let value = self.value(x).to_vec();
        Ok(self.push(shape, Cow::Owned(value), Op::Reshape(x), ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    leaves.push((i, g));
                    continue;
                }
                Op::Param(id) => {
                    params.push((*id, g));
                    continue;
                }
                _ => {}
            }
            self.propagate(node, &g, &mut grads);
        }
        leaves.reverse();
        params.reverse();
        Ok(Gradients { leaves, params })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.ng(v) {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let nn = self.shape(*b)[1];
                acc(*a, &mut |da| gemm(m, nn, k, g, false, self.value(*b), true, da, 1.0));
                acc(*b, &mut |db| gemm(k, m, nn, self.value(*a), true, g, false, db, 1.0));
            }
            Op::Gather(x, idx) => {
                let cols = self.shape(*x)[1];
                acc(*x, &mut |dx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, s) in dx[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sparse(x, map) => {
                let cols = self.shape(*x)[1];
                acc(*x, &mut |dx| {
                    for (i, row) in map.rows.iter().enumerate() {
                        let gi = &g[i * cols..(i + 1) * cols];
                        for &(j, w) in row {
                            for (d, s) in dx[j * cols..(j + 1) * cols].iter_mut().zip(gi) {
                                *d += w * s;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b, mode) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                let cols = rows_cols(self.shape(*a)).1;
                acc(*b, &mut |db| reduce_broadcast(db, g, *mode, cols, |_| 1.0));
            }
            Op::Mul(a, b, mode) => {
                let cols = rows_cols(self.shape(*a)).1;
                let (va, vb) = (self.value(*a), self.value(*b));
                let pick = |i: usize| match mode {
                    Bcast::Same => vb[i],
                    Bcast::Row => vb[i % cols],
                    Bcast::Col => vb[i / cols],
                    Bcast::Scalar => vb[0],
                };
                acc(*a, &mut |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * pick(i);
                    }
                });
                acc(*b, &mut |db| reduce_broadcast(db, g, *mode, cols, |i| va[i]));
            }
            Op::Scale(x, s) => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += s * v)),
            Op::Silu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |dx| {
                    for ((d, &v), &gi) in dx.iter_mut().zip(xv).zip(g) {
                        let s = sigmoid(v);
                        *d += gi * s * (1.0 + v * (1.0 - s));
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                weights,
                xhat,
                rstd,
            } => {
                let (rows, ch) = (self.shape(*x)[0], self.shape(*x)[1]);
                let per = ch / groups;
                let gv = self.value(*gamma);
                acc(*gamma, &mut |dg| {
                    for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % ch] += gi * h;
                    }
                });
                acc(*beta, &mut |db| {
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % ch] += gi;
                    }
                });
                acc(*x, &mut |dx| {
                    let weight = |r: usize| weights.as_ref().map_or(1.0, |w| w[r]);
                    for (grp, &rs) in rstd.iter().enumerate() {
                        let cs = grp * per..(grp + 1) * per;
                        let (mut n, mut s1, mut s3) = (0.0, 0.0, 0.0);
                        for r in 0..rows {
                            n += weight(r) * per as f64;
                            for c in cs.clone() {
                                let i = r * ch + c;
                                let dh = g[i] * gv[c];
                                s1 += dh;
                                s3 += dh * xhat[i];
                            }
                        }
                        if n == 0.0 {
                            continue;
                        }
                        for r in 0..rows {
                            let w = weight(r);
                            for c in cs.clone() {
                                let i = r * ch + c;
                                let dh = g[i] * gv[c];
                                dx[i] += rs * (dh - w * s1 / n - w * xhat[i] * s3 / n);
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = rows_cols(&node.shape).1;
                acc(*x, &mut |dx| {
                    for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Concat(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    acc(p, &mut |dp| {
                        for r in 0..rows {
                            for (d, s) in dp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + c])
                            {
                                *d += s;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Slice(x, start, end) => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = end - start;
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        for (d, s) in dx[r * cols + start..r * cols + end]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, s)| *d += s)),
        }
    }
}

fn reduce_broadcast(db: &mut [f64], g: &[f64], mode: Bcast, cols: usize, coef: impl Fn(usize) -> f64) {
    match mode {
        Bcast::Same => db.iter_mut().enumerate().for_each(|(i, d)| *d += g[i] * coef(i)),
        Bcast::Row => g.iter().enumerate().for_each(|(i, &gi)| db[i % cols] += gi * coef(i)),
        Bcast::Col => g.iter().enumerate().for_each(|(i, &gi)| db[i / cols] += gi * coef(i)),
        Bcast::Scalar => db[0] += g.iter().enumerate().map(|(i, &gi)| gi * coef(i)).sum::<f64>(),
    }
}

/// Gradients of a scalar with respect to differentiable leaves and parameters.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: Vec<(usize, Vec<f64>)>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Graph::variable`]; `None` when the
    /// loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.iter().find(|(i, _)| *i == v.0).map(|(_, g)| g.as_slice())
    }

    /// Parameter gradients. A parameter used several times appears once per use.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn silu_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[0.0]));
        let y = g.silu(x);
        assert_eq!(g.value(y), &[0.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn group_norm_constant_input_yields_shift() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[5, 4], 3.25));
        let gamma = g.constant(t(&[4], &[2.0, 2.0, 2.0, 2.0]));
        let beta = g.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = g.group_norm(x, gamma, beta, 2, None).unwrap();
        for (i, v) in g.value(y).iter().enumerate() {
            assert_eq!(*v, [0.1, 0.2, 0.3, 0.4][i % 4]);
        }
        assert!(g.group_norm(x, gamma, beta, 3, None).is_err());
    }

    #[test]
    fn sum_and_square_gradients() {
        let theta = t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]);
        let mut g = Graph::new();
        let x = g.variable(theta.clone());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.variable(theta.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        let expect: Vec<f64> = theta.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.wrt(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn param_grads_accumulate_without_reset() {
        let mut params = ParamSet::new();
        let id = params.insert("w", t(&[3], &[1.0, 2.0, 3.0]));
        for _ in 0..2 {
            let grads = {
                let mut g = Graph::new();
                let w = g.param(&params, id);
                let s = g.sum(w);
                g.backward(s).unwrap()
            };
            params.accumulate(&grads, 1.0);
        }
        assert_eq!(params.grad(id), &[2.0, 2.0, 2.0]);
        params.zero_grads();
        assert_eq!(params.grad(id), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        let row = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, row).is_err());
    }

    #[test]
    fn broadcasting_gradients_check() {
        let x = t(&[3, 2], &[0.3, -0.7, 1.1, 0.4, -0.2, 0.9]);
        let err = grad_check(
            |g, x| {
                let row = g.constant(t(&[2], &[0.5, -1.5]));
                let col = g.constant(t(&[3, 1], &[1.0, 2.0, -0.5]));
                let a = g.add(x, row)?;
                let b = g.mul(a, col)?;
                let c = g.mul(b, x)?;
                Ok(g.sum(c))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
