//! Tape-based reverse-mode differentiation over [`Tensor`] matrix views.
//!
//! A [`Graph`] records every operation eagerly: values are computed as nodes
//! are created and [`Graph::backward`] walks the tape in reverse. Only nodes
//! that (transitively) depend on a trainable leaf receive gradients.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Cos/sin tables for rotating channel pairs `(2i, 2i+1)` of each row.
#[derive(Clone, Debug)]
pub struct Rotation {
    pub cos: Tensor,
    pub sin: Tensor,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var, bool),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Rc<Tensor>),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Silu(Var),
    Huber(Var, f64),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    Rotate(Var, Rc<Rotation>),
    Sum(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.value(a).ensure_same_shape(self.value(b), what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `a[n, m] + row[m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let m = av.cols();
        if rv.numel() != m {
            return Err(Error::shape(format!(
                "add_row: {:?} + {:?}",
                av.shape(),
                rv.shape()
            )));
        }
        let mut out = av.clone();
        for r in out.data_mut().chunks_mut(m) {
            for (x, b) in r.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// `a[n, m] * col[n, 1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        let (n, m) = (av.rows(), av.cols());
        if cv.numel() != n {
            return Err(Error::shape(format!(
                "mul_col: {:?} * {:?}",
                av.shape(),
                cv.shape()
            )));
        }
        let mut out = av.clone();
        for (r, s) in out.data_mut().chunks_mut(m).zip(cv.data()) {
            for x in r.iter_mut() {
                *x *= s;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(out, Op::MulCol(a, col), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(false, self.value(b), false)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b, false), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(false, self.value(b), true)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b, true), ng))
    }

    /// `x · w + bias`, the affine layer used everywhere in the model.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a), ng)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        self.value(a).ensure_same_shape(&c, "mul_const")?;
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        let ng = self.ng(a);
        Ok(self.push(v, Op::MulConst(a, Rc::new(c)), ng))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.cols();
        let mut out = av.clone();
        for r in out.data_mut().chunks_mut(m) {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in r.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in r.iter_mut() {
                *x /= z;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let m = av.cols();
        let mut out = av.clone();
        let mut inv = Vec::with_capacity(av.rows());
        for r in out.data_mut().chunks_mut(m) {
            let mean = r.iter().sum::<f64>() / m as f64;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for x in r.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    /// Elementwise Huber: `x²/2` inside `[-c, c]`, linear outside.
    pub fn huber(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| {
            if x.abs() <= c {
                0.5 * x * x
            } else {
                c * x.abs() - 0.5 * c * c
            }
        });
        let ng = self.ng(a);
        self.push(v, Op::Huber(a, c), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        if start + len > m {
            return Err(Error::shape(format!(
                "slice_cols {start}+{len} exceeds {m} columns"
            )));
        }
        let mut out = Vec::with_capacity(n * len);
        for r in av.data().chunks(m) {
            out.extend_from_slice(&r[start..start + len]);
        }
        let ng = self.ng(a);
        let t = Tensor::new(vec![n, len], out)?;
        Ok(self.push(t, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let m = pv.cols();
            for (i, r) in pv.data().chunks(m).enumerate() {
                out[i * total + off..i * total + off + m].copy_from_slice(r);
            }
            off += m;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let t = Tensor::new(vec![n, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != m) {
            return Err(Error::shape("concat_rows: column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let n = out.len() / m;
        let ng = parts.iter().any(|&p| self.ng(p));
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx.iter() {
            if i >= n {
                return Err(Error::shape(format!("gather_rows index {i} >= {n}")));
            }
            out.extend_from_slice(&av.data()[i * m..(i + 1) * m]);
        }
        let ng = self.ng(a);
        let t = Tensor::new(vec![idx.len(), m], out)?;
        Ok(self.push(t, Op::GatherRows(a, idx), ng))
    }

    /// Rotate channel pairs of every row by per-row angles.
    pub fn rotate_pairs(&mut self, a: Var, rot: Rc<Rotation>) -> Result<Var> {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        if rot.cos.rows() != n || rot.cos.cols() * 2 != m {
            return Err(Error::shape(format!(
                "rotation table {:?} does not fit {:?}",
                rot.cos.shape(),
                av.shape()
            )));
        }
        let half = m / 2;
        let mut out = av.clone();
        {
            let d = out.data_mut();
            for r in 0..n {
                for i in 0..half {
                    let (c, s) = (rot.cos.data()[r * half + i], rot.sin.data()[r * half + i]);
                    let x0 = d[r * m + 2 * i];
                    let x1 = d[r * m + 2 * i + 1];
                    d[r * m + 2 * i] = x0 * c - x1 * s;
                    d[r * m + 2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::Rotate(a, rot), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(Error::shape("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*row) {
                    let rv = self.value(*row);
                    let m = rv.numel();
                    let mut acc = vec![0.0; m];
                    for r in g.data().chunks(m) {
                        for (s, x) in acc.iter_mut().zip(r) {
                            *s += x;
                        }
                    }
                    self.acc(grads, *row, Tensor::new(rv.shape().to_vec(), acc).unwrap());
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let m = av.cols();
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for (r, s) in ga.data_mut().chunks_mut(m).zip(cv.data()) {
                        for x in r.iter_mut() {
                            *x *= s;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.ng(*col) {
                    let gc: Vec<f64> = g
                        .data()
                        .chunks(m)
                        .zip(av.data().chunks(m))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    self.acc(grads, *col, Tensor::new(cv.shape().to_vec(), gc).unwrap());
                }
            }
            Op::MatMul(a, b, trans_b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    // dA = G · Bᵀ (or G · B when B was used transposed)
                    let mut ga = vec![0.0; av.numel()];
                    let (m, n) = (g.rows(), g.cols());
                    let k = av.cols();
                    gemm(m, n, k, g.data(), n, false, bv.data(), bv.cols(), !trans_b, &mut ga, 0.0);
                    self.acc(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; bv.numel()];
                    let (m, n) = (g.rows(), g.cols());
                    let k = av.cols();
                    if *trans_b {
                        // B is [n, k]: dB = Gᵀ · A
                        gemm(n, m, k, g.data(), n, true, av.data(), k, false, &mut gb, 0.0);
                    } else {
                        // B is [k, n]: dB = Aᵀ · G
                        gemm(k, m, n, av.data(), k, true, g.data(), n, false, &mut gb, 0.0);
                    }
                    self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scaled(*s)),
            Op::AddConst(a) => self.acc(grads, *a, g.clone()),
            Op::MulConst(a, c) => self.acc(grads, *a, g.zip_map(c, |x, y| x * y)),
            Op::Softmax(a) => {
                let y = &node.value;
                let m = y.cols();
                let mut ga = g.clone();
                for (gr, yr) in ga.data_mut().chunks_mut(m).zip(y.data().chunks(m)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gx, yx) in gr.iter_mut().zip(yr) {
                        *gx = yx * (*gx - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm(a, inv) => {
                let y = &node.value;
                let m = y.cols() as f64;
                let mut ga = g.clone();
                let mc = y.cols();
                for ((gr, yr), is) in ga.data_mut().chunks_mut(mc).zip(y.data().chunks(mc)).zip(inv) {
                    let mean_g = gr.iter().sum::<f64>() / m;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m;
                    for (gx, yx) in gr.iter_mut().zip(yr) {
                        *gx = is * (*gx - mean_g - yx * mean_gy);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, |gv, x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    gv * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                });
                self.acc(grads, *a, ga);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, |gv, x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    gv * (s + x * s * (1.0 - s))
                });
                self.acc(grads, *a, ga);
            }
            Op::Huber(a, c) => {
                let x = self.value(*a);
                let c = *c;
                let ga = g.zip_map(x, |gv, x| gv * x.clamp(-c, c));
                self.acc(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let (m, len) = (av.cols(), g.cols());
                let mut ga = vec![0.0; av.numel()];
                for (dst, src) in ga.chunks_mut(m).zip(g.data().chunks(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                self.acc(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let m = pv.cols();
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(pv.numel());
                        for r in g.data().chunks(total) {
                            gp.extend_from_slice(&r[off..off + m]);
                        }
                        self.acc(grads, p, Tensor::new(pv.shape().to_vec(), gp).unwrap());
                    }
                    off += m;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.numel();
                    if self.ng(p) {
                        let gp = g.data()[off..off + n].to_vec();
                        self.acc(grads, p, Tensor::new(pv.shape().to_vec(), gp).unwrap());
                    }
                    off += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let m = av.cols();
                let mut ga = vec![0.0; av.numel()];
                for (r, &i) in g.data().chunks(m).zip(idx.iter()) {
                    for (d, s) in ga[i * m..(i + 1) * m].iter_mut().zip(r) {
                        *d += s;
                    }
                }
                self.acc(grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            }
            Op::Rotate(a, rot) => {
                let m = g.cols();
                let half = m / 2;
                let mut ga = g.clone();
                let d = ga.data_mut();
                for r in 0..g.rows() {
                    for i in 0..half {
                        let (c, s) = (rot.cos.data()[r * half + i], rot.sin.data()[r * half + i]);
                        let g0 = d[r * m + 2 * i];
                        let g1 = d[r * m + 2 * i + 1];
                        d[r * m + 2 * i] = g0 * c + g1 * s;
                        d[r * m + 2 * i + 1] = -g0 * s + g1 * c;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, g.clone().reshape(&shape).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `f` at every coordinate of `x0`.
    fn check(x0: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = f(&mut g, x);
        let grads = g.backward(y).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-5;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.param(xp);
                let y = f(&mut g, x);
                g.value(y).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "coord {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    fn input(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin())
    }

    #[test]
    fn grad_matmul_both_layouts() {
        let w = input(&[4, 3], 0.7);
        check(input(&[2, 4], 0.3), |g, x| {
            let w = g.constant(w.clone());
            let y = g.matmul(x, w).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        });
        let k = input(&[5, 4], 0.9);
        check(input(&[2, 4], 0.3), |g, x| {
            let k = g.param(k.clone());
            let y = g.matmul_bt(x, k).unwrap();
            let y = g.gelu(y);
            g.sum(y)
        });
        check(input(&[5, 4], 0.2), |g, kx| {
            let q = g.constant(input(&[2, 4], 0.5));
            let y = g.matmul_bt(q, kx).unwrap();
            let y = g.softmax(y);
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        });
    }

    #[test]
    fn grad_norm_and_activations() {
        check(input(&[3, 6], 0.41), |g, x| {
            let y = g.layer_norm(x, 1e-6);
            let w = g.constant(input(&[3, 6], 1.3));
            let y = g.mul(y, w).unwrap();
            let y = g.silu(y);
            g.sum(y)
        });
        check(input(&[2, 3], 1.7), |g, x| {
            let y = g.huber(x, 0.5);
            g.sum(y)
        });
    }

    #[test]
    fn grad_structural_ops() {
        let rot = Rc::new(Rotation {
            cos: input(&[3, 2], 0.8),
            sin: input(&[3, 2], 0.6),
        });
        check(input(&[3, 4], 0.33), move |g, x| {
            let a = g.slice_cols(x, 1, 2).unwrap();
            let b = g.slice_cols(x, 0, 2).unwrap();
            let c = g.concat_cols(&[a, b]).unwrap();
            let c = g.rotate_pairs(c, rot.clone()).unwrap();
            let r = g.gather_rows(c, Rc::new(vec![2, 0, 2])).unwrap();
            let both = g.concat_rows(&[r, c]).unwrap();
            let row = g.constant(input(&[4], 0.1));
            let y = g.add_row(both, row).unwrap();
            let col = g.param(input(&[6, 1], 0.45));
            let y = g.mul_col(y, col).unwrap();
            let y = g.mul(y, y).unwrap();
            let y = g.reshape(y, &[24]).unwrap();
            g.mean(y)
        });
    }

    #[test]
    fn constant_branches_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let p = g.param(Tensor::full(&[2], 1.0));
        let y = g.mul(c, p).unwrap();
        let y = g.sum(y);
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[3.0, 3.0]);
    }
}
