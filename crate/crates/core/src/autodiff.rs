//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward op appends a node to a [`Tape`] together with whatever it
//! needs for its vector-Jacobian product. [`Tape::backward`] walks the nodes
//! in reverse insertion order, which is a valid topological order because an
//! op can only consume vars that already exist.
//!
//! A tape is single-use: once `backward` has run, recording new ops or
//! calling `backward` again fails with [`Error::TapeReuse`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    /// `a · bᵀ`
    MatMulNt {
        a: Var,
        b: Var,
    },
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    Relu {
        x: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    L2Normalize {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// required one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeReuse);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `a[N×K] · b[K×M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "matmul")?;
        let (k2, m) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = gemm_nn(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[n, m], out)?, Op::MatMul { a, b }, rg)
    }

    /// `a[N×K] · b[M×K]ᵀ`, the layout of both linear layers and proxy logits.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "matmul_nt")?;
        let (m, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[n, m], out)?, Op::MatMulNt { a, b }, rg)
    }

    /// Adds a length-D vector to every row of an N×D matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.matrix_dims(x, "add_row_bias")?;
        if self.value(bias).numel() != d {
            return Err(Error::dim("add_row_bias", self.value(x).shape(), self.value(bias).shape()));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddRowBias { x, bias }, rg)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(self.value(x).shape(), data)?;
        let rg = self.needs(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    /// Rows `rows` of a matrix, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "select_rows")?;
        if rows.is_empty() {
            return Err(Error::Precondition("select_rows needs at least one row".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let rg = self.needs(x);
        self.push(
            Tensor::new(&[rows.len(), d], data)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = Tensor::new(self.value(x).shape(), data)?;
        let rg = self.needs(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Normalizes each contiguous group of `D / groups` channels of every row
    /// to zero mean and unit variance, then applies the per-channel affine
    /// `gamma * x̂ + beta`.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: T, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "group_norm")?;
        if groups == 0 || d % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {d} channels not divisible into {groups} groups"
            )));
        }
        if !(eps > T::zero()) {
            return Err(Error::Config("group_norm: eps must be positive".into()));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim("group_norm", &[d], self.value(gamma).shape()));
        }
        let size = d / groups;
        let inv_m = T::one() / T::of(size as f64);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n * groups];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            for grp in 0..groups {
                let lo = r * d + grp * size;
                let chunk = &xs[lo..lo + size];
                let mean = chunk.iter().copied().sum::<T>() * inv_m;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r * groups + grp] = is;
                for (j, &v) in chunk.iter().enumerate() {
                    let c = grp * size + j;
                    let xh = (v - mean) * is;
                    normalized[lo + j] = xh;
                    out[lo + j] = g[c] * xh + b[c];
                }
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::new(&[n, d], out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    /// Group norm with a single group spanning the row.
    pub fn layer_norm(&mut self, x: Var, eps: T, gamma: Var, beta: Var) -> Result<Var> {
        self.group_norm(x, 1, eps, gamma, beta)
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "l2_normalize")?;
        if !(eps > T::zero()) {
            return Err(Error::Config("l2_normalize: eps must be positive".into()));
        }
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(n);
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = norm.max(eps);
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(norm);
        }
        let rg = self.needs(x);
        self.push(out, Op::L2Normalize { x, eps, norms }, rg)
    }

    /// Inverted dropout. With `train == false` or `p == 0` the input var is
    /// returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(self.value(x).shape(), data)?;
        let rg = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Mean softmax cross entropy over rows; `targets[i]` is the class of row `i`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("softmax_cross_entropy", &[n, c], &[targets.len()]));
        }
        if let Some((row, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(Error::Label {
                row,
                label: t as i64,
                classes: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &z[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * c + j] = e;
                denom += e;
            }
            probs[r * c..(r + 1) * c].iter_mut().for_each(|p| *p /= denom);
            total += denom.ln() + max - row[t];
        }
        let loss = total / T::of(n as f64);
        let rg = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Populates the gradient of `loss` with respect to every var that
    /// requires one. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeReuse);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![T::one()])?);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            self.nodes[i].grad = Some(dy);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b),
            None => {
                *slot = Some(
                    Tensor::new(self.value(v).shape(), g).expect("gradient matches value shape"),
                )
            }
        }
    }

    fn propagate(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let dyd = dy.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (n, k) = (self.value(a).rows(), self.value(a).cols());
                let m = self.value(b).cols();
                if self.needs(a) {
                    // dA = dC · Bᵀ
                    let g = gemm_nt(dyd, self.value(b).data(), n, m, k);
                    self.accumulate(grads, a, g);
                }
                if self.needs(b) {
                    // dB = Aᵀ · dC
                    let g = gemm_tn(self.value(a).data(), dyd, n, k, m);
                    self.accumulate(grads, b, g);
                }
            }
            &Op::MatMulNt { a, b } => {
                let (n, k) = (self.value(a).rows(), self.value(a).cols());
                let m = self.value(b).rows();
                if self.needs(a) {
                    // dA = dC · B
                    let g = gemm_nn(dyd, self.value(b).data(), n, m, k);
                    self.accumulate(grads, a, g);
                }
                if self.needs(b) {
                    // dB = dCᵀ · A
                    let g = gemm_tn(dyd, self.value(a).data(), n, m, k);
                    self.accumulate(grads, b, g);
                }
            }
            &Op::AddRowBias { x, bias } => {
                let d = self.value(bias).numel();
                if self.needs(bias) {
                    let mut g = vec![T::zero(); d];
                    for row in dyd.chunks(d) {
                        g.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    self.accumulate(grads, bias, g);
                }
                self.accumulate(grads, x, dyd.to_vec());
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, dyd.to_vec());
                self.accumulate(grads, b, dyd.to_vec());
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.needs(a) {
                    let g = dyd.iter().zip(bv).map(|(&d, &y)| d * y).collect();
                    self.accumulate(grads, a, g);
                }
                if self.needs(b) {
                    let g = dyd.iter().zip(av).map(|(&d, &x)| d * x).collect();
                    self.accumulate(grads, b, g);
                }
            }
            &Op::Scale { x, factor } => {
                let g = dyd.iter().map(|&d| d * factor).collect();
                self.accumulate(grads, x, g);
            }
            Op::SelectRows { x, rows } => {
                let x = *x;
                let d = self.value(x).cols();
                let mut g = vec![T::zero(); self.value(x).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        g[r * d + j] += dyd[i * d + j];
                    }
                }
                self.accumulate(grads, x, g);
            }
            &Op::Sum { x } => {
                let g = vec![dyd[0]; self.value(x).numel()];
                self.accumulate(grads, x, g);
            }
            &Op::Relu { x } => {
                let g = dyd
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, x, g);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                normalized,
                inv_std,
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let (n, d) = (self.value(x).rows(), self.value(x).cols());
                let g = self.value(gamma).data();
                if self.needs(gamma) || self.needs(beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..n {
                        for c in 0..d {
                            dg[c] += dyd[r * d + c] * normalized[r * d + c];
                            db[c] += dyd[r * d + c];
                        }
                    }
                    self.accumulate(grads, gamma, dg);
                    self.accumulate(grads, beta, db);
                }
                if self.needs(x) {
                    let size = d / groups;
                    let m = T::of(size as f64);
                    let mut dx = vec![T::zero(); n * d];
                    let mut dxh = vec![T::zero(); size];
                    for r in 0..n {
                        for grp in 0..groups {
                            let lo = r * d + grp * size;
                            let mut sum_dxh = T::zero();
                            let mut sum_dxh_xh = T::zero();
                            for j in 0..size {
                                let v = dyd[lo + j] * g[grp * size + j];
                                dxh[j] = v;
                                sum_dxh += v;
                                sum_dxh_xh += v * normalized[lo + j];
                            }
                            let scale = inv_std[r * groups + grp] / m;
                            for j in 0..size {
                                dx[lo + j] = scale * (m * dxh[j] - sum_dxh - normalized[lo + j] * sum_dxh_xh);
                            }
                        }
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            Op::L2Normalize { x, eps, norms } => {
                let (x, eps) = (*x, *eps);
                let d = self.value(x).cols();
                let y = self.nodes[i].value.data();
                let mut dx = vec![T::zero(); dyd.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let lo = r * d;
                    let dyr = &dyd[lo..lo + d];
                    if norm >= eps {
                        let yr = &y[lo..lo + d];
                        let proj: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[lo + j] = (dyr[j] - yr[j] * proj) / norm;
                        }
                    } else {
                        for j in 0..d {
                            dx[lo + j] = dyr[j] / eps;
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::Dropout { x, mask } => {
                let g = dyd.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.accumulate(grads, *x, g);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = dyd[0] / T::of(targets.len() as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * c + t] -= scale;
                }
                self.accumulate(grads, *logits, g);
            }
        }
    }
}

/// `a[n×k] · b[k×m]`.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a[n×k] · b[m×k]ᵀ`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * m + j] = s;
        }
    }
    c
}

/// `a[n×k]ᵀ · b[n×m]`, result `k×m`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(b).data());

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::<f64>::zeros(&[4, 5])).unwrap();
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let mut oracle = vec![0.0; 15];
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 3 + j];
                }
                oracle[i * 3 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a).unwrap(), tape.constant(b).unwrap());
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.value(c).data(), oracle.as_slice());
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn group_norm_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0])).unwrap();
        let g = tape.constant(Tensor::ones(&[2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let y = tape.group_norm(x, 1, 1e-12, g, b).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);

        let c = tape.constant(t(&[1, 2], &[5.0, 5.0])).unwrap();
        let y = tape.group_norm(c, 1, 1e-5, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let bad = tape.group_norm(x, 3, 1e-5, g, b);
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_is_single_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[3, 6], -2.0, 2.0, &mut rng)).unwrap();
        let g = tape.constant(Tensor::uniform(&[6], 0.5, 1.5, &mut rng)).unwrap();
        let b = tape.constant(Tensor::uniform(&[6], -0.5, 0.5, &mut rng)).unwrap();
        let ln = tape.layer_norm(x, 1e-5, g, b).unwrap();
        let gn = tape.group_norm(x, 1, 1e-5, g, b).unwrap();
        assert_eq!(tape.value(ln).data(), tape.value(gn).data());

        let c = tape.constant(t(&[1, 3], &[2.0, 2.0, 2.0])).unwrap();
        let ones = tape.constant(Tensor::ones(&[3])).unwrap();
        let zeros = tape.constant(Tensor::zeros(&[3])).unwrap();
        let y = tape.layer_norm(c, 1e-5, ones, zeros).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0])).unwrap();
        let y = tape.l2_normalize(x, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
        assert_eq!(&out[2..], &[0.0, 0.0]);
    }

    #[test]
    fn dropout_identities_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[1.0, -2.0, 3.0, 4.0])).unwrap();
        let y = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[100_000])).unwrap();
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_classes() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::<f64>::zeros(&[3, 2048])).unwrap();
        let l = tape.softmax_cross_entropy(z, &[0, 5, 2047]).unwrap();
        let loss = tape.value(l).item();
        assert!((loss - 2048f64.ln()).abs() < 1e-12);
        assert!((loss - 7.6246).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_confident_and_label_error() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 2], &[100.0, 0.0])).unwrap();
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(tape.value(l).item() < 1e-40);
        match tape.softmax_cross_entropy(z, &[2]) {
            Err(Error::Label { row: 0, label: 2, classes: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::ones(&[2])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeReuse)));
        assert!(matches!(tape.sum(x), Err(Error::TapeReuse)));
    }
}
