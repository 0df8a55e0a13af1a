use super::{AutodiffError, Tensor};
use crate::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Nll { logp: Var, targets: Vec<usize>, weights: Vec<T> },
    Sum(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { table: Var, ids: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every operation's inputs precede
/// it and a single reverse sweep visits each node once.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn check_finite<T: Scalar>(op: &str, data: &[T]) -> Result<(), AutodiffError> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite(op.to_string()))
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

// c[n,m] += a[n,k] * b[k,m]
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

// c[n,m] += a[n,k] * b[m,k]^T
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c[i * m + j] = c[i * m + j] + acc;
        }
    }
}

// c[k,m] += a[n,k]^T * b[n,m]
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, delta: &[T]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, &d)| *g = *g + d),
        None => *slot = Some(delta.to_vec()),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        check_finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::from_parts_unchecked(shape, data), op, requires_grad))
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var, AutodiffError> {
        check_finite("param", value.data())?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, AutodiffError> {
        check_finite("constant", value.data())?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient accumulated by the last [`Tape::backward`]; zeros if the node
    /// did not influence the loss.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts_unchecked(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    fn elementwise(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, AutodiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.record(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, AutodiffError> {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().map(|&x| x * c).collect();
        let shape = v.shape().to_vec();
        self.record("scale", shape, data, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.scale(a, -T::one())
    }

    /// `a[n,m] + b[m]` broadcast over rows; the only broadcasting op.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, m) = va.dims2()?;
        if vb.shape() != [m] {
            return Err(shape_err("add_bias", va.shape(), vb.shape()));
        }
        let mut data = va.data().to_vec();
        for r in 0..n {
            for (x, &bb) in data[r * m..(r + 1) * m].iter_mut().zip(vb.data()) {
                *x = *x + bb;
            }
        }
        let shape = va.shape().to_vec();
        self.record("add_bias", shape, data, Op::AddBias(a, b), &[a, b])
    }

    fn strict2(&self, name: &str, v: Var) -> Result<(usize, usize), AutodiffError> {
        match self.nodes[v.0].value.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(AutodiffError::Shape(format!("{name}: expected 2-D operand, got {s:?}"))),
        }
    }

    /// `a[n,k] · b[k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (n, k) = self.strict2("matmul", a)?;
        let (k2, m) = self.strict2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * m];
        gemm_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out, n, k, m);
        self.record("matmul", vec![n, m], out, Op::MatMul(a, b), &[a, b])
    }

    /// `a[n,k] · b[m,k]ᵀ`, the layout of a linear layer with weight `[out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (n, k) = self.strict2("matmul_t", a)?;
        let (m, k2) = self.strict2("matmul_t", b)?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * m];
        gemm_nt(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut out, n, k, m);
        self.record("matmul_t", vec![n, m], out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (n, m) = self.strict2("transpose", a)?;
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        self.record("transpose", vec![m, n], out, Op::Transpose(a), &[a])
    }

    fn unary(&mut self, name: &str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, AutodiffError> {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        self.record(name, shape, data, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("tanh", a, T::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("sigmoid", a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    fn rowwise(&mut self, name: &str, a: Var, log: bool) -> Result<Var, AutodiffError> {
        let v = &self.nodes[a.0].value;
        let (n, m) = v.dims2()?;
        let mut out = v.data().to_vec();
        for r in 0..n {
            let row = &mut out[r * m..(r + 1) * m];
            let max = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x = if log { *x - lse } else { (*x - lse).exp() };
            }
        }
        let shape = v.shape().to_vec();
        let op = if log { Op::LogSoftmax(a) } else { Op::Softmax(a) };
        self.record(name, shape, out, op, &[a])
    }

    /// Softmax over the last axis (each row of a matrix, or the whole vector).
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.rowwise("softmax", a, false)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.rowwise("log_softmax", a, true)
    }

    /// `Σ_r weights[r] · (−logp[r, targets[r]])`.
    pub fn weighted_nll(&mut self, logp: Var, targets: &[usize], weights: &[T]) -> Result<Var, AutodiffError> {
        let v = &self.nodes[logp.0].value;
        let (n, m) = v.dims2()?;
        if targets.len() != n || weights.len() != n {
            return Err(AutodiffError::Shape(format!(
                "weighted_nll: {n} rows but {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= m) {
            return Err(AutodiffError::Index { index: t, bound: m });
        }
        let total = targets
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(r, (&t, &w))| -w * v.data()[r * m + t])
            .sum();
        let op = Op::Nll { logp, targets: targets.to_vec(), weights: weights.to_vec() };
        self.record("weighted_nll", vec![1], vec![total], op, &[logp])
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let logp = self.log_softmax(logits)?;
        let w = T::one() / T::of_usize(targets.len().max(1));
        self.weighted_nll(logp, targets, &vec![w; targets.len()])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        self.record("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.nodes[a.0].value.data();
        let s = v.iter().copied().sum::<T>() / T::of_usize(v.len());
        self.record("mean", vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Concatenate 1-D tensors end to end (`axis` 0), or 2-D tensors along
    /// rows (`axis` 0) or columns (`axis` 1).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = *inputs.first().ok_or_else(|| AutodiffError::Shape("concat of nothing".into()))?;
        let rank = self.shape(first).len();
        if inputs.iter().any(|&v| self.shape(v).len() != rank) || axis >= rank || rank > 2 {
            return Err(AutodiffError::Shape(format!("concat: bad ranks or axis {axis}")));
        }
        let (shape, data) = if rank == 1 || axis == 0 {
            let tail = &self.shape(first)[1..];
            if inputs.iter().any(|&v| &self.shape(v)[1..] != tail) {
                return Err(AutodiffError::Shape("concat: trailing extents differ".into()));
            }
            let lead: usize = inputs.iter().map(|&v| self.shape(v)[0]).sum();
            let data: Vec<T> = inputs.iter().flat_map(|&v| self.value(v).data().iter().copied()).collect();
            let mut shape = vec![lead];
            shape.extend_from_slice(tail);
            (shape, data)
        } else {
            let rows = self.shape(first)[0];
            if inputs.iter().any(|&v| self.shape(v)[0] != rows) {
                return Err(AutodiffError::Shape("concat: row counts differ".into()));
            }
            let cols: usize = inputs.iter().map(|&v| self.shape(v)[1]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &v in inputs {
                    let c = self.shape(v)[1];
                    data.extend_from_slice(&self.value(v).data()[r * c..(r + 1) * c]);
                }
            }
            (vec![rows, cols], data)
        };
        let op = Op::Concat { inputs: inputs.to_vec(), axis };
        self.record("concat", shape, data, op, inputs)
    }

    /// Row lookup `table[ids[i], :]`; embedding lookup when `table` is an
    /// embedding matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (rows, d) = self.strict2("gather", table)?;
        if let Some(&i) = ids.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::Index { index: i, bound: rows });
        }
        let src = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        if ids.is_empty() {
            return Err(AutodiffError::Shape("gather: empty index list".into()));
        }
        let op = Op::Gather { table, ids: ids.to_vec() };
        self.record("gather", vec![ids.len(), d], data, op, &[table])
    }

    /// Populate gradients of `loss` with respect to every node that feeds it.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        self.zero_grad();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            self.propagate(i, &dy);
            check_finite("backward", &dy)?;
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn send(&mut self, to: Var, delta: &[T]) {
        if self.nodes[to.0].requires_grad {
            accumulate(&mut self.grads[to.0], delta);
        }
    }

    fn propagate(&mut self, i: usize, dy: &[T]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(a, dy);
                self.send(b, dy);
            }
            Op::Sub(a, b) => {
                self.send(a, dy);
                let neg: Vec<T> = dy.iter().map(|&d| -d).collect();
                self.send(b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<T> = dy.iter().zip(self.value(b).data()).map(|(&d, &y)| d * y).collect();
                let db: Vec<T> = dy.iter().zip(self.value(a).data()).map(|(&d, &x)| d * x).collect();
                self.send(a, &da);
                self.send(b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<T> = dy.iter().map(|&d| d * c).collect();
                self.send(a, &da);
            }
            Op::AddBias(a, b) => {
                self.send(a, dy);
                let m = self.shape(b)[0];
                let mut db = vec![T::zero(); m];
                for row in dy.chunks(m) {
                    db.iter_mut().zip(row).for_each(|(g, &d)| *g = *g + d);
                }
                self.send(b, &db);
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
                let m = self.shape(b)[1];
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::zero(); n * k];
                    gemm_nt(dy, self.value(b).data(), &mut da, n, m, k);
                    self.send(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); k * m];
                    gemm_tn(self.value(a).data(), dy, &mut db, n, k, m);
                    self.send(b, &db);
                }
            }
            Op::MatMulT(a, b) => {
                let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
                let m = self.shape(b)[0];
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::zero(); n * k];
                    gemm_nn(dy, self.value(b).data(), &mut da, n, m, k);
                    self.send(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); m * k];
                    gemm_tn(dy, self.value(a).data(), &mut db, n, m, k);
                    self.send(b, &db);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (self.shape(a)[0], self.shape(a)[1]);
                let mut da = vec![T::zero(); n * m];
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] = dy[j * n + i];
                    }
                }
                self.send(a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<T> = dy
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                self.send(a, &da);
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data();
                let da: Vec<T> = dy.iter().zip(y).map(|(&d, &t)| d * (T::one() - t * t)).collect();
                self.send(a, &da);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let da: Vec<T> = dy.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                self.send(a, &da);
            }
            Op::Softmax(a) => {
                let m = *self.shape(a).last().unwrap();
                let y = self.nodes[i].value.data();
                let mut da = vec![T::zero(); y.len()];
                for ((yr, dr), out) in y.chunks(m).zip(dy.chunks(m)).zip(da.chunks_mut(m)) {
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for ((o, &p), &d) in out.iter_mut().zip(yr).zip(dr) {
                        *o = p * (d - dot);
                    }
                }
                self.send(a, &da);
            }
            Op::LogSoftmax(a) => {
                let m = *self.shape(a).last().unwrap();
                let y = self.nodes[i].value.data();
                let mut da = vec![T::zero(); y.len()];
                for ((yr, dr), out) in y.chunks(m).zip(dy.chunks(m)).zip(da.chunks_mut(m)) {
                    let total: T = dr.iter().copied().sum();
                    for ((o, &lp), &d) in out.iter_mut().zip(yr).zip(dr) {
                        *o = d - lp.exp() * total;
                    }
                }
                self.send(a, &da);
            }
            Op::Nll { logp, targets, weights } => {
                let m = *self.shape(logp).last().unwrap();
                let mut da = vec![T::zero(); self.value(logp).numel()];
                for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                    da[r * m + t] = -w * dy[0];
                }
                self.send(logp, &da);
            }
            Op::Sum(a) => {
                let da = vec![dy[0]; self.value(a).numel()];
                self.send(a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                let da = vec![dy[0] / T::of_usize(n); n];
                self.send(a, &da);
            }
            Op::Concat { inputs, axis } => {
                if self.shape(inputs[0]).len() == 1 || axis == 0 {
                    let mut offset = 0;
                    for v in inputs {
                        let n = self.value(v).numel();
                        let part = dy[offset..offset + n].to_vec();
                        self.send(v, &part);
                        offset += n;
                    }
                } else {
                    let rows = self.shape(inputs[0])[0];
                    let total: usize = inputs.iter().map(|&v| self.shape(v)[1]).sum();
                    let mut col = 0;
                    for v in inputs {
                        let c = self.shape(v)[1];
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            part.extend_from_slice(&dy[r * total + col..r * total + col + c]);
                        }
                        self.send(v, &part);
                        col += c;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(table)[1];
                let mut dt = vec![T::zero(); self.value(table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (g, &x) in dt[id * d..(id + 1) * d].iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                        *g = *g + x;
                    }
                }
                self.send(table, &dt);
            }
        }
    }
}
