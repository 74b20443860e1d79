use super::{NumericsError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Concatenation axis for [`Tape::concat`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Stack parts on top of each other (column counts must agree).
    Rows,
    /// Place parts side by side (row counts must agree).
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Gather { src: Var, rows: Vec<usize> },
    Concat { parts: Vec<Var>, axis: Axis },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    LogSoftmax(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of primitive operations.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it and a single reverse sweep implements the chain rule.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that reaches it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient of `var`, or zeros of `shape` when
    /// `var` does not influence the root.
    pub fn take_or_zeros(&mut self, var: Var, shape: (usize, usize)) -> Tensor {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf (a parameter or an input we want gradients for).
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        t.item().unwrap_or_else(|| panic!("node {} has shape {:?}, not a scalar", v.0, t.shape()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (rows, cols) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::new(rows, cols, data).expect("shape preserved"), op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (rows, cols) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.needs(a);
        self.push(Tensor::new(rows, cols, data).expect("shape preserved"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: (m, k),
                right: (k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(m, n, out).expect("m, n positive"), Op::MatMul(a, b), rg))
    }

    /// Selects rows of `src` (repetition allowed), producing `rows.len() × cols`.
    pub fn gather_rows(&mut self, src: Var, rows: Vec<usize>) -> Result<Var, NumericsError> {
        let (n_rows, cols) = self.shape(src);
        if rows.is_empty() {
            return Err(NumericsError::EmptyShape { rows: 0, cols });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(NumericsError::IndexOutOfRange {
                index: bad,
                len: n_rows,
            });
        }
        let s = self.value(src).data();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            data.extend_from_slice(&s[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(rows.len(), cols, data).expect("validated");
        let rg = self.needs(src);
        Ok(self.push(out, Op::Gather { src, rows }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptyShape { rows: 0, cols: 0 })?;
        let (r0, c0) = self.shape(first);
        for &p in &parts[1..] {
            let (r, c) = self.shape(p);
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    left: (r0, c0),
                    right: (r, c),
                });
            }
        }
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                let rows = data.len() / c0;
                Tensor::new(rows, c0, data)
            }
            Axis::Cols => {
                let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::new(r0, cols, data)
            }
        }
        .expect("validated");
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Reinterprets the row-major data with a new shape of equal size.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(a);
        if rows * cols != r * c || rows == 0 || cols == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                left: (r, c),
                right: (rows, cols),
            });
        }
        let value = self.value(a).clone().reshaped(rows, cols);
        let rg = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Row-wise `x - logsumexp(x)`: each row becomes a log-distribution.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(NumericsError::NonFinite { op: "log_softmax" });
        }
        let (rows, cols) = t.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = t.row_slice(r);
            let lse = logsumexp(row);
            data.extend(row.iter().map(|&x| x - lse));
        }
        let rg = self.needs(a);
        Ok(self.push(Tensor::new(rows, cols, data).expect("same shape"), Op::LogSoftmax(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Shared nodes accumulate the sum of their consumers' contributions.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        if root.0 >= self.nodes.len() {
            return Err(NumericsError::RootNotOnTape {
                root: root.0,
                len: self.nodes.len(),
            });
        }
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(NumericsError::RootNotScalar { shape });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| axpy(acc, 1.0, gd));
                self.accumulate(grads, *b, |acc| axpy(acc, 1.0, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| axpy(acc, 1.0, gd));
                self.accumulate(grads, *b, |acc| axpy(acc, -1.0, gd));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |acc| {
                    for ((o, &gi), &y) in acc.iter_mut().zip(gd).zip(vb) {
                        *o += gi * y;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for ((o, &gi), &x) in acc.iter_mut().zip(gd).zip(va) {
                        *o += gi * x;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = G · Bᵀ
                self.accumulate(grads, *a, |acc| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            acc[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                // dB = Aᵀ · G
                self.accumulate(grads, *b, |acc| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = va[i * k + p];
                            if x != 0.0 {
                                axpy(&mut acc[p * n..(p + 1) * n], x, grow);
                            }
                        }
                    }
                });
            }
            Op::Gather { src, rows } => {
                let cols = self.shape(*src).1;
                self.accumulate(grads, *src, |acc| {
                    for (out_r, &r) in rows.iter().enumerate() {
                        axpy(
                            &mut acc[r * cols..(r + 1) * cols],
                            1.0,
                            &gd[out_r * cols..(out_r + 1) * cols],
                        );
                    }
                });
            }
            Op::Concat { parts, axis } => match axis {
                Axis::Rows => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        self.accumulate(grads, p, |acc| axpy(acc, 1.0, &gd[offset..offset + n]));
                        offset += n;
                    }
                }
                Axis::Cols => {
                    let total = g.cols();
                    let mut col0 = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        self.accumulate(grads, p, |acc| {
                            for r in 0..rows {
                                let src = &gd[r * total + col0..r * total + col0 + cols];
                                axpy(&mut acc[r * cols..(r + 1) * cols], 1.0, src);
                            }
                        });
                        col0 += cols;
                    }
                }
            },
            Op::Reshape(a) => self.accumulate(grads, *a, |acc| axpy(acc, 1.0, gd)),
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |acc| acc.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(a) => {
                let s = gd[0] / self.value(*a).len() as f64;
                self.accumulate(grads, *a, |acc| acc.iter_mut().for_each(|o| *o += s));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |acc| axpy(acc, *c, gd)),
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let cols = y.cols();
                self.accumulate(grads, *a, |acc| {
                    for r in 0..y.rows() {
                        let grow = &gd[r * cols..(r + 1) * cols];
                        let total: f64 = grow.iter().sum();
                        for (c, (o, &gi)) in acc[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(grow)
                            .enumerate()
                        {
                            *o += gi - y.get(r, c).exp() * total;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |acc| {
                    for ((o, &gi), &yi) in acc.iter_mut().zip(gd).zip(y) {
                        *o += gi * yi;
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |acc| {
                    for ((o, &gi), &yi) in acc.iter_mut().zip(gd).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |acc| {
                    for ((o, &gi), &yi) in acc.iter_mut().zip(gd).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let acc = slot.get_or_insert_with(|| {
            let (r, c) = self.shape(v);
            Tensor::zeros(r, c)
        });
        f(acc.data_mut());
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x != 0.0 {
                axpy(orow, x, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
