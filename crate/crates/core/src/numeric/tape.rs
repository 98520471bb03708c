//! Reverse-mode differentiation over a linear record of primitive operations.

use super::tensor::{matmul_into, Tensor};
use super::NumericError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    MeanRows(Var),
    Transpose(Var),
    Reshape(Var),
    Dot(Var, Var),
    Sum(Var),
    Pick(Var, usize),
}

impl Op {
    fn any_input(&self, f: impl Fn(Var) -> bool) -> bool {
        match self {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatVec(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::Dot(a, b) => f(*a) || f(*b),
            Op::Affine(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Slice(a, _)
            | Op::Row(a, _)
            | Op::MeanRows(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Pick(a, _) => f(*a),
            Op::Concat(vs) | Op::StackRows(vs) => vs.iter().any(|v| f(*v)),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// False for constants and for values computed only from constants;
    /// backward skips them.
    needs_grad: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them
/// in exact reverse order, accumulating gradients additively.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like it when it did not
    /// influence the output.
    pub fn take_or_zeros(&mut self, var: Var, shape: &[usize]) -> Tensor {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> NumericError {
    NumericError::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn last_axis(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is never needed (data, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, NumericError> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite { op: op_name });
        }
        let needs_grad = op.any_input(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2().ok_or_else(|| shape_err("matmul", av, bv))?;
        let (k2, n) = bv.dims2().ok_or_else(|| shape_err("matmul", av, bv))?;
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    /// `[r,c] x [c] -> [r]`
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, NumericError> {
        let (wv, xv) = (self.value(w), self.value(x));
        let (r, c) = wv.dims2().ok_or_else(|| shape_err("matvec", wv, xv))?;
        if xv.shape() != [c] {
            return Err(shape_err("matvec", wv, xv));
        }
        let xs = xv.data();
        let out = (0..r)
            .map(|i| wv.row(i).iter().zip(xs).map(|(a, b)| a * b).sum())
            .collect();
        self.push("matvec", Tensor::vector(out), Op::MatVec(w, x))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector: `[c] + [c]` or every row of `[r,c] + [c]`.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var, NumericError> {
        let (mv, bv) = (self.value(m), self.value(bias));
        let c = last_axis(mv);
        if bv.shape() != [c] || mv.rank() == 0 || mv.rank() > 2 {
            return Err(shape_err("add_bias", mv, bv));
        }
        let b = bv.data();
        let data = mv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(mv.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(m, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericError> {
        self.affine(a, s, 0.0)
    }

    /// `s * a + t`, elementwise.
    pub fn affine(&mut self, a: Var, s: f64, t: f64) -> Result<Var, NumericError> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| s * x + t).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("affine", value, Op::Affine(a, s))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var, NumericError> {
        self.affine(a, -1.0, 1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericError> {
        let av = self.value(a);
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x.tanh()).collect())?;
        self.push("tanh", value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericError> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("sigmoid", value, Op::Sigmoid(a))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericError> {
        let av = self.value(a);
        if av.rank() == 0 || av.rank() > 2 {
            return Err(shape_err("softmax", av, av));
        }
        let mut data = av.data().to_vec();
        softmax_rows(&mut data, last_axis(av));
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumericError> {
        let av = self.value(a);
        if av.rank() == 0 || av.rank() > 2 {
            return Err(shape_err("log_softmax", av, av));
        }
        let cols = last_axis(av);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("log_softmax", value, Op::LogSoftmax(a))
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 1 {
                return Err(shape_err("concat", pv, pv));
            }
            data.extend_from_slice(pv.data());
        }
        self.push("concat", Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    /// `a[start..start + len]` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let av = self.value(a);
        if av.rank() != 1 || start + len > av.len() {
            return Err(NumericError::Index {
                op: "slice",
                index: start + len,
                len: av.len(),
            });
        }
        let value = Tensor::vector(av.data()[start..start + len].to_vec());
        self.push("slice", value, Op::Slice(a, start))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, NumericError> {
        let av = self.value(a);
        let (r, _) = av.dims2().ok_or_else(|| shape_err("row", av, av))?;
        if i >= r {
            return Err(NumericError::Index {
                op: "row",
                index: i,
                len: r,
            });
        }
        let value = Tensor::vector(av.row(i).to_vec());
        self.push("row", value, Op::Row(a, i))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, NumericError> {
        let first = rows.first().ok_or(NumericError::Empty { op: "stack_rows" })?;
        let c = self.value(*first).len();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let rv = self.value(r);
            if rv.shape() != [c] {
                return Err(shape_err("stack_rows", self.value(*first), rv));
            }
            data.extend_from_slice(rv.data());
        }
        let value = Tensor::matrix(rows.len(), c, data)?;
        self.push("stack_rows", value, Op::StackRows(rows.to_vec()))
    }

    /// Mean over the row axis: `[r,c] -> [c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumericError> {
        let av = self.value(a);
        let (r, c) = av.dims2().ok_or_else(|| shape_err("mean_rows", av, av))?;
        if r == 0 {
            return Err(NumericError::Empty { op: "mean_rows" });
        }
        let mut out = vec![0.0; c];
        for row in av.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push("mean_rows", Tensor::vector(out), Op::MeanRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericError> {
        let av = self.value(a);
        let value = av.transposed().ok_or_else(|| shape_err("transpose", av, av))?;
        self.push("transpose", value, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericError> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 1 || av.shape() != bv.shape() {
            return Err(shape_err("dot", av, bv));
        }
        let s = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        self.push("dot", Tensor::scalar(s), Op::Dot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    /// Element `index` of the flattened tensor as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, NumericError> {
        let av = self.value(a);
        let v = *av.data().get(index).ok_or(NumericError::Index {
            op: "pick",
            index,
            len: av.len(),
        })?;
        self.push("pick", Tensor::scalar(v), Op::Pick(a, index))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumericError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(NumericError::NotScalar {
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2().expect("checked");
                    let n = bv.dims2().expect("checked").1;
                    if self.nodes[a.0].needs_grad {
                        let bt = bv.transposed().expect("rank 2");
                        self.accumulate(&mut grads, *a, |da| {
                            matmul_into(g.data(), bt.data(), da, m, n, k)
                        });
                    }
                    if self.nodes[b.0].needs_grad {
                        let at = av.transposed().expect("rank 2");
                        self.accumulate(&mut grads, *b, |db| {
                            matmul_into(at.data(), g.data(), db, k, m, n)
                        });
                    }
                }
                Op::MatVec(w, x) => {
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    let (_, c) = wv.dims2().expect("checked");
                    self.accumulate(&mut grads, *w, |dw| {
                        for (i, gi) in g.data().iter().enumerate() {
                            if *gi == 0.0 {
                                continue;
                            }
                            for (d, xj) in dw[i * c..(i + 1) * c].iter_mut().zip(xv.data()) {
                                *d += gi * xj;
                            }
                        }
                    });
                    self.accumulate(&mut grads, *x, |dx| {
                        for (i, gi) in g.data().iter().enumerate() {
                            for (d, wij) in dx.iter_mut().zip(wv.row(i)) {
                                *d += gi * wij;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |d| add_into(d, g.data(), 1.0));
                    self.accumulate(&mut grads, *b, |d| add_into(d, g.data(), 1.0));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, |d| add_into(d, g.data(), 1.0));
                    self.accumulate(&mut grads, *b, |d| add_into(d, g.data(), -1.0));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.accumulate(&mut grads, *a, |d| {
                        for ((d, gi), bi) in d.iter_mut().zip(g.data()).zip(bv.data()) {
                            *d += gi * bi;
                        }
                    });
                    self.accumulate(&mut grads, *b, |d| {
                        for ((d, gi), ai) in d.iter_mut().zip(g.data()).zip(av.data()) {
                            *d += gi * ai;
                        }
                    });
                }
                Op::AddBias(m, b) => {
                    self.accumulate(&mut grads, *m, |d| add_into(d, g.data(), 1.0));
                    let c = self.value(*b).len();
                    self.accumulate(&mut grads, *b, |d| {
                        for row in g.data().chunks(c) {
                            add_into(d, row, 1.0);
                        }
                    });
                }
                Op::Affine(a, s) => {
                    self.accumulate(&mut grads, *a, |d| add_into(d, g.data(), *s));
                }
                Op::Tanh(a) => self.accumulate(&mut grads, *a, |d| {
                    for ((d, gi), yi) in d.iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }),
                Op::Sigmoid(a) => self.accumulate(&mut grads, *a, |d| {
                    for ((d, gi), yi) in d.iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }),
                Op::Softmax(a) => {
                    let c = last_axis(y);
                    self.accumulate(&mut grads, *a, |d| {
                        for ((drow, grow), yrow) in
                            d.chunks_mut(c).zip(g.data().chunks(c)).zip(y.data().chunks(c))
                        {
                            let inner: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                            for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += yi * (gi - inner);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let c = last_axis(y);
                    self.accumulate(&mut grads, *a, |d| {
                        for ((drow, grow), yrow) in
                            d.chunks_mut(c).zip(g.data().chunks(c)).zip(y.data().chunks(c))
                        {
                            let total: f64 = grow.iter().sum();
                            for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += gi - yi.exp() * total;
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        let piece = &g.data()[offset..offset + n];
                        self.accumulate(&mut grads, *p, |d| add_into(d, piece, 1.0));
                        offset += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = g.len();
                    self.accumulate(&mut grads, *a, |d| {
                        add_into(&mut d[*start..*start + n], g.data(), 1.0)
                    });
                }
                Op::Row(a, i) => {
                    let c = g.len();
                    self.accumulate(&mut grads, *a, |d| {
                        add_into(&mut d[i * c..(i + 1) * c], g.data(), 1.0)
                    });
                }
                Op::StackRows(rows) => {
                    let c = last_axis(y);
                    for (r, &v) in rows.iter().enumerate() {
                        let piece = &g.data()[r * c..(r + 1) * c];
                        self.accumulate(&mut grads, v, |d| add_into(d, piece, 1.0));
                    }
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.value(*a).dims2().expect("checked");
                    let inv = 1.0 / r as f64;
                    self.accumulate(&mut grads, *a, |d| {
                        for row in d.chunks_mut(c) {
                            add_into(row, g.data(), inv);
                        }
                    });
                }
                Op::Transpose(a) => {
                    let gt = g.transposed().expect("rank 2");
                    self.accumulate(&mut grads, *a, |d| add_into(d, gt.data(), 1.0));
                }
                Op::Reshape(a) => {
                    self.accumulate(&mut grads, *a, |d| add_into(d, g.data(), 1.0));
                }
                Op::Dot(a, b) => {
                    let gs = g.item();
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.accumulate(&mut grads, *a, |d| add_into(d, bv.data(), gs));
                    self.accumulate(&mut grads, *b, |d| add_into(d, av.data(), gs));
                }
                Op::Sum(a) => {
                    let gs = g.item();
                    self.accumulate(&mut grads, *a, |d| d.iter_mut().for_each(|v| *v += gs));
                }
                Op::Pick(a, i) => {
                    let gs = g.item();
                    self.accumulate(&mut grads, *a, |d| d[*i] += gs);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        let slot = &mut grads[var.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[var.0].value.shape()));
        f(buf.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}
