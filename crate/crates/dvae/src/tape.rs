//! Reverse-mode automatic differentiation on a per-evaluation tape.
//!
//! Every forward op appends a node holding its value and the ids of its
//! inputs; `backward` walks the nodes in reverse creation order and
//! accumulates vector-Jacobian products. Tapes are built fresh for each
//! evaluation and dropped afterwards, so there is no cross-step state and a
//! fixed op order gives bit-identical results on every run.
//!
//! Ops check their results and refuse to put NaN or Inf on the tape; domain
//! violations (log/sqrt of non-positive values, division by zero) and shape
//! mismatches are reported as distinct errors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Softplus(usize),
    Sigmoid(usize),
    Square(usize),
    Sqrt(usize),
    Negate(usize),
    /// (matrix, row vector broadcast down the rows)
    BroadcastAddRowvec(usize, usize),
    /// (matrix, row vector multiplied into every row)
    BroadcastMulRowvec(usize, usize),
    Reshape(usize),
    Transpose(usize),
    /// Slice along the last axis.
    Slice { input: usize, start: usize, len: usize },
    /// Concatenate along the last axis.
    Concat(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients from one backward pass.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if any reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].as_ref()
    }

    /// Gradient for `v`, zeros when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.slots[v.0].clone().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push_checked("leaf", value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, noise draws, detached values).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_checked("constant", value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn wants_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.wants_grad(&[a.0, b.0]);
        self.push_checked(name, value, op, rg)
    }

    fn unary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain { op: "div", detail: "division by zero".into() });
        }
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.wants_grad(&[a.0, b.0]);
        self.push_checked("matmul", value, Op::MatMul(a.0, b.0), rg)
    }

    /// Full reduction to a scalar of shape [1].
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    /// Full reduction to the mean, shape [1].
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Shape { op: "mean", detail: "empty tensor".into() });
        }
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("mean", Tensor::scalar(s / n as f64), Op::Mean(a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary_elementwise("exp", a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain { op: "log", detail: "non-positive input".into() });
        }
        self.unary_elementwise("log", a, f64::ln, Op::Log(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary_elementwise("tanh", a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary_elementwise("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary_elementwise(
            "leaky_relu",
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a.0, slope),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        // max(x, 0) + ln(1 + exp(-|x|)) avoids overflow at both ends.
        self.unary_elementwise(
            "softplus",
            a,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Op::Softplus(a.0),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary_elementwise("sigmoid", a, stable_sigmoid, Op::Sigmoid(a.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary_elementwise("square", a, |x| x * x, Op::Square(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain { op: "sqrt", detail: "non-positive input".into() });
        }
        self.unary_elementwise("sqrt", a, f64::sqrt, Op::Sqrt(a.0))
    }

    pub fn negate(&mut self, a: Var) -> Result<Var> {
        self.unary_elementwise("negate", a, |x| -x, Op::Negate(a.0))
    }

    /// Add a row vector (shape [c] or [1, c]) to every row of an (r, c) matrix.
    pub fn broadcast_add_rowvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mv, vv) = (self.value(m), self.value(v));
        if mv.rank() != 2 {
            return Err(Error::Shape {
                op: "broadcast_add_rowvec",
                detail: format!("matrix must be rank 2, got {:?}", mv.shape()),
            });
        }
        let c = mv.ncols();
        let row_ok = vv.shape() == [c] || vv.shape() == [1, c];
        if !row_ok {
            return Err(Error::Shape {
                op: "broadcast_add_rowvec",
                detail: format!("row vector {:?} vs matrix {:?}", vv.shape(), mv.shape()),
            });
        }
        let r = mv.nrows();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(mv.data()[i * c + j] + vv.data()[j]);
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let rg = self.wants_grad(&[m.0, v.0]);
        self.push_checked("broadcast_add_rowvec", value, Op::BroadcastAddRowvec(m.0, v.0), rg)
    }

    pub fn broadcast_mul_rowvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mv, vv) = (self.value(m), self.value(v));
        if mv.rank() != 2 {
            return Err(Error::Shape {
                op: "broadcast_mul_rowvec",
                detail: format!("matrix must be rank 2, got {:?}", mv.shape()),
            });
        }
        let c = mv.ncols();
        let row_ok = vv.shape() == [c] || vv.shape() == [1, c];
        if !row_ok {
            return Err(Error::Shape {
                op: "broadcast_mul_rowvec",
                detail: format!("row vector {:?} vs matrix {:?}", vv.shape(), mv.shape()),
            });
        }
        let r = mv.nrows();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(mv.data()[i * c + j] * vv.data()[j]);
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let rg = self.wants_grad(&[m.0, v.0]);
        self.push_checked("broadcast_mul_rowvec", value, Op::BroadcastMulRowvec(m.0, v.0), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = Tensor::new(shape, self.value(a).data().to_vec())?;
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("reshape", value, Op::Reshape(a.0), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("transpose", value, Op::Transpose(a.0), rg)
    }

    /// Slice `len` entries starting at `start` along the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let last = *av.shape().last().ok_or(Error::Shape {
            op: "slice",
            detail: "rank 0 input".into(),
        })?;
        if start + len > last {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("{}..{} out of {}", start, start + len, last),
            });
        }
        let lead: usize = av.shape()[..av.rank() - 1].iter().product();
        let mut data = Vec::with_capacity(lead * len);
        for i in 0..lead {
            let base = i * last + start;
            data.extend_from_slice(&av.data()[base..base + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("slice", value, Op::Slice { input: a.0, start, len }, rg)
    }

    /// Concatenate along the last axis; leading axes must match.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != bv.rank()
            || av.shape()[..av.rank() - 1] != bv.shape()[..bv.rank() - 1]
        {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let (la, lb) = (*av.shape().last().unwrap(), *bv.shape().last().unwrap());
        let lead: usize = av.shape()[..av.rank() - 1].iter().product();
        let mut data = Vec::with_capacity(lead * (la + lb));
        for i in 0..lead {
            data.extend_from_slice(&av.data()[i * la..(i + 1) * la]);
            data.extend_from_slice(&bv.data()[i * lb..(i + 1) * lb]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = la + lb;
        let value = Tensor::new(shape, data)?;
        let rg = self.wants_grad(&[a.0, b.0]);
        self.push_checked("concat", value, Op::Concat(a.0, b.0), rg)
    }

    // -- conveniences built from the ops above --

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::full(self.shape(a).to_vec(), c))?;
        self.mul(a, k)
    }

    /// Add a scalar constant elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::full(self.shape(a).to_vec(), c))?;
        self.add(a, k)
    }

    /// Row sums of an (r, c) matrix as an (r, 1) column.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let c = self.value(a).ncols();
        let ones = self.constant(Tensor::full(vec![c, 1], 1.0))?;
        self.matmul(a, ones)
    }

    /// Column sums of an (r, c) matrix as a (1, c) row.
    pub fn col_sums(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).nrows();
        let ones = self.constant(Tensor::full(vec![1, r], 1.0))?;
        self.matmul(ones, a)
    }

    /// Backward pass from a one-element root, seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("root must be scalar, shape {:?}", self.shape(root)),
            });
        }
        self.backward_seeded(root, Tensor::full(self.shape(root).to_vec(), 1.0))
    }

    /// Backward pass from any node with an explicit output gradient. Used to
    /// inject analytic gradients of fused estimators (e.g. kernel
    /// discrepancies computed outside the tape).
    pub fn backward_seeded(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(root) {
            return Err(Error::Shape {
                op: "backward_seeded",
                detail: format!("seed {:?} vs root {:?}", seed.shape(), self.shape(root)),
            });
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                slots[id] = None;
                continue;
            }
            let Some(g) = slots[id].take() else { continue };
            self.propagate(id, &g, &mut slots)?;
            slots[id] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn propagate(&self, id: usize, g: &Tensor, slots: &mut [Option<Tensor>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        match self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                accumulate(&mut slots[a], g.clone());
                accumulate(&mut slots[b], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut slots[a], g.clone());
                accumulate(&mut slots[b], g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(&mut slots[a], g.zip_map(val(b), "mul_bwd", |x, y| x * y)?);
                accumulate(&mut slots[b], g.zip_map(val(a), "mul_bwd", |x, y| x * y)?);
            }
            Op::Div(a, b) => {
                accumulate(&mut slots[a], g.zip_map(val(b), "div_bwd", |x, y| x / y)?);
                let out = val(id).clone(); // a / b
                let gb = g
                    .zip_map(&out, "div_bwd", |x, o| x * o)?
                    .zip_map(val(b), "div_bwd", |x, y| -x / y)?;
                accumulate(&mut slots[b], gb);
            }
            Op::MatMul(a, b) => {
                let bt = val(b).transpose()?;
                accumulate(&mut slots[a], g.matmul(&bt)?);
                let at = val(a).transpose()?;
                accumulate(&mut slots[b], at.matmul(g)?);
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                accumulate(&mut slots[a], Tensor::full(val(a).shape().to_vec(), gs));
            }
            Op::Mean(a) => {
                let gs = g.data()[0] / val(a).numel() as f64;
                accumulate(&mut slots[a], Tensor::full(val(a).shape().to_vec(), gs));
            }
            Op::Exp(a) => {
                accumulate(&mut slots[a], g.zip_map(val(id), "exp_bwd", |x, o| x * o)?);
            }
            Op::Log(a) => {
                accumulate(&mut slots[a], g.zip_map(val(a), "log_bwd", |x, v| x / v)?);
            }
            Op::Tanh(a) => {
                accumulate(&mut slots[a], g.zip_map(val(id), "tanh_bwd", |x, o| x * (1.0 - o * o))?);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(val(a), "relu_bwd", |x, v| if v > 0.0 { x } else { 0.0 })?;
                accumulate(&mut slots[a], ga);
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g.zip_map(val(a), "leaky_relu_bwd", |x, v| {
                    if v > 0.0 {
                        x
                    } else {
                        slope * x
                    }
                })?;
                accumulate(&mut slots[a], ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(val(a), "softplus_bwd", |x, v| x * stable_sigmoid(v))?;
                accumulate(&mut slots[a], ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(val(id), "sigmoid_bwd", |x, o| x * o * (1.0 - o))?;
                accumulate(&mut slots[a], ga);
            }
            Op::Square(a) => {
                accumulate(&mut slots[a], g.zip_map(val(a), "square_bwd", |x, v| 2.0 * v * x)?);
            }
            Op::Sqrt(a) => {
                accumulate(&mut slots[a], g.zip_map(val(id), "sqrt_bwd", |x, o| x / (2.0 * o))?);
            }
            Op::Negate(a) => {
                accumulate(&mut slots[a], g.map(|v| -v));
            }
            Op::BroadcastAddRowvec(m, v) => {
                accumulate(&mut slots[m], g.clone());
                let c = val(m).ncols();
                let r = val(m).nrows();
                let mut col = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        col[j] += g.data()[i * c + j];
                    }
                }
                accumulate(&mut slots[v], Tensor::new(val(v).shape().to_vec(), col)?);
            }
            Op::BroadcastMulRowvec(m, v) => {
                let c = val(m).ncols();
                let r = val(m).nrows();
                let vrow = val(v).data();
                let mdat = val(m).data();
                let mut gm = Vec::with_capacity(r * c);
                let mut col = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let ge = g.data()[i * c + j];
                        gm.push(ge * vrow[j]);
                        col[j] += ge * mdat[i * c + j];
                    }
                }
                accumulate(&mut slots[m], Tensor::new(val(m).shape().to_vec(), gm)?);
                accumulate(&mut slots[v], Tensor::new(val(v).shape().to_vec(), col)?);
            }
            Op::Reshape(a) => {
                accumulate(&mut slots[a], Tensor::new(val(a).shape().to_vec(), g.data().to_vec())?);
            }
            Op::Transpose(a) => {
                accumulate(&mut slots[a], g.transpose()?);
            }
            Op::Slice { input, start, len } => {
                let iv = val(input);
                let last = *iv.shape().last().unwrap();
                let lead: usize = iv.shape()[..iv.rank() - 1].iter().product();
                let mut data = vec![0.0; iv.numel()];
                for i in 0..lead {
                    for j in 0..len {
                        data[i * last + start + j] = g.data()[i * len + j];
                    }
                }
                accumulate(&mut slots[input], Tensor::new(iv.shape().to_vec(), data)?);
            }
            Op::Concat(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (la, lb) = (*av.shape().last().unwrap(), *bv.shape().last().unwrap());
                let lead: usize = av.shape()[..av.rank() - 1].iter().product();
                let mut da = Vec::with_capacity(av.numel());
                let mut db = Vec::with_capacity(bv.numel());
                for i in 0..lead {
                    let base = i * (la + lb);
                    da.extend_from_slice(&g.data()[base..base + la]);
                    db.extend_from_slice(&g.data()[base + la..base + la + lb]);
                }
                accumulate(&mut slots[a], Tensor::new(av.shape().to_vec(), da)?);
                accumulate(&mut slots[b], Tensor::new(bv.shape().to_vec(), db)?);
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            let sum = acc.zip_map(&g, "grad_acc", |x, y| x + y).expect("gradient shapes agree");
            *acc = sum;
        }
        None => *slot = Some(g),
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn log_exp_roundtrip() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![0.5, -1.2]).unwrap()).unwrap();
        let y = t.exp(x).unwrap();
        let z = t.log(y).unwrap();
        assert_relative_eq!(t.value(z).data()[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(t.value(z).data()[1], -1.2, max_relative = 1e-12);
    }

    #[test]
    fn sigmoid_sum_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![3])).unwrap();
        let s = t.sigmoid(x).unwrap();
        let out = t.sum(s).unwrap();
        assert_eq!(t.value(out).item().unwrap(), 1.5);
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let sq = t.square(x).unwrap();
        let loss = t.sum(sq).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(t.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn div_rejects_zero_denominator() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(1.0)).unwrap();
        let b = t.leaf(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(t.div(a, b), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn overflowing_exp_is_reported() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1e6)).unwrap();
        assert!(matches!(t.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(vec![2, 2])).unwrap();
        let b = t.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_grad_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        let r = t.relu(x).unwrap();
        let loss = t.sum(r).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn slice_and_concat_roundtrip_grads() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap()).unwrap();
        let left = t.slice(x, 0, 1).unwrap();
        let right = t.slice(x, 1, 2).unwrap();
        let back = t.concat(left, right).unwrap();
        assert_eq!(t.value(back).data(), t.value(x).data());
        let sq = t.square(back).unwrap();
        let loss = t.sum(sq).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }

    /// Central finite differences on every leaf entry of a rebuilt graph.
    fn finite_diff_grad(
        build: &dyn Fn(&mut Tape, &[Tensor]) -> Var,
        leaves: &[Tensor],
        leaf_idx: usize,
        entry: usize,
        step: f64,
    ) -> f64 {
        let eval = |delta: f64| {
            let mut bumped: Vec<Tensor> = leaves.to_vec();
            bumped[leaf_idx].data_mut()[entry] += delta;
            let mut t = Tape::new();
            let root = build(&mut t, &bumped);
            t.value(root).item().unwrap()
        };
        (eval(step) - eval(-step)) / (2.0 * step)
    }

    fn check_against_fd(build: &dyn Fn(&mut Tape, &[Tensor]) -> Var, leaves: &[Tensor]) {
        let mut t = Tape::new();
        let root = build(&mut t, leaves);
        let grads = t.backward(root).unwrap();
        // Rebuild to find the leaf vars in creation order.
        let leaf_vars: Vec<Var> = (0..leaves.len()).map(Var).collect();
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.get_or_zeros(leaf_vars[li], leaf.shape());
            for e in 0..leaf.numel() {
                let fd = finite_diff_grad(build, leaves, li, e, 1e-5);
                let ad = g.data()[e];
                let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
                assert!(rel <= 1e-4, "leaf {li} entry {e}: ad={ad} fd={fd} rel={rel}");
            }
        }
    }

    #[test]
    fn mlp_grads_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut randt = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        // Two-layer MLP with a tanh hidden layer and a softplus head.
        let leaves = vec![
            randt(vec![3, 4]), // w1
            randt(vec![4]),    // b1
            randt(vec![4, 2]), // w2
            randt(vec![2]),    // b2
            randt(vec![5, 3]), // x (treated as a parameter so it gets checked too)
        ];
        let build = |t: &mut Tape, l: &[Tensor]| -> Var {
            let vars: Vec<Var> = l.iter().map(|v| t.leaf(v.clone()).unwrap()).collect();
            let (w1, b1, w2, b2, x) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
            let h = t.matmul(x, w1).unwrap();
            let h = t.broadcast_add_rowvec(h, b1).unwrap();
            let h = t.tanh(h).unwrap();
            let o = t.matmul(h, w2).unwrap();
            let o = t.broadcast_add_rowvec(o, b2).unwrap();
            let o = t.softplus(o).unwrap();
            t.mean(o).unwrap()
        };
        check_against_fd(&build, &leaves);
    }

    #[test]
    fn mixed_op_graph_grads_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 6;
        let x = Tensor::new(vec![2, 3], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::new(vec![2, 3], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let build = |t: &mut Tape, l: &[Tensor]| -> Var {
            let x = t.leaf(l[0].clone()).unwrap();
            let y = t.leaf(l[1].clone()).unwrap();
            let sp = t.softplus(y).unwrap();
            let safe = t.offset(sp, 0.1).unwrap(); // strictly positive
            let lg = t.log(safe).unwrap();
            let root_term = t.sqrt(safe).unwrap();
            let prod = t.mul(x, lg).unwrap();
            let num = t.add(prod, root_term).unwrap();
            let den = t.square(x).unwrap();
            let den = t.offset(den, 1.0).unwrap();
            let q = t.div(num, den).unwrap();
            let qt = t.transpose(q).unwrap();
            let resh = t.reshape(qt, vec![2, 3]).unwrap();
            let lr = t.leaky_relu(resh, 0.2).unwrap();
            t.mean(lr).unwrap()
        };
        check_against_fd(&build, &[x, y]);
    }

    #[test]
    fn rowvec_broadcast_grads_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let m = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let v = Tensor::new(vec![1, 4], (0..4).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        let build = |t: &mut Tape, l: &[Tensor]| -> Var {
            let m = t.leaf(l[0].clone()).unwrap();
            let v = t.leaf(l[1].clone()).unwrap();
            let scaled = t.broadcast_mul_rowvec(m, v).unwrap();
            let shifted = t.broadcast_add_rowvec(scaled, v).unwrap();
            let sq = t.square(shifted).unwrap();
            t.mean(sq).unwrap()
        };
        check_against_fd(&build, &[m, v]);
    }

    #[test]
    fn backward_seeded_matches_composed_graph() {
        // Seeding backward from z with dL/dz must equal differentiating the
        // composed scalar directly.
        let x0 = Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.4]).unwrap();

        let mut t = Tape::new();
        let x = t.leaf(x0.clone()).unwrap();
        let z = t.tanh(x).unwrap();
        let sq = t.square(z).unwrap();
        let loss = t.mean(sq).unwrap();
        let full = t.backward(loss).unwrap();

        // dL/dz = 2 z / N
        let zval = t.value(z).clone();
        let seed = zval.map(|v| 2.0 * v / 4.0);
        let seeded = t.backward_seeded(z, seed).unwrap();

        let a = full.get(x).unwrap().data();
        let b = seeded.get(x).unwrap().data();
        for (u, v) in a.iter().zip(b) {
            assert_relative_eq!(u, v, max_relative = 1e-12);
        }
    }

    #[test]
    fn identical_graphs_are_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
            let e = t.exp(x).unwrap();
            let s = t.sigmoid(e).unwrap();
            let m = t.mean(s).unwrap();
            let g = t.backward(m).unwrap();
            (t.value(m).item().unwrap(), g.get(x).unwrap().data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
