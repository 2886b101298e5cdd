use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use super::kernels::{self, ConvDims};
use super::{ParamId, Parameter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before `log` and `pow`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Dropout(Var, Vec<S>),
    Conv2d(Var, Var),
    MaxPool(Var, Vec<usize>),
    Reshape(Var),
    Log(Var),
    Pow(Var, S),
    NormalizeRows(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Abs(Var),
    Square(Var),
    Affine(Var, S),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Result of [`Tape::backward`]: gradients per parameter (summed over every
/// use) and per recorded value.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    params: BTreeMap<ParamId, Tensor<S>>,
    vars: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor<S>> {
        &self.params
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<S>> {
        self.vars.get(v.0).and_then(Option::as_ref)
    }
}

fn floor<S: Scalar>() -> S {
    S::lit(PROB_FLOOR)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        self.nodes.get(v.0).ok_or(Error::ForeignVar)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn checked_input(&self, v: Var, op: &str) -> Result<&Tensor<S>> {
        let t = &self.node(v)?.value;
        t.ensure_finite(&format!("{op} input"))?;
        Ok(t)
    }

    fn finish(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(&format!("{name} output"))?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, op, rg))
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a free input whose gradient is reported by [`Gradients::var`].
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter; it requires a gradient iff it is trainable.
    pub fn param(&mut self, p: &Parameter<S>) -> Var {
        self.push(p.value().clone(), Op::Param(p.id()), p.trainable())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.checked_input(a, "matmul")?;
        let tb = self.checked_input(b, "matmul")?;
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let value = Tensor::from_parts_unchecked(vec![m, n], out);
        self.finish(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Adds a per-channel bias: `x` is `[batch, channels, ...]`, `b` is `[channels]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let tx = self.checked_input(x, "add_bias")?;
        let tb = self.checked_input(b, "add_bias")?;
        if tx.shape().len() < 2 || tb.shape() != [tx.shape()[1]] {
            return Err(Error::Shape {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let channels = tx.shape()[1];
        let inner: usize = tx.shape()[2..].iter().product();
        let mut out = tx.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % channels];
        }
        let value = Tensor::from_parts_unchecked(tx.shape().to_vec(), out);
        self.finish(value, Op::AddBias(x, b), &[x, b], "add_bias")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.checked_input(x, "relu")?;
        let value = tx.map(|v| if v > S::zero() { v } else { S::zero() });
        self.finish(value, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.checked_input(x, "sigmoid")?;
        let value = tx.map(|v| {
            if v >= S::zero() {
                S::one() / (S::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (S::one() + e)
            }
        });
        self.finish(value, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.checked_input(x, "softmax")?;
        let width = *tx.shape().last().unwrap_or(&1);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::from_parts_unchecked(tx.shape().to_vec(), out);
        self.finish(value, Op::Softmax(x), &[x], "softmax")
    }

    /// Inverted dropout. With `rng = None` (evaluation) or `p == 0` this is
    /// the identity and records nothing.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout rate must be in [0,1), got {p}"
            )));
        }
        let tx = self.checked_input(x, "dropout")?;
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..tx.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts_unchecked(tx.shape().to_vec(), out);
        self.finish(value, Op::Dropout(x, mask), &[x], "dropout")
    }

    /// Stride-1 valid convolution: `x` is `[n, c, h, w]`, `k` is `[o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let tx = self.checked_input(x, "conv2d")?;
        let tk = self.checked_input(k, "conv2d")?;
        let dims = conv_dims(tx.shape(), tk.shape())?;
        let out = kernels::conv2d(tx.data(), tk.data(), dims);
        let value = Tensor::from_parts_unchecked(vec![dims.n, dims.o, dims.oh(), dims.ow()], out);
        self.finish(value, Op::Conv2d(x, k), &[x, k], "conv2d")
    }

    /// 2×2 max pooling with stride 2 over `[n, c, h, w]`.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let tx = self.checked_input(x, "maxpool2x2")?;
        let s = tx.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Shape {
                op: "maxpool2x2",
                left: s.to_vec(),
                right: vec![2, 2],
            });
        }
        let (out, arg) = kernels::maxpool2x2(tx.data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::from_parts_unchecked(vec![s[0], s[1], s[2] / 2, s[3] / 2], out);
        self.finish(value, Op::MaxPool(x, arg), &[x], "maxpool2x2")
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let tx = self.checked_input(x, "flatten")?;
        let shape = [tx.rows(), tx.row_len()];
        self.reshape(x, &shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.node(x)?.value.clone();
        let value = tx.reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let value = tx.map(|v| v.max(floor()).ln());
        self.finish(value, Op::Log(x), &[x], "log")
    }

    /// `max(x, 1e-12)^exponent`.
    pub fn pow(&mut self, x: Var, exponent: S) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let value = tx.map(|v| v.max(floor()).powf(exponent));
        self.finish(value, Op::Pow(x, exponent), &[x], "pow")
    }

    /// Divides each last-dimension row by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let width = *tx.shape().last().unwrap_or(&1);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(width) {
            let total: S = row.iter().copied().sum();
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::from_parts_unchecked(tx.shape().to_vec(), out);
        self.finish(value, Op::NormalizeRows(x), &[x], "normalize_rows")
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let tb = &self.node(b)?.value;
        ta.ensure_same_shape(tb, name)?;
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts_unchecked(ta.shape().to_vec(), out);
        self.finish(value, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let value = self.node(x)?.value.map(|v| v.abs());
        self.finish(value, Op::Abs(x), &[x], "abs")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.node(x)?.value.map(|v| v * v);
        self.finish(value, Op::Square(x), &[x], "square")
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Result<Var> {
        let value = self.node(x)?.value.map(|v| scale * v + shift);
        self.finish(value, Op::Affine(x, scale), &[x], "affine")
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        self.affine(x, factor, S::zero())
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: S = self.node(x)?.value.data().iter().copied().sum();
        self.finish(Tensor::scalar(total), Op::Sum(x), &[x], "sum")
    }

    /// Smallest distance of any recorded non-differentiable point (relu at
    /// 0, abs at 0, maxpool ties) from its kink. Finite-difference checks
    /// are only meaningful when this exceeds the step size.
    pub fn min_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    for v in self.nodes[x.0].value.data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Op::MaxPool(x, arg) => {
                    let tx = &self.nodes[x.0].value;
                    let (h, w) = (tx.shape()[2], tx.shape()[3]);
                    let (ph, pw) = (h / 2, w / 2);
                    for (o, &best) in arg.iter().enumerate() {
                        let plane = o / (ph * pw);
                        let (i, j) = ((o % (ph * pw)) / pw, o % pw);
                        let base = plane * h * w;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * i + di) * w + 2 * j + dj;
                            if idx != best {
                                let gap = tx.data()[best] - tx.data()[idx];
                                margin = margin.min(gap.as_f64());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass from a scalar `loss`, visiting nodes in exact reverse
    /// recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        let mut params: BTreeMap<ParamId, Tensor<S>> = BTreeMap::new();
        if root.requires_grad {
            grads[loss.0] = Some(Tensor::full(root.value.shape(), S::one()));
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            params,
            vars: grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        node: &Node<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        params: &mut BTreeMap<ParamId, Tensor<S>>,
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, data: Vec<S>| {
            let shape = self.nodes[v.0].value.shape().to_vec();
            accumulate(&mut grads[v.0], Tensor::from_parts_unchecked(shape, data));
        };
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Param(id) => match params.get_mut(id) {
                Some(acc) => add_into(acc.data_mut(), gd),
                None => {
                    params.insert(*id, g.clone());
                }
            },
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    send(*a, kernels::matmul_a_bt(gd, tb.data(), m, k, n));
                }
                if self.wants(*b) {
                    send(*b, kernels::matmul_at_b(ta.data(), gd, m, k, n));
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    send(*x, gd.to_vec());
                }
                if self.wants(*b) {
                    let tx = val(*x);
                    let channels = tx.shape()[1];
                    let inner: usize = tx.shape()[2..].iter().product();
                    let mut db = vec![S::zero(); channels];
                    for (i, &gv) in gd.iter().enumerate() {
                        db[(i / inner) % channels] += gv;
                    }
                    send(*b, db);
                }
            }
            Op::Relu(x) => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                send(*x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| gv * y * (S::one() - y))
                    .collect();
                send(*x, dx);
            }
            Op::Softmax(x) => {
                let width = *node.value.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(gd.len());
                for (yrow, grow) in node.value.data().chunks(width).zip(gd.chunks(width)) {
                    let dot: S = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                    dx.extend(yrow.iter().zip(grow).map(|(&y, &gv)| y * (gv - dot)));
                }
                send(*x, dx);
            }
            Op::Dropout(x, mask) => {
                send(*x, gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect());
            }
            Op::Conv2d(x, k) => {
                let (tx, tk) = (val(*x), val(*k));
                let dims = conv_dims(tx.shape(), tk.shape()).expect("validated in forward");
                let (dx, dk) = kernels::conv2d_backward(
                    tx.data(),
                    tk.data(),
                    gd,
                    dims,
                    self.wants(*x),
                    self.wants(*k),
                );
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dk) = dk {
                    send(*k, dk);
                }
            }
            Op::MaxPool(x, arg) => {
                let mut dx = vec![S::zero(); val(*x).len()];
                for (&idx, &gv) in arg.iter().zip(gd) {
                    dx[idx] += gv;
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, gd.to_vec()),
            Op::Log(x) => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv > floor() { gv / xv } else { S::zero() })
                    .collect();
                send(*x, dx);
            }
            Op::Pow(x, e) => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| {
                        if xv > floor() {
                            gv * *e * xv.powf(*e - S::one())
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                send(*x, dx);
            }
            Op::NormalizeRows(x) => {
                let tx = val(*x);
                let width = *tx.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(gd.len());
                for ((xrow, yrow), grow) in tx
                    .data()
                    .chunks(width)
                    .zip(node.value.data().chunks(width))
                    .zip(gd.chunks(width))
                {
                    let total: S = xrow.iter().copied().sum();
                    let dot: S = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                    dx.extend(grow.iter().map(|&gv| (gv - dot) / total));
                }
                send(*x, dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    send(*a, gd.to_vec());
                }
                if self.wants(*b) {
                    send(*b, gd.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    send(*a, gd.to_vec());
                }
                if self.wants(*b) {
                    send(*b, gd.iter().map(|&gv| -gv).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.wants(*a) {
                    send(
                        *a,
                        gd.iter().zip(tb.data()).map(|(&gv, &y)| gv * y).collect(),
                    );
                }
                if self.wants(*b) {
                    send(
                        *b,
                        gd.iter().zip(ta.data()).map(|(&gv, &x)| gv * x).collect(),
                    );
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.wants(*a) {
                    send(
                        *a,
                        gd.iter().zip(tb.data()).map(|(&gv, &y)| gv / y).collect(),
                    );
                }
                if self.wants(*b) {
                    let db = gd
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(&gv, (&x, &y))| -gv * x / (y * y))
                        .collect();
                    send(*b, db);
                }
            }
            Op::Abs(x) => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| {
                        if xv > S::zero() {
                            gv
                        } else if xv < S::zero() {
                            -gv
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                send(*x, dx);
            }
            Op::Square(x) => {
                let two = S::lit(2.0);
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| two * xv * gv)
                    .collect();
                send(*x, dx);
            }
            Op::Affine(x, scale) => send(*x, gd.iter().map(|&gv| gv * *scale).collect()),
            Op::Sum(x) => send(*x, vec![gd[0]; val(*x).len()]),
        }
    }
}

fn conv_dims(x: &[usize], k: &[usize]) -> Result<ConvDims> {
    if x.len() != 4 || k.len() != 4 || x[1] != k[1] || k[2] > x[2] || k[3] > x[3] {
        return Err(Error::Shape {
            op: "conv2d",
            left: x.to_vec(),
            right: k.to_vec(),
        });
    }
    Ok(ConvDims {
        n: x[0],
        c: x[1],
        h: x[2],
        w: x[3],
        o: k[0],
        kh: k[2],
        kw: k[3],
    })
}

fn add_into<S: Scalar>(acc: &mut [S], g: &[S]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(acc) => add_into(acc.data_mut(), g.data()),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamId, Parameter};

    fn vec_tensor(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v)
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(vec_tensor(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(vec_tensor(&[0.0; 4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn conv_of_ones_counts_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0f64));
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0f64));
        let y = tape.conv2d(x, k).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(vec_tensor(&[f64::NAN, 1.0]));
        assert!(matches!(tape.relu(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(vec_tensor(&[1.0, 2.0]));
        let y = tape.dropout(x, 0.5, None).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let w = Parameter::new(ParamId(3), vec_tensor(&[1.0, 2.0]));
        let mut tape = Tape::new();
        let v = tape.param(&w);
        let sq = tape.square(v).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(ParamId(3)).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_no_gradient() {
        let w = Parameter::new(ParamId(0), vec_tensor(&[1.0, 2.0]));
        let mut tape = Tape::new();
        let _ = tape.param(&w);
        let c = tape.constant(Tensor::scalar(3.0));
        let grads = tape.backward(c).unwrap();
        assert!(grads.param(ParamId(0)).is_none());
    }

    #[test]
    fn repeated_parameter_use_accumulates() {
        // loss = sum(w) + sum(w) → gradient 2 everywhere
        let w = Parameter::new(ParamId(9), vec_tensor(&[0.5, -1.0]));
        let mut tape = Tape::new();
        let a = tape.param(&w);
        let b = tape.param(&w);
        let sa = tape.sum(a).unwrap();
        let sb = tape.sum(b).unwrap();
        let loss = tape.add(sa, sb).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(ParamId(9)).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let tape: Tape<f64> = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::EmptyTape)));
        let mut tape = Tape::new();
        let x = tape.leaf(vec_tensor(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_target() {
        let logits = [0.3f64, -1.2, 2.0, 0.1];
        let target = [0.0f64, 0.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![1, 4], logits.to_vec()).unwrap());
        let p = tape.softmax(z).unwrap();
        let lp = tape.log(p).unwrap();
        let t = tape.constant(Tensor::new(vec![1, 4], target.to_vec()).unwrap());
        let prod = tape.mul(t, lp).unwrap();
        let s = tape.sum(prod).unwrap();
        let loss = tape.scale(s, -1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.var(z).unwrap();
        let probs = tape.value(p).data().to_vec();
        for i in 0..4 {
            assert!((g.data()[i] - (probs[i] - target[i])).abs() < 1e-12);
        }
        // independent check by central finite differences
        let ce = |z: &[f64]| {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            lse - z[2]
        };
        for i in 0..4 {
            let mut zp = logits;
            let mut zm = logits;
            zp[i] += 1e-5;
            zm[i] -= 1e-5;
            let fd = (ce(&zp) - ce(&zm)) / 2e-5;
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }
}
