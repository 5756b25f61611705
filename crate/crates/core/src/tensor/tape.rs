use super::kernels::{self, ConvDims};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    ConvTranspose { x: Var, w: Var, b: Var, dims: ConvDims },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    SteRound { x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Either operand may be a one-element tensor, broadcast over the other.
    MulScalarVar { x: Var, s: Var },
    Scale { x: Var, k: T },
    AddScalar { x: Var },
    ClampMin { x: Var, floor: T },
    Abs { x: Var },
    Square { x: Var },
    Sqrt { x: Var },
    Relu { x: Var },
    Powf { x: Var, e: T },
    Sum { x: Var },
    Mean { x: Var },
    L1 { x: Var },
    L2 { x: Var },
    Reshape { x: Var },
    BatchItem { x: Var, index: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records forward operations in execution order so gradients can be
/// replayed backward. Nodes only ever reference earlier nodes.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same length");
        self.push(value, op, &[x])
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    fn reduce(&mut self, x: Var, op: Op<T>, value: T) -> Var {
        self.push(Tensor::scalar(value), op, &[x])
    }

    // ---- convolution ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let dims = kernels::conv2d_dims(self.shape(x), self.shape(w), self.shape(b), stride, padding)?;
        let out = kernels::conv2d_forward(&dims, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let shape = vec![dims.n, dims.c_small, dims.g.oh, dims.g.ow];
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, b, dims }, &[x, w, b]))
    }

    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let dims =
            kernels::conv_transpose_dims(self.shape(x), self.shape(w), self.shape(b), stride, padding)?;
        let out =
            kernels::conv_transpose_forward(&dims, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let shape = vec![dims.n, dims.c_big, dims.g.h, dims.g.w];
        Ok(self.push(Tensor::new(shape, out)?, Op::ConvTranspose { x, w, b, dims }, &[x, w, b]))
    }

    // ---- activations ----

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.map(x, Op::LeakyRelu { x, slope }, |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        // Clamped so that outputs stay strictly inside (0, 1) at any precision.
        let hi = T::one() - T::epsilon() / T::of(2.0);
        let lo = T::min_positive_value();
        self.map(x, Op::Sigmoid { x }, |v| {
            let y = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            y.max(lo).min(hi)
        })
    }

    /// Rounds to the nearest integer (ties away from zero); the backward pass
    /// is the identity (straight-through estimator).
    pub fn ste_round(&mut self, x: Var) -> Var {
        self.map(x, Op::SteRound { x }, |v| v.round())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu { x }, |v| if v > T::zero() { v } else { T::zero() })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() == 1 && self.value(b).len() != 1 {
            return Ok(self.mul_scalar_var(b, a));
        }
        if self.value(b).len() == 1 && self.value(a).len() != 1 {
            return Ok(self.mul_scalar_var(a, b));
        }
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let k = self.value(s).item();
        self.map(x, Op::MulScalarVar { x, s }, |v| v * k)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.map(x, Op::Scale { x, k }, |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Var {
        self.map(x, Op::AddScalar { x }, |v| v + k)
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        self.map(x, Op::ClampMin { x, floor }, |v| if v > floor { v } else { floor })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs { x }, |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square { x }, |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, Op::Sqrt { x }, |v| v.sqrt())
    }

    /// `x^e` for non-negative `x`; the gradient is taken as zero where `x == 0`.
    pub fn powf(&mut self, x: Var, e: T) -> Var {
        self.map(x, Op::Powf { x, e }, |v| v.powf(e))
    }

    // ---- reductions (all return one-element tensors) ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.reduce(x, Op::Sum { x }, s)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::of(t.len().max(1) as f64);
        let s = t.data().iter().copied().sum::<T>() / n;
        self.reduce(x, Op::Mean { x }, if t.is_empty() { T::zero() } else { s })
    }

    pub fn l1_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.abs()).sum();
        self.reduce(x, Op::L1 { x }, s)
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().map(|&v| v * v).sum();
        self.reduce(x, Op::L2 { x }, s.sqrt())
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Sample `index` of a batch-major tensor as a `[1, ...]` tensor.
    pub fn batch_item(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::InvalidShape {
                op: "batch_item",
                reason: format!("index {index} out of range for shape {shape:?}"),
            });
        }
        let value = self.value(x).batch_item(index);
        Ok(self.push(value, Op::BatchItem { x, index }, &[x]))
    }

    // ---- backward ----

    /// Accumulates d(loss)/d(leaf) into every leaf that requires gradients.
    /// Calling it twice without [`Tape::zero_grad`] adds the gradients twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.nodes[id].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, d) in self.backprop_node(id, &g) {
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(())
    }

    /// Local vector-Jacobian products of node `id` for each input that requires gradients.
    fn backprop_node(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let out = nodes[id].value.data();
        let mut grads = Vec::new();
        let mut emit = |v: Var, f: &dyn Fn(usize) -> T| {
            if wants(v) {
                grads.push((v, (0..nodes[v.0].value.len()).map(f).collect()));
            }
        };

        match nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } | Op::ConvTranspose { x, w, b, dims } => {
                let buf = |v: Var| wants(v).then(|| vec![T::zero(); nodes[v.0].value.len()]);
                let (mut dx, mut dw, mut db) = (buf(x), buf(w), buf(b));
                let backward = if matches!(nodes[id].op, Op::Conv2d { .. }) {
                    kernels::conv2d_backward
                } else {
                    kernels::conv_transpose_backward
                };
                backward(
                    &dims,
                    val(x),
                    val(w),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(x, dx), (w, dw), (b, db)] {
                    if let Some(d) = d {
                        grads.push((v, d));
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = val(x);
                emit(x, &|i| if xv[i] > T::zero() { g[i] } else { g[i] * slope });
            }
            Op::Sigmoid { x } => emit(x, &|i| g[i] * out[i] * (T::one() - out[i])),
            Op::SteRound { x } => emit(x, &|i| g[i]),
            Op::Relu { x } => {
                let xv = val(x);
                emit(x, &|i| if xv[i] > T::zero() { g[i] } else { T::zero() });
            }
            Op::Add(a, b) => {
                emit(a, &|i| g[i]);
                emit(b, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                emit(a, &|i| g[i]);
                emit(b, &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                emit(a, &|i| g[i] * bv[i]);
                emit(b, &|i| g[i] * av[i]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                emit(a, &|i| g[i] / bv[i]);
                emit(b, &|i| -g[i] * av[i] / (bv[i] * bv[i]));
            }
            Op::MulScalarVar { x, s } => {
                let (xv, k) = (val(x), val(s)[0]);
                emit(x, &|i| g[i] * k);
                let ds: T = g.iter().zip(xv).map(|(&gi, &xi)| gi * xi).sum();
                emit(s, &|_| ds);
            }
            Op::Scale { x, k } => emit(x, &|i| g[i] * k),
            Op::AddScalar { x } => emit(x, &|i| g[i]),
            Op::ClampMin { x, floor } => {
                let xv = val(x);
                emit(x, &|i| if xv[i] > floor { g[i] } else { T::zero() });
            }
            Op::Abs { x } => {
                let xv = val(x);
                emit(x, &|i| g[i] * sign(xv[i]));
            }
            Op::Square { x } => {
                let xv = val(x);
                emit(x, &|i| g[i] * T::of(2.0) * xv[i]);
            }
            Op::Sqrt { x } => emit(x, &|i| {
                if out[i] > T::zero() {
                    g[i] / (T::of(2.0) * out[i])
                } else {
                    T::zero()
                }
            }),
            Op::Powf { x, e } => {
                let xv = val(x);
                emit(x, &|i| {
                    if xv[i] > T::zero() {
                        g[i] * e * xv[i].powf(e - T::one())
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sum { x } => emit(x, &|_| g[0]),
            Op::Mean { x } => {
                let n = T::of(val(x).len() as f64);
                emit(x, &|_| g[0] / n);
            }
            Op::L1 { x } => {
                let xv = val(x);
                emit(x, &|i| g[0] * sign(xv[i]));
            }
            Op::L2 { x } => {
                let (xv, norm) = (val(x), out[0]);
                emit(x, &|i| if norm > T::zero() { g[0] * xv[i] / norm } else { T::zero() });
            }
            Op::Reshape { x } => emit(x, &|i| g[i]),
            Op::BatchItem { x, index } => {
                let lo = index * g.len();
                emit(x, &|i| if i >= lo && i < lo + g.len() { g[i - lo] } else { T::zero() });
            }
        }
        grads
    }
}

fn sign<T: Float>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
