//! Reverse-mode tape. Nodes are appended in creation order, which is a
//! topological order, and `backward` walks them once in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::kernels;
use super::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Sin,
    Sqrt,
    Recip,
    Sigmoid,
    Tanh,
    Gelu,
    Swish,
}

enum Op<T> {
    Leaf,
    Binary { kind: Binary, a: Var, b: Var },
    Unary { kind: Unary, a: Var },
    Scale { a: Var, factor: T },
    Offset { a: Var },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Expand { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    SumAxis { a: Var, axis: usize },
    SumAll { a: Var },
    MaxAxis { a: Var, axis: usize, arg: Vec<usize> },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Clamp { a: Var, lo: T, hi: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the graph's leaves.
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
    shapes: HashMap<Var, Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; zero when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match self.grads.get(&v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes.get(&v).cloned().unwrap_or_default()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads.remove(&v) {
            Some(g) => g,
            None => Tensor::zeros(self.shapes.get(&v).cloned().unwrap_or_default()),
        }
    }

    /// Whether the loss reached this leaf at all.
    pub fn touched(&self, v: Var) -> bool {
        self.grads.contains_key(&v)
    }
}

/// Recording tape for one forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    spent: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        // Constant subgraphs keep no adjoint bookkeeping.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- elementwise binary (broadcasting) ----

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (name, f): (&'static str, fn(T, T) -> T) = match kind {
            Binary::Add => ("add", |x, y| x + y),
            Binary::Sub => ("sub", |x, y| x - y),
            Binary::Mul => ("mul", |x, y| x * y),
            Binary::Div => ("div", |x, y| x / y),
        };
        let value = kernels::binary(name, self.value(a), self.value(b), f)?;
        Ok(self.push(value, Op::Binary { kind, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale { a, factor }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::Offset { a }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    // ---- elementwise unary ----

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let clamp = T::of(kernels::LOG_CLAMP);
        let f: Box<dyn Fn(T) -> T> = match kind {
            Unary::Exp => Box::new(|x: T| x.exp()),
            Unary::Log => Box::new(move |x: T| x.max(clamp).ln()),
            Unary::Sin => Box::new(|x: T| x.sin()),
            Unary::Sqrt => Box::new(|x: T| x.sqrt()),
            Unary::Recip => Box::new(|x: T| x.recip()),
            Unary::Sigmoid => Box::new(kernels::sigmoid),
            Unary::Tanh => Box::new(|x: T| x.tanh()),
            Unary::Gelu => Box::new(kernels::gelu),
            Unary::Swish => Box::new(|x: T| x * kernels::sigmoid(x)),
        };
        let value = self.value(a).map(f);
        self.push(value, Op::Unary { kind, a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    /// Natural log with the input clamped to at least `1e-12`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(Unary::Recip, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(Unary::Swish, a)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(value, Op::Clamp { a, lo, hi }, &[a])
    }

    // ---- linear algebra and layout ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = kernels::transpose(self.value(a))?;
        Ok(self.push(value, Op::Transpose { a }, &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = kernels::permute(self.value(a), perm)?;
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// Broadcast `a` to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        match kernels::broadcast_shape(src.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(shape_err("expand", src.shape(), shape)),
        }
        let layout = kernels::layout(shape, src.shape());
        let numel: usize = shape.iter().product();
        let d = src.data();
        let data = (0..numel).map(|i| d[layout.index(i)]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::Expand { a }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = kernels::concat(&tensors, axis)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = kernels::narrow(self.value(a), axis, start, len)?;
        Ok(self.push(value, Op::Narrow { a, axis, start }, &[a]))
    }

    // ---- reductions ----

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(shape_err(op, self.shape(a), &[axis]));
        }
        Ok(())
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", a, axis)?;
        let value = kernels::sum_axis(self.value(a), axis);
        Ok(self.push(value, Op::SumAxis { a, axis }, &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, T::one() / T::of(n as f64)))
    }

    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max", a, axis)?;
        let (value, arg) = kernels::max_axis(self.value(a), axis);
        Ok(self.push(value, Op::MaxAxis { a, axis, arg }, &[a]))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    // ---- normalization ----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let value = kernels::softmax(self.value(a), axis);
        Ok(self.push(value, Op::Softmax { a, axis }, &[a]))
    }

    /// Layer norm over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let dim = self.shape(x).last().copied().unwrap_or(0);
        for p in [gain, bias] {
            if self.shape(p) != [dim] {
                return Err(shape_err("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let (value, xhat, rstd) =
            kernels::layer_norm(self.value(x), self.value(gain).data(), self.value(bias).data());
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    // ---- reverse pass ----

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires one. A graph can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.spent {
            return Err(Error::contract(
                "backward already ran on this graph; record a new one",
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.spent = true;

        let mut shapes = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.requires_grad && matches!(n.op, Op::Leaf) {
                shapes.insert(Var(i), n.value.shape().to_vec());
            }
        }
        let mut out = Gradients {
            grads: HashMap::new(),
            shapes,
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }

        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads.insert(Var(i), g);
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let y = &node.value;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor<T>| accumulate(grads, v, t);

        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Binary { kind, a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let out_shape = y.shape();
                let la = kernels::layout(out_shape, av.shape());
                let lb = kernels::layout(out_shape, bv.shape());
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                let n = gd.len();
                if wants(*a) {
                    let ga: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => (0..n).map(|k| gd[k] * bd[lb.index(k)]).collect(),
                        Binary::Div => (0..n).map(|k| gd[k] / bd[lb.index(k)]).collect(),
                    };
                    acc(*a, Tensor::new(av.shape().to_vec(), la.reduce(&ga, av.numel()))?);
                }
                if wants(*b) {
                    let gb: Vec<T> = match kind {
                        Binary::Add => gd.to_vec(),
                        Binary::Sub => gd.iter().map(|&x| -x).collect(),
                        Binary::Mul => (0..n).map(|k| gd[k] * ad[la.index(k)]).collect(),
                        Binary::Div => (0..n)
                            .map(|k| {
                                let bk = bd[lb.index(k)];
                                -gd[k] * ad[la.index(k)] / (bk * bk)
                            })
                            .collect(),
                    };
                    acc(*b, Tensor::new(bv.shape().to_vec(), lb.reduce(&gb, bv.numel()))?);
                }
            }
            Op::Unary { kind, a } => {
                let x = val(*a).data();
                let yd = y.data();
                let clamp = T::of(kernels::LOG_CLAMP);
                let gd = g.data();
                let data: Vec<T> = match kind {
                    Unary::Exp => gd.iter().zip(yd).map(|(&g, &y)| g * y).collect(),
                    Unary::Log => gd
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > clamp { g / x } else { T::zero() })
                        .collect(),
                    Unary::Sin => gd.iter().zip(x).map(|(&g, &x)| g * x.cos()).collect(),
                    Unary::Sqrt => gd
                        .iter()
                        .zip(yd)
                        .map(|(&g, &y)| g / (T::of(2.0) * y))
                        .collect(),
                    Unary::Recip => gd.iter().zip(yd).map(|(&g, &y)| -g * y * y).collect(),
                    Unary::Sigmoid => gd
                        .iter()
                        .zip(yd)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                    Unary::Tanh => gd
                        .iter()
                        .zip(yd)
                        .map(|(&g, &y)| g * (T::one() - y * y))
                        .collect(),
                    Unary::Gelu => gd
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| g * kernels::gelu_grad(x))
                        .collect(),
                    Unary::Swish => gd
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| {
                            let s = kernels::sigmoid(x);
                            g * s * (T::one() + x * (T::one() - s))
                        })
                        .collect(),
                };
                acc(*a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                acc(*a, g.map(|x| x * f));
            }
            Op::Offset { a } => acc(*a, g),
            Op::Clamp { a, lo, hi } => {
                let x = val(*a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { T::zero() })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let k = sa[sa.len() - 1];
                let n = sb[sb.len() - 1];
                let (batch, m) = if sb.len() == 2 {
                    (1, av.numel() / k.max(1))
                } else {
                    (sa[0], sa[1])
                };
                let gd = g.data();
                if wants(*a) {
                    // dA = G @ B^T
                    let mut da = vec![T::zero(); av.numel()];
                    for bi in 0..batch {
                        let bslice = if sb.len() == 2 {
                            bv.data()
                        } else {
                            &bv.data()[bi * k * n..(bi + 1) * k * n]
                        };
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gd[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            bslice,
                            1,
                            n as isize,
                            T::zero(),
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                    acc(*a, Tensor::new(sa.to_vec(), da)?);
                }
                if wants(*b) {
                    // dB = A^T @ G
                    let mut db = vec![T::zero(); bv.numel()];
                    for bi in 0..batch {
                        let dst = if sb.len() == 2 {
                            &mut db[..]
                        } else {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        };
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av.data()[bi * m * k..(bi + 1) * m * k],
                            1,
                            k as isize,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            if sb.len() == 2 && bi > 0 { T::one() } else { T::zero() },
                            dst,
                            n as isize,
                            1,
                        );
                    }
                    acc(*b, Tensor::new(sb.to_vec(), db)?);
                }
            }
            Op::Transpose { a } => acc(*a, kernels::transpose(&g)?),
            Op::Permute { a, perm } => {
                acc(*a, kernels::permute(&g, &kernels::inverse_permutation(perm))?)
            }
            Op::Reshape { a } => acc(*a, g.reshape(val(*a).shape().to_vec())?),
            Op::Expand { a } => {
                let av = val(*a);
                let layout = kernels::layout(y.shape(), av.shape());
                acc(*a, Tensor::new(av.shape().to_vec(), layout.reduce(g.data(), av.numel()))?);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if wants(p) {
                        acc(p, kernels::narrow(&g, *axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let av = val(*a);
                let (outer, full, inner) = kernels::split_axis(av.shape(), *axis);
                let len = g.shape()[*axis];
                let mut data = vec![T::zero(); av.numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(*a, Tensor::new(av.shape().to_vec(), data)?);
            }
            Op::SumAxis { a, axis } => {
                let av = val(*a);
                let (outer, len, inner) = kernels::split_axis(av.shape(), *axis);
                let gd = g.data();
                let mut data = Vec::with_capacity(av.numel());
                for o in 0..outer {
                    for _ in 0..len {
                        data.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), data)?);
            }
            Op::SumAll { a } => {
                let av = val(*a);
                acc(*a, Tensor::full(av.shape().to_vec(), g.item()));
            }
            Op::MaxAxis { a, axis, arg } => {
                let av = val(*a);
                let (outer, len, inner) = kernels::split_axis(av.shape(), *axis);
                let mut data = vec![T::zero(); av.numel()];
                let gd = g.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let j = o * inner + i;
                        data[(o * len + arg[j]) * inner + i] += gd[j];
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), data)?);
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = kernels::split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut data = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                        for l in 0..len {
                            data[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                acc(*a, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let dim = *y.shape().last().expect("rank >= 1");
                let gv = val(*gain).data();
                let gd = g.data();
                let mut dgain = vec![T::zero(); dim];
                let mut dbias = vec![T::zero(); dim];
                let mut dx = vec![T::zero(); y.numel()];
                let inv_dim = T::one() / T::of(dim as f64);
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = r * dim..(r + 1) * dim;
                    let (gr, hr) = (&gd[row.clone()], &xhat[row.clone()]);
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..dim {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh *= inv_dim;
                    mean_dh_h *= inv_dim;
                    for j in 0..dim {
                        let dh = gr[j] * gv[j];
                        dx[r * dim + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                if wants(*x) {
                    acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                if wants(*gain) {
                    acc(*gain, Tensor::new(vec![dim], dgain)?);
                }
                if wants(*bias) {
                    acc(*bias, Tensor::new(vec![dim], dbias)?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn reduce_sum() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(a);
        assert_eq!(g.value(s).item(), 6.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([3]));
        let s = g.softmax(a, 0).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
        let b = g.constant(Tensor::new([2], vec![1000.0, 0.0]).unwrap());
        let s = g.softmax(b, 0).unwrap();
        let v = g.value(s).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-6 && v[1] < 1e-6);
    }

    #[test]
    fn elementwise_fixed_points() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([1]));
        let ge = g.gelu(z);
        let sw = g.swish(z);
        assert_eq!(g.value(ge).item(), 0.0);
        assert_eq!(g.value(sw).item(), 0.0);
        let c = g.constant(Tensor::full([4], 2.5));
        let gain = g.constant(Tensor::ones([4]));
        let bias = g.constant(Tensor::zeros([4]));
        let ln = g.layer_norm(c, gain, bias).unwrap();
        assert!(g.value(ln).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([3]));
        let c = g.constant(Tensor::scalar(4.0));
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unused_leaf_gradient_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([2]));
        let unused = g.param(Tensor::ones([2, 2]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused), Tensor::zeros([2, 2]));
        assert!(!grads.touched(unused));
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([2]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn log_clamps_at_tiny_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([2], vec![0.0, 1.0]).unwrap());
        let l = g.log(x);
        assert!((g.value(l).data()[0] - 1e-12f64.ln()).abs() < 1e-9);
        let s = g.sum(l);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn broadcast_both_sides() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_fn([2, 3, 1], |i| i as f64));
        let b = g.param(Tensor::from_fn([4], |i| i as f64 + 1.0));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 4]);
        assert_eq!(g.value(c).at(&[1, 2, 3]), 5.0 * 4.0);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        // d/da = sum(b) = 10, d/db_j = sum(a) = 15
        assert!(grads.get(a).data().iter().all(|&v| v == 10.0));
        assert!(grads.get(b).data().iter().all(|&v| v == 15.0));
    }
}
