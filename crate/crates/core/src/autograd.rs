//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] owns an append-only list of op records. Every [`Var`] is a
//! value plus the index of the record that produced it, so records are
//! always in topological order and [`Graph::backward`] walks them in reverse.
//!
//! Backward closures and the tensors they capture are kept only for records
//! that have at least one input requiring a gradient. Inference with
//! constant parameters therefore frees activations as soon as their `Var`
//! handles are dropped.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Element> {
    op: &'static str,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

pub struct Graph<T: Element> {
    tape: RefCell<Tape<T>>,
    check_finite: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    /// New graph. Non-finite detection is on in debug builds (and therefore
    /// in tests) and off in release builds.
    pub fn new() -> Self {
        Self::with_check_finite(cfg!(debug_assertions))
    }

    pub fn with_check_finite(check_finite: bool) -> Self {
        Self {
            tape: RefCell::new(Tape {
                nodes: Vec::new(),
                consumed: false,
            }),
            check_finite,
        }
    }

    pub fn check_finite(&self) -> bool {
        self.check_finite
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Op names in recording order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.tape.borrow().nodes.iter().map(|n| n.op).collect()
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            op: "leaf",
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            graph: self,
            id,
            value,
            requires_grad,
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    pub(crate) fn record<'g, F>(
        &'g self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[&Var<'g, T>],
        backward: F,
    ) -> Result<Var<'g, T>>
    where
        F: FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        for v in inputs {
            assert!(
                std::ptr::eq(v.graph, self),
                "{op}: input belongs to a different graph"
            );
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad);
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var {
            graph: self,
            id,
            value,
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar `loss`. Gradients are returned for every
    /// leaf that requires one; leaves the loss does not depend on get zeros.
    /// A graph can be differentiated once.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.value.shape().to_vec()));
        }
        let mut tape = self.tape.borrow_mut();
        if tape.consumed {
            return Err(Error::GraphConsumed);
        }
        tape.consumed = true;

        let total = tape.nodes.len();
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; total];
        let mut leaves: Vec<Option<Tensor<T>>> = vec![None; total];
        if loss.requires_grad {
            pending[loss.id] = Some(Tensor::ones(loss.value.shape().to_vec()));
        }

        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &mut tape.nodes[id];
            if node.inputs.is_empty() {
                leaves[id] = Some(grad);
                continue;
            }
            let Some(bw) = node.backward.take() else {
                continue;
            };
            let inputs = node.inputs.clone();
            let input_grads = bw(&grad);
            debug_assert_eq!(input_grads.len(), inputs.len());
            for (input, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !tape.nodes[input].requires_grad {
                    continue;
                }
                pending[input] = Some(match pending[input].take() {
                    Some(acc) => accumulate(acc, &g),
                    None => g,
                });
            }
        }
        for node in tape.nodes.iter_mut() {
            node.backward = None;
        }
        Ok(Gradients { grads: leaves })
    }
}

fn accumulate<T: Element>(acc: Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let shape = acc.shape().to_vec();
    let mut data = acc.into_vec();
    for (a, &b) in data.iter_mut().zip(g.data()) {
        *a = *a + b;
    }
    Tensor::from_parts(shape, data)
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// dLoss/dVar, zeros when the loss does not depend on `var`.
    pub fn get(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.grads
            .get(var.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(var.value.shape().to_vec()))
    }

    /// `None` when no gradient reached `var`.
    pub fn try_get(&self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.clone())
    }
}

/// A value recorded in a [`Graph`].
#[derive(Clone)]
pub struct Var<'g, T: Element> {
    graph: &'g Graph<T>,
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("requires_grad", &self.requires_grad)
            .field("value", &self.value)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

/// Right-hand side of an elementwise op.
pub enum Operand<'a, 'g, T: Element> {
    Var(&'a Var<'g, T>),
    Scalar(T),
}

impl<'a, 'g, T: Element> From<&'a Var<'g, T>> for Operand<'a, 'g, T> {
    fn from(v: &'a Var<'g, T>) -> Self {
        Operand::Var(v)
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise `self (op) rhs`, where `rhs` is a same-shape var or a
    /// scalar. `Max` routes the gradient to `self` on ties.
    pub fn elementwise<'a>(&self, op: BinaryOp, rhs: impl Into<Operand<'a, 'g, T>>) -> Result<Self>
    where
        'g: 'a,
    {
        match rhs.into() {
            Operand::Var(b) => self.binary(op, b),
            Operand::Scalar(c) => match op {
                BinaryOp::Add => self.add_scalar(c),
                BinaryOp::Sub => self.add_scalar(-c),
                BinaryOp::Mul => self.mul_scalar(c),
                BinaryOp::Div => {
                    if c == T::zero() && self.graph.check_finite {
                        return Err(Error::DivisionByZero { op: "div" });
                    }
                    self.mul_scalar(T::one() / c)
                }
                BinaryOp::Max => self.unary(
                    "max_scalar",
                    |x| if x >= c { x } else { c },
                    move |x, _| if x >= c { T::one() } else { T::zero() },
                ),
            },
        }
    }

    fn binary(&self, op: BinaryOp, b: &Self) -> Result<Self> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Max => "max",
        };
        self.same_shape(b, name)?;
        if op == BinaryOp::Div
            && self.graph.check_finite
            && b.value.data().iter().any(|&d| d == T::zero())
        {
            return Err(Error::DivisionByZero { op: name });
        }
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
            BinaryOp::Max => |x, y| if x >= y { x } else { y },
        };
        let out = self.value.zip_map(&b.value, f)?;
        let (a_val, b_val) = (self.value.clone(), b.value.clone());
        let (need_a, need_b) = (self.requires_grad, b.requires_grad);
        self.graph.record(name, out, &[self, b], move |g| {
            let ga = need_a.then(|| match op {
                BinaryOp::Add | BinaryOp::Sub => g.clone(),
                BinaryOp::Mul => g.zip_map(&b_val, |g, y| g * y).unwrap(),
                BinaryOp::Div => g.zip_map(&b_val, |g, y| g / y).unwrap(),
                BinaryOp::Max => {
                    let mask = a_val.zip_map(&b_val, |x, y| T::from_f64((x >= y) as u8 as f64));
                    g.zip_map(&mask.unwrap(), |g, m| g * m).unwrap()
                }
            });
            let gb = need_b.then(|| match op {
                BinaryOp::Add => g.clone(),
                BinaryOp::Sub => g.map(|g| -g),
                BinaryOp::Mul => g.zip_map(&a_val, |g, x| g * x).unwrap(),
                BinaryOp::Div => {
                    let q = a_val.zip_map(&b_val, |x, y| -x / (y * y)).unwrap();
                    g.zip_map(&q, |g, q| g * q).unwrap()
                }
                BinaryOp::Max => {
                    let mask = a_val.zip_map(&b_val, |x, y| T::from_f64((x < y) as u8 as f64));
                    g.zip_map(&mask.unwrap(), |g, m| g * m).unwrap()
                }
            });
            vec![ga, gb]
        })
    }

    pub fn add(&self, b: &Self) -> Result<Self> {
        self.binary(BinaryOp::Add, b)
    }

    pub fn sub(&self, b: &Self) -> Result<Self> {
        self.binary(BinaryOp::Sub, b)
    }

    pub fn mul(&self, b: &Self) -> Result<Self> {
        self.binary(BinaryOp::Mul, b)
    }

    pub fn div(&self, b: &Self) -> Result<Self> {
        self.binary(BinaryOp::Div, b)
    }

    pub fn maximum(&self, b: &Self) -> Result<Self> {
        self.binary(BinaryOp::Max, b)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub(crate) fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Self> {
        let out = self.value.map(f);
        let (x, y) = (self.value.clone(), out.clone());
        self.graph.record(op, out, &[self], move |g| {
            let grad = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), grad))]
        })
    }

    pub fn add_scalar(&self, c: T) -> Result<Self> {
        self.unary("add_scalar", |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Result<Self> {
        self.unary("mul_scalar", |x| x * c, move |_, _| c)
    }

    /// `c - self`.
    pub fn rsub_scalar(&self, c: T) -> Result<Self> {
        self.unary("rsub_scalar", |x| c - x, |_, _| -T::one())
    }

    pub fn neg(&self) -> Result<Self> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Result<Self> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn powf(&self, p: T) -> Result<Self> {
        if p == T::zero() {
            return self.unary("powf", |_| T::one(), |_, _| T::zero());
        }
        self.unary("powf", |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: T, hi: T) -> Result<Self> {
        self.unary(
            "clamp",
            |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Result<Self> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn activation(&self, kind: Activation) -> Result<Self> {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::Tanh => self.tanh(),
        }
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Self> {
        let total = T::from_f64(self.value.sum());
        let shape = self.shape().to_vec();
        self.graph.record("sum", Tensor::scalar(total), &[self], move |g| {
            vec![Some(Tensor::full(shape, g.data()[0]))]
        })
    }

    pub fn mean(&self) -> Result<Self> {
        let n = T::from_f64(self.value.numel() as f64);
        self.sum()?.mul_scalar(T::one() / n)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let out = self.value.reshape(shape)?;
        let orig = self.shape().to_vec();
        self.graph.record("reshape", out, &[self], move |g| {
            vec![Some(g.reshape(orig).unwrap())]
        })
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (src_block, dst_block) = (shape[axis] * inner, len * inner);
        let data = self.value.data();
        let mut out = Vec::with_capacity(outer * dst_block);
        for o in 0..outer {
            let base = o * src_block + start * inner;
            out.extend_from_slice(&data[base..base + dst_block]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.graph.record(
            "slice_axis",
            Tensor::from_parts(out_shape, out),
            &[self],
            move |g| {
                let mut grad = vec![T::zero(); outer * src_block];
                for (o, chunk) in g.data().chunks(dst_block).enumerate() {
                    let base = o * src_block + start * inner;
                    grad[base..base + dst_block].copy_from_slice(chunk);
                }
                vec![Some(Tensor::from_parts(shape, grad))]
            },
        )
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<'g, T: Element>(xs: &[&Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat of an empty list"))?;
    let shape = first.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "concat axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    for x in &xs[1..] {
        let s = x.shape();
        let compatible = s.len() == shape.len()
            && s.iter()
                .zip(&shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: shape.clone(),
                right: s.to_vec(),
            });
        }
    }
    if xs.len() == 1 {
        return Ok((*first).clone());
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let blocks: Vec<usize> = xs.iter().map(|x| x.shape()[axis] * inner).collect();
    let out_block: usize = blocks.iter().sum();
    let mut out = Vec::with_capacity(outer * out_block);
    for o in 0..outer {
        for (x, &b) in xs.iter().zip(&blocks) {
            out.extend_from_slice(&x.value().data()[o * b..(o + 1) * b]);
        }
    }
    let mut out_shape = shape.clone();
    out_shape[axis] = blocks.iter().sum::<usize>() / inner;
    let in_shapes: Vec<Vec<usize>> = xs.iter().map(|x| x.shape().to_vec()).collect();
    let needs: Vec<bool> = xs.iter().map(|x| x.requires_grad()).collect();
    first.graph().record(
        "concat",
        Tensor::from_parts(out_shape, out),
        xs,
        move |g| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(blocks.len());
            for ((&b, s), need) in blocks.iter().zip(in_shapes).zip(needs) {
                if need {
                    let mut part = Vec::with_capacity(outer * b);
                    for o in 0..outer {
                        let base = o * out_block + offset;
                        part.extend_from_slice(&gd[base..base + b]);
                    }
                    grads.push(Some(Tensor::from_parts(s, part)));
                } else {
                    grads.push(None);
                }
                offset += b;
            }
            grads
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
