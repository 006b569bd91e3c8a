//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order and only ever reference earlier
//! nodes, so the tape is acyclic by construction and a single reverse sweep
//! visits every node after all of its consumers.

use super::ops;
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Depthwise { x: Var, w: Var, stride: usize, pad: usize },
    Pointwise { x: Var, w: Var },
    BiasAdd { x: Var, b: Var },
    Dense { x: Var, w: Var, b: Var },
    Relu(Var),
    GlobalAvgPool(Var),
    AvgPool { x: Var, k: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mae { pred: Var, target: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// A recorded forward computation.
#[derive(Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every node of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, stride, pad }))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::depthwise_conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(y, Op::Depthwise { x, w, stride, pad }))
    }

    pub fn pointwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::pointwise_conv(self.value(x), self.value(w))?;
        Ok(self.push(y, Op::Pointwise { x, w }))
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let y = ops::bias_add(self.value(x), self.value(b))?;
        Ok(self.push(y, Op::BiasAdd { x, b }))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Dense { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool(x)))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let y = ops::avg_pool(self.value(x), k)?;
        Ok(self.push(y, Op::AvgPool { x, k }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&vals, axis)?;
        Ok(self.push(
            y,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::residual_add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of_f64(factor);
        let y = self.value(x).map(|v| v * f);
        self.push(y, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mae_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let y = ops::mae_loss(self.value(pred), self.value(target))?;
        Ok(self.push(y, Op::Mae { pred, target }))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, g: Tensor<T>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => {}
                &Op::Conv2d { x, w, stride, pad } => {
                    let (gx, gw) =
                        ops::conv2d_backward(self.value(x), self.value(w), &gy, stride, pad)?;
                    acc(x, gx);
                    acc(w, gw);
                }
                &Op::Depthwise { x, w, stride, pad } => {
                    let (gx, gw) = ops::depthwise_conv2d_backward(
                        self.value(x),
                        self.value(w),
                        &gy,
                        stride,
                        pad,
                    )?;
                    acc(x, gx);
                    acc(w, gw);
                }
                &Op::Pointwise { x, w } => {
                    let (gx, gw) = ops::pointwise_conv_backward(self.value(x), self.value(w), &gy)?;
                    acc(x, gx);
                    acc(w, gw);
                }
                &Op::BiasAdd { x, b } => {
                    let gb = ops::bias_add_backward(&gy, self.value(b).numel());
                    let gb = gb.reshape(self.value(b).shape().to_vec())?;
                    acc(b, gb);
                    acc(x, gy.clone());
                }
                &Op::Dense { x, w, b } => {
                    let (gx, gw, gb) = ops::dense_backward(self.value(x), self.value(w), &gy);
                    acc(x, gx);
                    acc(w, gw);
                    acc(b, gb.reshape(self.value(b).shape().to_vec())?);
                }
                &Op::Relu(x) => acc(x, ops::relu_backward(self.value(x), &gy)),
                &Op::GlobalAvgPool(x) => {
                    acc(x, ops::global_avg_pool_backward(self.value(x).shape(), &gy))
                }
                &Op::AvgPool { x, k } => {
                    acc(x, ops::avg_pool_backward(self.value(x).shape(), &gy, k))
                }
                Op::Concat { xs, axis } => {
                    let shapes: Vec<Vec<usize>> =
                        xs.iter().map(|&v| self.value(v).shape().to_vec()).collect();
                    for (&v, g) in xs.iter().zip(ops::concat_backward(&shapes, *axis, &gy)) {
                        acc(v, g);
                    }
                }
                &Op::Add(a, b) => {
                    acc(a, gy.clone());
                    acc(b, gy.clone());
                }
                &Op::Mul(a, b) => {
                    acc(a, ops::mul(&gy, self.value(b))?);
                    acc(b, ops::mul(&gy, self.value(a))?);
                }
                &Op::Scale(x, f) => {
                    let f = T::of_f64(f);
                    acc(x, gy.map(|v| v * f));
                }
                &Op::Sum(x) => acc(x, Tensor::full(self.value(x).shape(), gy.item())),
                &Op::Mae { pred, target } => {
                    let gp = ops::mae_loss_backward(self.value(pred), self.value(target), gy.item());
                    acc(target, gp.map(|v| -v));
                    acc(pred, gp);
                }
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}
