//! Minimal reverse-mode automatic differentiation over dense real tensors.
//!
//! A [`Graph`] is an append-only arena of nodes; node indices are therefore
//! already in topological order and the backward pass is a single reverse
//! sweep that visits each node exactly once. Everything is f64 and
//! single-threaded per graph; distinct graphs are independent.
//!
//! The primitive set is deliberately small: exactly what score networks,
//! fixed-point maps and their losses need. Complex values are represented as
//! two real channels, so the real part of a complex inner product is the
//! plain dot product here.

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Tensor `x` scaled by the scalar node `s`; differentiable in both.
    ScaleBy { x: NodeId, s: NodeId },
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Recip(NodeId),
    Conv2d {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    /// Dense matrix (node `m`, shape `[r, c]`) times flattened `x`.
    MatVec { m: NodeId, x: NodeId },
    Reshape(NodeId),
    Dot(NodeId, NodeId),
    Norm2(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert an input node. Leaves are the only nodes gradients can be
    /// requested for.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).scale(c);
        self.push(v, Op::Scale(x, c))
    }

    /// Scale tensor `x` by scalar node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "scale_by(scalar)",
                lhs: self.value(s).shape().to_vec(),
                rhs: vec![],
            });
        }
        let v = self.value(x).scale(self.value(s).item());
        Ok(self.push(v, Op::ScaleBy { x, s }))
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::from_vec(
            self.value(x).shape(),
            self.value(x).data().iter().map(|v| v.max(0.0)).collect(),
        )
        .expect("same length");
        self.push(v, Op::Relu(x))
    }

    /// Elementwise reciprocal. Entries must be bounded away from zero.
    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|v| v.abs() < 1e-300) {
            return Err(Error::RecipOfZero);
        }
        let v = Tensor::from_vec(
            self.value(x).shape(),
            self.value(x).data().iter().map(|v| 1.0 / v).collect(),
        )
        .expect("same length");
        Ok(self.push(v, Op::Recip(x)))
    }

    /// Circular 2-d convolution with odd kernel and optional bias.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let v = conv::forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        Ok(self.push(v, Op::Conv2d { x, weight, bias }))
    }

    /// Dense `[r, c]` matrix applied to `x` flattened to length `c`;
    /// result has shape `[r]`.
    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> Result<NodeId> {
        let ms = self.value(m).shape().to_vec();
        if ms.len() != 2 || ms[1] != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: ms,
                rhs: self.value(x).shape().to_vec(),
            });
        }
        let (r, c) = (ms[0], ms[1]);
        let md = self.value(m).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; r];
        for (i, o) in out.iter_mut().enumerate() {
            *o = md[i * c..(i + 1) * c]
                .iter()
                .zip(xd)
                .fold(0.0, |acc, (a, b)| a.mul_add(*b, acc));
        }
        let v = Tensor::from_vec(&[r], out)?;
        Ok(self.push(v, Op::MatVec { m, x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Real dot product of two same-shaped tensors; scalar result.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).dot(self.value(b))?);
        Ok(self.push(v, Op::Dot(a, b)))
    }

    /// Euclidean norm over all entries; scalar result.
    pub fn norm2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).norm());
        Ok(self.push(v, Op::Norm2(x)))
    }

    /// Propagate `seed` from `root` back to every node, returning the
    /// cotangent of each requested leaf (zeros for unused leaves).
    pub fn backward(&self, root: NodeId, seed: &Tensor, leaves: &[NodeId]) -> Result<Vec<Tensor>> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::ShapeMismatch {
                op: "backward(seed)",
                lhs: seed.shape().to_vec(),
                rhs: self.value(root).shape().to_vec(),
            });
        }
        let mut cot: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        cot[root.0] = Some(seed.clone());
        for i in (0..=root.0).rev() {
            let c = match cot[i].take() {
                Some(c) => c,
                None => continue,
            };
            self.pull_back(i, &c, &mut cot)?;
            cot[i] = Some(c);
        }
        leaves
            .iter()
            .map(|l| {
                Ok(match &cot[l.0] {
                    Some(c) => c.clone(),
                    None => Tensor::zeros(self.value(*l).shape()),
                })
            })
            .collect()
    }

    /// Gradient of a scalar node with respect to `leaves`.
    pub fn grad(&self, root: NodeId, leaves: &[NodeId]) -> Result<Vec<Tensor>> {
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        self.backward(root, &Tensor::scalar(1.0), leaves)
    }

    fn accumulate(cot: &mut [Option<Tensor>], id: NodeId, delta: Tensor) -> Result<()> {
        match &mut cot[id.0] {
            Some(existing) => existing.axpy_mut(1.0, &delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    fn pull_back(&self, i: usize, c: &Tensor, cot: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(cot, *a, c.clone())?;
                Self::accumulate(cot, *b, c.clone())?;
            }
            Op::Sub(a, b) => {
                Self::accumulate(cot, *a, c.clone())?;
                Self::accumulate(cot, *b, c.scale(-1.0))?;
            }
            Op::Scale(x, k) => Self::accumulate(cot, *x, c.scale(*k))?,
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s).item();
                Self::accumulate(cot, *x, c.scale(sv))?;
                let ds = c.dot(self.value(*x))?;
                Self::accumulate(cot, *s, Tensor::scalar(ds))?;
            }
            Op::Mul(a, b) => {
                Self::accumulate(cot, *a, c.mul(self.value(*b))?)?;
                Self::accumulate(cot, *b, c.mul(self.value(*a))?)?;
            }
            Op::Relu(x) => {
                let mask = Tensor::from_vec(
                    self.value(*x).shape(),
                    self.value(*x)
                        .data()
                        .iter()
                        .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
                        .collect(),
                )
                .expect("same length");
                Self::accumulate(cot, *x, c.mul(&mask)?)?;
            }
            Op::Recip(x) => {
                let d = Tensor::from_vec(
                    self.value(*x).shape(),
                    self.value(*x)
                        .data()
                        .iter()
                        .zip(c.data())
                        .map(|(v, cv)| -cv / (v * v))
                        .collect(),
                )
                .expect("same length");
                Self::accumulate(cot, *x, d)?;
            }
            Op::Conv2d { x, weight, bias } => {
                let dx = conv::input_adjoint(c, self.value(*weight))?;
                Self::accumulate(cot, *x, dx)?;
                let k = self.value(*weight).shape()[2];
                let dw = conv::weight_grad(self.value(*x), c, k)?;
                Self::accumulate(cot, *weight, dw)?;
                if let Some(b) = bias {
                    Self::accumulate(cot, *b, conv::bias_grad(c))?;
                }
            }
            Op::MatVec { m, x } => {
                let ms = self.value(*m).shape();
                let (r, cdim) = (ms[0], ms[1]);
                let md = self.value(*m).data();
                // dx = M' c
                let mut dx = vec![0.0; cdim];
                for i2 in 0..r {
                    let ci = c.data()[i2];
                    for (j, dv) in dx.iter_mut().enumerate() {
                        *dv += md[i2 * cdim + j] * ci;
                    }
                }
                Self::accumulate(
                    cot,
                    *x,
                    Tensor::from_vec(self.value(*x).shape(), dx).expect("length c"),
                )?;
                // dM = c x'
                let xd = self.value(*x).data();
                let mut dm = vec![0.0; r * cdim];
                for i2 in 0..r {
                    let ci = c.data()[i2];
                    for (j, xv) in xd.iter().enumerate() {
                        dm[i2 * cdim + j] = ci * xv;
                    }
                }
                Self::accumulate(cot, *m, Tensor::from_vec(&[r, cdim], dm)?)?;
            }
            Op::Reshape(x) => {
                Self::accumulate(cot, *x, c.reshaped(self.value(*x).shape())?)?;
            }
            Op::Dot(a, b) => {
                let cv = c.item();
                Self::accumulate(cot, *a, self.value(*b).scale(cv))?;
                Self::accumulate(cot, *b, self.value(*a).scale(cv))?;
            }
            Op::Norm2(x) => {
                let n = self.nodes[i].value.item();
                let d = if n == 0.0 {
                    Tensor::zeros(self.value(*x).shape())
                } else {
                    self.value(*x).scale(c.item() / n)
                };
                Self::accumulate(cot, *x, d)?;
            }
        }
        Ok(())
    }
}

/// Vector–Jacobian product of `f` at `x`: returns `J(x)' v` with the shape
/// of `x`. `f` must be built from graph primitives.
pub fn vjp<F>(f: F, x: &Tensor, v: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let out = f(&mut g, xid)?;
    let mut grads = g.backward(out, v, &[xid])?;
    Ok(grads.pop().expect("one leaf requested"))
}
