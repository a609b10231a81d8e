use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable function with a scalar output, implemented outside the
/// engine (the training objectives use this).
pub trait ScalarOp<T: Real>: Send + Sync {
    /// Gradients of the output with respect to each input, scaled by
    /// `upstream`. Entries whose `need` flag is false may be `None`.
    fn backward(&self, inputs: &[&Tensor<T>], upstream: T, need: &[bool]) -> Vec<Option<Tensor<T>>>;
}

/// A differentiable tensor-valued function implemented outside the engine.
pub trait TensorOp<T: Real>: Send + Sync {
    /// Vector-Jacobian products for each input given the upstream gradient
    /// of `output`. Entries whose `need` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        upstream: &Tensor<T>,
        need: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    /// Scalar `sum_i c_i * s_i`.
    Combine(Vec<(Var, T)>),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn ScalarOp<T>>,
    },
    CustomTensor {
        inputs: Vec<Var>,
        op: Box<dyn TensorOp<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape. Nodes are evaluated eagerly as they are added, so the
/// tape order is already a topological order.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::conv_transpose2x2_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::ConvT2x2 { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_nearest_forward(self.value(x), factor)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample { x, factor }, rg))
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::dim(format!("combine expects scalars, got {:?}", t.shape())));
            }
            acc = acc + c * t.item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(acc), Op::Combine(terms.to_vec()), rg))
    }

    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let weighted: Vec<_> = terms.iter().map(|&v| (v, T::one())).collect();
        self.combine(&weighted)
    }

    /// Registers an externally computed scalar with its backward rule.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: T, op: Box<dyn ScalarOp<T>>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            Tensor::scalar(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Registers an externally computed tensor with its backward rule.
    pub fn custom_tensor(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn TensorOp<T>>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::CustomTensor {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                &Op::Conv2d { x, w, b, stride, pad } => {
                    let need = [self.rg(x), self.rg(w), b.is_some_and(|b| self.rg(b))];
                    let [gx, gw, gb] =
                        kernels::conv2d_backward(self.value(x), self.value(w), &g, stride, pad, need)?;
                    if let Some(t) = gx {
                        send(x, t);
                    }
                    if let Some(t) = gw {
                        send(w, t);
                    }
                    if let (Some(b), Some(t)) = (b, gb) {
                        send(b, t);
                    }
                }
                &Op::ConvT2x2 { x, w, b } => {
                    let need = [self.rg(x), self.rg(w), b.is_some_and(|b| self.rg(b))];
                    let [gx, gw, gb] = kernels::conv_transpose2x2_backward(self.value(x), self.value(w), &g, need)?;
                    if let Some(t) = gx {
                        send(x, t);
                    }
                    if let Some(t) = gw {
                        send(w, t);
                    }
                    if let (Some(b), Some(t)) = (b, gb) {
                        send(b, t);
                    }
                }
                &Op::Add(a, b) => {
                    if self.rg(a) && self.rg(b) {
                        send(a, g.clone());
                        send(b, g);
                    } else if self.rg(a) {
                        send(a, g);
                    } else {
                        send(b, g);
                    }
                }
                &Op::Relu(x) => {
                    let mut gx = g;
                    for (d, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    send(x, gx);
                }
                &Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (d, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *d = *d * y * (T::one() - y);
                    }
                    send(x, gx);
                }
                &Op::Upsample { x, factor } => {
                    send(x, kernels::upsample_nearest_backward(&g, factor)?);
                }
                Op::Combine(terms) => {
                    let up = g.item();
                    for &(v, c) in terms {
                        if self.rg(v) {
                            send(v, Tensor::scalar(up * c));
                        }
                    }
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let need: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                    let gs = op.backward(&values, g.item(), &need);
                    for ((&v, gi), n) in inputs.iter().zip(gs).zip(need) {
                        if let (true, Some(t)) = (n, gi) {
                            send(v, t);
                        }
                    }
                }
                Op::CustomTensor { inputs, op } => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let need: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                    let gs = op.backward(&values, &node.value, &g, &need);
                    for ((&v, gi), n) in inputs.iter().zip(gs).zip(need) {
                        if let (true, Some(t)) = (n, gi) {
                            send(v, t);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Graph::backward`]: accumulated gradients of leaf nodes.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::full([1, 1, 2, 2], 0.5));
        let c = g.constant(Tensor::full([1, 1, 2, 2], -1.0));
        let s = g.add(a, c).unwrap();
        let r = g.relu(s);
        let up = g.upsample_nearest(r, 2).unwrap();
        let _ = up;
        let w = g.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let y = g.conv2d(a, w, None, 1, 0).unwrap();
        let _ = y;
        let ten = g.constant(Tensor::scalar(10.0));
        let loss = g.combine(&[(ten, 2.0)]).unwrap();
        assert!(!g.requires_grad(loss));
    }

    #[test]
    fn sigmoid_chain_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([1, 1, 1, 1], vec![0.3]).unwrap());
        let s = g.sigmoid(x);
        let w = g.constant(Tensor::full([1, 1, 1, 1], 2.0));
        let y = g.conv2d(s, w, None, 1, 0).unwrap();
        struct Pick;
        impl ScalarOp<f64> for Pick {
            fn backward(&self, inputs: &[&Tensor<f64>], up: f64, _: &[bool]) -> Vec<Option<Tensor<f64>>> {
                vec![Some(inputs[0].map(|_| up))]
            }
        }
        let v = g.value(y).item();
        let loss = g.custom_scalar(&[y], v, Box::new(Pick));
        let grads = g.backward(loss).unwrap();
        let sig = 1.0 / (1.0 + (-0.3f64).exp());
        let expected = 2.0 * sig * (1.0 - sig);
        assert!((grads.get(x).unwrap().item() - expected).abs() < 1e-12);
    }
}
