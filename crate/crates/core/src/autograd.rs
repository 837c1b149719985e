//! A small tape-based reverse-mode differentiation engine.
//!
//! Every operation appends a node to the [`Tape`] holding its output value,
//! its parents, and a closure mapping the output gradient to parent
//! gradients. Nodes are appended in evaluation order, so a reverse sweep over
//! the tape is a valid topological order for back-propagation.
//!
//! Nodes whose inputs do not require gradients store no closure, which keeps
//! frozen sub-graphs (the backbone weights) out of the backward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{lit, Float, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Float> Copy for Var<'_, T> {}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input tensor.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_rc(Rc::new(value), requires_grad)
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Records the result of a custom operation.
    ///
    /// `backward` receives the gradient of the output and a mask telling
    /// which parents need a gradient; it returns one entry per parent.
    pub fn op<'t, F>(&'t self, value: Tensor<T>, parents: &[Var<'t, T>], backward: F) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = parent_ids.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parent_ids,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad_out, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Grads<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    /// Gradient for a leaf that requires grad; `None` when it is unreachable from the loss.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Grads::get`] but returns zeros for unreachable leaves.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        self.value().dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.tape.op(value, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.tape.op(value, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        }))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let value = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.op(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |gi, bi| gi * bi).unwrap()),
                needs[1].then(|| g.zip_map(&a, |gi, ai| gi * ai).unwrap()),
            ]
        }))
    }

    pub fn scale(self, factor: f64) -> Var<'t, T> {
        let s: T = lit(factor);
        let value = self.value().map(|x| x * s);
        self.tape
            .op(value, &[self], move |g, _| vec![Some(g.map(|x| x * s))])
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let value = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.op(value, &[self], move |g, _| {
            vec![Some(
                g.zip_map(&x, |gi, xi| if xi > T::zero() { gi } else { T::zero() })
                    .unwrap(),
            )]
        })
    }

    pub fn tanh(self) -> Var<'t, T> {
        let y = Rc::new(self.value().map(|v| v.tanh()));
        let y2 = y.clone();
        self.tape.op((*y).clone(), &[self], move |g, _| {
            vec![Some(
                g.zip_map(&y2, |gi, yi| gi * (T::one() - yi * yi)).unwrap(),
            )]
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let y = Rc::new(self.value().map(sigmoid));
        let y2 = y.clone();
        self.tape.op((*y).clone(), &[self], move |g, _| {
            vec![Some(
                g.zip_map(&y2, |gi, yi| gi * yi * (T::one() - yi)).unwrap(),
            )]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let x = self.value();
        let value = x.map(gelu);
        self.tape.op(value, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gi, xi| gi * gelu_grad(xi)).unwrap())]
        })
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.op(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums the squares of all elements.
    pub fn square_sum(self) -> Var<'t, T> {
        let x = self.value();
        let value = Tensor::scalar(x.data().iter().map(|&v| v * v).sum());
        self.tape.op(value, &[self], move |g, _| {
            let two_g = g.item() + g.item();
            vec![Some(x.map(|v| two_g * v))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let old = self.shape();
        let value = self.value().reshape(shape)?;
        Ok(self
            .tape
            .op(value, &[self], move |g, _| vec![Some(g.reshape(&old).unwrap())]))
    }
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Float>(x: T) -> T {
    let inner = lit::<T>(SQRT_2_OVER_PI) * (x + lit::<T>(GELU_CUBIC) * x * x * x);
    lit::<T>(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Float>(x: T) -> T {
    let k: T = lit(SQRT_2_OVER_PI);
    let c: T = lit(GELU_CUBIC);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let half: T = lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + lit::<T>(3.0) * c * x * x)
}

/// Concatenates rank-4 variables along the channel axis, in argument order.
pub fn concat_channels<'t, T: Float>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let (b, _, h, w) = first.dims4()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pb, pc, ph, pw) = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::Shape(format!(
                "channel concat needs matching batch/spatial dims, got {:?} and {:?}",
                first.shape(),
                p.shape()
            )));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let hw = h * w;
    let mut out = Tensor::zeros(&[b, total, h, w]);
    {
        let od = out.data_mut();
        let mut c0 = 0;
        for (p, &pc) in parts.iter().zip(&widths) {
            let v = p.value();
            let vd = v.data();
            for bi in 0..b {
                let src = &vd[bi * pc * hw..(bi + 1) * pc * hw];
                let dst = (bi * total + c0) * hw;
                od[dst..dst + pc * hw].copy_from_slice(src);
            }
            c0 += pc;
        }
    }
    let tape = first.tape;
    Ok(tape.op(out, parts, move |g, needs| {
        let gd = g.data();
        let mut c0 = 0;
        let mut res = Vec::with_capacity(widths.len());
        for (&pc, &need) in widths.iter().zip(needs) {
            if need {
                let mut d = Vec::with_capacity(b * pc * hw);
                for bi in 0..b {
                    let s = (bi * total + c0) * hw;
                    d.extend_from_slice(&gd[s..s + pc * hw]);
                }
                res.push(Some(Tensor::from_vec(&[b, pc, h, w], d).unwrap()));
            } else {
                res.push(None);
            }
            c0 += pc;
        }
        res
    }))
}
