//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every op appends a node to the [`Tape`] holding its output value, the ids
//! of its parents and a [`BackwardRule`]. Nodes are only ever appended, so
//! the tape is always in topological order and [`Tape::backward`] is a single
//! reverse sweep. Gradient contributions are summed in tape order, which
//! makes the result bitwise reproducible.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::Hasher;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Local derivative of one recorded op.
pub trait BackwardRule<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input. `needs[i]` is false when input `i`
    /// does not require a gradient; the rule may return `None` for it.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;

    /// Feeds any discrete decision the op made (activation branch, argmax)
    /// into `state`. Used to detect non-differentiable points in gradient
    /// checks.
    fn branch_state(&self, _inputs: &[&Tensor<T>], _state: &mut dyn Hasher) {}
}

struct Node<T: Element> {
    value: Tensor<T>,
    parents: Vec<usize>,
    rule: Option<Box<dyn BackwardRule<T>>>,
    requires_grad: bool,
}

pub struct Tape<T: Element> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the leaves that required them.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    tape: u64,
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(&var.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(Node {
            value: tensor,
            parents: Vec::new(),
            rule: None,
            requires_grad,
        })
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::ForeignTensor);
        }
        Ok(var.index)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.check(var)?].value)
    }

    pub fn shape(&self, var: Var) -> Result<Shape> {
        Ok(self.value(var)?.shape())
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool> {
        Ok(self.nodes[self.check(var)?].requires_grad)
    }

    pub fn parents(&self, var: Var) -> Result<Vec<Var>> {
        let i = self.check(var)?;
        Ok(self.nodes[i]
            .parents
            .iter()
            .map(|&index| Var {
                tape: self.id,
                index,
            })
            .collect())
    }

    /// Name of the rule that produced `var`, `None` for leaves.
    pub fn op_name(&self, var: Var) -> Result<Option<&'static str>> {
        let i = self.check(var)?;
        Ok(self.nodes[i].rule.as_ref().map(|r| r.name()))
    }

    /// Appends a computed node. The output requires a gradient iff any parent does.
    pub fn record(
        &mut self,
        parents: &[Var],
        value: Tensor<T>,
        rule: Box<dyn BackwardRule<T>>,
    ) -> Result<Var> {
        let mut ids = Vec::with_capacity(parents.len());
        let mut requires_grad = false;
        for &p in parents {
            let i = self.check(p)?;
            requires_grad |= self.nodes[i].requires_grad;
            ids.push(i);
        }
        Ok(self.push(Node {
            value: value.with_requires_grad(requires_grad),
            parents: ids,
            rule: Some(rule),
            requires_grad,
        }))
    }

    /// Hash of every discrete branch taken while building the tape.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Some(rule) = &node.rule {
                let inputs: Vec<&Tensor<T>> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                rule.branch_state(&inputs, &mut h);
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// that requires one and is an ancestor of `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        let shape = self.nodes[root].value.shape();
        if shape != Shape::SCALAR {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut out = BTreeMap::new();
        if !self.nodes[root].requires_grad {
            return Ok(Gradients {
                tape: self.id,
                grads: out,
            });
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        pending[root] = Some(Tensor::ones(Shape::SCALAR));

        for i in (0..=root).rev() {
            let Some(grad) = pending[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let Some(rule) = &node.rule else {
                out.insert(i, grad);
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = rule.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", rule.name());
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                match &mut pending[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(g.with_requires_grad(false)),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    // ---- elementwise and reduction ops -------------------------------------

    pub fn elementwise_binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: kind.name(),
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let f: fn(T, T) -> T = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.record(&[a, b], out, Box::new(Binary(kind)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, BinaryKind::Div)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(x)?.map(|v| scale * v + shift);
        self.record(&[x], out, Box::new(Affine(scale)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x)?.map(|v| T::one() / (T::one() + (-v).exp()));
        self.record(&[x], out, Box::new(Sigmoid))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x)?.map(|v| v.tanh());
        self.record(&[x], out, Box::new(Tanh))
    }

    /// Sum of all elements as a `(1,1,1,1)` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self
            .value(x)?
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.record(&[x], Tensor::scalar(total), Box::new(Reduce { scale: None }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?;
        let n = T::of(v.numel() as f64);
        let total = v.data().iter().fold(T::zero(), |acc, &e| acc + e);
        self.record(
            &[x],
            Tensor::scalar(total / n),
            Box::new(Reduce { scale: Some(n) }),
        )
    }

    /// Concatenates along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "empty part list"))?;
        let base = self.shape(first)?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p)?;
            if (s.n, s.h, s.w) != (base.n, base.h, base.w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: base,
                    rhs: s,
                });
            }
            channels.push(s.c);
        }
        let total: usize = channels.iter().sum();
        let shape = base.with_channels(total);
        let plane = shape.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for &p in parts {
                let v = self.value(p)?;
                let per = v.shape().c * plane;
                data.extend_from_slice(&v.data()[n * per..(n + 1) * per]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.record(parts, out, Box::new(Concat { channels }))
    }
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

struct Binary(BinaryKind);

impl<T: Element> BackwardRule<T> for Binary {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let want = |i: usize, f: &dyn Fn() -> Tensor<T>| if needs[i] { Some(f()) } else { None };
        match self.0 {
            BinaryKind::Add => vec![
                want(0, &|| grad.clone()),
                want(1, &|| grad.clone()),
            ],
            BinaryKind::Sub => vec![want(0, &|| grad.clone()), want(1, &|| grad.map(|g| -g))],
            BinaryKind::Mul => vec![
                want(0, &|| zip_map(grad, b, |g, y| g * y)),
                want(1, &|| zip_map(grad, a, |g, x| g * x)),
            ],
            BinaryKind::Div => vec![
                want(0, &|| zip_map(grad, b, |g, y| g / y)),
                want(1, &|| {
                    let ga = zip_map(grad, a, |g, x| g * x);
                    zip_map(&ga, b, |gx, y| -gx / (y * y))
                }),
            ],
        }
    }
}

struct Affine<T>(T);

impl<T: Element> BackwardRule<T> for Affine<T> {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.map(|g| g * self.0))]
    }
}

struct Sigmoid;

impl<T: Element> BackwardRule<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(zip_map(grad, output, |g, s| g * s * (T::one() - s)))]
    }
}

struct Tanh;

impl<T: Element> BackwardRule<T> for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![Some(zip_map(grad, output, |g, t| g * (T::one() - t * t)))]
    }
}

/// Sum (scale `None`) or mean (scale = element count) to a scalar.
struct Reduce<T> {
    scale: Option<T>,
}

impl<T: Element> BackwardRule<T> for Reduce<T> {
    fn name(&self) -> &'static str {
        if self.scale.is_some() {
            "mean"
        } else {
            "sum"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = grad.data()[0];
        let g = match self.scale {
            Some(n) => g / n,
            None => g,
        };
        vec![Some(Tensor::full(inputs[0].shape(), g))]
    }
}

struct Concat {
    channels: Vec<usize>,
}

impl<T: Element> BackwardRule<T> for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let gs = grad.shape();
        let plane = gs.plane();
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (i, &c) in self.channels.iter().enumerate() {
            if needs[i] {
                let mut data = Vec::with_capacity(gs.n * c * plane);
                for n in 0..gs.n {
                    let start = (n * gs.c + offset) * plane;
                    data.extend_from_slice(&grad.data()[start..start + c * plane]);
                }
                out.push(Some(Tensor::new(inputs[i].shape(), data).expect("slice shape")));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}
