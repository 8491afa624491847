//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Tape`], so node indices are a
//! topological order. Vector-Jacobian products are themselves written with
//! tape operations: running [`Tape::grad`] with `create_graph = true` records
//! the backward pass and it can be differentiated again (used by the gradient
//! penalty).

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::f64::consts::{FRAC_2_SQRT_PI, PI, SQRT_2};
use std::rc::Rc;

use ndarray::{Axis, IxDyn, Slice};
use rand::Rng;

use super::kernels::{self, Interp, NdArray};
use super::param::{ParamId, Parameter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale(T),
    AddScalar(T),
    BroadcastTo,
    SumTo,
    SumAxis,
    Sum,
    Reshape,
    Concat(usize),
    Slice { axis: usize, start: usize },
    SliceAdjoint { axis: usize, start: usize },
    Conv2d,
    Conv2dInputGrad,
    Conv2dWeightGrad,
    Resize(Interp),
    ResizeAdjoint(Interp),
    LeakyRelu(T),
    LeakyReluMask(T),
    Tanh,
    Exp,
    Erf,
    Gelu,
    Sqrt,
    Square,
    Softmax,
    Norm,
    SafeRecip,
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::BroadcastTo => "broadcast_to",
            Op::SumTo => "sum_to",
            Op::SumAxis => "sum_axis",
            Op::Sum => "sum",
            Op::Reshape => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::SliceAdjoint { .. } => "slice_adjoint",
            Op::Conv2d => "conv2d",
            Op::Conv2dInputGrad => "conv2d_input_grad",
            Op::Conv2dWeightGrad => "conv2d_weight_grad",
            Op::Resize(Interp::Nearest) => "upsample_nearest",
            Op::Resize(Interp::Bilinear) => "upsample_bilinear",
            Op::ResizeAdjoint(_) => "upsample_adjoint",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::LeakyReluMask(_) => "leaky_relu_mask",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Erf => "erf",
            Op::Gelu => "gelu",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Softmax => "softmax",
            Op::Norm => "norm",
            Op::SafeRecip => "safe_recip",
        }
    }
}

struct Node<T> {
    value: Rc<NdArray<T>>,
    op: Op<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// The computation record: an append-only list of executed operations.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
    params: RefCell<HashMap<ParamId, usize>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// A handle to one node of a tape.
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one backward pass, keyed by leaf.
pub struct Gradients<T> {
    by_node: HashMap<usize, Rc<NdArray<T>>>,
    by_param: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&NdArray<T>> {
        self.by_node.get(&v.id).map(|g| g.as_ref())
    }

    pub fn for_param(&self, p: &Parameter<T>) -> Option<&NdArray<T>> {
        self.by_param
            .get(&p.id())
            .and_then(|id| self.by_node.get(id))
            .map(|g| g.as_ref())
    }

    /// Adds this pass's gradient into `p.grad`. Returns whether `p` was reached.
    pub fn accumulate_into(&self, p: &mut Parameter<T>) -> bool {
        let node = self.by_param.get(&p.id()).and_then(|id| self.by_node.get(id));
        match node {
            Some(g) => {
                p.accumulate(g);
                true
            }
            None => false,
        }
    }
}

struct RecordingGuard<'a> {
    cell: &'a Cell<bool>,
    prev: bool,
}

impl Drop for RecordingGuard<'_> {
    fn drop(&mut self) {
        self.cell.set(self.prev);
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            params: RefCell::new(HashMap::new()),
        }
    }

    /// A tape on which nothing requires a gradient (inference).
    pub fn no_grad() -> Self {
        let t = Tape::new();
        t.recording.set(false);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Operation names in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    fn push(&self, op: Op<T>, inputs: Vec<usize>, value: NdArray<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.recording.get()
            && match op {
                Op::Leaf => false,
                _ => inputs.iter().any(|&i| nodes[i].requires_grad),
            };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            inputs,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: NdArray<T>, requires_grad: bool) -> Var<'_, T> {
        let v = self.push(Op::Leaf, Vec::new(), value);
        self.nodes.borrow_mut()[v.id].requires_grad = requires_grad && self.recording.get();
        v
    }

    pub fn constant(&self, value: NdArray<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// A 0-d constant.
    pub fn scalar(&self, x: T) -> Var<'_, T> {
        self.constant(NdArray::from_elem(IxDyn(&[]), x))
    }

    /// Binds a parameter. Repeated binding of the same parameter returns the same node.
    pub fn param(&self, p: &Parameter<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&p.id()) {
            return Var { tape: self, id };
        }
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.borrow_mut().insert(p.id(), v.id);
        v
    }

    /// Binds a parameter's current value as a constant (no gradient flows to it).
    pub fn param_const(&self, p: &Parameter<T>) -> Var<'_, T> {
        self.constant(p.value.clone())
    }

    fn node_value(&self, id: usize) -> Rc<NdArray<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn var(&self, id: usize) -> Var<'_, T> {
        Var { tape: self, id }
    }

    fn check_loss(&self, loss: Var<'_, T>) -> Result<()> {
        let v = loss.value();
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(())
    }

    /// Core reverse sweep. `relevant[i]` restricts propagation to nodes that
    /// lead to a requested target.
    fn sweep<'s>(
        &'s self,
        loss: Var<'s, T>,
        relevant: &[bool],
        create_graph: bool,
    ) -> Result<Vec<Option<Var<'s, T>>>> {
        let _guard = RecordingGuard {
            cell: &self.recording,
            prev: self.recording.replace(create_graph),
        };
        let n = loss.id + 1;
        let mut grads: Vec<Option<Var<'s, T>>> = vec![None; n];
        let seed = NdArray::from_elem(loss.value().raw_dim(), T::one());
        grads[loss.id] = Some(self.constant(seed));
        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].inputs.clone())
            };
            if matches!(op, Op::Leaf) {
                continue;
            }
            let need: Vec<bool> = inputs.iter().map(|&j| relevant[j]).collect();
            let contribs = self.vjp(i, &op, &inputs, &need, g)?;
            for (&j, c) in inputs.iter().zip(contribs) {
                if !relevant[j] {
                    continue;
                }
                if let Some(c) = c {
                    grads[j] = Some(match grads[j] {
                        Some(acc) => acc.add(c)?,
                        None => c,
                    });
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of a scalar `loss` with respect to `wrt`. With `create_graph`
    /// the returned gradients are differentiable tape nodes.
    pub fn grad<'s>(
        &'s self,
        loss: Var<'s, T>,
        wrt: &[Var<'s, T>],
        create_graph: bool,
    ) -> Result<Vec<Option<Var<'s, T>>>> {
        self.check_loss(loss)?;
        let n = loss.id + 1;
        let mut relevant = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id < n && nodes[w.id].requires_grad {
                    relevant[w.id] = true;
                }
            }
            for i in 0..n {
                if !relevant[i]
                    && nodes[i].requires_grad
                    && nodes[i].inputs.iter().any(|&j| relevant[j])
                {
                    relevant[i] = true;
                }
            }
        }
        let grads = self.sweep(loss, &relevant, create_graph)?;
        Ok(wrt
            .iter()
            .map(|w| grads.get(w.id).copied().flatten())
            .collect())
    }

    /// Gradients of a scalar `loss` with respect to every leaf that requires one.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_loss(loss)?;
        let n = loss.id + 1;
        let relevant: Vec<bool> = {
            let nodes = self.nodes.borrow();
            nodes[..n].iter().map(|nd| nd.requires_grad).collect()
        };
        let grads = self.sweep(loss, &relevant, false)?;
        let nodes = self.nodes.borrow();
        let mut by_node = HashMap::new();
        for (i, g) in grads.iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &nodes[i].op) {
                by_node.insert(i, nodes[g.id].value.clone());
            }
        }
        Ok(Gradients {
            by_node,
            by_param: self.params.borrow().clone(),
        })
    }

    fn vjp<'s>(
        &'s self,
        id: usize,
        op: &Op<T>,
        inputs: &[usize],
        need: &[bool],
        g: Var<'s, T>,
    ) -> Result<Vec<Option<Var<'s, T>>>> {
        let out = self.var(id);
        let when = |k: usize, f: &dyn Fn() -> Result<Var<'s, T>>| -> Result<Option<Var<'s, T>>> {
            if need[k] {
                f().map(Some)
            } else {
                Ok(None)
            }
        };
        let x = |k: usize| self.var(inputs[k]);
        let shape = |k: usize| self.node_value(inputs[k]).shape().to_vec();
        let one = |v: Var<'s, T>| Ok::<_, Error>(vec![Some(v)]);
        match op {
            Op::Leaf => Ok(vec![]),
            Op::MatMul => Ok(vec![
                when(0, &|| g.matmul(x(1).t()?))?,
                when(1, &|| x(0).t()?.matmul(g))?,
            ]),
            Op::Transpose => one(g.t()?),
            Op::Add => Ok(vec![
                Some(g.sum_to(&shape(0))?),
                Some(g.sum_to(&shape(1))?),
            ]),
            Op::Sub => Ok(vec![
                Some(g.sum_to(&shape(0))?),
                Some(g.scale(-T::one()).sum_to(&shape(1))?),
            ]),
            Op::Mul => Ok(vec![
                when(0, &|| g.mul(x(1))?.sum_to(&shape(0)))?,
                when(1, &|| g.mul(x(0))?.sum_to(&shape(1)))?,
            ]),
            Op::Div => Ok(vec![
                when(0, &|| g.div(x(1))?.sum_to(&shape(0)))?,
                when(1, &|| {
                    g.mul(out)?
                        .div(x(1))?
                        .scale(-T::one())
                        .sum_to(&shape(1))
                })?,
            ]),
            Op::Scale(c) => one(g.scale(*c)),
            Op::AddScalar(_) => one(g),
            Op::BroadcastTo => one(g.sum_to(&shape(0))?),
            Op::SumTo | Op::SumAxis | Op::Sum => one(g.broadcast_to(&shape(0))?),
            Op::Reshape => one(g.reshape(&shape(0))?),
            Op::Concat(axis) => {
                let mut start = 0;
                let mut v = Vec::with_capacity(inputs.len());
                for k in 0..inputs.len() {
                    let len = shape(k)[*axis];
                    v.push(Some(g.slice(*axis, start, len)?));
                    start += len;
                }
                Ok(v)
            }
            Op::Slice { axis, start } => {
                let full = shape(0)[*axis];
                one(g.slice_adjoint(*axis, *start, full)?)
            }
            Op::SliceAdjoint { axis, start } => {
                let len = shape(0)[*axis];
                one(g.slice(*axis, *start, len)?)
            }
            Op::Conv2d => Ok(vec![
                when(0, &|| g.conv2d_input_grad(x(1)))?,
                when(1, &|| x(0).conv2d_weight_grad(g, shape(1)[0]))?,
            ]),
            Op::Conv2dInputGrad => Ok(vec![
                when(0, &|| g.conv2d(x(1)))?,
                when(1, &|| g.conv2d_weight_grad(x(0), shape(1)[0]))?,
            ]),
            Op::Conv2dWeightGrad => Ok(vec![
                when(0, &|| x(1).conv2d_input_grad(g))?,
                when(1, &|| x(0).conv2d(g))?,
            ]),
            Op::Resize(mode) => {
                let s = shape(0);
                one(g.resize_adjoint(s[0], s[1], *mode)?)
            }
            Op::ResizeAdjoint(mode) => {
                let s = shape(0);
                one(g.resize(s[0], s[1], *mode)?)
            }
            Op::LeakyRelu(slope) => one(g.leaky_relu_mask(x(0), *slope)?),
            Op::LeakyReluMask(slope) => Ok(vec![Some(g.leaky_relu_mask(x(1), *slope)?), None]),
            Op::Tanh => one(g.mul(out.square().scale(-T::one()).add_scalar(T::one()))?),
            Op::Exp => one(g.mul(out)?),
            Op::Erf => {
                let d = x(0)
                    .square()
                    .scale(-T::one())
                    .exp()
                    .scale(T::lit(FRAC_2_SQRT_PI));
                one(g.mul(d)?)
            }
            Op::Gelu => {
                // d/dx x*Phi(x) = Phi(x) + x*phi(x)
                let xv = x(0);
                let cdf = xv
                    .scale(T::lit(1.0 / SQRT_2))
                    .erf()
                    .add_scalar(T::one())
                    .scale(T::lit(0.5));
                let pdf = xv
                    .square()
                    .scale(T::lit(-0.5))
                    .exp()
                    .scale(T::lit(1.0 / (2.0 * PI).sqrt()));
                one(g.mul(cdf.add(xv.mul(pdf)?)?)?)
            }
            Op::Sqrt => one(g.scale(T::lit(0.5)).div(out)?),
            Op::Square => one(g.mul(x(0))?.scale(T::lit(2.0))),
            Op::Softmax => {
                let last = out.shape().len() - 1;
                let dot = g.mul(out)?.sum_axis(last)?;
                one(g.sub(dot)?.mul(out)?)
            }
            Op::Norm => one(x(0).mul(g.mul(out.safe_recip())?)?),
            Op::SafeRecip => one(g.mul(out.square())?.scale(-T::one())),
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<NdArray<T>> {
        self.tape.node_value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element array.
    pub fn item(&self) -> T {
        *self.value().iter().next().expect("non-empty")
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.constant(self.value().as_ref().clone())
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let v = self.value().mapv(f);
        self.tape.push(op, vec![self.id], v)
    }

    fn binary(
        self,
        other: Var<'t, T>,
        op: Op<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        let v = kernels::binary(name, &self.value(), &other.value(), f)?;
        Ok(self.tape.push(op, vec![self.id, other.id], v))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.tape.push(Op::MatMul, vec![self.id, other.id], v))
    }

    /// Transpose of a 2-d array.
    pub fn t(self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", a.shape())));
        }
        let v = a.t().as_standard_layout().into_owned();
        Ok(self.tape.push(Op::Transpose, vec![self.id], v))
    }

    /// Elementwise sum with broadcasting (also serves as bias-add).
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(Op::Scale(c), |a| a * c)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(Op::AddScalar(c), |a| a + c)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t, T>> {
        if self.shape() == shape {
            return Ok(self);
        }
        let v = kernels::broadcast_to(&self.value(), shape)?;
        Ok(self.tape.push(Op::BroadcastTo, vec![self.id], v))
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'t, T>> {
        if self.shape() == shape {
            return Ok(self);
        }
        let v = kernels::sum_to(&self.value(), shape)?;
        Ok(self.tape.push(Op::SumTo, vec![self.id], v))
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if axis >= a.ndim() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} of {:?}", a.shape()),
            ));
        }
        let v = a.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        Ok(self.tape.push(Op::SumAxis, vec![self.id], v))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let n = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(T::one() / T::lit(n as f64)))
    }

    /// Sum of all elements, as a 0-d array.
    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape
            .push(Op::Sum, vec![self.id], NdArray::from_elem(IxDyn(&[]), s))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(self);
        }
        if shape.iter().product::<usize>() != a.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {:?}", a.shape(), shape),
            ));
        }
        let v = a
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("element count checked");
        Ok(self.tape.push(Op::Reshape, vec![self.id], v))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if axis >= a.ndim() || start + len > a.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, a.shape()),
            ));
        }
        let v = a
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        Ok(self.tape.push(Op::Slice { axis, start }, vec![self.id], v))
    }

    /// Embeds `self` at `start` along `axis` in a zero array of length `full`.
    pub fn slice_adjoint(self, axis: usize, start: usize, full: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if axis >= a.ndim() || start + a.shape()[axis] > full {
            return Err(Error::shape(
                "slice_adjoint",
                format!("{:?} at {start} in {full} on axis {axis}", a.shape()),
            ));
        }
        let mut shape = a.shape().to_vec();
        let len = shape[axis];
        shape[axis] = full;
        let mut v = NdArray::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(&*a);
        Ok(self
            .tape
            .push(Op::SliceAdjoint { axis, start }, vec![self.id], v))
    }

    pub fn conv2d(self, kernel: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = kernels::conv2d(&self.value(), &kernel.value())?;
        Ok(self.tape.push(Op::Conv2d, vec![self.id, kernel.id], v))
    }

    /// Input gradient of a convolution: `self` is the output gradient.
    pub fn conv2d_input_grad(self, kernel: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = kernels::conv2d_input_grad(&self.value(), &kernel.value())?;
        Ok(self
            .tape
            .push(Op::Conv2dInputGrad, vec![self.id, kernel.id], v))
    }

    /// Kernel gradient of a convolution: `self` is the input, `gy` the output gradient.
    pub fn conv2d_weight_grad(self, gy: Var<'t, T>, k: usize) -> Result<Var<'t, T>> {
        let v = kernels::conv2d_weight_grad(&self.value(), &gy.value(), k)?;
        Ok(self
            .tape
            .push(Op::Conv2dWeightGrad, vec![self.id, gy.id], v))
    }

    /// Spatial resize of an `[H, W, C]` array.
    pub fn resize(self, h: usize, w: usize, mode: Interp) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() == 3 && (s[0], s[1]) == (h, w) {
            return Ok(self);
        }
        let v = kernels::resize_hw(&self.value(), h, w, mode)?;
        Ok(self.tape.push(Op::Resize(mode), vec![self.id], v))
    }

    pub fn upsample_bilinear(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        self.resize(h, w, Interp::Bilinear)
    }

    pub fn upsample_nearest(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        self.resize(h, w, Interp::Nearest)
    }

    fn resize_adjoint(self, in_h: usize, in_w: usize, mode: Interp) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() == 3 && (s[0], s[1]) == (in_h, in_w) {
            return Ok(self);
        }
        let v = kernels::resize_hw_adjoint(&self.value(), in_h, in_w, mode)?;
        Ok(self.tape.push(Op::ResizeAdjoint(mode), vec![self.id], v))
    }

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        self.unary(Op::LeakyRelu(slope), |a| if a > T::zero() { a } else { a * slope })
    }

    /// `self` scaled by the leaky-relu derivative evaluated at `at`.
    fn leaky_relu_mask(self, at: Var<'t, T>, slope: T) -> Result<Var<'t, T>> {
        let v = kernels::binary("leaky_relu_mask", &self.value(), &at.value(), |g, x| {
            if x > T::zero() {
                g
            } else {
                g * slope
            }
        })?;
        Ok(self
            .tape
            .push(Op::LeakyReluMask(slope), vec![self.id, at.id], v))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(Op::Tanh, |a| a.tanh())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Op::Exp, |a| a.exp())
    }

    pub fn erf(self) -> Var<'t, T> {
        self.unary(Op::Erf, |a| a.erf())
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'t, T> {
        let (half, r2) = (T::lit(0.5), T::lit(1.0 / SQRT_2));
        self.unary(Op::Gelu, |a| half * a * (T::one() + (a * r2).erf()))
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(Op::Sqrt, |a| a.sqrt())
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(Op::Square, |a| a * a)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.ndim() == 0 {
            return Err(Error::shape("softmax", "needs at least one axis"));
        }
        let v = kernels::softmax_last(&a);
        Ok(self.tape.push(Op::Softmax, vec![self.id], v))
    }

    /// Euclidean norm of all elements, as a 0-d array. Its gradient at zero is zero.
    pub fn norm(self) -> Var<'t, T> {
        let n = self.value().iter().fold(T::zero(), |s, &a| s + a * a).sqrt();
        self.tape
            .push(Op::Norm, vec![self.id], NdArray::from_elem(IxDyn(&[]), n))
    }

    /// `1/x`, with `1/0` defined as 0.
    pub fn safe_recip(self) -> Var<'t, T> {
        self.unary(Op::SafeRecip, |a| {
            if a == T::zero() {
                T::zero()
            } else {
                T::one() / a
            }
        })
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(self, rate: f64, rng: &mut R) -> Result<Var<'t, T>> {
        if rate <= 0.0 {
            return Ok(self);
        }
        if rate >= 1.0 {
            return Err(Error::Domain(format!("dropout rate {rate} must be < 1")));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask = NdArray::from_shape_fn(self.value().raw_dim(), |_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        });
        self.mul(self.tape.constant(mask))
    }

    /// Per-row mean and biased variance over the last axis, each keeping that axis.
    pub fn layer_stats(self) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let last = self.shape().len().checked_sub(1).ok_or_else(|| {
            Error::shape("layer_stats", "needs at least one axis")
        })?;
        let mean = self.mean_axis(last)?;
        let var = self.sub(mean)?.square().mean_axis(last)?;
        Ok((mean, var))
    }
}

/// Concatenation along `axis`.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let v = ndarray::concatenate(Axis(axis), &views).map_err(|_| {
        Error::shape(
            "concat",
            format!(
                "axis {axis} of {:?}",
                values.iter().map(|v| v.shape().to_vec()).collect::<Vec<_>>()
            ),
        )
    })?;
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(first.tape.push(Op::Concat(axis), ids, kernels::standard(v)))
}
