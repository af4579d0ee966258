//! Reverse-mode differentiation on an append-only tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node holding
//! its value, its parents and a closure mapping the output gradient to parent
//! gradients. [`Var::backward`] replays the tape in reverse once. A tape is
//! confined to the thread that built it; rerunning a forward pass means
//! building a fresh tape.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_map, broadcast_shape, broadcast_to, reduce_to, Tensor};

/// Maps `(output_grad, parent_values, output_value)` to one gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    consumed: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records a custom operation. The backward closure is dropped when no
    /// parent requires a gradient.
    pub fn op<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        })
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// The elementwise kinds exposed through [`Var::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Relu,
    Square,
    Sqrt,
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient populated by the last [`backward`](Self::backward), if this
    /// node was reached.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grads.borrow().get(self.id).cloned().flatten()
    }

    /// Propagates d(self)/d(node) to every reachable node that requires a
    /// gradient. Contributions from multiple uses accumulate.
    pub fn backward(&self) -> Result<()> {
        let shape = self.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if self.tape.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.tape.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[self.id] = Some(Tensor::ones(&shape));
        for i in (0..=self.id).rev() {
            let node = &nodes[i];
            let (Some(backward), Some(g)) = (&node.backward, &grads[i]) else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &*nodes[p].value).collect();
            let parent_grads = backward(g, &inputs, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(gp.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        *self.tape.grads.borrow_mut() = grads;
        Ok(())
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        backward: impl Fn(&Tensor, &Tensor, &Tensor) -> (Tensor, Tensor) + 'static,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let ma = broadcast_map(a.shape(), &shape);
        let mb = broadcast_map(b.shape(), &shape);
        let data = ma
            .iter()
            .zip(&mb)
            .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
            .collect();
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.op(out, &[self, other], move |g, x, _| {
            let (ga, gb) = backward(g, x[0], x[1]);
            vec![reduce_to(&ga, x[0].shape()), reduce_to(&gb, x[1].shape())]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| (g.clone(), g.map(|v| -v)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b| {
            let ga = zip_broadcast(g, b, |g, b| g * b);
            let gb = zip_broadcast(g, a, |g, a| g * a);
            (ga, gb)
        })
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                reason: "division by zero".into(),
            });
        }
        self.binary(other, "div", |a, b| a / b, |g, a, b| {
            let ga = zip_broadcast(g, b, |g, b| g / b);
            let ab = zip_broadcast(&broadcast_to(a, g.shape()), b, |a, b| -a / (b * b));
            let gb = zip_broadcast(g, &ab, |g, d| g * d);
            (ga, gb)
        })
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.op(out, &[self], move |g, x, y| {
            let data = g
                .data()
                .iter()
                .zip(x[0].data())
                .zip(y.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Tensor::new(g.shape(), data).expect("shape preserved")]
        })
    }

    /// ReLU with derivative 0 at the kink. NaN passes through.
    pub fn relu(self) -> Var<'t> {
        self.unary(
            |x| if x > 0.0 || x.is_nan() { x } else { 0.0 },
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(self) -> Result<Var<'t>> {
        if let Some(&v) = self.value().data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                reason: format!("negative input {v}"),
            });
        }
        Ok(self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 }))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(move |x| x * factor, move |_, _| factor)
    }

    pub fn add_scalar(self, offset: f64) -> Var<'t> {
        self.unary(move |x| x + offset, |_, _| 1.0)
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn elementwise(self, kind: ElementwiseKind, other: Option<Var<'t>>) -> Result<Var<'t>> {
        let rhs = || {
            other.ok_or(Error::Domain {
                op: "elementwise",
                reason: format!("{kind:?} needs a second operand"),
            })
        };
        match kind {
            ElementwiseKind::Add => self.add(rhs()?),
            ElementwiseKind::Sub => self.sub(rhs()?),
            ElementwiseKind::Mul => self.mul(rhs()?),
            ElementwiseKind::Relu => Ok(self.relu()),
            ElementwiseKind::Square => Ok(self.square()),
            ElementwiseKind::Sqrt => self.sqrt(),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.op(out, &[self], |g, x, _| {
            vec![g.reshape(x[0].shape()).expect("same length")]
        }))
    }

    /// Replicates along broadcast axes.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value();
        match broadcast_shape(value.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "expand",
                    lhs: value.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let out = broadcast_to(&value, shape);
        Ok(self.tape.op(out, &[self], |g, x, _| vec![reduce_to(g, x[0].shape())]))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.op(out, &[self], |g, x, _| {
            vec![Tensor::full(x[0].shape(), g.data()[0])]
        })
    }

    /// Sums over `axes`, keeping them as extent-1 axes.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let value = self.value();
        let mut shape = value.shape().to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::InvalidShape {
                    shape,
                    reason: format!("axis {ax} out of range"),
                });
            }
            shape[ax] = 1;
        }
        let out = reduce_to(&value, &shape);
        Ok(self.tape.op(out, &[self], |g, x, _| vec![broadcast_to(g, x[0].shape())]))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        Ok(self.sum_axes(axes)?.scale(1.0 / count as f64))
    }

    /// Two-dimensional matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = matmul_raw(&a, false, &b, false);
        Ok(self.tape.op(out, &[self, other], |g, x, _| {
            vec![matmul_raw(g, false, x[1], true), matmul_raw(x[0], true, g, false)]
        }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.value();
        if value.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: value.shape().to_vec(),
                reason: "transpose needs rank 2".into(),
            });
        }
        Ok(self.tape.op(transpose_raw(&value), &[self], |g, _, _| vec![transpose_raw(g)]))
    }

    /// Row-wise softmax of a rank-2 tensor, stabilized by subtracting each
    /// row's maximum.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let value = self.value();
        if value.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: value.shape().to_vec(),
                reason: "softmax_rows needs rank 2".into(),
            });
        }
        let cols = value.shape()[1];
        let mut out = value.as_ref().clone();
        for row in out.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.tape.op(out, &[self], move |g, _, y| {
            let mut dx = g.clone();
            for (dx_row, y_row) in dx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                let dot: f64 = dx_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                for (d, &y) in dx_row.iter_mut().zip(y_row) {
                    *d = y * (*d - dot);
                }
            }
            vec![dx]
        }))
    }

    /// Slice `index` along axis 0, keeping the axis with extent 1.
    pub fn narrow_batch(self, index: usize) -> Result<Var<'t>> {
        let value = self.value();
        let shape = value.shape().to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("batch index {index} out of range"),
            });
        }
        let stride = value.len() / shape[0];
        let mut out_shape = shape.clone();
        out_shape[0] = 1;
        let out = Tensor::new(
            &out_shape,
            value.data()[index * stride..(index + 1) * stride].to_vec(),
        )?;
        Ok(self.tape.op(out, &[self], move |g, x, _| {
            let mut dx = Tensor::zeros(x[0].shape());
            dx.data_mut()[index * stride..(index + 1) * stride].copy_from_slice(g.data());
            vec![dx]
        }))
    }

    /// Concatenates along axis 0.
    pub fn concat_batch(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: Vec::new(),
            reason: "nothing to concatenate".into(),
        })?;
        let tape = first.tape;
        let inner = first.shape()[1..].to_vec();
        let mut data = Vec::new();
        let mut batch = 0;
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.value();
            if v.shape().is_empty() || v.shape()[1..] != inner[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_batch",
                    lhs: first.shape(),
                    rhs: v.shape().to_vec(),
                });
            }
            batch += v.shape()[0];
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&inner);
        let out = Tensor::new(&shape, data)?;
        Ok(tape.op(out, parts, move |g, x, _| {
            let mut offset = 0;
            x.iter()
                .zip(&sizes)
                .map(|(xi, &n)| {
                    let t = Tensor::new(xi.shape(), g.data()[offset..offset + n].to_vec())
                        .expect("slice matches part");
                    offset += n;
                    t
                })
                .collect()
        }))
    }

    /// Direct 2-D cross-correlation of an `(N, C_in, H, W)` map with an
    /// `(C_out, C_in, k, k)` kernel.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
        let out = geom.forward(&x, &w);
        Ok(self.tape.op(out, &[self, weight], move |g, inputs, _| {
            let (dx, dw) = geom.backward(g, inputs[0], inputs[1]);
            vec![dx, dw]
        }))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let b = broadcast_to(b, a.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("broadcast shape")
}

fn transpose_raw(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r])
}

/// `op(a) * op(b)` where `op` optionally transposes.
fn matmul_raw(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    debug_assert_eq!(k, k2);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = if ta { ad[p * ac + i] } else { ad[i * ac + p] };
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (j, o) in row.iter_mut().enumerate() {
                let bv = if tb { bd[j * bc + p] } else { bd[p * bc + j] };
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out).expect("matmul shape")
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let err = |reason: String| Error::Geometry { op: "conv2d", reason };
        if x.len() != 4 || w.len() != 4 {
            return Err(err(format!("expected rank-4 input and kernel, got {x:?} and {w:?}")));
        }
        if x[1] != w[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let k = w[2];
        if w[3] != k || !(1..=3).contains(&k) {
            return Err(err(format!("kernel must be square with k in 1..=3, got {w:?}")));
        }
        if pad > 1 || stride == 0 {
            return Err(err(format!("unsupported stride {stride} / pad {pad}")));
        }
        let extent = |size: usize| -> Result<usize> {
            let span = (size + 2 * pad)
                .checked_sub(k)
                .ok_or_else(|| err(format!("kernel {k} larger than padded extent {size}")))?;
            if span % stride != 0 {
                return Err(err(format!(
                    "extent {size} with k={k}, stride={stride}, pad={pad} is not integral"
                )));
            }
            Ok(span / stride + 1)
        };
        let h_out = extent(x[2])?;
        let w_out = extent(x[3])?;
        Ok(Self {
            n: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    /// Input coordinate for output position `o` and tap `t`, if in bounds.
    #[inline]
    fn src(&self, o: usize, t: usize, size: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&i| i < size)
    }

    fn forward(&self, x: &Tensor, w: &Tensor) -> Tensor {
        let s = *self;
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![0.0; s.n * s.c_out * s.h_out * s.w_out];
        for n in 0..s.n {
            for o in 0..s.c_out {
                let plane = &mut out[(n * s.c_out + o) * s.h_out * s.w_out..][..s.h_out * s.w_out];
                for c in 0..s.c_in {
                    let xin = &xd[(n * s.c_in + c) * s.h * s.w..][..s.h * s.w];
                    let kern = &wd[(o * s.c_in + c) * s.k * s.k..][..s.k * s.k];
                    for p in 0..s.k {
                        for q in 0..s.k {
                            let kv = kern[p * s.k + q];
                            for i in 0..s.h_out {
                                let Some(ih) = s.src(i, p, s.h) else { continue };
                                for j in 0..s.w_out {
                                    if let Some(iw) = s.src(j, q, s.w) {
                                        plane[i * s.w_out + j] += kv * xin[ih * s.w + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[s.n, s.c_out, s.h_out, s.w_out], out).expect("conv output shape")
    }

    fn backward(&self, g: &Tensor, x: &Tensor, w: &Tensor) -> (Tensor, Tensor) {
        let s = *self;
        let (gd, xd, wd) = (g.data(), x.data(), w.data());
        let mut dx = vec![0.0; xd.len()];
        let mut dw = vec![0.0; wd.len()];
        for n in 0..s.n {
            for o in 0..s.c_out {
                let gplane = &gd[(n * s.c_out + o) * s.h_out * s.w_out..][..s.h_out * s.w_out];
                for c in 0..s.c_in {
                    let base = (n * s.c_in + c) * s.h * s.w;
                    let kbase = (o * s.c_in + c) * s.k * s.k;
                    for p in 0..s.k {
                        for q in 0..s.k {
                            let kv = wd[kbase + p * s.k + q];
                            let mut acc = 0.0;
                            for i in 0..s.h_out {
                                let Some(ih) = s.src(i, p, s.h) else { continue };
                                for j in 0..s.w_out {
                                    if let Some(iw) = s.src(j, q, s.w) {
                                        let gv = gplane[i * s.w_out + j];
                                        let xi = base + ih * s.w + iw;
                                        acc += gv * xd[xi];
                                        dx[xi] += gv * kv;
                                    }
                                }
                            }
                            dw[kbase + p * s.k + q] += acc;
                        }
                    }
                }
            }
        }
        (
            Tensor::new(x.shape(), dx).expect("dx shape"),
            Tensor::new(w.shape(), dw).expect("dw shape"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[2.0, 3.0]));
        let b = tape.constant(t(&[2], &[4.0, 5.0]));
        assert_eq!(a.mul(b).unwrap().value().data(), &[8.0, 15.0]);
        let r = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).relu();
        assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcast_add_replicates() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[1, 3, 1, 1], |i| i as f64));
        let z = tape.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let out = a.add(z).unwrap().value();
        assert_eq!(out.shape(), &[2, 3, 4, 4]);
        assert_eq!(out.at(&[1, 2, 3, 0]), 2.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn sqrt_of_negative_is_domain_error() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(a.sqrt(), Err(Error::Domain { .. })));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(b.elementwise(ElementwiseKind::Add, None), Err(Error::Domain { .. })));
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(row.matmul(col).unwrap().value().data(), &[11.0]);
        assert!(row.matmul(row).is_err());
    }

    #[test]
    fn conv_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        assert_eq!(x.conv2d(k, 2, 0).unwrap().value().data(), &[5.0]);

        let x = tape.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64 * 0.1));
        let eye = tape.constant(Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        assert!(x.conv2d(eye, 1, 0).unwrap().value().bit_eq(&x.value()));

        let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let out = x.conv2d(k, 1, 1).unwrap().value();
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        // corner sees 4 in-bounds taps, interior sees 9
        assert_eq!(out.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(out.at(&[0, 0, 1, 1]), 9.0);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k2 = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        assert!(matches!(x.conv2d(k2, 2, 0), Err(Error::Geometry { .. })));
        let k3 = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let tiny = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        assert!(matches!(tiny.conv2d(k3, 1, 0), Err(Error::Geometry { .. })));
        let wrong_cin = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
        assert!(matches!(x.conv2d(wrong_cin, 1, 0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let s = tape.constant(t(&[1, 2], &[0.0, 0.0])).softmax_rows().unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape.constant(t(&[1, 1], &[-37.0])).softmax_rows().unwrap();
        assert_eq!(s.value().data(), &[1.0]);
        let s = tape.constant(t(&[1, 2], &[1000.0, 1000.0])).softmax_rows().unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 4]);

        let tape = Tape::new();
        let x = tape.param(t(&[2], &[-1.0, 2.0]));
        x.relu().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_run() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(x.square().backward(), Err(Error::NonScalarLoss(_))));
        let loss = x.sum();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::TapeConsumed)));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.5, -0.5]));
        // d/dx (x*x + x) = 2x + 1
        x.mul(x).unwrap().add(x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        x.mul(c).unwrap().sum().backward().unwrap();
        assert!(x.grad().is_some());
        assert!(c.grad().is_none());
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let parts: Vec<_> = (0..3).map(|n| x.narrow_batch(n).unwrap()).collect();
        let back = Var::concat_batch(&parts).unwrap();
        assert!(back.value().bit_eq(&x.value()));
        back.scale(2.0).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0; 12]);
    }
}
