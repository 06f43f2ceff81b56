//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Graph`] records every executed op in execution order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients additively, so a leaf used twice receives both
//! contributions. Build a fresh graph per forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Stencil};
use crate::tensor::{check_shape, Float, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, T),
    ScaleBy(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Clamp01(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Matmul(Var, Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    DeformConv { x: Var, offsets: Var, w: Var, b: Option<Var> },
    BilinearSample { feat: Var, coords: Var },
    L1 { pred: Var, target: Var },
    Charbonnier { pred: Var, target: Var, eps: T },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed ops. Ops take `&self`; values are immutable once recorded.
pub struct Graph<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    scratch: RefCell<Scratch<T>>,
}

/// Recycled temporary buffers, so large im2col matrices are not re-faulted on every op.
#[derive(Default)]
struct Scratch<T> {
    free: Vec<Vec<T>>,
}

impl<T: Float> Scratch<T> {
    /// A buffer of length `n` with unspecified contents; callers overwrite it fully.
    fn take(&mut self, n: usize) -> Vec<T> {
        let mut v = match self.free.iter().position(|b| b.len() >= n) {
            Some(i) => self.free.swap_remove(i),
            None => self.free.pop().unwrap_or_default(),
        };
        if v.len() < n {
            v.resize(n, T::zero());
        }
        v.truncate(n);
        v
    }

    fn give(&mut self, v: Vec<T>) {
        if self.free.len() < 4 {
            self.free.push(v);
        }
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()), scratch: RefCell::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.grads.borrow_mut().clear();
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// Records a constant leaf.
    pub fn input(&self, t: &Tensor<T>) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&self, t: &Tensor<T>) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(&n.shape, n.data.as_ref().clone()).expect("recorded shapes are valid")
    }

    /// The single element of a scalar node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].data[0]
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(&self.shape(v), g.clone()).expect("gradient matches node shape"))
    }

    /// Adds the gradient of `v` into `target.grad`, if `v` received one.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        let grads = self.grads.borrow();
        if let Some(Some(g)) = grads.get(v.0) {
            target.accumulate_grad(g)?;
        }
        Ok(())
    }

    fn push_unchecked(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, data: Rc::new(data), op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        Ok(self.push_unchecked(shape, data, op, requires_grad))
    }

    fn get(&self, v: Var) -> (Vec<usize>, Rc<Vec<T>>) {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        (n.shape.clone(), Rc::clone(&n.data))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let (_, x) = self.get(a);
        let (_, y) = self.get(b);
        let out = x.iter().zip(y.iter()).map(|(&p, &q)| p + q).collect();
        self.push("add", shape, out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let (_, x) = self.get(a);
        let (_, y) = self.get(b);
        let out = x.iter().zip(y.iter()).map(|(&p, &q)| p - q).collect();
        self.push("sub", shape, out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let (_, x) = self.get(a);
        let (_, y) = self.get(b);
        let out = x.iter().zip(y.iter()).map(|(&p, &q)| p * q).collect();
        self.push("mul", shape, out, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_scalar(&self, a: Var, c: T) -> Result<Var> {
        let (shape, x) = self.get(a);
        let out = x.iter().map(|&p| p * c).collect();
        self.push("mul_scalar", shape, out, Op::MulScalar(a, c), &[a])
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var> {
        let (shape, x) = self.get(a);
        let (ss, sv) = self.get(s);
        if sv.len() != 1 {
            return Err(Error::Shape(format!("scale_by: scale must be a scalar, got {ss:?}")));
        }
        let c = sv[0];
        let out = x.iter().map(|&p| p * c).collect();
        self.push("scale_by", shape, out, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let (shape, x) = self.get(a);
        let out = x.iter().map(|&p| p.max(T::zero())).collect();
        self.push("relu", shape, out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&self, a: Var, negative_slope: T) -> Result<Var> {
        let (shape, x) = self.get(a);
        let out = x.iter().map(|&p| if p > T::zero() { p } else { p * negative_slope }).collect();
        self.push("leaky_relu", shape, out, Op::LeakyRelu(a, negative_slope), &[a])
    }

    pub fn clamp01(&self, a: Var) -> Result<Var> {
        let (shape, x) = self.get(a);
        let out = x.iter().map(|&p| p.max(T::zero()).min(T::one())).collect();
        self.push("clamp01", shape, out, Op::Clamp01(a), &[a])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let (_, x) = self.get(a);
        let s = x.iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let (_, x) = self.get(a);
        let s: T = x.iter().copied().sum();
        let m = s / T::from_f64(x.len() as f64);
        self.push("mean", vec![1], vec![m], Op::Mean(a), &[a])
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        let (old, x) = self.get(a);
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::Shape(format!("reshape {old:?} into {shape:?}")));
        }
        let requires_grad = self.nodes.borrow()[a.0].requires_grad;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape: shape.to_vec(), data: x, op: Op::Reshape(a), requires_grad });
        Ok(Var(nodes.len() - 1))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (shape, x) = self.get(a);
        let [m, n] = shape[..] else {
            return Err(Error::Shape(format!("transpose needs a matrix, got {shape:?}")));
        };
        let mut out = vec![T::zero(); m * n];
        kernels::transpose(&x, m, n, &mut out);
        self.push("transpose", vec![n, m], out, Op::Transpose(a), &[a])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first);
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        let parts: Vec<_> = inputs.iter().map(|&v| self.get(v)).collect();
        for o in 0..outer {
            for (s, x) in &parts {
                let chunk = s[axis] * inner;
                out.extend_from_slice(&x[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, x) = self.get(a);
        let (sb, y) = self.get(b);
        let ([m, k], [k2, n]) = (&sa[..], &sb[..]) else {
            return Err(Error::Shape(format!("matmul needs matrices, got {sa:?} and {sb:?}")));
        };
        let (m, k, k2, n) = (*m, *k, *k2, *n);
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); m * n];
        crate::tensor::gemm_nn(m, k, n, &x, &y, &mut out);
        self.push("matmul", vec![m, n], out, Op::Matmul(a, b), &[a, b])
    }

    fn matrix_dims(&self, op: &str, a: Var) -> Result<(usize, usize)> {
        match self.shape(a)[..] {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::Shape(format!("{op} needs a matrix, got {s:?}"))),
        }
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("softmax_rows", a)?;
        let (_, x) = self.get(a);
        let mut out = vec![T::zero(); m * n];
        kernels::softmax_runs(&x, n, &mut out);
        self.push("softmax_rows", vec![m, n], out, Op::SoftmaxRows(a), &[a])
    }

    pub fn softmax_cols(&self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("softmax_cols", a)?;
        let (_, x) = self.get(a);
        let mut xt = vec![T::zero(); m * n];
        kernels::transpose(&x, m, n, &mut xt);
        let mut st = vec![T::zero(); m * n];
        kernels::softmax_runs(&xt, m, &mut st);
        let mut out = vec![T::zero(); m * n];
        kernels::transpose(&st, n, m, &mut out);
        self.push("softmax_cols", vec![m, n], out, Op::SoftmaxCols(a), &[a])
    }

    // ---- convolution -------------------------------------------------

    /// Cross-correlation of `x[c_in,h,w]` with `w[c_out,c_in,k,k]`, zero padding.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, xd) = self.get(x);
        let (sw, wd) = self.get(w);
        let ([c_in, h, wd_], [c_out, c_in2, k, k2]) = (&sx[..], &sw[..]) else {
            return Err(Error::Shape(format!("conv2d expects [C,H,W] and [O,C,k,k], got {sx:?} and {sw:?}")));
        };
        if c_in != c_in2 || k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!("conv2d: input {sx:?} incompatible with weight {sw:?}")));
        }
        let c_out = *c_out;
        let geom = ConvGeom::new(*c_in, *h, *wd_, *k, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {k} stride {stride} pad {pad} on {sx:?}")))?;
        let bias = match b {
            Some(bv) => {
                let (sb, bd) = self.get(bv);
                if sb != [c_out] {
                    return Err(Error::Shape(format!("conv2d bias {sb:?} for {c_out} outputs")));
                }
                Some(bd)
            }
            None => None,
        };
        let p = geom.cols();
        let mut out = vec![T::zero(); c_out * p];
        if geom.is_pointwise() {
            kernels::conv_gemm(&wd, bias.as_deref().map(|v| &v[..]), &xd, c_out, geom.rows(), p, &mut out);
        } else {
            let mut cols = self.scratch.borrow_mut().take(geom.rows() * p);
            kernels::im2col(&xd, &geom, &mut cols);
            kernels::conv_gemm(&wd, bias.as_deref().map(|v| &v[..]), &cols, c_out, geom.rows(), p, &mut out);
            self.scratch.borrow_mut().give(cols);
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("conv2d", vec![c_out, geom.h_out, geom.w_out], out, Op::Conv2d { x, w, b, geom }, &parents)
    }

    /// 3×3 deformable convolution (pad 1, stride 1) driven by `offsets[18,h,w]`.
    pub fn deform_conv2d(&self, x: Var, offsets: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, xd) = self.get(x);
        let (so, od) = self.get(offsets);
        let (sw, wd) = self.get(w);
        let ([c_in, h, wid], [c_out, c_in2, 3, 3]) = (&sx[..], &sw[..]) else {
            return Err(Error::Shape(format!("deform_conv2d expects [C,H,W] and [O,C,3,3], got {sx:?} and {sw:?}")));
        };
        if c_in != c_in2 {
            return Err(Error::Shape(format!("deform_conv2d: input {sx:?} incompatible with weight {sw:?}")));
        }
        if so != [18, *h, *wid] {
            return Err(Error::Shape(format!("deform_conv2d: offsets must be [18,{h},{wid}], got {so:?}")));
        }
        let (c_in, c_out, p) = (*c_in, *c_out, h * wid);
        let bias = match b {
            Some(bv) => {
                let (sb, bd) = self.get(bv);
                if sb != [c_out] {
                    return Err(Error::Shape(format!("deform_conv2d bias {sb:?} for {c_out} outputs")));
                }
                Some(bd)
            }
            None => None,
        };
        let stencils = kernels::deform_stencils(&od, *h, *wid);
        let wt = kernels::deform_weight_to_tap_major(&wd, c_out, c_in);
        let mut scratch = self.scratch.borrow_mut();
        let mut xt = scratch.take(c_in * p);
        let mut cols = scratch.take(c_in * 9 * p);
        kernels::deform_cols(&xd, c_in, p, &stencils, &mut xt, &mut cols);
        let mut out = vec![T::zero(); c_out * p];
        kernels::deform_gemm(&wt, bias.as_deref().map(|v| &v[..]), &cols, c_out, c_in * 9, p, &mut out);
        scratch.give(cols);
        scratch.give(xt);
        drop(scratch);
        let mut parents = vec![x, offsets, w];
        parents.extend(b);
        self.push("deform_conv2d", vec![c_out, *h, *wid], out, Op::DeformConv { x, offsets, w, b }, &parents)
    }

    /// Bilinear sample of every channel of `feat[C,h,w]` at `coords = [y, x]`.
    pub fn bilinear_sample(&self, feat: Var, coords: Var) -> Result<Var> {
        let (sf, fd) = self.get(feat);
        let (sc, cd) = self.get(coords);
        let [c, h, w] = sf[..] else {
            return Err(Error::Shape(format!("bilinear_sample expects [C,H,W], got {sf:?}")));
        };
        if cd.len() != 2 {
            return Err(Error::Shape(format!("bilinear_sample coords must have 2 elements, got {sc:?}")));
        }
        let st = Stencil::at(cd[0], cd[1], h, w);
        let out = (0..c).map(|ch| st.sample(&fd[ch * h * w..(ch + 1) * h * w])).collect();
        self.push("bilinear_sample", vec![c], out, Op::BilinearSample { feat, coords }, &[feat, coords])
    }

    // ---- losses ------------------------------------------------------

    /// Mean absolute error.
    pub fn l1(&self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1", pred, target)?;
        let (_, p) = self.get(pred);
        let (_, t) = self.get(target);
        let s: T = p.iter().zip(t.iter()).map(|(&a, &b)| (a - b).abs()).sum();
        let v = s / T::from_f64(p.len() as f64);
        self.push("l1", vec![1], vec![v], Op::L1 { pred, target }, &[pred, target])
    }

    /// Mean of `sqrt((pred - target)^2 + eps^2)`.
    pub fn charbonnier(&self, pred: Var, target: Var, eps: T) -> Result<Var> {
        self.same_shape("charbonnier", pred, target)?;
        let (_, p) = self.get(pred);
        let (_, t) = self.get(target);
        let e2 = eps * eps;
        let s: T = p.iter().zip(t.iter()).map(|(&a, &b)| ((a - b) * (a - b) + e2).sqrt()).sum();
        let v = s / T::from_f64(p.len() as f64);
        self.push("charbonnier", vec![1], vec![v], Op::Charbonnier { pred, target, eps }, &[pred, target])
    }

    // ---- backward ----------------------------------------------------

    /// Backpropagates from a scalar `loss`, replacing any previous gradients.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss(nodes[loss.0].shape.clone()));
        }
        let mut scratch = self.scratch.borrow_mut();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &gout, &mut grads, &mut scratch);
            grads[id] = Some(gout);
        }
        drop(nodes);
        drop(scratch);
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

/// Adds `g` into the gradient slot for `v`, when `v` needs one.
fn acc<T: Float>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].data.len()]);
    f(slot);
}

fn wants<T>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop_node<T: Float>(
    nodes: &[Node<T>],
    node: &Node<T>,
    gout: &[T],
    grads: &mut [Option<Vec<T>>],
    scratch: &mut Scratch<T>,
) {
    let data = |v: Var| -> &[T] { &nodes[v.0].data };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |g| g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s));
            acc(nodes, grads, *b, |g| g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |g| g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s));
            acc(nodes, grads, *b, |g| g.iter_mut().zip(gout).for_each(|(d, &s)| *d -= s));
        }
        Op::Mul(a, b) => {
            let (x, y) = (data(*a), data(*b));
            acc(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * y[i];
                }
            });
            acc(nodes, grads, *b, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * x[i];
                }
            });
        }
        Op::MulScalar(a, c) => {
            acc(nodes, grads, *a, |g| g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s * *c));
        }
        Op::ScaleBy(a, s) => {
            let c = data(*s)[0];
            acc(nodes, grads, *a, |g| g.iter_mut().zip(gout).for_each(|(d, &v)| *d += v * c));
            let x = data(*a);
            acc(nodes, grads, *s, |g| g[0] += x.iter().zip(gout).map(|(&p, &q)| p * q).sum());
        }
        Op::Relu(a) => {
            let x = data(*a);
            acc(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    if x[i] > T::zero() {
                        g[i] += gout[i];
                    }
                }
            });
        }
        Op::LeakyRelu(a, slope) => {
            let x = data(*a);
            acc(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += if x[i] > T::zero() { gout[i] } else { gout[i] * *slope };
                }
            });
        }
        Op::Clamp01(a) => {
            let x = data(*a);
            acc(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    if x[i] >= T::zero() && x[i] <= T::one() {
                        g[i] += gout[i];
                    }
                }
            });
        }
        Op::Sum(a) => acc(nodes, grads, *a, |g| g.iter_mut().for_each(|d| *d += gout[0])),
        Op::Mean(a) => {
            let s = gout[0] / T::from_f64(data(*a).len() as f64);
            acc(nodes, grads, *a, |g| g.iter_mut().for_each(|d| *d += s));
        }
        Op::Reshape(a) => acc(nodes, grads, *a, |g| g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s)),
        Op::Transpose(a) => {
            let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            acc(nodes, grads, *a, |g| {
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] += gout[j * m + i];
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let shape = &node.shape;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut start = 0;
            for &v in inputs {
                let chunk = nodes[v.0].shape[*axis] * inner;
                acc(nodes, grads, v, |g| {
                    for o in 0..outer {
                        let src = &gout[o * total + start..o * total + start + chunk];
                        g[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                });
                start += chunk;
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            let (x, y) = (data(*a), data(*b));
            // da[m,k] += gout[m,n] * b^T
            acc(nodes, grads, *a, |g| {
                T::gemm(m, n, k, T::one(), gout, n as isize, 1, y, 1, n as isize, T::one(), g, k as isize, 1)
            });
            // db[k,n] += a^T * gout
            acc(nodes, grads, *b, |g| {
                T::gemm(k, m, n, T::one(), x, 1, k as isize, gout, n as isize, 1, T::one(), g, n as isize, 1)
            });
        }
        Op::SoftmaxRows(a) => {
            let n = node.shape[1];
            let y = &node.data;
            acc(nodes, grads, *a, |g| {
                for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                    let dot: T = yr.iter().zip(dr).map(|(&p, &q)| p * q).sum();
                    for i in 0..n {
                        gr[i] += yr[i] * (dr[i] - dot);
                    }
                }
            });
        }
        Op::SoftmaxCols(a) => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let y = &node.data;
            acc(nodes, grads, *a, |g| {
                let mut dot = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        dot[j] += y[i * n + j] * gout[i * n + j];
                    }
                }
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] += y[i * n + j] * (gout[i * n + j] - dot[j]);
                    }
                }
            });
        }
        Op::Conv2d { x, w, b, geom } => {
            let c_out = node.shape[0];
            let p = geom.cols();
            let rows = geom.rows();
            let xd = data(*x);
            let wd = data(*w);
            if let Some(b) = b {
                acc(nodes, grads, *b, |g| {
                    for (o, chunk) in gout.chunks(p).enumerate() {
                        g[o] += chunk.iter().copied().sum();
                    }
                });
            }
            let need_x = wants(nodes, *x);
            let need_w = wants(nodes, *w);
            if need_w {
                if geom.is_pointwise() {
                    acc(nodes, grads, *w, |g| kernels::conv_gemm_backward(wd, xd, gout, c_out, rows, p, Some(g), None));
                } else {
                    let mut cols = scratch.take(rows * p);
                    kernels::im2col(xd, geom, &mut cols);
                    acc(nodes, grads, *w, |g| kernels::conv_gemm_backward(wd, &cols, gout, c_out, rows, p, Some(g), None));
                    scratch.give(cols);
                }
            }
            if need_x {
                if geom.is_pointwise() {
                    acc(nodes, grads, *x, |g| {
                        T::gemm(rows, c_out, p, T::one(), wd, 1, rows as isize, gout, p as isize, 1, T::one(), g, p as isize, 1)
                    });
                } else {
                    let mut dcols = scratch.take(rows * p);
                    kernels::conv_gemm_backward(wd, &[], gout, c_out, rows, p, None, Some(&mut dcols));
                    acc(nodes, grads, *x, |g| kernels::col2im(&dcols, geom, g));
                    scratch.give(dcols);
                }
            }
        }
        Op::DeformConv { x, offsets, w, b } => {
            let c_out = node.shape[0];
            let (c_in, h, wid) = (nodes[x.0].shape[0], nodes[x.0].shape[1], nodes[x.0].shape[2]);
            let p = h * wid;
            let rows = c_in * 9;
            let xd = data(*x);
            let wd = data(*w);
            if let Some(b) = b {
                acc(nodes, grads, *b, |g| {
                    for (o, chunk) in gout.chunks(p).enumerate() {
                        g[o] += chunk.iter().copied().sum();
                    }
                });
            }
            let stencils = kernels::deform_stencils(data(*offsets), h, wid);
            let (need_w, need_x, need_off) = (wants(nodes, *w), wants(nodes, *x), wants(nodes, *offsets));
            let wt = kernels::deform_weight_to_tap_major(wd, c_out, c_in);
            let mut xt = scratch.take(c_in * p);
            let mut cols = scratch.take(if need_w { rows * p } else { 0 });
            if need_w {
                kernels::deform_cols(xd, c_in, p, &stencils, &mut xt, &mut cols);
            } else {
                kernels::transpose(xd, c_in, p, &mut xt);
            }
            let mut dcols = scratch.take(if need_x || need_off { rows * p } else { 0 });
            let mut dwt = need_w.then(|| vec![T::zero(); wd.len()]);
            let mut dxt = need_x.then(|| vec![T::zero(); xd.len()]);
            let mut doff = need_off.then(|| vec![T::zero(); 18 * p]);
            kernels::deform_backward(
                &wt,
                &xt,
                need_w.then_some(&cols[..]),
                c_in,
                c_out,
                p,
                &stencils,
                gout,
                &mut dcols,
                dwt.as_deref_mut(),
                dxt.as_deref_mut(),
                doff.as_deref_mut(),
            );
            if let Some(dwt) = dwt {
                acc(nodes, grads, *w, |g| kernels::deform_weight_from_tap_major(&dwt, c_out, c_in, g));
            }
            if let Some(dxt) = dxt {
                // dxt is [p, C]; add its transpose into the [C, p] gradient.
                acc(nodes, grads, *x, |g| {
                    for (i, row) in dxt.chunks_exact(c_in).enumerate() {
                        for (c, &v) in row.iter().enumerate() {
                            g[c * p + i] += v;
                        }
                    }
                });
            }
            if let Some(doff) = doff {
                acc(nodes, grads, *offsets, |g| g.iter_mut().zip(&doff).for_each(|(d, &s)| *d += s));
            }
            scratch.give(dcols);
            scratch.give(cols);
            scratch.give(xt);
        }
        Op::BilinearSample { feat, coords } => {
            let (c, h, w) = (nodes[feat.0].shape[0], nodes[feat.0].shape[1], nodes[feat.0].shape[2]);
            let cd = data(*coords);
            let fd = data(*feat);
            let st = Stencil::at(cd[0], cd[1], h, w);
            let wts = st.weights();
            acc(nodes, grads, *feat, |g| {
                for ch in 0..c {
                    for n in 0..4 {
                        if st.valid[n] {
                            g[ch * h * w + st.idx[n]] += wts[n] * gout[ch];
                        }
                    }
                }
            });
            let (gy, gx) = st.weight_grads();
            acc(nodes, grads, *coords, |g| {
                for ch in 0..c {
                    for n in 0..4 {
                        if st.valid[n] {
                            let v = fd[ch * h * w + st.idx[n]];
                            g[0] += gy[n] * v * gout[ch];
                            g[1] += gx[n] * v * gout[ch];
                        }
                    }
                }
            });
        }
        Op::L1 { pred, target } => {
            let (p, t) = (data(*pred), data(*target));
            let s = gout[0] / T::from_f64(p.len() as f64);
            let sign = |d: T| if d > T::zero() { T::one() } else if d < T::zero() { -T::one() } else { T::zero() };
            acc(nodes, grads, *pred, |g| {
                for i in 0..g.len() {
                    g[i] += s * sign(p[i] - t[i]);
                }
            });
            acc(nodes, grads, *target, |g| {
                for i in 0..g.len() {
                    g[i] -= s * sign(p[i] - t[i]);
                }
            });
        }
        Op::Charbonnier { pred, target, eps } => {
            let (p, t) = (data(*pred), data(*target));
            let s = gout[0] / T::from_f64(p.len() as f64);
            let e2 = *eps * *eps;
            let dv = |i: usize| {
                let d = p[i] - t[i];
                let r = (d * d + e2).sqrt();
                if r > T::zero() {
                    s * d / r
                } else {
                    T::zero()
                }
            };
            acc(nodes, grads, *pred, |g| {
                for i in 0..g.len() {
                    g[i] += dv(i);
                }
            });
            acc(nodes, grads, *target, |g| {
                for i in 0..g.len() {
                    g[i] -= dv(i);
                }
            });
        }
    }
}
