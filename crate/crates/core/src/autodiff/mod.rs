//! Minimal reverse-mode differentiation over NCHW tensors.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! inputs are earlier nodes, so reverse index order is a valid reverse
//! topological order and [`Graph::backward`] visits each node once.
//! Parameters live in a [`ParamStore`]; a graph leaf shares the parameter
//! buffer at the time it was created, so optimizer steps never invalidate a
//! graph that is still alive.

mod conv;
pub mod gradcheck;
pub mod optim;
mod params;

use std::collections::HashMap;
use std::sync::Arc;

pub use conv::{ConvSpec, PadMode};
pub use optim::{Method, Optimizer};
pub use params::{ParamEntry, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::raster::{box_mean_plane, reflect_index, Raster};
use crate::real::Real;
use crate::resample::SeparableOp;

pub type Shape = [usize; 4];

/// Dense NCHW value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("{shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: [1, 1, 1, 1], data: vec![v] }
    }

    /// Stacks equally sized rasters along the batch axis.
    pub fn from_rasters(rasters: &[&Raster]) -> Result<Self> {
        let first = rasters.first().ok_or_else(|| Error::invalid("empty raster batch"))?;
        let (h, w, c) = first.dims();
        let mut data = Vec::with_capacity(rasters.len() * h * w * c);
        for r in rasters {
            if r.dims() != (h, w, c) {
                return Err(Error::shape("rasters in a batch must share dimensions"));
            }
            data.extend(r.data().iter().map(|&v| T::of(v)));
        }
        Ok(Tensor { shape: [rasters.len(), c, h, w], data })
    }

    pub fn from_raster(r: &Raster) -> Self {
        Self::from_rasters(&[r]).expect("single raster batch")
    }

    pub fn to_raster(&self, item: usize) -> Result<Raster> {
        let [n, c, h, w] = self.shape;
        if item >= n {
            return Err(Error::invalid(format!("batch item {item} out of {n}")));
        }
        let per = c * h * w;
        let data = self.data[item * per..(item + 1) * per].iter().map(|v| v.f64()).collect();
        Raster::new(h, w, c, data)
    }

    pub fn to_rasters(&self) -> Result<Vec<Raster>> {
        (0..self.shape[0]).map(|i| self.to_raster(i)).collect()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }
}

/// How a parameter enters a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    /// Gradient is reported for the parameter.
    Train,
    /// Treated as a constant; gradients still flow through to other inputs.
    Frozen,
}

/// Handle to a graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Deconv { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    LRelu(Var, T),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Concat(Var, Var),
    Mean(Var),
    BoxMean(Var, usize),
    Resample(Var, Arc<SeparableOp>),
}

#[derive(Debug)]
struct Node<T: Real> {
    shape: Shape,
    value: Arc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Vec<T>)>,
    leaves: HashMap<Var, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn params(&self) -> &[(ParamId, Vec<T>)] {
        &self.params
    }

    /// Gradient of a differentiable input leaf.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v).map(|g| g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<Vec<T>> {
        let mut acc: Option<Vec<T>> = None;
        for (pid, g) in &self.params {
            if *pid == id {
                match &mut acc {
                    Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += *y),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
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

    fn push(&mut self, shape: Shape, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    /// Input leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let e = store.entry(id);
        self.nodes.push(Node { shape: e.shape(), value: e.shared_value(), op: Op::Param(id), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Parameter used as a constant: data gradients still flow through the
    /// operations that consume it but no gradient is produced for it.
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let e = store.entry(id);
        self.nodes.push(Node { shape: e.shape(), value: e.shared_value(), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn bind(&mut self, store: &ParamStore<T>, id: ParamId, mode: Bind) -> Var {
        match mode {
            Bind::Train => self.param(store, id),
            Bind::Frozen => self.frozen(store, id),
        }
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape, n.value.clone());
        self.nodes.push(Node { shape, value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor { shape: self.shape(v), data: self.value(v).to_vec() }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let shape = self.same_shape(a, b, what)?;
        let v: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, v, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).iter().any(|v| *v == T::zero()) {
            return Err(Error::Singular("division by zero".into()));
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same node")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).iter().map(|&x| x * s).collect();
        let (shape, rg) = (self.shape(a), self.rg(a));
        self.push(shape, v, Op::Scale(a, s), rg)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).iter().map(|&x| x + c).collect();
        let (shape, rg) = (self.shape(a), self.rg(a));
        self.push(shape, v, Op::Offset(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let (shape, rg) = (self.shape(a), self.rg(a));
        self.push(shape, v, Op::Relu(a), rg)
    }

    pub fn lrelu(&mut self, a: Var, alpha: T) -> Var {
        let v = self.value(a).iter().map(|&x| if x > T::zero() { x } else { alpha * x }).collect();
        let (shape, rg) = (self.shape(a), self.rg(a));
        self.push(shape, v, Op::LRelu(a, alpha), rg)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let plane = ha * wa;
        let mut v = Vec::with_capacity(na * (ca + cb) * plane);
        for i in 0..na {
            v.extend_from_slice(&self.value(a)[i * ca * plane..(i + 1) * ca * plane]);
            v.extend_from_slice(&self.value(b)[i * cb * plane..(i + 1) * cb * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push([na, ca + cb, ha, wa], v, Op::Concat(a, b), rg))
    }

    /// Mean over every element, as a 1x1x1x1 scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let s: f64 = vals.iter().map(|v| v.f64()).sum();
        let m = T::of(s / vals.len() as f64);
        let rg = self.rg(a);
        self.push([1, 1, 1, 1], vec![m], Op::Mean(a), rg)
    }

    /// Per-plane `(2r+1)^2` window mean with reflect-101 borders.
    pub fn box_mean(&mut self, a: Var, radius: usize) -> Var {
        let [n, c, h, w] = self.shape(a);
        let plane = h * w;
        let mut v = Vec::with_capacity(n * c * plane);
        let src = self.value(a);
        let mut buf = vec![0.0f64; plane];
        for p in 0..n * c {
            for (b, s) in buf.iter_mut().zip(&src[p * plane..(p + 1) * plane]) {
                *b = s.f64();
            }
            v.extend(box_mean_plane(&buf, h, w, radius).into_iter().map(T::of));
        }
        let rg = self.rg(a);
        self.push([n, c, h, w], v, Op::BoxMean(a, radius), rg)
    }

    /// Applies a fixed separable resampler to every plane.
    pub fn resample(&mut self, a: Var, op: Arc<SeparableOp>) -> Result<Var> {
        let [n, c, h, w] = self.shape(a);
        if op.in_dims() != (h, w) {
            return Err(Error::size(format!("resampler expects {:?}, got {h}x{w}", op.in_dims())));
        }
        let (oh, ow) = op.out_dims();
        let mut v = vec![T::zero(); n * c * oh * ow];
        let src = self.value(a);
        for p in 0..n * c {
            op.apply_plane(&src[p * h * w..(p + 1) * h * w], &mut v[p * oh * ow..(p + 1) * oh * ow]);
        }
        let rg = self.rg(a);
        Ok(self.push([n, c, oh, ow], v, Op::Resample(a, op), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (shape, v) = conv::conv_forward(self, x, w, b, spec)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, v, Op::Conv { x, w, b, spec }, rg))
    }

    /// Transposed 3x3 convolution doubling both spatial dimensions.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (shape, v) = conv::deconv_forward(self, x, w, b)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, v, Op::Deconv { x, w, b }, rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss).iter().product::<usize>() != 1 {
            return Err(Error::shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients { params: Vec::new(), leaves: HashMap::new() };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || g.iter().map(|&x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                    self.acc(&mut grads, *b, || g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || g.iter().zip(vb).map(|(&x, &y)| x / y).collect());
                    self.acc(&mut grads, *b, || {
                        g.iter().zip(va).zip(vb).map(|((&x, &p), &q)| -x * p / (q * q)).collect()
                    });
                }
                Op::Scale(a, s) => self.acc(&mut grads, *a, || g.iter().map(|&x| x * *s).collect()),
                Op::Offset(a) => self.acc(&mut grads, *a, || g.clone()),
                Op::Relu(a) => {
                    let va = self.value(*a);
                    self.acc(&mut grads, *a, || {
                        g.iter().zip(va).map(|(&x, &y)| if y > T::zero() { x } else { T::zero() }).collect()
                    });
                }
                Op::LRelu(a, alpha) => {
                    let va = self.value(*a);
                    self.acc(&mut grads, *a, || {
                        g.iter().zip(va).map(|(&x, &y)| if y > T::zero() { x } else { x * *alpha }).collect()
                    });
                }
                Op::Concat(a, b) => {
                    let [n, ca, h, w] = self.shape(*a);
                    let cb = self.shape(*b)[1];
                    let plane = h * w;
                    let ct = ca + cb;
                    self.acc(&mut grads, *a, || {
                        (0..n).flat_map(|k| g[(k * ct) * plane..(k * ct + ca) * plane].iter().copied()).collect()
                    });
                    self.acc(&mut grads, *b, || {
                        (0..n).flat_map(|k| g[(k * ct + ca) * plane..(k + 1) * ct * plane].iter().copied()).collect()
                    });
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let v = g[0] / T::of(n as f64);
                    self.acc(&mut grads, *a, || vec![v; n]);
                }
                Op::BoxMean(a, r) => {
                    let [n, c, h, w] = self.shape(*a);
                    self.acc(&mut grads, *a, || box_mean_adjoint(&g, n * c, h, w, *r));
                }
                Op::Resample(a, op) => {
                    let [n, c, h, w] = self.shape(*a);
                    let (oh, ow) = op.out_dims();
                    let t = op.transpose();
                    self.acc(&mut grads, *a, || {
                        let mut v = vec![T::zero(); n * c * h * w];
                        for p in 0..n * c {
                            t.apply_plane(&g[p * oh * ow..(p + 1) * oh * ow], &mut v[p * h * w..(p + 1) * h * w]);
                        }
                        v
                    });
                }
                Op::Conv { x, w, b, spec } => {
                    let r = conv::conv_backward(self, &g, *x, *w, *b, *spec);
                    self.acc_opt(&mut grads, *x, r.dx);
                    self.acc_opt(&mut grads, *w, r.dw);
                    if let Some(b) = b {
                        self.acc_opt(&mut grads, *b, r.db);
                    }
                }
                Op::Deconv { x, w, b } => {
                    let r = conv::deconv_backward(self, &g, *x, *w, *b);
                    self.acc_opt(&mut grads, *x, r.dx);
                    self.acc_opt(&mut grads, *w, r.dw);
                    if let Some(b) = b {
                        self.acc_opt(&mut grads, *b, r.db);
                    }
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: impl FnOnce() -> Vec<T>) {
        if !self.rg(v) {
            return;
        }
        let g = g();
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
            slot => *slot = Some(g),
        }
    }

    fn acc_opt(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
        if let Some(g) = g {
            self.acc(grads, v, || g);
        }
    }
}

/// Transpose of [`box_mean_plane`] applied to `planes` stacked planes.
fn box_mean_adjoint<T: Real>(g: &[T], planes: usize, h: usize, w: usize, radius: usize) -> Vec<T> {
    let r = radius as isize;
    let k = 2 * radius + 1;
    let norm = 1.0 / (k * k) as f64;
    let (ph, pw) = (h + 2 * radius, w + 2 * radius);
    let mut out = vec![T::zero(); planes * h * w];
    // each padded position q receives the sum of g over outputs whose window
    // covers it, i.e. a box sum of g (zero outside) centred on q
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for p in 0..planes {
        let gp = &g[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += gp[y * w + x].f64();
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        let rect = |y0: isize, x0: isize, y1: isize, x1: isize| -> f64 {
            let (y0, x0) = (y0.clamp(0, h as isize) as usize, x0.clamp(0, w as isize) as usize);
            let (y1, x1) = (y1.clamp(0, h as isize) as usize, x1.clamp(0, w as isize) as usize);
            if y1 <= y0 || x1 <= x0 {
                return 0.0;
            }
            sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0]
        };
        let op = &mut out[p * h * w..(p + 1) * h * w];
        for qy in 0..ph as isize {
            // padded row qy sits at image row qy - r and is read by outputs qy-2r..=qy
            let sy = reflect_index(qy - r, h);
            for qx in 0..pw as isize {
                let sx = reflect_index(qx - r, w);
                let s = rect(qy - 2 * r, qx - 2 * r, qy + 1, qx + 1);
                if s != 0.0 {
                    op[sy * w + sx] += T::of(s * norm);
                }
            }
        }
    }
    out
}
