//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! into leaves. A tape is single-threaded; parameters live outside it (see
//! `nn::ParamStore`) so several tapes can read one parameter snapshot from
//! different threads.
//!
//! All arrays are kept in standard (row-major) layout. Spatial tensors use
//! NCHW order.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, ArrayD, ArrayView2, Axis, Dimension, IxDyn, Slice};

use crate::kernels;

pub type Array = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Array) -> Vec<Array>>;

struct Node {
    value: Rc<Array>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    leaf: bool,
    name: Option<String>,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every leaf that influenced it.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: BTreeMap<usize, Array>,
    by_name: BTreeMap<String, Array>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Array> {
        self.by_id.get(&var.id)
    }

    pub fn named(&self, name: &str) -> Option<&Array> {
        self.by_name.get(name)
    }

    /// Gradients of named leaves (parameters), keyed by name.
    pub fn into_named(self) -> BTreeMap<String, Array> {
        self.by_name
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

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push_leaf(value, false, None)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.push_leaf(value, true, None)
    }

    /// A differentiable input whose gradient is reported under `name`.
    pub fn named_leaf(&self, name: &str, value: Array) -> Var<'_> {
        self.push_leaf(value, true, Some(name.to_string()))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array::from_elem(IxDyn(&[]), v))
    }

    fn push_leaf(&self, value: Array, requires_grad: bool, name: Option<String>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(standard(value)),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            leaf: true,
            name,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Array, parents: &[usize], backward: BackwardFn) -> Var<'_> {
        self.push_shared(Rc::new(standard(value)), parents, backward)
    }

    /// Like `push` for a value the backward closure also holds on to.
    fn push_shared(&self, value: Rc<Array>, parents: &[usize], backward: BackwardFn) -> Var<'_> {
        debug_assert!(value.is_standard_layout());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            leaf: false,
            name: None,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Backpropagates from `output`, seeding it with ones.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let seed = Array::ones(output.value().raw_dim());
        self.backward_with(output, seed)
    }

    /// Backpropagates `seed` (the upstream gradient of `output`).
    pub fn backward_with(&self, output: Var<'_>, seed: Array) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array>> = vec![None; output.id + 1];
        grads[output.id] = Some(seed);
        let mut out = Gradients::default();
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.leaf {
                if let Some(name) = &node.name {
                    out.by_name.insert(name.clone(), g.clone());
                }
                out.by_id.insert(id, g);
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let parent_grads = bw(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        out
    }
}

fn standard(a: Array) -> Array {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
pub fn reduce_to(g: Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g;
    }
    kernels::sum_to(&g, shape)
}

fn reshape(a: &Array, shape: &[usize]) -> Array {
    a.to_shape(IxDyn(shape)).expect("reshape: element count mismatch").into_owned()
}

fn as_matrix(a: &Array, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("matrix view of a standard-layout array")
}

/// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]` or has
/// the same leading dims as `a`.
fn bmm(a: &Array, b: &Array, ta: bool, tb: bool) -> Array {
    let nd = a.ndim();
    let (am, ak) = (a.shape()[nd - 2], a.shape()[nd - 1]);
    let m = if ta { ak } else { am };
    let bnd = b.ndim();
    let (bk, bn) = (b.shape()[bnd - 2], b.shape()[bnd - 1]);
    let n = if tb { bk } else { bn };
    let mut out_shape = a.shape()[..nd - 2].to_vec();
    out_shape.extend([m, n]);
    let batch: usize = a.shape()[..nd - 2].iter().product();
    let mut out = Array::zeros(IxDyn(&out_shape));
    let out_slice = out.as_slice_mut().expect("fresh array is contiguous");
    let a_slice = a.as_slice().expect("standard layout");
    let b_slice = b.as_slice().expect("standard layout");
    for i in 0..batch {
        let av = ArrayView2::from_shape((am, ak), &a_slice[i * am * ak..(i + 1) * am * ak]).unwrap();
        let bv = if bnd == 2 {
            ArrayView2::from_shape((bk, bn), b_slice).unwrap()
        } else {
            ArrayView2::from_shape((bk, bn), &b_slice[i * bk * bn..(i + 1) * bk * bn]).unwrap()
        };
        let av = if ta { av.reversed_axes() } else { av };
        let bv = if tb { bv.reversed_axes() } else { bv };
        let mut ov = ndarray::ArrayViewMut2::from_shape((m, n), &mut out_slice[i * m * n..(i + 1) * m * n]).unwrap();
        general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Rc<Array> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The single element of a scalar (or one-element) value.
    pub fn item(self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn unary(self, value: Array, bw: impl Fn(&Array) -> Array + 'static) -> Var<'t> {
        self.tape.push(value, &[self.id], Box::new(move |g| vec![bw(g)]))
    }

    fn map_unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.mapv(f));
        let yc = y.clone();
        self.tape.push_shared(y, &[self.id], Box::new(move |g| {
            vec![ndarray::Zip::from(g).and(&*x).and(&*yc).map_collect(|&gi, &xi, &yi| gi * df(xi, yi))]
        }))
    }

    // ---- elementwise binary (broadcasting) ----

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = kernels::zip_broadcast(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.push(
            value,
            &[self.id, other.id],
            Box::new(move |g| vec![reduce_to(g.clone(), &sa), reduce_to(g.clone(), &sb)]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = kernels::zip_broadcast(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.push(
            value,
            &[self.id, other.id],
            Box::new(move |g| vec![reduce_to(g.clone(), &sa), reduce_to(-g, &sb)]),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = kernels::zip_broadcast(&a, &b, |x, y| x * y);
        self.tape.push(
            value,
            &[self.id, other.id],
            Box::new(move |g| {
                vec![
                    reduce_to(kernels::zip_broadcast(g, &b, |x, y| x * y), a.shape()),
                    reduce_to(kernels::zip_broadcast(g, &a, |x, y| x * y), b.shape()),
                ]
            }),
        )
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let value = kernels::zip_broadcast(&a, &b, |x, y| x / y);
        self.tape.push(
            value,
            &[self.id, other.id],
            Box::new(move |g| {
                let ga = kernels::zip_broadcast(g, &b, |x, y| x / y);
                let gb = kernels::zip_broadcast(&kernels::zip_broadcast(&ga, &a, |x, y| x * y), &b, |x, y| -x / y);
                vec![reduce_to(ga, a.shape()), reduce_to(gb, b.shape())]
            }),
        )
    }

    // ---- scalar and elementwise unary ----

    pub fn scale(self, s: f64) -> Var<'t> {
        let value = &*self.value() * s;
        self.unary(value, move |g| g * s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let value = &*self.value() + s;
        self.unary(value, |g| g.clone())
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.map_unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.map_unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqr(self) -> Var<'t> {
        self.map_unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.map_unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map_unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(self) -> Var<'t> {
        self.map_unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.map_unary(gelu, |x, _| gelu_grad(x))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.map_unary(move |x| x.clamp(lo, hi), move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 })
    }

    // ---- reductions ----

    pub fn sum_all(self) -> Var<'t> {
        let a = self.value();
        let shape = a.raw_dim();
        let value = Array::from_elem(IxDyn(&[]), a.sum());
        self.unary(value, move |g| Array::from_elem(shape.clone(), *g.first().unwrap()))
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let mut value = a.sum_axis(Axis(axis));
        if keepdim {
            value = value.insert_axis(Axis(axis));
        }
        self.unary(value, move |g| {
            let g = if keepdim { g.clone() } else { g.clone().insert_axis(Axis(axis)) };
            g.broadcast(IxDyn(&shape)).unwrap().to_owned()
        })
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    // ---- shape ----

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        let orig = a.shape().to_vec();
        let value = reshape(&a, shape);
        self.unary(value, move |g| reshape(g, &orig))
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let a = self.value();
        let value = kernels::permute(&a, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.unary(value, move |g| kernels::permute(g, &inverse))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Var<'t> {
        let nd = self.shape().len();
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        let shape = a.raw_dim();
        let value = a.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        self.unary(value, move |g| {
            let mut out = Array::zeros(shape.clone());
            out.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g);
            out
        })
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let tape = parts[0].tape;
        let values: Vec<Rc<Array>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(
            value,
            &ids,
            Box::new(move |g| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        let part = g.slice_axis(Axis(axis), Slice::from(start..start + s)).to_owned();
                        start += s;
                        part
                    })
                    .collect()
            }),
        )
    }

    // ---- linear algebra ----

    /// `[.., m, k] x [k, n]` or batched `[.., m, k] x [.., k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let nd = a.ndim();
        assert!(nd >= 2 && b.ndim() >= 2, "matmul needs matrices");
        assert_eq!(a.shape()[nd - 1], b.shape()[b.ndim() - 2], "matmul inner dims");
        if b.ndim() > 2 {
            assert_eq!(a.shape()[..nd - 2], b.shape()[..b.ndim() - 2], "matmul batch dims");
        }
        let value = bmm(&a, &b, false, false);
        self.tape.push(
            value,
            &[self.id, other.id],
            Box::new(move |g| {
                let ga = bmm(g, &b, false, true);
                let gb = if b.ndim() == 2 {
                    let nd = a.ndim();
                    let k = a.shape()[nd - 1];
                    let n = g.shape()[g.ndim() - 1];
                    let rows = a.len() / k;
                    let am = as_matrix(&a, rows, k);
                    let gm = as_matrix(g, rows, n);
                    am.t().dot(&gm).into_dyn()
                } else {
                    bmm(&a, g, true, false)
                };
                vec![ga, gb]
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'t> {
        let a = self.value();
        let y = Rc::new(kernels::softmax(&a, axis));
        let yc = y.clone();
        self.tape.push_shared(y, &[self.id], Box::new(move |g| vec![kernels::softmax_backward(&yc, g, axis)]))
    }

    /// 2-D convolution. `self` is `[N, C, H, W]`, `weight` is `[O, C, kh, kw]`,
    /// `bias` is `[O]`. Zero padding.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let (n, c, h, wd) = dims4(&x);
        let (o, wc, kh, kw) = dims4(&w);
        assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, pad);
        let (ho, wo) = (geom.ho, geom.wo);
        let krows = c * kh * kw;
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let xs = &x.as_slice().unwrap()[i * c * h * wd..(i + 1) * c * h * wd];
                geom.im2col(xs)
            })
            .collect();
        let w2 = reshape(&w, &[o, krows]);
        let w2 = w2.into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut out = Array::zeros(IxDyn(&[n, o, ho, wo]));
        {
            let os = out.as_slice_mut().unwrap();
            for (i, col) in cols.iter().enumerate() {
                let cv = ArrayView2::from_shape((krows, ho * wo), col).unwrap();
                let mut ov =
                    ndarray::ArrayViewMut2::from_shape((o, ho * wo), &mut os[i * o * ho * wo..(i + 1) * o * ho * wo]).unwrap();
                general_mat_mul(1.0, &w2, &cv, 0.0, &mut ov);
            }
        }
        let bias_val = bias.map(|b| b.value());
        if let Some(b) = &bias_val {
            assert_eq!(b.shape(), &[o], "conv2d bias shape");
            let b4 = b.view().into_shape_with_order(IxDyn(&[1, o, 1, 1])).unwrap();
            out += &b4;
        }
        let mut ids = vec![self.id, weight.id];
        if let Some(b) = bias {
            ids.push(b.id);
        }
        let has_bias = bias.is_some();
        let xshape = x.raw_dim();
        let wshape = w.raw_dim();
        self.tape.push(
            out,
            &ids,
            Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut gx = Array::zeros(xshape.clone());
                let mut gw2 = ndarray::Array2::<f64>::zeros((o, krows));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    for (i, col) in cols.iter().enumerate() {
                        let gv = ArrayView2::from_shape((o, ho * wo), &gs[i * o * ho * wo..(i + 1) * o * ho * wo]).unwrap();
                        let cv = ArrayView2::from_shape((krows, ho * wo), col).unwrap();
                        general_mat_mul(1.0, &gv, &cv.t(), 1.0, &mut gw2);
                        let gcols = w2.t().dot(&gv);
                        geom.col2im_add(gcols.as_slice().unwrap(), &mut gxs[i * c * h * wd..(i + 1) * c * h * wd]);
                    }
                }
                let mut grads = vec![gx, reshape(&gw2.into_dyn(), wshape.slice())];
                if has_bias {
                    let gb = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    grads.push(gb);
                }
                grads
            }),
        )
    }
}

pub fn dims4(a: &Array) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected a 4-D array, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Self { c, h, w, kh, kw, stride, pad, ho, wo }
    }

    /// Calls `f(col, x, len)` for every run of output columns that reads a
    /// run of input pixels. Runs are contiguous only when the stride is 1.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let hw = self.ho * self.wo;
        let (s, pad) = (self.stride, self.pad);
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    // ox range with 0 <= ox*s + kj - pad < w
                    let lo = pad.saturating_sub(kj).div_ceil(s);
                    let hi = if self.w + pad > kj { ((self.w + pad - kj - 1) / s + 1).min(self.wo) } else { 0 };
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = (oy * s + ki) as isize - pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let col = row * hw + oy * self.wo + lo;
                        let x = (ci * self.h + iy as usize) * self.w + lo * s + kj - pad;
                        f(col, x, hi - lo);
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        if self.is_pointwise() {
            return x.to_vec();
        }
        let mut cols = vec![0.0; self.c * self.kh * self.kw * self.ho * self.wo];
        let s = self.stride;
        self.for_each_run(|c0, x0, len| {
            if s == 1 {
                cols[c0..c0 + len].copy_from_slice(&x[x0..x0 + len]);
            } else {
                for k in 0..len {
                    cols[c0 + k] = x[x0 + k * s];
                }
            }
        });
        cols
    }

    fn col2im_add(&self, cols: &[f64], gx: &mut [f64]) {
        if self.is_pointwise() {
            gx.iter_mut().zip(cols).for_each(|(g, c)| *g += c);
            return;
        }
        let s = self.stride;
        self.for_each_run(|c0, x0, len| {
            if s == 1 {
                gx[x0..x0 + len].iter_mut().zip(&cols[c0..c0 + len]).for_each(|(g, c)| *g += c);
            } else {
                for k in 0..len {
                    gx[x0 + k * s] += cols[c0 + k];
                }
            }
        });
    }
}
