//! Strided loops over standard-layout buffers, used by the tape for
//! broadcasting, gradient reduction and axis permutation.

use ndarray::IxDyn;

use crate::tensor::Array;

fn standard_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides of `src` viewed in the right-aligned broadcast `out` shape; zero on
/// broadcast axes.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let own = standard_strides(src);
    let offset = out.len() - src.len();
    (0..out.len())
        .map(|i| if i < offset || src[i - offset] == 1 { 0 } else { own[i - offset] })
        .collect()
}

/// Merges adjacent axes that are contiguous for every operand.
fn collapse<const K: usize>(shape: &[usize], strides: [Vec<usize>; K]) -> (Vec<usize>, [Vec<usize>; K]) {
    let mut out_shape: Vec<usize> = Vec::new();
    let mut out_strides: [Vec<usize>; K] = std::array::from_fn(|_| Vec::new());
    for i in 0..shape.len() {
        if shape[i] == 1 {
            continue;
        }
        if let Some(&last) = out_shape.last() {
            let mergeable = (0..K).all(|k| *out_strides[k].last().unwrap() == strides[k][i] * shape[i]);
            if mergeable {
                let l = out_shape.len() - 1;
                out_shape[l] = last * shape[i];
                for k in 0..K {
                    out_strides[k][l] = strides[k][i];
                }
                continue;
            }
        }
        out_shape.push(shape[i]);
        for k in 0..K {
            out_strides[k].push(strides[k][i]);
        }
    }
    if out_shape.is_empty() {
        out_shape.push(1);
        for s in out_strides.iter_mut() {
            s.push(0);
        }
    }
    (out_shape, out_strides)
}

/// Calls `body(base_offsets, inner_len, inner_strides)` for every innermost
/// run of the collapsed iteration space.
fn walk<const K: usize>(shape: &[usize], strides: [Vec<usize>; K], mut body: impl FnMut([usize; K], usize, [usize; K])) {
    if shape.contains(&0) {
        return;
    }
    let (shape, strides) = collapse(shape, strides);
    let nd = shape.len();
    let inner = shape[nd - 1];
    let inner_strides: [usize; K] = std::array::from_fn(|k| strides[k][nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let mut base = [0usize; K];
    loop {
        body(base, inner, inner_strides);
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            for k in 0..K {
                base[k] += strides[k][d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for k in 0..K {
                base[k] -= strides[k][d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            assert!(da == db || da == 1 || db == 1, "incompatible broadcast shapes {a:?} and {b:?}");
            da.max(db)
        })
        .collect()
}

/// Elementwise `f(a, b)` with numpy-style broadcasting.
pub fn zip_broadcast(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let (a, b) = (a.as_standard_layout(), b.as_standard_layout());
    let (xa, xb) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    if a.shape() == b.shape() {
        let v: Vec<f64> = xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect();
        return Array::from_shape_vec(IxDyn(a.shape()), v).unwrap();
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let total: usize = shape.iter().product();
    let mut out = vec![0.0; total];
    let strides = [standard_strides(&shape), broadcast_strides(a.shape(), &shape), broadcast_strides(b.shape(), &shape)];
    walk(&shape, strides, |[o, p, q], len, [so, sp, sq]| {
        for j in 0..len {
            out[o + j * so] = f(xa[p + j * sp], xb[q + j * sq]);
        }
    });
    Array::from_shape_vec(IxDyn(&shape), out).unwrap()
}

/// Sums `g` down to `shape` (inverse of broadcasting).
pub fn sum_to(g: &Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g.clone();
    }
    let g = g.as_standard_layout();
    let xs = g.as_slice().unwrap();
    let total: usize = shape.iter().product();
    let mut out = vec![0.0; total];
    let strides = [standard_strides(g.shape()), broadcast_strides(shape, g.shape())];
    walk(g.shape(), strides, |[p, o], len, [sp, so]| {
        if so == 0 {
            let mut acc = 0.0;
            for j in 0..len {
                acc += xs[p + j * sp];
            }
            out[o] += acc;
        } else {
            for j in 0..len {
                out[o + j * so] += xs[p + j * sp];
            }
        }
    });
    Array::from_shape_vec(IxDyn(shape), out).unwrap()
}

/// Copy of `a` with axes reordered so that output axis `i` is input axis
/// `axes[i]`.
pub fn permute(a: &Array, axes: &[usize]) -> Array {
    let a = a.as_standard_layout();
    let xs = a.as_slice().unwrap();
    let in_strides = standard_strides(a.shape());
    let shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
    let src: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let mut out = vec![0.0; a.len()];
    walk(&shape, [standard_strides(&shape), src], |[o, p], len, [so, sp]| {
        for j in 0..len {
            out[o + j * so] = xs[p + j * sp];
        }
    });
    Array::from_shape_vec(IxDyn(&shape), out).unwrap()
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

/// Softmax of `a` along `axis`.
pub fn softmax(a: &Array, axis: usize) -> Array {
    let a = a.as_standard_layout();
    let xs = a.as_slice().unwrap();
    let (outer, len, inner) = around(a.shape(), axis);
    let mut out = vec![0.0; xs.len()];
    if inner == 1 && len > 0 {
        for (row, dst) in xs.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                sum += *d;
            }
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        return Array::from_shape_vec(IxDyn(a.shape()), out).unwrap();
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(xs[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (xs[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    Array::from_shape_vec(IxDyn(a.shape()), out).unwrap()
}

/// Vector-Jacobian product of softmax: `y * (g - sum(g * y))` along `axis`.
pub fn softmax_backward(y: &Array, g: &Array, axis: usize) -> Array {
    let (y, g) = (y.as_standard_layout(), g.as_standard_layout());
    let (ys, gs) = (y.as_slice().unwrap(), g.as_slice().unwrap());
    let (outer, len, inner) = around(y.shape(), axis);
    let mut out = vec![0.0; ys.len()];
    if inner == 1 && len > 0 {
        for ((yr, gr), dst) in ys.chunks_exact(len).zip(gs.chunks_exact(len)).zip(out.chunks_exact_mut(len)) {
            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
            for ((d, &y), &g) in dst.iter_mut().zip(yr).zip(gr) {
                *d = y * (g - dot);
            }
        }
        return Array::from_shape_vec(IxDyn(y.shape()), out).unwrap();
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += ys[base + j * inner] * gs[base + j * inner];
            }
            for j in 0..len {
                let k = base + j * inner;
                out[k] = ys[k] * (gs[k] - dot);
            }
        }
    }
    Array::from_shape_vec(IxDyn(y.shape()), out).unwrap()
}
