//! Parameters, initialization, and the layer primitives the blocks and models
//! are assembled from.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Array, Tape, Var};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Named parameter arrays, keyed by hierarchical dotted path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Array)> + 'a {
        self.params.iter().filter(move |(k, _)| k.starts_with(prefix))
    }
}

/// Deterministic parameter initializer.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Truncated normal, sigma 0.02, cut at two sigma.
    pub fn weight(&mut self, name: &str, shape: &[usize]) {
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let rng = &mut self.rng;
        let value = Array::from_shape_fn(IxDyn(shape), |_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        });
        self.store.insert(name, value);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Array::zeros(IxDyn(shape)));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Array::ones(IxDyn(shape)));
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.weight(&format!("{prefix}.weight"), &[fan_in, fan_out]);
        self.zeros(&format!("{prefix}.bias"), &[fan_out]);
    }

    pub fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        self.weight(&format!("{prefix}.weight"), &[c_out, c_in, k, k]);
        self.zeros(&format!("{prefix}.bias"), &[c_out]);
    }

    pub fn zero_conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        self.zeros(&format!("{prefix}.weight"), &[c_out, c_in, k, k]);
        self.zeros(&format!("{prefix}.bias"), &[c_out]);
    }

    pub fn conv_transpose2x2(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.weight(&format!("{prefix}.weight"), &[c_in, c_out, 2, 2]);
        self.zeros(&format!("{prefix}.bias"), &[c_out]);
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.ones(&format!("{prefix}.gamma"), &[dim]);
        self.zeros(&format!("{prefix}.beta"), &[dim]);
    }
}

/// Binds a parameter snapshot to a tape for one forward pass.
///
/// With `trainable == false` every parameter enters the tape as a constant,
/// so no backward closures are recorded.
pub struct Ctx<'t, 'p> {
    pub tape: &'t Tape,
    params: &'p ParamStore,
    trainable: bool,
    bound: RefCell<HashMap<String, Var<'t>>>,
}

impl<'t, 'p> Ctx<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamStore, trainable: bool) -> Self {
        Self { tape, params, trainable, bound: RefCell::new(HashMap::new()) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// The parameter `name` as a tape variable (bound once per tape).
    pub fn p(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let var = if self.trainable {
            self.tape.named_leaf(name, value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    pub fn constant(&self, value: Array) -> Var<'t> {
        self.tape.constant(value)
    }
}

/// `x @ W + b` over the last axis.
pub fn linear<'t>(ctx: &Ctx<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
    x.matmul(ctx.p(&format!("{prefix}.weight"))).add(ctx.p(&format!("{prefix}.bias")))
}

pub fn conv<'t>(ctx: &Ctx<'t, '_>, prefix: &str, x: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
    x.conv2d(ctx.p(&format!("{prefix}.weight")), Some(ctx.p(&format!("{prefix}.bias"))), stride, pad)
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact x2 upsampling).
///
/// Weight layout is `[C_in, C_out, 2, 2]`. Each input pixel scatters a 2x2
/// block, so the op is a per-pixel linear map followed by depth-to-space.
pub fn conv_transpose2x2<'t>(ctx: &Ctx<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
    let w = ctx.p(&format!("{prefix}.weight"));
    let b = ctx.p(&format!("{prefix}.bias"));
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let o = w.shape()[1];
    assert_eq!(w.shape()[0], c, "conv_transpose2x2 channel mismatch");
    let per_pixel = x.permute(&[0, 2, 3, 1]).matmul(w.reshape(&[c, o * 4]));
    per_pixel
        .reshape(&[n, h, wd, o, 2, 2])
        .permute(&[0, 3, 1, 4, 2, 5])
        .reshape(&[n, o, 2 * h, 2 * wd])
        .add(b.reshape(&[1, o, 1, 1]))
}

/// Layer normalization over the last axis.
pub fn layer_norm<'t>(ctx: &Ctx<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
    let axis = x.shape().len() - 1;
    let mean = x.mean_axis(axis, true);
    let centered = x.sub(mean);
    let var = centered.sqr().mean_axis(axis, true);
    let normed = centered.div(var.add_scalar(1e-6).sqrt());
    normed.mul(ctx.p(&format!("{prefix}.gamma"))).add(ctx.p(&format!("{prefix}.beta")))
}

/// Row-stochastic matrix `[out, in]` of adaptive average pooling along one
/// axis: output bin `i` averages inputs `floor(i*in/out) .. ceil((i+1)*in/out)`.
pub fn adaptive_pool_matrix(input: usize, output: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    for i in 0..output {
        let start = i * input / output;
        let end = ((i + 1) * input).div_ceil(output);
        let share = 1.0 / (end - start) as f64;
        for j in start..end {
            m[[i, j]] = share;
        }
    }
    m
}

/// Bilinear interpolation matrix `[out, in]` (half-pixel centers, edge clamp).
pub fn bilinear_matrix(input: usize, output: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[[i, i0]] += 1.0 - frac;
        m[[i, i1]] += frac;
    }
    m
}

/// Applies separable resampling matrices to the spatial axes of `[N,C,H,W]`.
pub fn resample<'t>(x: Var<'t>, rows: &Array2<f64>, cols: &Array2<f64>) -> Var<'t> {
    let tape = x.tape();
    let rt = tape.constant(rows.t().to_owned().into_dyn());
    let ct = tape.constant(cols.t().to_owned().into_dyn());
    x.matmul(ct).transpose_last().matmul(rt).transpose_last()
}

pub fn adaptive_avg_pool<'t>(x: Var<'t>, out_h: usize, out_w: usize) -> Var<'t> {
    let s = x.shape();
    if s[2] == out_h && s[3] == out_w {
        return x;
    }
    resample(x, &adaptive_pool_matrix(s[2], out_h), &adaptive_pool_matrix(s[3], out_w))
}

pub fn bilinear_resize<'t>(x: Var<'t>, out_h: usize, out_w: usize) -> Var<'t> {
    let s = x.shape();
    if s[2] == out_h && s[3] == out_w {
        return x;
    }
    resample(x, &bilinear_matrix(s[2], out_h), &bilinear_matrix(s[3], out_w))
}

/// Pixel-level reorganization: `[N,C,H,W]` to `[N, C*r*r, H/r, W/r]`.
pub fn space_to_depth(x: Var<'_>, r: usize) -> Var<'_> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h % r == 0 && w % r == 0, "space_to_depth: {h}x{w} not divisible by {r}");
    x.reshape(&[n, c, h / r, r, w / r, r])
        .permute(&[0, 1, 3, 5, 2, 4])
        .reshape(&[n, c * r * r, h / r, w / r])
}

/// `[N,C,H,W]` to token layout `[N, H*W, C]`.
pub fn to_tokens(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]]).permute(&[0, 2, 1])
}

/// Token layout `[N, H*W, C]` back to `[N,C,H,W]`.
pub fn from_tokens(x: Var<'_>, h: usize, w: usize) -> Var<'_> {
    let s = x.shape();
    x.permute(&[0, 2, 1]).reshape(&[s[0], s[2], h, w])
}

/// Single- or multi-head scaled dot-product attention with learned q/k/v/out
/// projections. `query` is `[N, Tq, D]`, `context` is `[N, Tk, D]`.
pub fn attention<'t>(ctx: &Ctx<'t, '_>, prefix: &str, query: Var<'t>, context: Var<'t>, heads: usize) -> Var<'t> {
    let q = linear(ctx, &format!("{prefix}.q"), query);
    let k = linear(ctx, &format!("{prefix}.k"), context);
    let v = linear(ctx, &format!("{prefix}.v"), context);
    let (qs, ks) = (q.shape(), k.shape());
    let (n, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    assert!(d % heads == 0, "attention dim {d} not divisible by {heads} heads");
    let dh = d / heads;
    let split = |t: Var<'t>, len: usize| t.reshape(&[n, len, heads, dh]).permute(&[0, 2, 1, 3]);
    let (q, k, v) = (split(q, tq), split(k, tk), split(v, tk));
    let scores = q.scale(1.0 / (dh as f64).sqrt()).matmul(k.transpose_last());
    let attn = scores.softmax(3);
    let mixed = attn.matmul(v).permute(&[0, 2, 1, 3]).reshape(&[n, tq, d]);
    linear(ctx, &format!("{prefix}.out"), mixed)
}

pub fn init_attention(init: &mut Init<'_>, prefix: &str, dim: usize) {
    for proj in ["q", "k", "v", "out"] {
        init.linear(&format!("{prefix}.{proj}"), dim, dim);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_matrix_rows_sum_to_one() {
        for (i, o) in [(8, 32), (32, 4), (7, 3), (5, 5)] {
            let m = adaptive_pool_matrix(i, o);
            for r in m.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
        }
        // Integer downsampling is plain block averaging.
        let m = adaptive_pool_matrix(4, 2);
        assert_eq!(m.row(0).to_vec(), vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_matches_half_pixel_convention() {
        let m = bilinear_matrix(2, 4);
        // Output 0 clamps to input 0; output 1 sits at src 0.25.
        assert_eq!(m.row(0).to_vec(), vec![1.0, 0.0]);
        assert!((m[[1, 0]] - 0.75).abs() < 1e-12 && (m[[1, 1]] - 0.25).abs() < 1e-12);
        assert_eq!(m.row(3).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn conv_transpose_scatters_blocks() {
        let tape = Tape::new();
        let mut store = ParamStore::new();
        let mut w = Array::zeros(IxDyn(&[1, 1, 2, 2]));
        w[[0, 0, 0, 1]] = 2.0;
        w[[0, 0, 1, 0]] = 3.0;
        store.insert("t.weight", w);
        store.insert("t.bias", Array::zeros(IxDyn(&[1])));
        let ctx = Ctx::new(&tape, &store, false);
        let x = tape.constant(Array::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![1.0, 10.0]).unwrap());
        let y = conv_transpose2x2(&ctx, "t", x).value();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 2.0, 0.0, 20.0, 3.0, 0.0, 30.0, 0.0]);
    }

    #[test]
    fn space_to_depth_layout() {
        let tape = Tape::new();
        let x = tape.constant(Array::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |d| (d[2] * 4 + d[3]) as f64));
        let y = space_to_depth(x, 2).value();
        assert_eq!(y.shape(), &[1, 4, 2, 2]);
        // Channel (dy, dx) = (0, 1) gathers the odd columns of even rows.
        assert_eq!(y.slice(ndarray::s![0, 1, .., ..]).iter().copied().collect::<Vec<_>>(), vec![1.0, 3.0, 9.0, 11.0]);
    }

    #[test]
    fn init_is_deterministic_and_truncated() {
        let mut a = ParamStore::new();
        Init::new(&mut a, 3).weight("w", &[64, 64]);
        let mut b = ParamStore::new();
        Init::new(&mut b, 3).weight("w", &[64, 64]);
        assert_eq!(a, b);
        assert!(a.get("w").unwrap().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
    }
}
