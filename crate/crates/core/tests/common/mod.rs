//! Helpers shared by the integration tests.

#![allow(dead_code)]

use ndarray::IxDyn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thinsec_core::nn::{Ctx, ParamStore};
use thinsec_core::pipeline::Sample;
use thinsec_core::synthdata::{generate_group, SynthSpec};
use thinsec_core::tensor::{Array, Tape, Var};
use thinsec_core::Result;

pub fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Array {
    Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(lo..hi))
}

/// Replaces every parameter with uniform noise of the given scale, so that
/// zero-initialized gates and heads do not hide upstream gradients.
pub fn randomize(params: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, value) in params.iter_mut() {
        value.mapv_inplace(|_| rng.random_range(-scale..scale));
    }
}

pub fn samples(n: usize, size: usize, n_grains: usize) -> Vec<Sample> {
    (0..n as u64)
        .map(|s| {
            let (g, e, m) = generate_group(&SynthSpec { image_size: size, n_grains, ..SynthSpec::with_seed(s) }).unwrap();
            Sample::new(g, e, Some(m))
        })
        .collect()
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_err: f64,
    pub worst: String,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_err < tol
    }
}

/// Relative error with a floor on the denominator, so entries whose true
/// gradient is zero are judged by absolute error instead.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Entries to check: all of them, or `fraction` of the scalars drawn at
/// random (at least one per tensor).
pub fn pick_entries(params: &ParamStore, fraction: Option<f64>, seed: u64) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, value) in params.iter() {
        let n = value.len();
        match fraction {
            None => out.extend((0..n).map(|i| (name.clone(), i))),
            Some(f) => {
                let k = ((n as f64 * f).ceil() as usize).clamp(1, n);
                out.extend(sample(&mut rng, n, k).into_iter().map(|i| (name.clone(), i)));
            }
        }
    }
    out
}

/// Compares the tape gradient of `sum(weights * f(params))` with the
/// fourth-order central difference
/// `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h` at the selected entries.
/// The higher order allows a larger `h`, which keeps roundoff in the
/// difference well below the tolerance even for tiny gradient components.
pub fn gradcheck<F>(params: &ParamStore, entries: &[(String, usize)], h: f64, floor: f64, seed: u64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&Ctx<'t, '_>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, params, true);
    let out = f(&ctx)?;
    let weights = rand_array(&out.shape(), &mut ChaCha8Rng::seed_from_u64(seed), -1.0, 1.0);
    let objective = out.mul(tape.constant(weights.clone())).sum_all();
    let grads = tape.backward(objective).into_named();

    let eval = |p: &ParamStore| -> Result<f64> {
        let t = Tape::new();
        let c = Ctx::new(&t, p, false);
        let o = f(&c)?.value();
        Ok(o.iter().zip(weights.iter()).map(|(x, w)| x * w).sum())
    };
    let mut probe = params.clone();
    let mut report = GradReport { checked: 0, max_err: 0.0, worst: String::new() };
    for (name, idx) in entries {
        let base = params.get(name).expect("entry names a parameter").as_slice().unwrap()[*idx];
        let mut at = |x: f64| -> Result<f64> {
            probe.get_mut(name).unwrap().as_slice_mut().unwrap()[*idx] = x;
            eval(&probe)
        };
        let near = at(base + h)? - at(base - h)?;
        let far = at(base + 2.0 * h)? - at(base - 2.0 * h)?;
        probe.get_mut(name).unwrap().as_slice_mut().unwrap()[*idx] = base;
        let numeric = (8.0 * near - far) / (12.0 * h);
        let analytic = grads.get(name).map_or(0.0, |g| g.as_slice().unwrap()[*idx]);
        let err = rel_err(analytic, numeric, floor);
        report.checked += 1;
        if err > report.max_err {
            report.max_err = err;
            report.worst = format!("{name}[{idx}] analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }
    Ok(report)
}
