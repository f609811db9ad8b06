//! Training objectives.
//!
//! Edge losses are per-image sums over pixels:
//!
//! * class-balanced cross entropy,
//!   `-b1 * sum_{g=1} ln m - b0 * sum_{g=0} ln(1 - m)` where `b0` is the
//!   positive ratio and `b1` the negative ratio of the target;
//! * distance-weighted term `-sum 1/(D + eps) * ln m`, with `D` the Euclidean
//!   distance to the nearest target edge pixel.
//!
//! The stage-2 edge loss adds the same pair against the teacher's map scaled
//! by a decaying factor. Semantic losses are pixel-mean cross entropy plus a
//! squared-denominator dice loss. In batches, per-image values are averaged
//! over the batch only.

use ndarray::{Array2, Array4, Axis, IxDyn};

use crate::tensor::{Array, Tape, Var};
use crate::{Error, Result};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TeacherTargets {
    /// Teacher map binarized at 0.5 before computing weights and distances.
    #[default]
    Binarized,
    /// Teacher probabilities used directly as soft targets; distances from
    /// the binarized map.
    Soft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub eps_distance: f64,
    pub eps_dice: f64,
    pub lambda_e: f64,
    pub lambda_t0: f64,
    pub teacher_targets: TeacherTargets,
    pub class_count: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eps_distance: 1.0,
            eps_dice: 1e-6,
            lambda_e: 4e-4,
            lambda_t0: 1.0,
            teacher_targets: TeacherTargets::Binarized,
            class_count: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps_distance", self.eps_distance),
            ("eps_dice", self.eps_dice),
            ("lambda_t0", self.lambda_t0),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.lambda_e.is_finite() && self.lambda_e >= 0.0) {
            return Err(Error::invalid("lambda_e", format!("must be >= 0, got {}", self.lambda_e)));
        }
        if self.class_count == 0 {
            return Err(Error::invalid("class_count", "must be positive"));
        }
        Ok(())
    }
}

/// `(b0, b1)`: positive and negative pixel ratios of a binary mask.
pub fn class_balance_weights(mask: &Array2<f64>) -> Result<(f64, f64)> {
    if mask.is_empty() {
        return Err(Error::invalid("mask", "empty mask"));
    }
    let total = mask.len() as f64;
    let pos = mask.iter().filter(|&&v| v >= 0.5).count() as f64;
    let (b0, b1) = (pos / total, (total - pos) / total);
    if b0 == 0.0 || b1 == 0.0 {
        log::warn!("degenerate edge target: {pos} positives of {total} pixels; one loss term vanishes");
    }
    Ok((b0, b1))
}

/// Squared 1-D distance transform of `f` (lower envelope of parabolas).
fn squared_dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        match first {
            None => {
                first = Some(q);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                k = 0;
            }
            Some(_) => {
                let mut s;
                loop {
                    let p = v[k];
                    s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                    if s <= z[k] && k > 0 {
                        k -= 1;
                    } else {
                        break;
                    }
                }
                if s <= z[k] {
                    // k == 0 and the new parabola dominates everywhere.
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                }
            }
        }
    }
    if first.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest positive pixel.
pub fn distance_map(mask: &Array2<f64>) -> Result<Array2<f64>> {
    if !mask.iter().any(|&v| v >= 0.5) {
        return Err(Error::NoPositives);
    }
    let (h, w) = mask.dim();
    let mut sq = mask.mapv(|v| if v >= 0.5 { 0.0 } else { f64::INFINITY });
    let mut buf_in = vec![0.0; h.max(w)];
    let mut buf_out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            buf_in[y] = sq[[y, x]];
        }
        squared_dt_1d(&buf_in[..h], &mut buf_out[..h]);
        for y in 0..h {
            sq[[y, x]] = buf_out[y];
        }
    }
    for y in 0..h {
        for x in 0..w {
            buf_in[x] = sq[[y, x]];
        }
        squared_dt_1d(&buf_in[..w], &mut buf_out[..w]);
        for x in 0..w {
            sq[[y, x]] = buf_out[x];
        }
    }
    Ok(sq.mapv(f64::sqrt))
}

/// Precomputed constants of one edge target: the mask (binary or soft),
/// balance weights, and distance map.
#[derive(Clone, Debug)]
pub struct EdgeTarget {
    pub mask: Array2<f64>,
    pub beta0: f64,
    pub beta1: f64,
    /// `None` when the target has no positive pixel.
    pub distance: Option<Array2<f64>>,
}

impl EdgeTarget {
    /// Target from a binary ground-truth mask.
    pub fn binary(mask: &Array2<f64>) -> Result<Self> {
        let mask = mask.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let (beta0, beta1) = class_balance_weights(&mask)?;
        let distance = match distance_map(&mask) {
            Ok(d) => Some(d),
            Err(Error::NoPositives) => None,
            Err(e) => return Err(e),
        };
        Ok(Self { mask, beta0, beta1, distance })
    }

    /// Target from a teacher probability map.
    pub fn from_teacher(prob: &Array2<f64>, mode: TeacherTargets) -> Result<Self> {
        let mut t = Self::binary(prob)?;
        if t.distance.is_none() {
            log::warn!("teacher pseudo-label has no positive pixel; distance term skipped");
        }
        if mode == TeacherTargets::Soft {
            t.mask = prob.mapv(|v| v.clamp(0.0, 1.0));
        }
        Ok(t)
    }

    /// Per-pixel weights `(a, b)` of `-(a ln m + b ln(1 - m))` for the
    /// balanced cross entropy.
    fn bce_weights(&self) -> (Array2<f64>, Array2<f64>) {
        (self.mask.mapv(|g| self.beta1 * g), self.mask.mapv(|g| self.beta0 * (1.0 - g)))
    }

    fn distance_weights(&self, eps: f64) -> Option<Array2<f64>> {
        self.distance.as_ref().map(|d| d.mapv(|v| 1.0 / (v + eps)))
    }
}

fn stack_maps(maps: &[Array2<f64>]) -> Array {
    let (h, w) = maps[0].dim();
    let mut out = Array4::<f64>::zeros((maps.len(), 1, h, w));
    for (i, m) in maps.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(m);
    }
    out.into_dyn()
}

fn check_batch(m: Var<'_>, targets: &[&EdgeTarget]) -> Result<()> {
    let s = m.shape();
    if s.len() != 4 || s[1] != 1 || s[0] != targets.len() {
        return Err(Error::Shape(format!("edge prediction {s:?} vs {} targets", targets.len())));
    }
    for t in targets {
        if t.mask.dim() != (s[2], s[3]) {
            return Err(Error::Shape(format!("edge target {:?} vs prediction {}x{}", t.mask.dim(), s[2], s[3])));
        }
    }
    Ok(())
}

fn clamp_prob(m: Var<'_>) -> Var<'_> {
    m.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Balanced cross entropy of `m` (`[N,1,H,W]` probabilities), batch mean of
/// per-image sums.
pub fn edge_bce_var<'t>(m: Var<'t>, targets: &[&EdgeTarget]) -> Result<Var<'t>> {
    check_batch(m, targets)?;
    let tape = m.tape();
    let (a, b): (Vec<_>, Vec<_>) = targets.iter().map(|t| t.bce_weights()).unzip();
    let mc = clamp_prob(m);
    let pos = mc.ln().mul(tape.constant(stack_maps(&a))).sum_all();
    let neg = mc.neg().add_scalar(1.0).ln().mul(tape.constant(stack_maps(&b))).sum_all();
    Ok(pos.add(neg).scale(-1.0 / targets.len() as f64))
}

/// Distance-weighted term, batch mean of per-image sums. Targets without
/// positives contribute zero.
pub fn edge_distance_var<'t>(m: Var<'t>, targets: &[&EdgeTarget], eps: f64) -> Result<Var<'t>> {
    check_batch(m, targets)?;
    let tape = m.tape();
    let s = m.shape();
    let weights: Vec<Array2<f64>> = targets
        .iter()
        .map(|t| t.distance_weights(eps).unwrap_or_else(|| Array2::zeros((s[2], s[3]))))
        .collect();
    let total = clamp_prob(m).ln().mul(tape.constant(stack_maps(&weights))).sum_all();
    Ok(total.scale(-1.0 / targets.len() as f64))
}

/// Stage-1 edge objective: balanced cross entropy plus the distance term.
pub fn stage1_loss_var<'t>(m: Var<'t>, targets: &[&EdgeTarget], cfg: &LossConfig) -> Result<Var<'t>> {
    Ok(edge_bce_var(m, targets)?.add(edge_distance_var(m, targets, cfg.eps_distance)?))
}

/// Stage-2 edge objective: the stage-1 pair against ground truth plus
/// `lambda_t` times the pair against the teacher targets.
pub fn stage2_edge_loss_var<'t>(
    m: Var<'t>,
    gt: &[&EdgeTarget],
    teacher: &[&EdgeTarget],
    lambda_t: f64,
    cfg: &LossConfig,
) -> Result<Var<'t>> {
    let gt_term = stage1_loss_var(m, gt, cfg)?;
    let teacher_term = stage1_loss_var(m, teacher, cfg)?;
    Ok(gt_term.add(teacher_term.scale(lambda_t)))
}

fn one_hot(labels: &[&Array2<u8>], classes: usize) -> Result<Array> {
    let (h, w) = labels[0].dim();
    let mut out = Array4::<f64>::zeros((labels.len(), classes, h, w));
    for (i, l) in labels.iter().enumerate() {
        if l.dim() != (h, w) {
            return Err(Error::Shape("semantic targets differ in size".into()));
        }
        for ((y, x), &c) in l.indexed_iter() {
            if c as usize >= classes {
                return Err(Error::invalid("class index", format!("{c} >= class count {classes}")));
            }
            out[[i, c as usize, y, x]] = 1.0;
        }
    }
    Ok(out.into_dyn())
}

fn check_semantic(y: Var<'_>, labels: &[&Array2<u8>]) -> Result<()> {
    let s = y.shape();
    if s.len() != 4 || s[0] != labels.len() || labels.iter().any(|l| l.dim() != (s[2], s[3])) {
        return Err(Error::Shape(format!("semantic prediction {s:?} vs {} targets", labels.len())));
    }
    Ok(())
}

/// Pixel-mean cross entropy of `y` (`[N,C,H,W]` probabilities), batch mean.
pub fn semantic_ce_var<'t>(y: Var<'t>, labels: &[&Array2<u8>]) -> Result<Var<'t>> {
    check_semantic(y, labels)?;
    let s = y.shape();
    let onehot = y.tape().constant(one_hot(labels, s[1])?);
    let n_pix = (s[0] * s[2] * s[3]) as f64;
    Ok(y.clamp(PROB_CLAMP, 1.0).ln().mul(onehot).sum_all().scale(-1.0 / n_pix))
}

/// Dice loss with squared denominators and `eps` added per pixel, averaged
/// over classes and batch.
pub fn dice_loss_var<'t>(y: Var<'t>, labels: &[&Array2<u8>], eps: f64) -> Result<Var<'t>> {
    check_semantic(y, labels)?;
    let s = y.shape();
    let tape = y.tape();
    let onehot_arr = one_hot(labels, s[1])?;
    let g_sq = onehot_arr.mapv(|v| v * v).sum_axis(Axis(3)).sum_axis(Axis(2));
    let onehot = tape.constant(onehot_arr);
    let yc = y.clamp(PROB_CLAMP, 1.0);
    let spatial = |v: Var<'t>| v.sum_axis(3, false).sum_axis(2, false);
    let num = spatial(yc.mul(onehot)).scale(2.0);
    let den = spatial(yc.sqr()).add(tape.constant(g_sq + eps * (s[2] * s[3]) as f64));
    let dice = num.div(den);
    Ok(dice.mean_all().neg().add_scalar(1.0))
}

pub fn semantic_loss_var<'t>(y: Var<'t>, labels: &[&Array2<u8>], cfg: &LossConfig) -> Result<Var<'t>> {
    Ok(semantic_ce_var(y, labels)?.add(dice_loss_var(y, labels, cfg.eps_dice)?))
}

/// Linearly decaying weight of the teacher terms.
pub fn lambda_t(epoch: usize, total_epochs: usize, lambda_t0: f64) -> Result<f64> {
    if total_epochs == 0 || epoch >= total_epochs {
        return Err(Error::invalid("epoch", format!("{epoch} outside [0, {total_epochs})")));
    }
    Ok(lambda_t0 * (1.0 - epoch as f64 / total_epochs as f64))
}

/// Stage-2 objective: `lambda_e * edge + semantic`.
pub fn total_loss(edge: f64, semantic: f64, lambda_e: f64) -> f64 {
    lambda_e * edge + semantic
}

pub fn total_loss_var<'t>(edge: Option<Var<'t>>, semantic: Option<Var<'t>>, lambda_e: f64) -> Option<Var<'t>> {
    match (edge, semantic) {
        (Some(e), Some(s)) => Some(e.scale(lambda_e).add(s)),
        (Some(e), None) => Some(e.scale(lambda_e)),
        (None, Some(s)) => Some(s),
        (None, None) => None,
    }
}

// ---- scalar conveniences on single maps ----

fn single_edge(m: &Array2<f64>) -> Array {
    let (h, w) = m.dim();
    m.clone().into_shape_with_order(IxDyn(&[1, 1, h, w])).unwrap()
}

fn single_semantic(y: &ndarray::Array3<f64>) -> Array {
    // [H, W, C] -> [1, C, H, W]
    y.view().permuted_axes([2, 0, 1]).insert_axis(Axis(0)).as_standard_layout().into_owned().into_dyn()
}

pub fn edge_bce(m: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    let target = EdgeTarget::binary(gt)?;
    let tape = Tape::new();
    Ok(edge_bce_var(tape.constant(single_edge(m)), &[&target])?.item())
}

pub fn edge_distance_loss(m: &Array2<f64>, gt: &Array2<f64>, eps: f64) -> Result<f64> {
    distance_map(gt)?;
    let target = EdgeTarget::binary(gt)?;
    let tape = Tape::new();
    Ok(edge_distance_var(tape.constant(single_edge(m)), &[&target], eps)?.item())
}

pub fn stage1_loss(m: &Array2<f64>, gt: &Array2<f64>, cfg: &LossConfig) -> Result<f64> {
    let target = EdgeTarget::binary(gt)?;
    let tape = Tape::new();
    Ok(stage1_loss_var(tape.constant(single_edge(m)), &[&target], cfg)?.item())
}

pub fn stage2_edge_loss(m_s: &Array2<f64>, gt: &Array2<f64>, m_t: &Array2<f64>, lambda_t: f64, cfg: &LossConfig) -> Result<f64> {
    let gt_target = EdgeTarget::binary(gt)?;
    let teacher = EdgeTarget::from_teacher(m_t, cfg.teacher_targets)?;
    let tape = Tape::new();
    Ok(stage2_edge_loss_var(tape.constant(single_edge(m_s)), &[&gt_target], &[&teacher], lambda_t, cfg)?.item())
}

/// `y` is `[H, W, C]` probabilities.
pub fn semantic_ce(y: &ndarray::Array3<f64>, labels: &Array2<u8>) -> Result<f64> {
    let tape = Tape::new();
    Ok(semantic_ce_var(tape.constant(single_semantic(y)), &[labels])?.item())
}

pub fn dice_loss(y: &ndarray::Array3<f64>, labels: &Array2<u8>, eps: f64) -> Result<f64> {
    let tape = Tape::new();
    Ok(dice_loss_var(tape.constant(single_semantic(y)), &[labels], eps)?.item())
}

pub fn semantic_loss(y: &ndarray::Array3<f64>, labels: &Array2<u8>, cfg: &LossConfig) -> Result<f64> {
    let tape = Tape::new();
    Ok(semantic_loss_var(tape.constant(single_semantic(y)), &[labels], cfg)?.item())
}
