//! Fusion blocks between the foundation-encoder branch and the edge-encoder
//! branch, plus the colour-entropy gate.
//!
//! Every block works on NCHW tensors. Multi-view features are stacked along
//! the batch axis as `[N * 7, C, H, W]` with the views of one sample adjacent.

use crate::nn::{self, Ctx, Init};
use crate::tensor::Var;
use crate::{Error, Result};

pub const VIEW_COUNT: usize = 7;

/// Fused feature and the raw per-view scores (before softmax).
pub struct MergeOutput<'t> {
    pub fused: Var<'t>,
    pub scores: Var<'t>,
}

pub fn init_merge(init: &mut Init<'_>, prefix: &str, channels: usize) {
    init.linear(&format!("{prefix}.score"), channels, 1);
}

fn split_views(feat: Var<'_>) -> Result<(usize, usize, usize, usize)> {
    let s = feat.shape();
    if s.len() != 4 || s[0] == 0 || !s[0].is_multiple_of(VIEW_COUNT) {
        return Err(Error::Shape(format!("multi-view feature {s:?}: leading axis must be a multiple of {VIEW_COUNT} views")));
    }
    Ok((s[0] / VIEW_COUNT, s[1], s[2], s[3]))
}

/// Softmax-weighted sum of the views. Scores come from global average
/// pooling followed by a 1x1 projection to one channel, shared by all views.
pub fn merge_forward<'t>(ctx: &Ctx<'t, '_>, prefix: &str, feat: Var<'t>) -> Result<MergeOutput<'t>> {
    let (n, c, h, w) = split_views(feat)?;
    let pooled = feat.mean_axis(3, false).mean_axis(2, false);
    let scores = nn::linear(ctx, &format!("{prefix}.score"), pooled).reshape(&[n, VIEW_COUNT]);
    let weights = scores.softmax(1).reshape(&[n, 1, VIEW_COUNT]);
    let fused = weights.matmul(feat.reshape(&[n, VIEW_COUNT, c * h * w])).reshape(&[n, c, h, w]);
    Ok(MergeOutput { fused, scores })
}

/// Plain average of the views; the fusion used when the merge block is off.
pub fn view_mean(feat: Var<'_>) -> Result<Var<'_>> {
    let (n, c, h, w) = split_views(feat)?;
    Ok(feat.reshape(&[n, VIEW_COUNT, c * h * w]).mean_axis(1, false).reshape(&[n, c, h, w]))
}

pub fn init_adaptation(init: &mut Init<'_>, prefix: &str, src_channels: usize, dst_channels: usize) {
    init.conv(&format!("{prefix}.point"), src_channels, dst_channels, 1);
    init.conv(&format!("{prefix}.spatial"), src_channels, dst_channels, 3);
    init.conv(&format!("{prefix}.fuse"), 2 * dst_channels, dst_channels, 1);
    nn::init_attention(init, &format!("{prefix}.attn"), dst_channels);
}

/// Maps `src` into the space of `dst` and adds it through cross-attention
/// with `dst` as the query: `dst + Attn(dst, S'', S'')`.
pub fn adaptation_forward<'t>(ctx: &Ctx<'t, '_>, prefix: &str, src: Var<'t>, dst: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let (ss, ds) = (src.shape(), dst.shape());
    if ss.len() != 4 || ds.len() != 4 || ss[0] != ds[0] {
        return Err(Error::Shape(format!("adaptation inputs {ss:?} and {ds:?}")));
    }
    if heads == 0 || ds[1] % heads != 0 {
        return Err(Error::invalid("heads", format!("{heads} does not divide {} channels", ds[1])));
    }
    let (h, w) = (ds[2], ds[3]);
    let pooled = nn::adaptive_avg_pool(src, h, w);
    let point = nn::conv(ctx, &format!("{prefix}.point"), pooled, 1, 0);
    let spatial = nn::conv(ctx, &format!("{prefix}.spatial"), pooled, 1, 1);
    let mapped = nn::conv(ctx, &format!("{prefix}.fuse"), Var::concat(&[point, spatial], 1), 1, 0);
    let attended = nn::attention(ctx, &format!("{prefix}.attn"), nn::to_tokens(dst), nn::to_tokens(mapped), heads);
    Ok(dst.add(nn::from_tokens(attended, h, w)))
}

pub fn init_adaptation_bypass(init: &mut Init<'_>, prefix: &str, src_channels: usize, dst_channels: usize) {
    init.conv(prefix, src_channels, dst_channels, 1);
}

/// Used when the adaptation block is off: `dst + Conv1x1(pool(src))`.
pub fn adaptation_bypass<'t>(ctx: &Ctx<'t, '_>, prefix: &str, src: Var<'t>, dst: Var<'t>) -> Var<'t> {
    let ds = dst.shape();
    let pooled = nn::adaptive_avg_pool(src, ds[2], ds[3]);
    dst.add(nn::conv(ctx, prefix, pooled, 1, 0))
}

pub fn init_refine(init: &mut Init<'_>, prefix: &str, shallow_channels: usize, deep_channels: usize) {
    init.conv(&format!("{prefix}.gate"), shallow_channels + deep_channels, deep_channels, 1);
}

/// `deep * Conv1x1(concat(pool(shallow), deep))`, no activation on the gate.
pub fn refine_forward<'t>(ctx: &Ctx<'t, '_>, prefix: &str, shallow: Var<'t>, deep: Var<'t>) -> Result<Var<'t>> {
    let (ss, ds) = (shallow.shape(), deep.shape());
    if ss.len() != 4 || ds.len() != 4 || ss[0] != ds[0] {
        return Err(Error::Shape(format!("refine inputs {ss:?} and {ds:?}")));
    }
    let pooled = nn::adaptive_avg_pool(shallow, ds[2], ds[3]);
    let gate = nn::conv(ctx, &format!("{prefix}.gate"), Var::concat(&[pooled, deep], 1), 1, 0);
    Ok(deep.mul(gate))
}

/// Downsampling ratio between an entropy stack of side `map` and a feature
/// map of side `feat`.
pub fn entropy_ratio(map: (usize, usize), feat: (usize, usize)) -> Result<usize> {
    let ok = feat.0 > 0 && feat.1 > 0 && map.0.is_multiple_of(feat.0) && map.1.is_multiple_of(feat.1) && map.0 / feat.0 == map.1 / feat.1;
    if !ok {
        return Err(Error::Shape(format!(
            "entropy map {}x{} is not an integer multiple of feature map {}x{} (ratio {:.3})",
            map.0,
            map.1,
            feat.0,
            feat.1,
            map.0 as f64 / feat.0.max(1) as f64
        )));
    }
    Ok(map.0 / feat.0)
}

pub fn init_entropy_block(init: &mut Init<'_>, prefix: &str, ratio: usize, hidden: usize, channels: usize) {
    init.conv(&format!("{prefix}.summary"), VIEW_COUNT * ratio * ratio, hidden, 3);
    init.zero_conv(&format!("{prefix}.gate"), hidden, channels, 1);
}

/// Gates `feat` with a convolutional summary of the entropy stack
/// (`[N, 7, H, W]`), reorganized pixel-wise to `feat`'s resolution.
///
/// Residual mode computes `feat * (1 + g)`; literal mode `feat * g`.
pub fn entropy_block_forward<'t>(ctx: &Ctx<'t, '_>, prefix: &str, feat: Var<'t>, entropy: Var<'t>, literal: bool) -> Result<Var<'t>> {
    let (fs, es) = (feat.shape(), entropy.shape());
    if fs.len() != 4 || es.len() != 4 || es[1] != VIEW_COUNT || es[0] != fs[0] {
        return Err(Error::Shape(format!("entropy block inputs {fs:?} and {es:?}")));
    }
    let r = entropy_ratio((es[2], es[3]), (fs[2], fs[3]))?;
    let packed = if r == 1 { entropy } else { nn::space_to_depth(entropy, r) };
    let hidden = nn::conv(ctx, &format!("{prefix}.summary"), packed, 1, 1).gelu();
    let gate = nn::conv(ctx, &format!("{prefix}.gate"), hidden, 1, 0);
    Ok(if literal { feat.mul(gate) } else { feat.mul(gate.add_scalar(1.0)) })
}
