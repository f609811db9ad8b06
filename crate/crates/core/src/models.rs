//! Teacher (edge only) and student (edge + semantic) networks.
//!
//! Both are built from a small patch-transformer encoder applied to each of
//! the seven views, a convolutional edge encoder over the 21 stacked view
//! channels, the fusion blocks, and upsampling decoders.

use ndarray::{Array2, Array4, Axis, IxDyn};

use crate::blocks::{self, VIEW_COUNT};
use crate::entropy::group_entropy;
use crate::nn::{self, Ctx, Init, ParamStore};
use crate::synthdata::{PolarizedGroup, CLASS_COUNT};
use crate::tensor::{Array, Var};
use crate::{Error, Result};

/// Edge encoder resolution steps: the deep tap sits at `H / EDGE_STRIDE`.
pub const EDGE_STRIDE: usize = 16;
pub const PARAM_BUDGET: usize = 5_000_000;

/// Component switches. Everything on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub merge: bool,
    pub adaptation: bool,
    pub refine: bool,
    pub entropy_block: bool,
    pub stage1_prompt: bool,
    pub loss_sem: bool,
    pub loss_edge: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { merge: true, adaptation: true, refine: true, entropy_block: true, stage1_prompt: true, loss_sem: true, loss_edge: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Full-resolution stem width.
    pub stem_channels: usize,
    /// Widths of the four stride-2 stages.
    pub edge_channels: [usize; 4],
    /// Widths after the two transposed-conv stages of each decoder.
    pub decoder_channels: [usize; 2],
    pub adapt_heads: usize,
    pub entropy_hidden: usize,
    /// Gate as `feat * g` instead of `feat * (1 + g)`.
    pub entropy_literal: bool,
    pub tau: u32,
    pub class_count: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            stem_channels: 16,
            edge_channels: [16, 32, 48, 64],
            decoder_channels: [32, 16],
            adapt_heads: 1,
            entropy_hidden: 32,
            entropy_literal: false,
            tau: crate::entropy::DEFAULT_TAU,
            class_count: CLASS_COUNT,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s == 0 || !s.is_multiple_of(EDGE_STRIDE) {
            return Err(Error::invalid("image_size", format!("{s} must be a positive multiple of {EDGE_STRIDE}")));
        }
        if self.patch_size == 0 || !s.is_multiple_of(self.patch_size) {
            return Err(Error::invalid("patch_size", format!("{} must divide image_size {s}", self.patch_size)));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid("heads", format!("{} must divide embed_dim {}", self.heads, self.embed_dim)));
        }
        let deep = self.edge_channels[3];
        if self.adapt_heads == 0 || !self.edge_channels[0].is_multiple_of(self.adapt_heads) || !deep.is_multiple_of(self.adapt_heads) {
            return Err(Error::invalid("adapt_heads", format!("{} must divide the edge encoder widths", self.adapt_heads)));
        }
        if !(1..=7).contains(&self.tau) {
            return Err(Error::invalid("tau", format!("{} outside [1, 7]", self.tau)));
        }
        for (name, v) in [
            ("depth", self.depth),
            ("mlp_ratio", self.mlp_ratio),
            ("stem_channels", self.stem_channels),
            ("entropy_hidden", self.entropy_hidden),
            ("class_count", self.class_count),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.edge_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return Err(Error::invalid("channels", "widths must be positive"));
        }
        Ok(())
    }

    pub fn token_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn deep_side(&self) -> usize {
        self.image_size / EDGE_STRIDE
    }
}

/// Model inputs for a batch of `N` groups, all as NCHW arrays.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[N * 7, 3, H, W]`, views of one group adjacent.
    pub views: Array,
    /// `[N, 21, H, W]`.
    pub stacked: Array,
    /// `[N, 7, H, W]` colour-entropy stack.
    pub entropy: Option<Array>,
    /// `[N, 1, H, W]` teacher edge maps.
    pub prompts: Option<Array>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.stacked.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.stacked.shape();
        (s[2], s[3])
    }

    pub fn from_groups(groups: &[&PolarizedGroup]) -> Result<Self> {
        let Some(first) = groups.first() else {
            return Err(Error::invalid("batch", "no groups"));
        };
        let (h, w) = (first.height(), first.width());
        let n = groups.len();
        let mut views = Array4::<f64>::zeros((n * VIEW_COUNT, 3, h, w));
        let mut stacked = Array4::<f64>::zeros((n, 3 * VIEW_COUNT, h, w));
        for (i, g) in groups.iter().enumerate() {
            if (g.height(), g.width()) != (h, w) {
                return Err(Error::Shape(format!("group {} is {}x{}, batch is {h}x{w}", g.group_id, g.height(), g.width())));
            }
            for k in 0..VIEW_COUNT {
                for ch in 0..3 {
                    let plane = g.views.index_axis(Axis(0), k).index_axis(Axis(2), ch).to_owned();
                    views.index_axis_mut(Axis(0), i * VIEW_COUNT + k).index_axis_mut(Axis(0), ch).assign(&plane);
                    stacked.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 3 * k + ch).assign(&plane);
                }
            }
        }
        Ok(Self { views: views.into_dyn(), stacked: stacked.into_dyn(), entropy: None, prompts: None })
    }

    pub fn with_entropy_maps(mut self, maps: &[Array]) -> Result<Self> {
        let (h, w) = self.size();
        if maps.len() != self.len() || maps.iter().any(|m| m.shape() != [VIEW_COUNT, h, w]) {
            return Err(Error::Shape(format!("expected {} entropy stacks of 7x{h}x{w}", self.len())));
        }
        let parts: Vec<_> = maps.iter().map(|m| m.view().insert_axis(Axis(0))).collect();
        self.entropy = Some(ndarray::concatenate(Axis(0), &parts).expect("shapes checked"));
        Ok(self)
    }

    pub fn with_prompts(mut self, prompts: &[&Array2<f64>]) -> Result<Self> {
        let (h, w) = self.size();
        if prompts.len() != self.len() || prompts.iter().any(|p| p.dim() != (h, w)) {
            return Err(Error::Shape(format!("expected {} prompts of {h}x{w}", self.len())));
        }
        let mut out = Array4::<f64>::zeros((prompts.len(), 1, h, w));
        for (i, p) in prompts.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(p);
        }
        self.prompts = Some(out.into_dyn());
        Ok(self)
    }
}

/// Entropy stack of one group as `[7, H, W]`.
pub fn entropy_stack(group: &PolarizedGroup, tau: u32) -> Result<Array> {
    let e = group_entropy(group, tau)?;
    let (v, h, w, _) = e.dim();
    Ok(e.into_shape_with_order((v, h, w)).expect("single channel").into_dyn())
}

fn check_input(cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    let (h, w) = batch.size();
    if h % EDGE_STRIDE != 0 || w % EDGE_STRIDE != 0 || h % cfg.patch_size != 0 || w % cfg.patch_size != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} must be divisible by {EDGE_STRIDE} and by patch size {}",
            cfg.patch_size
        )));
    }
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Shape(format!("input {h}x{w} does not match model image_size {}", cfg.image_size)));
    }
    Ok(())
}

// ---- patch transformer ----

pub fn init_vit(init: &mut Init<'_>, prefix: &str, cfg: &ModelConfig) {
    let (d, p, t) = (cfg.embed_dim, cfg.patch_size, cfg.token_side());
    init.conv(&format!("{prefix}.patch"), 3, d, p);
    init.weight(&format!("{prefix}.pos"), &[1, d, t, t]);
    for b in 0..cfg.depth {
        let blk = format!("{prefix}.block{b}");
        init.layer_norm(&format!("{blk}.norm1"), d);
        nn::init_attention(init, &format!("{blk}.attn"), d);
        init.layer_norm(&format!("{blk}.norm2"), d);
        init.linear(&format!("{blk}.mlp1"), d, d * cfg.mlp_ratio);
        init.linear(&format!("{blk}.mlp2"), d * cfg.mlp_ratio, d);
    }
}

/// Shallow tap (patch embedding plus position embedding) and deep tap
/// (final block output), each `[N * 7, D, H / p, W / p]`.
pub fn vit_forward<'t>(ctx: &Ctx<'t, '_>, prefix: &str, cfg: &ModelConfig, views: Var<'t>) -> (Var<'t>, Var<'t>) {
    let p = cfg.patch_size;
    let shallow = nn::conv(ctx, &format!("{prefix}.patch"), views, p, 0).add(ctx.p(&format!("{prefix}.pos")));
    let s = shallow.shape();
    let mut x = nn::to_tokens(shallow);
    for b in 0..cfg.depth {
        let blk = format!("{prefix}.block{b}");
        let normed = nn::layer_norm(ctx, &format!("{blk}.norm1"), x);
        x = x.add(nn::attention(ctx, &format!("{blk}.attn"), normed, normed, cfg.heads));
        let normed = nn::layer_norm(ctx, &format!("{blk}.norm2"), x);
        let hidden = nn::linear(ctx, &format!("{blk}.mlp1"), normed).gelu();
        x = x.add(nn::linear(ctx, &format!("{blk}.mlp2"), hidden));
    }
    (shallow, nn::from_tokens(x, s[2], s[3]))
}

// ---- convolutional edge encoder ----

pub fn init_edge_encoder(init: &mut Init<'_>, prefix: &str, cfg: &ModelConfig) {
    init.conv(&format!("{prefix}.stem"), 3 * VIEW_COUNT, cfg.stem_channels, 3);
    let mut c_in = cfg.stem_channels;
    for (i, &c) in cfg.edge_channels.iter().enumerate() {
        init.conv(&format!("{prefix}.stage{i}.down"), c_in, c, 3);
        init.conv(&format!("{prefix}.stage{i}.conv"), c, c, 3);
        c_in = c;
    }
}

/// Edge encoder taps.
pub struct EdgeFeatures<'t> {
    /// Full-resolution stem output.
    pub stem: Var<'t>,
    /// First stage, `H / 2`.
    pub shallow: Var<'t>,
    /// Last stage, `H / 16`.
    pub deep: Var<'t>,
}

pub fn edge_encoder_forward<'t>(ctx: &Ctx<'t, '_>, prefix: &str, stacked: Var<'t>) -> EdgeFeatures<'t> {
    let stem = nn::conv(ctx, &format!("{prefix}.stem"), stacked, 1, 1).gelu();
    let mut x = stem;
    let mut taps = Vec::with_capacity(4);
    for i in 0..4 {
        x = nn::conv(ctx, &format!("{prefix}.stage{i}.down"), x, 2, 1).gelu();
        x = nn::conv(ctx, &format!("{prefix}.stage{i}.conv"), x, 1, 1).gelu();
        taps.push(x);
    }
    EdgeFeatures { stem, shallow: taps[0], deep: taps[3] }
}

// ---- decoders ----

pub fn init_decoder(init: &mut Init<'_>, prefix: &str, cfg: &ModelConfig, out_channels: usize) {
    let [c1, c2] = cfg.decoder_channels;
    init.conv_transpose2x2(&format!("{prefix}.up1"), cfg.edge_channels[3], c1);
    init.conv_transpose2x2(&format!("{prefix}.up2"), c1, c2);
    init.conv(&format!("{prefix}.fuse"), c2 + cfg.stem_channels, c2, 3);
    init.zero_conv(&format!("{prefix}.head"), c2, out_channels, 1);
}

/// Two x2 transposed-conv stages from `H / 16` to `H / 4`, bilinear
/// upsampling to `H`, fusion with the full-resolution stem features, and a
/// 1x1 head. Returns logits.
pub fn decoder_forward<'t>(ctx: &Ctx<'t, '_>, prefix: &str, deep: Var<'t>, stem: Var<'t>) -> Var<'t> {
    let s = stem.shape();
    let x = nn::conv_transpose2x2(ctx, &format!("{prefix}.up1"), deep).gelu();
    let x = nn::conv_transpose2x2(ctx, &format!("{prefix}.up2"), x).gelu();
    let x = nn::bilinear_resize(x, s[2], s[3]);
    let x = nn::conv(ctx, &format!("{prefix}.fuse"), Var::concat(&[x, stem], 1), 1, 1).gelu();
    nn::conv(ctx, &format!("{prefix}.head"), x, 1, 0)
}

// ---- prompt encoder ----

pub const PROMPT_WIDTHS: [usize; 2] = [4, 16];

pub fn init_prompt_encoder(init: &mut Init<'_>, prefix: &str, cfg: &ModelConfig) {
    init.conv(&format!("{prefix}.down1"), 1, PROMPT_WIDTHS[0], 2);
    init.conv(&format!("{prefix}.down2"), PROMPT_WIDTHS[0], PROMPT_WIDTHS[1], 2);
    init.conv(&format!("{prefix}.proj"), PROMPT_WIDTHS[1], cfg.edge_channels[3], 1);
}

/// Dense mask prompt: pooled to `4 * deep_side`, two 2x2 stride-2 convs and a
/// 1x1 projection to the deep edge-feature width, at `H / 16`.
pub fn prompt_encode<'t>(ctx: &Ctx<'t, '_>, prefix: &str, mask: Var<'t>, deep_side: usize) -> Var<'t> {
    let x = nn::adaptive_avg_pool(mask, 4 * deep_side, 4 * deep_side);
    let x = nn::conv(ctx, &format!("{prefix}.down1"), x, 2, 0).gelu();
    let x = nn::conv(ctx, &format!("{prefix}.down2"), x, 2, 0).gelu();
    nn::conv(ctx, &format!("{prefix}.proj"), x, 1, 0)
}

// ---- teacher ----

pub fn init_teacher(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed);
    let (d, [c_s, _, _, c_d]) = (cfg.embed_dim, cfg.edge_channels);
    init_vit(&mut init, "vit", cfg);
    init_edge_encoder(&mut init, "edge", cfg);
    blocks::init_merge(&mut init, "merge_s", d);
    blocks::init_merge(&mut init, "merge_d", d);
    blocks::init_adaptation(&mut init, "adapt_s", d, c_s);
    blocks::init_adaptation(&mut init, "adapt_d", d, c_d);
    blocks::init_adaptation_bypass(&mut init, "bypass_s", d, c_s);
    blocks::init_adaptation_bypass(&mut init, "bypass_d", d, c_d);
    blocks::init_refine(&mut init, "refine", c_s, c_d);
    init_decoder(&mut init, "dec", cfg, 1);
    Ok(store)
}

fn fuse_views<'t>(ctx: &Ctx<'t, '_>, prefix: &str, feat: Var<'t>, on: bool) -> Result<Var<'t>> {
    if on {
        Ok(blocks::merge_forward(ctx, prefix, feat)?.fused)
    } else {
        blocks::view_mean(feat)
    }
}

fn adapt<'t>(ctx: &Ctx<'t, '_>, cfg: &ModelConfig, names: (&str, &str), src: Var<'t>, dst: Var<'t>) -> Result<Var<'t>> {
    if cfg.ablation.adaptation {
        blocks::adaptation_forward(ctx, names.0, src, dst, cfg.adapt_heads)
    } else {
        Ok(blocks::adaptation_bypass(ctx, names.1, src, dst))
    }
}

/// Teacher edge probabilities `[N, 1, H, W]`.
pub fn teacher_forward<'t>(ctx: &Ctx<'t, '_>, cfg: &ModelConfig, batch: &Batch) -> Result<Var<'t>> {
    check_input(cfg, batch)?;
    let ab = cfg.ablation;
    let (s_s, s_d) = vit_forward(ctx, "vit", cfg, ctx.constant(batch.views.clone()));
    let e = edge_encoder_forward(ctx, "edge", ctx.constant(batch.stacked.clone()));
    let merged_d = fuse_views(ctx, "merge_d", s_d, ab.merge)?;
    let adapted_d = adapt(ctx, cfg, ("adapt_d", "bypass_d"), merged_d, e.deep)?;
    let refined = if ab.refine {
        let merged_s = fuse_views(ctx, "merge_s", s_s, ab.merge)?;
        let adapted_s = adapt(ctx, cfg, ("adapt_s", "bypass_s"), merged_s, e.shallow)?;
        blocks::refine_forward(ctx, "refine", adapted_s, adapted_d)?
    } else {
        adapted_d
    };
    Ok(decoder_forward(ctx, "dec", refined, e.stem).sigmoid())
}

// ---- student ----

pub fn init_student(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed);
    let (d, c_d) = (cfg.embed_dim, cfg.edge_channels[3]);
    init_vit(&mut init, "vit", cfg);
    init_edge_encoder(&mut init, "edge", cfg);
    blocks::init_entropy_block(&mut init, "entropy", EDGE_STRIDE, cfg.entropy_hidden, c_d);
    init_prompt_encoder(&mut init, "prompt", cfg);
    init_decoder(&mut init, "edge_dec", cfg, 1);
    blocks::init_merge(&mut init, "merge_d", d);
    blocks::init_adaptation(&mut init, "adapt_sem", d, c_d);
    blocks::init_adaptation_bypass(&mut init, "bypass_sem", d, c_d);
    init_decoder(&mut init, "sem_dec", cfg, cfg.class_count);
    Ok(store)
}

/// Copies every teacher parameter whose name also exists in the student
/// (shared encoders and the deep merge/adaptation blocks). Returns the
/// number of tensors copied.
pub fn warm_start_student(student: &mut ParamStore, teacher: &ParamStore) -> usize {
    let mut copied = 0;
    for (name, value) in teacher.iter() {
        if let Some(slot) = student.get_mut(name) {
            if slot.shape() == value.shape() {
                *slot = value.clone();
                copied += 1;
            }
        }
    }
    for (from, to) in [("adapt_d.", "adapt_sem."), ("bypass_d.", "bypass_sem.")] {
        for (name, value) in teacher.with_prefix(from) {
            let target = format!("{to}{}", &name[from.len()..]);
            if let Some(slot) = student.get_mut(&target) {
                if slot.shape() == value.shape() {
                    *slot = value.clone();
                    copied += 1;
                }
            }
        }
    }
    copied
}

pub struct StudentOutput<'t> {
    /// `[N, 1, H, W]` edge probabilities.
    pub edge: Var<'t>,
    /// `[N, C, H, W]` class probabilities.
    pub semantic: Var<'t>,
}

pub fn student_forward<'t>(ctx: &Ctx<'t, '_>, cfg: &ModelConfig, batch: &Batch) -> Result<StudentOutput<'t>> {
    check_input(cfg, batch)?;
    let ab = cfg.ablation;
    let (n, (h, w)) = (batch.len(), batch.size());
    let e = edge_encoder_forward(ctx, "edge", ctx.constant(batch.stacked.clone()));

    let deep = if ab.entropy_block {
        let ent = batch.entropy.as_ref().ok_or_else(|| Error::invalid("batch", "entropy maps required by the entropy block"))?;
        blocks::entropy_block_forward(ctx, "entropy", e.deep, ctx.constant(ent.clone()), cfg.entropy_literal)?
    } else {
        e.deep
    };
    let prompt = if ab.stage1_prompt {
        batch.prompts.clone().ok_or_else(|| Error::invalid("batch", "teacher prompts required"))?
    } else {
        Array::from_elem(IxDyn(&[n, 1, h, w]), 0.5)
    };
    let prompted = deep.add(prompt_encode(ctx, "prompt", ctx.constant(prompt), cfg.deep_side()));
    let edge = decoder_forward(ctx, "edge_dec", prompted, e.stem).sigmoid();

    let (_, s_d) = vit_forward(ctx, "vit", cfg, ctx.constant(batch.views.clone()));
    let merged = fuse_views(ctx, "merge_d", s_d, ab.merge)?;
    let sem_feat = adapt(ctx, cfg, ("adapt_sem", "bypass_sem"), merged, deep)?;
    let semantic = decoder_forward(ctx, "sem_dec", sem_feat, e.stem).softmax(1);
    Ok(StudentOutput { edge, semantic })
}

/// Parameter names reached by the teacher under `ablation`.
pub fn teacher_active_prefixes(ab: &Ablation) -> Vec<&'static str> {
    let mut v = vec!["vit.", "edge.", "dec."];
    if ab.merge {
        v.push("merge_d.");
        if ab.refine {
            v.push("merge_s.");
        }
    }
    match (ab.adaptation, ab.refine) {
        (true, true) => v.extend(["adapt_d.", "adapt_s."]),
        (true, false) => v.push("adapt_d."),
        (false, true) => v.extend(["bypass_d.", "bypass_s."]),
        (false, false) => v.push("bypass_d."),
    }
    if ab.refine {
        v.push("refine.");
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_group, SynthSpec};
    use crate::tensor::Tape;

    fn small_cfg() -> ModelConfig {
        ModelConfig { image_size: 32, ..ModelConfig::default() }
    }

    fn batch(cfg: &ModelConfig, n: usize) -> Batch {
        let groups: Vec<_> = (0..n)
            .map(|i| generate_group(&SynthSpec { image_size: cfg.image_size, n_grains: 6, ..SynthSpec::with_seed(i as u64) }).unwrap().0)
            .collect();
        let refs: Vec<_> = groups.iter().collect();
        let ent: Vec<_> = groups.iter().map(|g| entropy_stack(g, cfg.tau).unwrap()).collect();
        let prompts: Vec<_> = (0..n).map(|_| Array2::from_elem((cfg.image_size, cfg.image_size), 0.3)).collect();
        let prefs: Vec<_> = prompts.iter().collect();
        Batch::from_groups(&refs).unwrap().with_entropy_maps(&ent).unwrap().with_prompts(&prefs).unwrap()
    }

    #[test]
    fn teacher_shapes_and_range() {
        let cfg = small_cfg();
        let params = init_teacher(&cfg, 1).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, false);
        let m = teacher_forward(&ctx, &cfg, &batch(&cfg, 2)).unwrap().value();
        assert_eq!(m.shape(), &[2, 1, 32, 32]);
        // Zero-initialized head.
        assert!(m.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn student_shapes() {
        let cfg = small_cfg();
        let params = init_student(&cfg, 2).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, false);
        let out = student_forward(&ctx, &cfg, &batch(&cfg, 1)).unwrap();
        assert_eq!(out.edge.shape(), vec![1, 1, 32, 32]);
        let y = out.semantic.value();
        assert_eq!(y.shape(), &[1, 4, 32, 32]);
        let sums = y.sum_axis(Axis(1));
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-9));
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let cfg = ModelConfig { image_size: 40, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = small_cfg();
        let params = init_teacher(&cfg, 1).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, false);
        let b = batch(&ModelConfig { image_size: 64, ..ModelConfig::default() }, 1);
        assert!(matches!(teacher_forward(&ctx, &cfg, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_budget() {
        let cfg = ModelConfig::default();
        let t = init_teacher(&cfg, 0).unwrap().num_scalars();
        let s = init_student(&cfg, 0).unwrap().num_scalars();
        assert!(t < PARAM_BUDGET && s < PARAM_BUDGET, "teacher {t}, student {s}");
    }

    #[test]
    fn warm_start_copies_shared_parts() {
        let cfg = small_cfg();
        let teacher = init_teacher(&cfg, 1).unwrap();
        let mut student = init_student(&cfg, 2).unwrap();
        let n = warm_start_student(&mut student, &teacher);
        assert!(n > 0);
        assert_eq!(student.get("edge.stem.weight"), teacher.get("edge.stem.weight"));
        assert_eq!(student.get("adapt_sem.attn.q.weight"), teacher.get("adapt_d.attn.q.weight"));
    }
}
