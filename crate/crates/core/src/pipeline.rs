//! Two-stage training, teacher prompt precomputation, evaluation and
//! prediction.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Metadata};
use crate::config::TrainConfig;
use crate::grid::{read_grid, write_grid};
use crate::losses::{self, EdgeTarget};
use crate::metrics::{argmax_classes, binarize, Confusion, EdgeCounts, EdgeScores, SemanticScores};
use crate::models::{self, Batch};
use crate::nn::{Ctx, ParamStore};
use crate::optim::Adam;
use crate::synthdata::{self, EdgeMask, PolarizedGroup, ReadMode, SemanticMask, SEMANTIC_PNG_STEP};
use crate::tensor::{Array, Tape};
use crate::{Error, Result};

pub const TRAIN_LOG: &str = "train.log";
pub const PROMPT_SUFFIX: &str = "grid";

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub group: PolarizedGroup,
    pub edge: Array2<f64>,
    pub semantic: Option<Array2<u8>>,
}

impl Sample {
    pub fn new(group: PolarizedGroup, edge: EdgeMask, semantic: Option<SemanticMask>) -> Self {
        Self { group, edge: edge.values, semantic: semantic.map(|s| s.to_index()) }
    }

    pub fn id(&self) -> &str {
        &self.group.group_id
    }
}

pub fn load_samples(root: &Path, ids: &[String], mode: ReadMode) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|id| {
            let (g, e, s) = synthdata::read_group(root, id, mode)?;
            Ok(Sample::new(g, e, s))
        })
        .collect()
}

pub fn load_dataset(root: &Path, mode: ReadMode) -> Result<Vec<Sample>> {
    let ids = synthdata::list_groups(root)?;
    if ids.is_empty() {
        return Err(Error::invalid("dataset", format!("no groups under {}", root.display())));
    }
    load_samples(root, &ids, mode)
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub lambda_t: f64,
    pub loss: f64,
    pub edge: f64,
    pub semantic: f64,
}

impl StepLog {
    pub fn line(&self, stage: u8) -> String {
        format!(
            "stage={stage} epoch={} step={} lr={:.6e} lambda_t={:.6} loss={:.9e} edge={:.9e} sem={:.9e}",
            self.epoch, self.step, self.lr, self.lambda_t, self.loss, self.edge, self.semantic
        )
    }
}

pub struct TrainReport {
    pub params: ParamStore,
    pub steps: Vec<StepLog>,
    /// Mean step loss of each finished epoch.
    pub epoch_losses: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

struct RunLog {
    file: Option<File>,
}

impl RunLog {
    fn open(out: Option<&Path>) -> Result<Self> {
        let file = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
                let path = dir.join(TRAIN_LOG);
                Some(File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?)
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        log::debug!("{text}");
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{text}").map_err(|e| Error::io("writing training log", e))?;
        }
        Ok(())
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn batch_of(samples: &[Sample], idx: &[usize]) -> Result<Batch> {
    let groups: Vec<&PolarizedGroup> = idx.iter().map(|&i| &samples[i].group).collect();
    Batch::from_groups(&groups)
}

fn check_samples(cfg: &TrainConfig, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("dataset", "no training samples"));
    }
    let s = cfg.model.image_size;
    for x in samples {
        if (x.group.height(), x.group.width()) != (s, s) {
            return Err(Error::Shape(format!(
                "group {} is {}x{}, configuration expects {s}x{s}",
                x.id(),
                x.group.height(),
                x.group.width()
            )));
        }
    }
    Ok(())
}

/// Called after every epoch with the epoch index and current parameters;
/// returning `true` ends training early.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &ParamStore) -> Result<bool>;

/// Drives the epoch/step loop shared by both stages. `step_fn` builds the
/// loss on a fresh tape and returns `(loss, edge, semantic, lambda_t)` values plus the
/// named gradients.
fn run_training(
    cfg: &TrainConfig,
    n: usize,
    out: Option<&Path>,
    mut hook: Option<EpochHook<'_>>,
    mut params: ParamStore,
    mut step_fn: impl FnMut(&ParamStore, &[usize], usize) -> Result<(f64, f64, f64, f64, BTreeMap<String, Array>)>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut log = RunLog::open(out)?;
    log.line(&format!("config_hash={}", cfg.hash()))?;
    let schedule = cfg.schedule();
    let mut adam = Adam::new(cfg.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut steps = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut global = 0usize;
    let mut checkpoint = None;
    'epochs: for epoch in 0..cfg.epochs {
        let plan = batches(n, cfg.batch_size, &mut rng);
        let per_epoch = plan.len();
        let mut sum = 0.0;
        let mut count = 0;
        for (b, idx) in plan.iter().enumerate() {
            if cfg.max_steps > 0 && global >= cfg.max_steps {
                break 'epochs;
            }
            let lr = schedule.lr_at(epoch as f64 + b as f64 / per_epoch as f64);
            let (loss, edge, semantic, lambda_t, grads) = step_fn(&params, idx, epoch)?;
            if !loss.is_finite() {
                log.line(&format!("non-finite loss at epoch={epoch} step={global}"))?;
                return Err(Error::NonFiniteLoss { epoch, step: global });
            }
            adam.step(&mut params, &grads, lr)?;
            let rec = StepLog { epoch, step: global, lr, lambda_t, loss, edge, semantic };
            log.line(&rec.line(cfg.stage))?;
            steps.push(rec);
            sum += loss;
            count += 1;
            global += 1;
        }
        if count > 0 {
            epoch_losses.push(sum / count as f64);
            log.line(&format!("stage={} epoch={epoch} mean_loss={:.9e}", cfg.stage, sum / count as f64))?;
        }
        if let Some(dir) = out {
            let path = dir.join(format!("stage{}.ckpt", cfg.stage));
            Checkpoint { meta: Metadata::new(cfg, epoch), params: params.clone() }.save(&path)?;
            checkpoint = Some(path);
        }
        if let Some(h) = hook.as_mut() {
            if h(epoch, &params)? {
                log.line(&format!("stage={} stopped after epoch={epoch}", cfg.stage))?;
                break;
            }
        }
    }
    Ok(TrainReport { params, steps, epoch_losses, checkpoint })
}

/// Stage 1: trains the teacher on edge targets.
pub fn train_stage1(cfg: &TrainConfig, samples: &[Sample], out: Option<&Path>) -> Result<TrainReport> {
    train_stage1_until(cfg, samples, out, None)
}

/// [`train_stage1`] with an epoch hook that may stop training early.
pub fn train_stage1_until(cfg: &TrainConfig, samples: &[Sample], out: Option<&Path>, hook: Option<EpochHook<'_>>) -> Result<TrainReport> {
    if cfg.stage != 1 {
        return Err(Error::invalid("stage", "train_stage1 needs stage = 1"));
    }
    cfg.validate()?;
    check_samples(cfg, samples)?;
    let targets: Vec<EdgeTarget> = samples.iter().map(|s| EdgeTarget::binary(&s.edge)).collect::<Result<_>>()?;
    let params = models::init_teacher(&cfg.model, cfg.seed)?;
    run_training(cfg, samples.len(), out, hook, params, |params, idx, _epoch| {
        let batch = batch_of(samples, idx)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, true);
        let m = models::teacher_forward(&ctx, &cfg.model, &batch)?;
        let t: Vec<&EdgeTarget> = idx.iter().map(|&i| &targets[i]).collect();
        let loss = losses::stage1_loss_var(m, &t, &cfg.loss)?;
        let value = loss.item();
        let grads = tape.backward(loss).into_named();
        Ok((value, value, 0.0, 0.0, grads))
    })
}

/// Teacher edge maps for `samples` computed with frozen parameters.
pub fn teacher_predict(teacher: &Checkpoint, samples: &[Sample], batch_size: usize) -> Result<Vec<Array2<f64>>> {
    let cfg = teacher.meta.train_config()?;
    if teacher.meta.stage != 1 {
        return Err(Error::Mismatch(format!("expected a stage-1 checkpoint, found stage {}", teacher.meta.stage)));
    }
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = batch_of(samples, chunk)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &teacher.params, false);
        let m = models::teacher_forward(&ctx, &cfg.model, &batch)?.value();
        for i in 0..chunk.len() {
            out.push(m.index_axis(Axis(0), i).index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("2-D map"));
        }
    }
    Ok(out)
}

pub fn prompt_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{PROMPT_SUFFIX}"))
}

/// Runs the frozen teacher over every sample and, if `dir` is given,
/// stores each map as `<group_id>.grid`.
pub fn precompute_teacher_prompts(teacher: &Checkpoint, samples: &[Sample], dir: Option<&Path>) -> Result<BTreeMap<String, Array2<f64>>> {
    let maps = teacher_predict(teacher, samples, 4)?;
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut store = BTreeMap::new();
    for (s, m) in samples.iter().zip(maps) {
        if let Some(d) = dir {
            write_grid(&prompt_path(d, s.id()), &m)?;
        }
        store.insert(s.id().to_string(), m);
    }
    Ok(store)
}

pub fn load_prompts(dir: &Path, ids: &[String]) -> Result<BTreeMap<String, Array2<f64>>> {
    ids.iter().map(|id| Ok((id.clone(), read_grid(&prompt_path(dir, id))?))).collect()
}

fn entropy_stacks(cfg: &TrainConfig, samples: &[Sample]) -> Result<Option<Vec<Array>>> {
    if !cfg.model.ablation.entropy_block {
        return Ok(None);
    }
    samples.iter().map(|s| models::entropy_stack(&s.group, cfg.model.tau)).collect::<Result<Vec<_>>>().map(Some)
}

fn student_batch(
    cfg: &TrainConfig,
    samples: &[Sample],
    idx: &[usize],
    entropy: &Option<Vec<Array>>,
    prompts: Option<&BTreeMap<String, Array2<f64>>>,
) -> Result<Batch> {
    let mut batch = batch_of(samples, idx)?;
    if let Some(e) = entropy {
        let maps: Vec<Array> = idx.iter().map(|&i| e[i].clone()).collect();
        batch = batch.with_entropy_maps(&maps)?;
    }
    if cfg.model.ablation.stage1_prompt {
        let store = prompts.ok_or_else(|| Error::invalid("prompts", "teacher prompts required"))?;
        let maps = idx
            .iter()
            .map(|&i| store.get(samples[i].id()).ok_or_else(|| Error::invalid("prompts", format!("no teacher prompt for {}", samples[i].id()))))
            .collect::<Result<Vec<_>>>()?;
        batch = batch.with_prompts(&maps)?;
    }
    Ok(batch)
}

/// Stage 2: trains the student. `teacher` seeds the shared parts when
/// `warm_start` is set; `prompts` must cover every sample unless the
/// stage-1 prompt is switched off.
pub fn train_stage2(
    cfg: &TrainConfig,
    samples: &[Sample],
    prompts: Option<&BTreeMap<String, Array2<f64>>>,
    teacher: Option<&ParamStore>,
    out: Option<&Path>,
) -> Result<TrainReport> {
    train_stage2_until(cfg, samples, prompts, teacher, out, None)
}

/// [`train_stage2`] with an epoch hook that may stop training early.
pub fn train_stage2_until(
    cfg: &TrainConfig,
    samples: &[Sample],
    prompts: Option<&BTreeMap<String, Array2<f64>>>,
    teacher: Option<&ParamStore>,
    out: Option<&Path>,
    hook: Option<EpochHook<'_>>,
) -> Result<TrainReport> {
    if cfg.stage != 2 {
        return Err(Error::invalid("stage", "train_stage2 needs stage = 2"));
    }
    cfg.validate()?;
    check_samples(cfg, samples)?;
    let ab = cfg.model.ablation;
    let labels: Vec<&Array2<u8>> = samples
        .iter()
        .map(|s| s.semantic.as_ref().ok_or_else(|| Error::invalid("dataset", format!("group {} has no semantic mask", s.id()))))
        .collect::<Result<_>>()?;
    let gt: Vec<EdgeTarget> = samples.iter().map(|s| EdgeTarget::binary(&s.edge)).collect::<Result<_>>()?;
    let teacher_targets: Option<Vec<EdgeTarget>> = if ab.stage1_prompt {
        let store = prompts.ok_or_else(|| Error::invalid("prompts", "teacher prompts required"))?;
        Some(
            samples
                .iter()
                .map(|s| {
                    let m = store.get(s.id()).ok_or_else(|| Error::invalid("prompts", format!("no teacher prompt for {}", s.id())))?;
                    EdgeTarget::from_teacher(m, cfg.loss.teacher_targets)
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let entropy = entropy_stacks(cfg, samples)?;
    let mut params = models::init_student(&cfg.model, cfg.seed)?;
    if cfg.warm_start {
        if let Some(t) = teacher {
            let n = models::warm_start_student(&mut params, t);
            log::info!("copied {n} teacher tensors into the student");
        }
    }
    run_training(cfg, samples.len(), out, hook, params, |params, idx, epoch| {
        let batch = student_batch(cfg, samples, idx, &entropy, prompts)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, true);
        let outp = models::student_forward(&ctx, &cfg.model, &batch)?;
        let lambda_t = losses::lambda_t(epoch, cfg.epochs, cfg.loss.lambda_t0)?;
        let g: Vec<&EdgeTarget> = idx.iter().map(|&i| &gt[i]).collect();
        let edge = if ab.loss_edge {
            Some(match &teacher_targets {
                Some(tt) => {
                    let t: Vec<&EdgeTarget> = idx.iter().map(|&i| &tt[i]).collect();
                    losses::stage2_edge_loss_var(outp.edge, &g, &t, lambda_t, &cfg.loss)?
                }
                None => losses::stage1_loss_var(outp.edge, &g, &cfg.loss)?,
            })
        } else {
            None
        };
        let sem = if ab.loss_sem {
            let l: Vec<&Array2<u8>> = idx.iter().map(|&i| labels[i]).collect();
            Some(losses::semantic_loss_var(outp.semantic, &l, &cfg.loss)?)
        } else {
            None
        };
        let (ev, sv) = (edge.map(|v| v.item()).unwrap_or(0.0), sem.map(|v| v.item()).unwrap_or(0.0));
        let total = losses::total_loss_var(edge, sem, cfg.loss.lambda_e).ok_or_else(|| Error::invalid("ablation", "both losses are switched off"))?;
        let value = total.item();
        let grads = tape.backward(total).into_named();
        Ok((value, ev, sv, lambda_t, grads))
    })
}

/// Model outputs for one sample.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub edge: Array2<f64>,
    /// `[C, H, W]` class probabilities (student only).
    pub semantic: Option<Array3<f64>>,
}

/// Runs the checkpoint's model over `samples`. Stage-2 checkpoints need
/// `prompts` unless the stage-1 prompt is off.
pub fn predict_samples(ckpt: &Checkpoint, samples: &[Sample], prompts: Option<&BTreeMap<String, Array2<f64>>>) -> Result<Vec<Prediction>> {
    let cfg = ckpt.meta.train_config()?;
    if ckpt.meta.stage == 1 {
        return Ok(teacher_predict(ckpt, samples, cfg.batch_size)?.into_iter().map(|edge| Prediction { edge, semantic: None }).collect());
    }
    let entropy = entropy_stacks(&cfg, samples)?;
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let batch = student_batch(&cfg, samples, chunk, &entropy, prompts)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &ckpt.params, false);
        let o = models::student_forward(&ctx, &cfg.model, &batch)?;
        let (e, y) = (o.edge.value(), o.semantic.value());
        for i in 0..chunk.len() {
            out.push(Prediction {
                edge: e.index_axis(Axis(0), i).index_axis(Axis(0), 0).to_owned().into_dimensionality().expect("2-D map"),
                semantic: Some(y.index_axis(Axis(0), i).to_owned().into_dimensionality().expect("3-D map")),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsRequest {
    Edge,
    Semantic,
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub edge: Option<EdgeScores>,
    pub semantic: Option<SemanticScores>,
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        if let Some(e) = &self.edge {
            for line in e.to_kv().lines() {
                s += &format!("edge.{line}\n");
            }
        }
        if let Some(m) = &self.semantic {
            for line in m.to_kv().lines() {
                s += &format!("semantic.{line}\n");
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        if let Some(e) = &self.edge {
            s += "Edge\n";
            s += &e.to_table();
        }
        if let Some(m) = &self.semantic {
            s += "Semantic\n";
            s += &m.to_table();
        }
        s
    }
}

/// Aggregates dataset-level counts of `preds` against the samples' ground
/// truth.
pub fn score_predictions(preds: &[Prediction], samples: &[Sample], request: MetricsRequest, threshold: f64, classes: usize) -> Result<EvalReport> {
    if preds.len() != samples.len() {
        return Err(Error::Mismatch(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let want_edge = request != MetricsRequest::Semantic;
    let want_sem = request != MetricsRequest::Edge;
    let mut counts = EdgeCounts::default();
    let mut confusion = Confusion::new(classes);
    for (p, s) in preds.iter().zip(samples) {
        if want_edge {
            counts.merge(&EdgeCounts::from_masks(&binarize(&p.edge, threshold)?, &s.edge)?);
        }
        if want_sem {
            let y = p.semantic.as_ref().ok_or_else(|| Error::Mismatch("semantic metrics need a stage-2 checkpoint".into()))?;
            let gt = s.semantic.as_ref().ok_or_else(|| Error::invalid("dataset", format!("group {} has no semantic mask", s.id())))?;
            confusion.add(&argmax_classes(&y.view()), gt)?;
        }
    }
    Ok(EvalReport { edge: want_edge.then(|| counts.scores()), semantic: want_sem.then(|| confusion.scores()) })
}

pub fn evaluate(
    ckpt: &Checkpoint,
    samples: &[Sample],
    prompts: Option<&BTreeMap<String, Array2<f64>>>,
    request: MetricsRequest,
) -> Result<EvalReport> {
    if ckpt.meta.stage == 1 && request != MetricsRequest::Edge {
        return Err(Error::Mismatch("a stage-1 checkpoint only supports edge metrics".into()));
    }
    let cfg = ckpt.meta.train_config()?;
    let preds = predict_samples(ckpt, samples, prompts)?;
    score_predictions(&preds, samples, request, cfg.threshold, cfg.model.class_count)
}

/// Ground truth scored against itself.
pub fn evaluate_oracle(samples: &[Sample], request: MetricsRequest, classes: usize) -> Result<EvalReport> {
    let preds: Vec<Prediction> = samples
        .iter()
        .map(|s| Prediction {
            edge: s.edge.clone(),
            semantic: s.semantic.as_ref().map(|l| {
                Array3::from_shape_fn((classes, l.nrows(), l.ncols()), |(c, y, x)| if l[[y, x]] as usize == c { 1.0 } else { 0.0 })
            }),
        })
        .collect();
    score_predictions(&preds, samples, request, 0.5, classes)
}

pub const PREDICTION_FILES: [&str; 4] = ["edge_pred.png", "edge_bin.png", "semantic_pred.png", "overlay.png"];

const TINTS: [[f64; 3]; 4] = [[0.0, 0.0, 0.0], [0.95, 0.55, 0.2], [0.35, 0.75, 0.3], [0.3, 0.5, 0.95]];
const TINT_ALPHA: f64 = 0.35;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_png(img: image::DynamicImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Writes the four prediction images for one group into `out`.
pub fn write_prediction(group: &PolarizedGroup, pred: &Prediction, threshold: f64, out: &Path) -> Result<Vec<PathBuf>> {
    let y = pred.semantic.as_ref().ok_or_else(|| Error::Mismatch("prediction needs a stage-2 checkpoint".into()))?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let (h, w) = pred.edge.dim();
    let prob_u8 = pred.edge.mapv(to_u8);
    let bin = binarize(&pred.edge, threshold)?;
    let classes = argmax_classes(&y.view());
    let gray = |a: &Array2<u8>| image::GrayImage::from_fn(w as u32, h as u32, |x, r| image::Luma([a[[r as usize, x as usize]]]));
    let base = group.view_u8(0);
    let overlay = image::RgbImage::from_fn(w as u32, h as u32, |x, r| {
        let (r, x) = (r as usize, x as usize);
        if bin[[r, x]] > 0.5 {
            return image::Rgb([255, 0, 0]);
        }
        let c = classes[[r, x]] as usize;
        let mut px = [0u8; 3];
        for ch in 0..3 {
            let v = base[[r, x, ch]] as f64 / 255.0;
            let t = if c == 0 { v } else { (1.0 - TINT_ALPHA) * v + TINT_ALPHA * TINTS[c.min(3)][ch] };
            px[ch] = to_u8(t);
        }
        image::Rgb(px)
    });
    let paths: Vec<PathBuf> = PREDICTION_FILES.iter().map(|f| out.join(f)).collect();
    save_png(gray(&prob_u8).into(), &paths[0])?;
    save_png(gray(&bin.mapv(|v| if v > 0.5 { 255 } else { 0 })).into(), &paths[1])?;
    save_png(gray(&classes.mapv(|c| c * SEMANTIC_PNG_STEP)).into(), &paths[2])?;
    save_png(overlay.into(), &paths[3])?;
    Ok(paths)
}

/// Runs a stage-2 checkpoint on one group and writes the prediction images.
pub fn predict(ckpt: &Checkpoint, group: &PolarizedGroup, prompt: Option<&Array2<f64>>, out: &Path) -> Result<Vec<PathBuf>> {
    if ckpt.meta.stage != 2 {
        return Err(Error::Mismatch("prediction needs a stage-2 checkpoint".into()));
    }
    let cfg = ckpt.meta.train_config()?;
    let (h, w) = (group.height(), group.width());
    let sample = Sample { group: group.clone(), edge: Array2::zeros((h, w)), semantic: None };
    let mut store = BTreeMap::new();
    if let Some(p) = prompt {
        store.insert(group.group_id.clone(), p.clone());
    }
    let preds = predict_samples(ckpt, std::slice::from_ref(&sample), prompt.map(|_| &store))?;
    write_prediction(group, &preds[0], cfg.threshold, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_group, SynthSpec};

    fn samples(n: usize, size: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let (g, e, s) = generate_group(&SynthSpec { image_size: size, n_grains: 8, ..SynthSpec::with_seed(100 + i as u64) }).unwrap();
                Sample::new(g, e, Some(s))
            })
            .collect()
    }

    fn tiny(stage: u8) -> TrainConfig {
        let mut c = TrainConfig { stage, epochs: 1, batch_size: 2, ..TrainConfig::default() };
        c.model.image_size = 32;
        c
    }

    #[test]
    fn oracle_scores_are_perfect() {
        let s = samples(2, 32);
        let r = evaluate_oracle(&s, MetricsRequest::Both, 4).unwrap();
        assert!(r.to_kv().contains("edge.F1 = 1.000000"));
        assert_eq!(r.edge.unwrap().values(), [1.0; 5]);
        let sem = r.semantic.unwrap();
        assert_eq!((sem.miou, sem.accuracy), (1.0, 1.0));
    }

    #[test]
    fn stage1_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = samples(2, 32);
        let report = train_stage1(&tiny(1), &s, Some(dir.path())).unwrap();
        assert_eq!(report.steps.len(), 1);
        let ck = Checkpoint::load(report.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(ck.params, report.params);
        let log = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert!(log.contains("stage=1 epoch=0 step=0"));
        assert!(evaluate(&ck, &s, None, MetricsRequest::Semantic).is_err());
        let store = precompute_teacher_prompts(&ck, &s, Some(&dir.path().join("prompts"))).unwrap();
        assert_eq!(store.len(), 2);
        let ids: Vec<String> = s.iter().map(|x| x.id().to_string()).collect();
        assert_eq!(load_prompts(&dir.path().join("prompts"), &ids).unwrap(), store);
    }

    #[test]
    fn stage2_predict_writes_four_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = samples(2, 32);
        let prompts: BTreeMap<String, Array2<f64>> = s.iter().map(|x| (x.id().to_string(), x.edge.clone())).collect();
        let report = train_stage2(&tiny(2), &s, Some(&prompts), None, Some(dir.path())).unwrap();
        let ck = Checkpoint::load(report.checkpoint.as_ref().unwrap()).unwrap();
        let out = dir.path().join("pred");
        let files = predict(&ck, &s[0].group, prompts.get(s[0].id()), &out).unwrap();
        assert_eq!(files.len(), 4);
        let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        let mut expected: Vec<String> = PREDICTION_FILES.iter().map(|s| s.to_string()).collect();
        expected.sort();
        assert_eq!(names, expected);
    }
}
