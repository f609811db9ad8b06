//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! runtime failures (IO, non-finite loss, ...). Relative output paths are
//! placed under `$THINSEC_OUT` (default `runs/`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use ndarray::Array3;

use thinsec_core::checkpoint::Checkpoint;
use thinsec_core::config::{resolve_output, TrainConfig};
use thinsec_core::entropy::{entropy_map, visualize};
use thinsec_core::grid::{read_grid, write_grid};
use thinsec_core::pipeline::{self, MetricsRequest, Sample};
use thinsec_core::synthdata::{self, ReadMode, SynthSpec};
use thinsec_core::{Error, Result};

#[derive(Parser)]
#[command(name = "thinsec", version, about = "Grain-edge and lithology segmentation for polarized thin-section stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Compute the color-entropy map of one RGB image.
    Entropy(EntropyArgs),
    /// Train the stage-1 teacher or the stage-2 student.
    Train(TrainArgs),
    /// Store frozen teacher edge maps for every group of a dataset.
    Prompts(PromptsArgs),
    /// Score a checkpoint (or the ground truth itself) on a dataset.
    Eval(EvalArgs),
    /// Write prediction images for one group.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_groups: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    n_grains: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Skip semantic masks.
    #[arg(long)]
    edge_only: bool,
}

#[derive(Args)]
struct EntropyArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = thinsec_core::entropy::DEFAULT_TAU)]
    tau: u32,
    /// Output file; a `.png` extension writes the 8-bit visualization,
    /// anything else the binary grid.
    #[arg(long)]
    out: PathBuf,
    /// Additional 8-bit visualization.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct AblationArgs {
    /// Accept flag combinations outside the known ablation rows.
    #[arg(long)]
    free_form: bool,
    #[arg(long)]
    no_merge: bool,
    #[arg(long)]
    no_adaptation: bool,
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    no_entropy_block: bool,
    #[arg(long)]
    no_stage1_prompt: bool,
    #[arg(long)]
    no_loss_sem: bool,
    #[arg(long)]
    no_loss_edge: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Which groups to train on.
    #[arg(long, value_enum, default_value_t = Split::Train)]
    split: Split,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(flatten)]
    ablation: AblationArgs,
}

#[derive(Args)]
struct PromptsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metrics {
    Edge,
    Semantic,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    /// Required unless `--oracle` is given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Metrics::Edge)]
    metrics: Metrics,
    #[arg(long, value_enum, default_value_t = Split::All)]
    split: Split,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Score the ground truth against itself.
    #[arg(long)]
    oracle: bool,
    /// Also write the report as `key = value` lines.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Group directory holding `angle_0.png` .. `angle_6.png`.
    #[arg(long)]
    group: PathBuf,
    /// Stored teacher map for this group.
    #[arg(long)]
    prompt: Option<PathBuf>,
    /// Stage-1 checkpoint used to compute the prompt on the fly.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage_error { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Entropy(a) => entropy(a),
        Command::Train(a) => train(a),
        Command::Prompts(a) => prompts(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.n_groups == 0 {
        return Err(Error::invalid("n-groups", "must be at least 1"));
    }
    let out = resolve_output(&a.out);
    for i in 0..a.n_groups {
        let spec = SynthSpec {
            image_size: a.size,
            n_grains: a.n_grains,
            noise_sigma: a.noise,
            ..SynthSpec::with_seed(a.seed.wrapping_add(i as u64))
        };
        let (group, edge, semantic) = synthdata::generate_group(&spec)?;
        synthdata::write_group(&group, &edge, (!a.edge_only).then_some(&semantic), &out)?;
    }
    info!("wrote {} groups to {}", a.n_groups, out.display());
    Ok(())
}

fn read_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).expect("RGB buffer matches dimensions"))
}

fn save_gray(map: &ndarray::Array2<u8>, path: &Path) -> Result<()> {
    create_parent(path)?;
    let (h, w) = map.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([map[[y as usize, x as usize]]]));
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e)),
        _ => Ok(()),
    }
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn entropy(a: EntropyArgs) -> Result<()> {
    let image = read_rgb(&a.input)?;
    let map = entropy_map(&image, a.tau)?;
    let out = resolve_output(&a.out);
    if is_png(&out) {
        save_gray(&visualize(&map.values), &out)?;
    } else {
        create_parent(&out)?;
        write_grid(&out, &map.values)?;
    }
    if let Some(p) = a.png {
        save_gray(&visualize(&map.values), &resolve_output(&p))?;
    }
    info!("entropy map of {} written to {}", a.input.display(), out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    cfg.stage = a.stage;
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::invalid("set", format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let ab = &mut cfg.model.ablation;
    let f = &a.ablation;
    for (off, flag) in [
        (f.no_merge, &mut ab.merge),
        (f.no_adaptation, &mut ab.adaptation),
        (f.no_refine, &mut ab.refine),
        (f.no_entropy_block, &mut ab.entropy_block),
        (f.no_stage1_prompt, &mut ab.stage1_prompt),
        (f.no_loss_sem, &mut ab.loss_sem),
        (f.no_loss_edge, &mut ab.loss_edge),
    ] {
        if off {
            *flag = false;
        }
    }
    cfg.free_form |= f.free_form;
    if let Some(d) = &a.data {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = &a.teacher {
        cfg.teacher_checkpoint = Some(t.clone());
    }
    if let Some(p) = &a.prompts {
        cfg.prompts_dir = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn select(data: &Path, split: Split, train_fraction: f64, seed: u64, mode: ReadMode) -> Result<Vec<Sample>> {
    let ids = synthdata::list_groups(data)?;
    if ids.is_empty() {
        return Err(Error::invalid("dataset", format!("no groups under {}", data.display())));
    }
    let ids = match split {
        Split::All => ids,
        _ => {
            let (train, test) = synthdata::split_dataset(&ids, train_fraction, seed)?;
            if split == Split::Train {
                train
            } else {
                test
            }
        }
    };
    pipeline::load_samples(data, &ids, mode)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let mode = if cfg.stage == 1 { ReadMode::EdgeOnly } else { ReadMode::Full };
    let samples = select(&cfg.data_dir, a.split, cfg.train_fraction, cfg.split_seed, mode)?;
    let out = cfg.resolved_out_dir();
    info!("stage {} on {} groups, config hash {}, output {}", cfg.stage, samples.len(), cfg.hash(), out.display());
    let report = if cfg.stage == 1 {
        pipeline::train_stage1(&cfg, &samples, Some(&out))?
    } else {
        let ab = cfg.model.ablation;
        let teacher = cfg.teacher_checkpoint.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
        if let Some(t) = &teacher {
            if t.meta.stage != 1 {
                return Err(Error::Mismatch(format!("teacher checkpoint is stage {}", t.meta.stage)));
            }
        }
        let prompts = if !ab.stage1_prompt {
            None
        } else if let Some(dir) = &cfg.prompts_dir {
            let ids: Vec<String> = samples.iter().map(|s| s.id().to_string()).collect();
            Some(pipeline::load_prompts(dir, &ids)?)
        } else if let Some(t) = &teacher {
            Some(pipeline::precompute_teacher_prompts(t, &samples, None)?)
        } else {
            return Err(Error::invalid("prompts", "stage 2 needs --prompts or --teacher unless --no-stage1-prompt is given"));
        };
        if cfg.warm_start && teacher.is_none() {
            return Err(Error::invalid("teacher", "warm_start needs a teacher checkpoint (set warm_start = false to start cold)"));
        }
        pipeline::train_stage2(&cfg, &samples, prompts.as_ref(), teacher.as_ref().map(|t| &t.params), Some(&out))?
    };
    let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    info!("{} steps, final epoch loss {last:.6}", report.steps.len());
    if let Some(p) = &report.checkpoint {
        println!("{}", p.display());
    }
    Ok(())
}

fn prompts(a: PromptsArgs) -> Result<()> {
    let teacher = Checkpoint::load(&a.checkpoint)?;
    let samples = pipeline::load_dataset(&a.data, ReadMode::EdgeOnly)?;
    let out = resolve_output(&a.out);
    let store = pipeline::precompute_teacher_prompts(&teacher, &samples, Some(&out))?;
    info!("stored {} teacher maps in {}", store.len(), out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let request = match a.metrics {
        Metrics::Edge => MetricsRequest::Edge,
        Metrics::Semantic => MetricsRequest::Semantic,
        Metrics::Both => MetricsRequest::Both,
    };
    let mode = if request == MetricsRequest::Edge { ReadMode::EdgeOnly } else { ReadMode::Full };
    let samples = select(&a.data, a.split, a.train_fraction, a.split_seed, mode)?;
    let report = if a.oracle {
        pipeline::evaluate_oracle(&samples, request, synthdata::CLASS_COUNT)?
    } else {
        let path = a.checkpoint.as_ref().ok_or_else(|| Error::invalid("checkpoint", "required unless --oracle is given"))?;
        let ckpt = Checkpoint::load(path)?;
        let stored = match &a.prompts {
            Some(dir) => {
                let ids: Vec<String> = samples.iter().map(|s| s.id().to_string()).collect();
                Some(pipeline::load_prompts(dir, &ids)?)
            }
            None => None,
        };
        pipeline::evaluate(&ckpt, &samples, stored.as_ref(), request)?
    };
    print!("{}", report.to_table());
    if let Some(p) = a.report {
        let p = resolve_output(&p);
        create_parent(&p)?;
        std::fs::write(&p, report.to_kv()).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let dir = a.group.canonicalize().map_err(|e| Error::io(format!("opening {}", a.group.display()), e))?;
    let (root, id) = match (dir.parent(), dir.file_name().and_then(|n| n.to_str())) {
        (Some(r), Some(id)) => (r.to_path_buf(), id.to_string()),
        _ => return Err(Error::invalid("group", format!("{} is not a group directory", a.group.display()))),
    };
    let (group, edge, semantic) = synthdata::read_group(&root, &id, ReadMode::EdgeOnly)?;
    let prompt = match (&a.prompt, &a.teacher) {
        (Some(p), _) => Some(read_grid(p)?),
        (None, Some(t)) => {
            let teacher = Checkpoint::load(t)?;
            let sample = Sample::new(group.clone(), edge, semantic);
            pipeline::teacher_predict(&teacher, std::slice::from_ref(&sample), 1)?.pop()
        }
        (None, None) => None,
    };
    let out = resolve_output(&a.out);
    let files = pipeline::predict(&ckpt, &group, prompt.as_ref(), &out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
