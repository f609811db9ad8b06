//! Training configuration and its flat `key = value` file format.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Keys not present keep their defaults. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::losses::{LossConfig, TeacherTargets};
use crate::models::{Ablation, ModelConfig};
use crate::optim::{AdamConfig, CosineRestarts};
use crate::{Error, Result};

/// Environment variable naming the root for relative output paths.
pub const OUTPUT_ROOT_ENV: &str = "THINSEC_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const PAPER_PROFILE: &str = include_str!("../profiles/paper.cfg");
pub const DESK_PROFILE: &str = include_str!("../profiles/desk.cfg");

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps (0 = run all epochs).
    pub max_steps: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// First restart cycle in epochs (0 = one cycle over the whole run).
    pub restart_epochs: usize,
    pub restart_mult: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub threshold: f64,
    /// Initialize shared student parts from the teacher checkpoint.
    pub warm_start: bool,
    /// Accept ablation combinations outside the known table rows.
    pub free_form: bool,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub teacher_checkpoint: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            epochs: 5,
            batch_size: 4,
            max_steps: 0,
            lr: 2e-4,
            min_lr: 2e-6,
            restart_epochs: 0,
            restart_mult: 1.0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
            split_seed: 0,
            train_fraction: 0.8,
            threshold: 0.5,
            warm_start: true,
            free_form: false,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            teacher_checkpoint: None,
            prompts_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::invalid(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_list<const K: usize>(key: &str, value: &str) -> Result<[usize; K]> {
    let parts: Vec<usize> = value.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
    parts.try_into().map_err(|_| Error::invalid(key, format!("expected {K} comma-separated values")))
}

fn list_str(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let ab = &mut m.ablation;
        match key {
            "stage" => self.stage = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "restart_epochs" => self.restart_epochs = parse(key, value)?,
            "restart_mult" => self.restart_mult = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse(key, value)?,
            "lambda_e" => self.loss.lambda_e = parse(key, value)?,
            "lambda_t0" => self.loss.lambda_t0 = parse(key, value)?,
            "eps_distance" => self.loss.eps_distance = parse(key, value)?,
            "eps_dice" => self.loss.eps_dice = parse(key, value)?,
            "teacher_targets" => {
                self.loss.teacher_targets = match value {
                    "binarized" => TeacherTargets::Binarized,
                    "soft" => TeacherTargets::Soft,
                    _ => return Err(Error::invalid(key, format!("expected binarized or soft, got `{value}`"))),
                }
            }
            "tau" => m.tau = parse(key, value)?,
            "image_size" => m.image_size = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "stem_channels" => m.stem_channels = parse(key, value)?,
            "edge_channels" => m.edge_channels = parse_list(key, value)?,
            "decoder_channels" => m.decoder_channels = parse_list(key, value)?,
            "adapt_heads" => m.adapt_heads = parse(key, value)?,
            "entropy_hidden" => m.entropy_hidden = parse(key, value)?,
            "entropy_literal" => m.entropy_literal = parse_bool(key, value)?,
            "merge" => ab.merge = parse_bool(key, value)?,
            "adaptation" => ab.adaptation = parse_bool(key, value)?,
            "refine" => ab.refine = parse_bool(key, value)?,
            "entropy_block" => ab.entropy_block = parse_bool(key, value)?,
            "stage1_prompt" => ab.stage1_prompt = parse_bool(key, value)?,
            "loss_sem" => ab.loss_sem = parse_bool(key, value)?,
            "loss_edge" => ab.loss_edge = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "warm_start" => self.warm_start = parse_bool(key, value)?,
            "free_form" => self.free_form = parse_bool(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "teacher_checkpoint" => self.teacher_checkpoint = (!value.is_empty()).then(|| PathBuf::from(value)),
            "prompts_dir" => self.prompts_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::invalid(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::invalid(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_kv(&text)
    }

    pub fn paper() -> Self {
        Self::from_kv(PAPER_PROFILE).expect("shipped profile parses")
    }

    pub fn desk() -> Self {
        Self::from_kv(DESK_PROFILE).expect("shipped profile parses")
    }

    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let ab = &m.ablation;
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let rows: Vec<(&str, String)> = vec![
            ("stage", self.stage.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("lr", self.lr.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("restart_epochs", self.restart_epochs.to_string()),
            ("restart_mult", self.restart_mult.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("weight_decay", self.adam.weight_decay.to_string()),
            ("lambda_e", self.loss.lambda_e.to_string()),
            ("lambda_t0", self.loss.lambda_t0.to_string()),
            ("eps_distance", self.loss.eps_distance.to_string()),
            ("eps_dice", self.loss.eps_dice.to_string()),
            (
                "teacher_targets",
                match self.loss.teacher_targets {
                    TeacherTargets::Binarized => "binarized".into(),
                    TeacherTargets::Soft => "soft".into(),
                },
            ),
            ("tau", m.tau.to_string()),
            ("image_size", m.image_size.to_string()),
            ("patch_size", m.patch_size.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("depth", m.depth.to_string()),
            ("heads", m.heads.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("stem_channels", m.stem_channels.to_string()),
            ("edge_channels", list_str(&m.edge_channels)),
            ("decoder_channels", list_str(&m.decoder_channels)),
            ("adapt_heads", m.adapt_heads.to_string()),
            ("entropy_hidden", m.entropy_hidden.to_string()),
            ("entropy_literal", m.entropy_literal.to_string()),
            ("merge", ab.merge.to_string()),
            ("adaptation", ab.adaptation.to_string()),
            ("refine", ab.refine.to_string()),
            ("entropy_block", ab.entropy_block.to_string()),
            ("stage1_prompt", ab.stage1_prompt.to_string()),
            ("loss_sem", ab.loss_sem.to_string()),
            ("loss_edge", ab.loss_edge.to_string()),
            ("seed", self.seed.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("threshold", self.threshold.to_string()),
            ("warm_start", self.warm_start.to_string()),
            ("free_form", self.free_form.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("teacher_checkpoint", opt(&self.teacher_checkpoint)),
            ("prompts_dir", opt(&self.prompts_dir)),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex SHA-256 of the canonical `key = value` rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))
    }

    pub fn schedule(&self) -> CosineRestarts {
        let cycle = if self.restart_epochs == 0 { self.epochs } else { self.restart_epochs };
        CosineRestarts { base_lr: self.lr, min_lr: self.min_lr, cycle_epochs: cycle as f64, cycle_mult: self.restart_mult }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::invalid("stage", format!("must be 1 or 2, got {}", self.stage)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::invalid("lr", format!("need 0 <= min_lr <= lr and lr > 0 (lr {}, min_lr {})", self.lr, self.min_lr)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction", "must lie in (0, 1)"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("threshold", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::invalid("beta", "Adam betas must lie in [0, 1)"));
        }
        if self.adam.weight_decay < 0.0 || self.adam.eps <= 0.0 {
            return Err(Error::invalid("weight_decay", "weight decay must be >= 0 and adam_eps > 0"));
        }
        self.loss.validate()?;
        self.model.validate()?;
        if !self.free_form {
            lint_ablation(self.stage, &self.model.ablation)?;
        }
        Ok(())
    }

    /// `out_dir`, resolved under the output-root variable when relative.
    pub fn resolved_out_dir(&self) -> PathBuf {
        resolve_output(&self.out_dir)
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

pub fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        output_root().join(path)
    }
}

/// Stage-2 rows as `(loss_sem, loss_edge, entropy_block, stage1_prompt, adaptation)`.
pub const STAGE2_ROWS: [(bool, bool, bool, bool, bool); 6] = [
    (false, true, true, true, true),
    (true, false, true, true, true),
    (true, true, false, true, true),
    (true, true, true, false, true),
    (true, true, true, true, true),
    (true, true, true, true, false),
];

/// Every ablation configuration with a published row: all eight stage-1
/// merge/adaptation/refine combinations and the six stage-2 rows.
pub fn table_rows() -> Vec<(u8, Ablation)> {
    let mut rows = Vec::new();
    for bits in 0..8u8 {
        rows.push((
            1,
            Ablation { merge: bits & 1 != 0, adaptation: bits & 2 != 0, refine: bits & 4 != 0, ..Ablation::default() },
        ));
    }
    for (loss_sem, loss_edge, entropy_block, stage1_prompt, adaptation) in STAGE2_ROWS {
        rows.push((2, Ablation { loss_sem, loss_edge, entropy_block, stage1_prompt, adaptation, ..Ablation::default() }));
    }
    rows
}

pub fn lint_ablation(stage: u8, ab: &Ablation) -> Result<()> {
    if table_rows().iter().any(|(s, row)| *s == stage && row == ab) {
        return Ok(());
    }
    Err(Error::invalid(
        "ablation",
        format!("stage {stage} combination {ab:?} matches no known ablation row; pass free_form to allow it"),
    ))
}
