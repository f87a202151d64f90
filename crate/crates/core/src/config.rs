//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys and
//! unparsable values are collected and reported together, as are
//! cross-field constraint violations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{hex_digest, SynthParams};
use crate::error::{Error, Result};
use crate::objective::{AgclParams, GclParams, LossVariant, NoiseMode};
use crate::vit::{PromptConfig, VitConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    /// Balanced and instance losses summed before one update.
    Combined,
    /// One update per batch stream.
    TwoStep,
}

impl FromStr for StepMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "combined" => Ok(StepMode::Combined),
            "two-step" => Ok(StepMode::TwoStep),
            other => Err(format!("expected `combined` or `two-step`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for StepMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepMode::Combined => "combined",
            StepMode::TwoStep => "two-step",
        })
    }
}

/// Loss of the linear-probe baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeLoss {
    /// Cross-entropy on `α`-scaled cosine scores.
    CrossEntropy,
    /// The same margin-adjusted asymmetric loss as phase 1.
    Agcl,
}

impl FromStr for ProbeLoss {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ce" => Ok(ProbeLoss::CrossEntropy),
            "agcl" => Ok(ProbeLoss::Agcl),
            other => Err(format!("expected `ce` or `agcl`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for ProbeLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProbeLoss::CrossEntropy => "ce",
            ProbeLoss::Agcl => "agcl",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    Euclidean,
    Cosine,
}

impl FromStr for Distance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "cosine" => Ok(Distance::Cosine),
            other => Err(format!("expected `euclidean` or `cosine`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Distance::Euclidean => "euclidean",
            Distance::Cosine => "cosine",
        })
    }
}

fn parse_noise(s: &str) -> std::result::Result<NoiseMode, String> {
    match s {
        "per-class" => Ok(NoiseMode::PerClass),
        "per-sample" => Ok(NoiseMode::PerSample),
        other => Err(format!("expected `per-class` or `per-sample`, got `{other}`")),
    }
}

fn noise_name(n: NoiseMode) -> &'static str {
    match n {
        NoiseMode::PerClass => "per-class",
        NoiseMode::PerSample => "per-sample",
    }
}

/// Whether the pretraining set renders the target classes or a separate
/// family of classes from the same generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainClasses {
    Shared,
    Disjoint,
}

impl FromStr for PretrainClasses {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shared" => Ok(PretrainClasses::Shared),
            "disjoint" => Ok(PretrainClasses::Disjoint),
            other => Err(format!("expected `shared` or `disjoint`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for PretrainClasses {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PretrainClasses::Shared => "shared",
            PretrainClasses::Disjoint => "disjoint",
        })
    }
}

/// Optimisation settings of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSchedule {
    pub epochs: usize,
    pub lr_per_256: f64,
    pub warmup_epochs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,

    pub model: VitConfig,
    pub prompt: PromptConfig,

    pub loss_alpha: f64,
    pub loss_lambda_pos: f64,
    pub loss_lambda_neg: f64,
    pub loss_variant: LossVariant,
    pub loss_noise: NoiseMode,
    pub loss_noise_std: f64,

    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pretrain: StageSchedule,
    pub probe: StageSchedule,
    pub probe_loss: ProbeLoss,
    pub phase1: StageSchedule,
    pub phase2: StageSchedule,
    pub joint: StageSchedule,
    pub eta: f64,
    pub step_mode: StepMode,
    pub select_best: bool,

    pub classes: usize,
    pub n_max: usize,
    pub imbalance: f64,
    pub pool_per_class: usize,
    pub pretrain_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub synth_jitter: f64,
    pub synth_noise: f64,
    pub domain: u64,
    pub synth_shift: f64,
    pub pretrain_classes: PretrainClasses,
    pub mixup_alpha: f64,
    pub mixup_balanced: bool,
    pub mixup_instance: bool,
    pub augment_pad: usize,
    /// `None` selects the default thresholds for the training counts.
    pub many_above: Option<usize>,
    pub few_below: Option<usize>,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,

    pub knn_k: usize,
    pub distance: Distance,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = VitConfig::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            prompt: PromptConfig {
                shared_len: 10,
                pool_size: 20,
                group_len: 10,
                split_depth: model.depth / 2,
                top_k: 2,
            },
            model,
            loss_alpha: 16.0,
            loss_lambda_pos: 0.0,
            loss_lambda_neg: 4.0,
            loss_variant: LossVariant::NegatedLiteral,
            loss_noise: NoiseMode::PerClass,
            loss_noise_std: 1.0,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 1e-4,
            pretrain: StageSchedule {
                epochs: 30,
                lr_per_256: 0.2,
                warmup_epochs: 2.0,
            },
            probe: StageSchedule {
                epochs: 40,
                lr_per_256: 0.002,
                warmup_epochs: 5.0,
            },
            probe_loss: ProbeLoss::CrossEntropy,
            phase1: StageSchedule {
                epochs: 40,
                lr_per_256: 0.002,
                warmup_epochs: 5.0,
            },
            phase2: StageSchedule {
                epochs: 40,
                lr_per_256: 0.002,
                warmup_epochs: 5.0,
            },
            joint: StageSchedule {
                epochs: 80,
                lr_per_256: 0.002,
                warmup_epochs: 5.0,
            },
            eta: 0.5,
            step_mode: StepMode::Combined,
            select_best: true,
            classes: 20,
            n_max: 500,
            imbalance: 100.0,
            pool_per_class: 500,
            pretrain_per_class: 200,
            val_per_class: 20,
            test_per_class: 50,
            synth_jitter: 1.0,
            synth_noise: 0.05,
            domain: 1,
            synth_shift: 1.0,
            pretrain_classes: PretrainClasses::Disjoint,
            mixup_alpha: 0.2,
            mixup_balanced: true,
            mixup_instance: true,
            augment_pad: 0,
            many_above: None,
            few_below: None,
            train_path: None,
            val_path: None,
            test_path: None,
            knn_k: 20,
            distance: Distance::Euclidean,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("{key}: cannot parse `{value}`: {e}"))
}

fn parse_opt_usize(key: &str, value: &str) -> std::result::Result<Option<usize>, String> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() || value == "none" {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn opt_usize(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".into(), |n| n.to_string())
}

fn opt_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        macro_rules! stage {
            ($s:ident, $field:ident) => {
                self.$s.$field = parse(key, v)?
            };
        }
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "model.image_side" => self.model.image_side = parse(key, v)?,
            "model.patch" => self.model.patch = parse(key, v)?,
            "model.dim" => self.model.dim = parse(key, v)?,
            "model.depth" => self.model.depth = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.ffn_dim" => self.model.ffn_dim = parse(key, v)?,
            "prompt.shared_len" => self.prompt.shared_len = parse(key, v)?,
            "prompt.pool_size" => self.prompt.pool_size = parse(key, v)?,
            "prompt.group_len" => self.prompt.group_len = parse(key, v)?,
            "prompt.split_depth" => self.prompt.split_depth = parse(key, v)?,
            "prompt.top_k" => self.prompt.top_k = parse(key, v)?,
            "loss.alpha" => self.loss_alpha = parse(key, v)?,
            "loss.lambda_pos" => self.loss_lambda_pos = parse(key, v)?,
            "loss.lambda_neg" => self.loss_lambda_neg = parse(key, v)?,
            "loss.variant" => self.loss_variant = parse(key, v)?,
            "loss.noise_std" => self.loss_noise_std = parse(key, v)?,
            "loss.noise" => self.loss_noise = parse_noise(v).map_err(|e| format!("{key}: {e}"))?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.momentum" => self.momentum = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.eta" => self.eta = parse(key, v)?,
            "train.step_mode" => self.step_mode = parse(key, v)?,
            "train.select_best" => self.select_best = parse(key, v)?,
            "pretrain.epochs" => stage!(pretrain, epochs),
            "pretrain.lr_per_256" => stage!(pretrain, lr_per_256),
            "pretrain.warmup_epochs" => stage!(pretrain, warmup_epochs),
            "probe.epochs" => stage!(probe, epochs),
            "probe.lr_per_256" => stage!(probe, lr_per_256),
            "probe.warmup_epochs" => stage!(probe, warmup_epochs),
            "probe.loss" => self.probe_loss = parse(key, v)?,
            "phase1.epochs" => stage!(phase1, epochs),
            "phase1.lr_per_256" => stage!(phase1, lr_per_256),
            "phase1.warmup_epochs" => stage!(phase1, warmup_epochs),
            "phase2.epochs" => stage!(phase2, epochs),
            "phase2.lr_per_256" => stage!(phase2, lr_per_256),
            "phase2.warmup_epochs" => stage!(phase2, warmup_epochs),
            "joint.epochs" => stage!(joint, epochs),
            "joint.lr_per_256" => stage!(joint, lr_per_256),
            "joint.warmup_epochs" => stage!(joint, warmup_epochs),
            "data.classes" => self.classes = parse(key, v)?,
            "data.n_max" => self.n_max = parse(key, v)?,
            "data.imbalance" => self.imbalance = parse(key, v)?,
            "data.pool_per_class" => self.pool_per_class = parse(key, v)?,
            "data.pretrain_per_class" => self.pretrain_per_class = parse(key, v)?,
            "data.val_per_class" => self.val_per_class = parse(key, v)?,
            "data.test_per_class" => self.test_per_class = parse(key, v)?,
            "data.jitter" => self.synth_jitter = parse(key, v)?,
            "data.noise" => self.synth_noise = parse(key, v)?,
            "data.domain" => self.domain = parse(key, v)?,
            "data.shift" => self.synth_shift = parse(key, v)?,
            "data.pretrain_classes" => self.pretrain_classes = parse(key, v)?,
            "data.mixup_alpha" => self.mixup_alpha = parse(key, v)?,
            "data.mixup_balanced" => self.mixup_balanced = parse(key, v)?,
            "data.mixup_instance" => self.mixup_instance = parse(key, v)?,
            "data.augment_pad" => self.augment_pad = parse(key, v)?,
            "data.many_above" => self.many_above = parse_opt_usize(key, v)?,
            "data.few_below" => self.few_below = parse_opt_usize(key, v)?,
            "data.train" => self.train_path = parse_opt_path(v),
            "data.val" => self.val_path = parse_opt_path(v),
            "data.test" => self.test_path = parse_opt_path(v),
            "analysis.knn_k" => self.knn_k = parse(key, v)?,
            "analysis.distance" => self.distance = parse(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its current value, in the documented order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = |x: &dyn ToString| x.to_string();
        vec![
            ("seed", s(&self.seed)),
            ("out", self.out.display().to_string()),
            ("model.image_side", s(&self.model.image_side)),
            ("model.patch", s(&self.model.patch)),
            ("model.dim", s(&self.model.dim)),
            ("model.depth", s(&self.model.depth)),
            ("model.heads", s(&self.model.heads)),
            ("model.ffn_dim", s(&self.model.ffn_dim)),
            ("prompt.shared_len", s(&self.prompt.shared_len)),
            ("prompt.pool_size", s(&self.prompt.pool_size)),
            ("prompt.group_len", s(&self.prompt.group_len)),
            ("prompt.split_depth", s(&self.prompt.split_depth)),
            ("prompt.top_k", s(&self.prompt.top_k)),
            ("loss.alpha", s(&self.loss_alpha)),
            ("loss.lambda_pos", s(&self.loss_lambda_pos)),
            ("loss.lambda_neg", s(&self.loss_lambda_neg)),
            ("loss.variant", s(&self.loss_variant)),
            ("loss.noise", noise_name(self.loss_noise).into()),
            ("loss.noise_std", s(&self.loss_noise_std)),
            ("train.batch_size", s(&self.batch_size)),
            ("train.momentum", s(&self.momentum)),
            ("train.weight_decay", s(&self.weight_decay)),
            ("train.eta", s(&self.eta)),
            ("train.step_mode", s(&self.step_mode)),
            ("train.select_best", s(&self.select_best)),
            ("pretrain.epochs", s(&self.pretrain.epochs)),
            ("pretrain.lr_per_256", s(&self.pretrain.lr_per_256)),
            ("pretrain.warmup_epochs", s(&self.pretrain.warmup_epochs)),
            ("probe.epochs", s(&self.probe.epochs)),
            ("probe.lr_per_256", s(&self.probe.lr_per_256)),
            ("probe.warmup_epochs", s(&self.probe.warmup_epochs)),
            ("probe.loss", s(&self.probe_loss)),
            ("phase1.epochs", s(&self.phase1.epochs)),
            ("phase1.lr_per_256", s(&self.phase1.lr_per_256)),
            ("phase1.warmup_epochs", s(&self.phase1.warmup_epochs)),
            ("phase2.epochs", s(&self.phase2.epochs)),
            ("phase2.lr_per_256", s(&self.phase2.lr_per_256)),
            ("phase2.warmup_epochs", s(&self.phase2.warmup_epochs)),
            ("joint.epochs", s(&self.joint.epochs)),
            ("joint.lr_per_256", s(&self.joint.lr_per_256)),
            ("joint.warmup_epochs", s(&self.joint.warmup_epochs)),
            ("data.classes", s(&self.classes)),
            ("data.n_max", s(&self.n_max)),
            ("data.imbalance", s(&self.imbalance)),
            ("data.pool_per_class", s(&self.pool_per_class)),
            ("data.pretrain_per_class", s(&self.pretrain_per_class)),
            ("data.val_per_class", s(&self.val_per_class)),
            ("data.test_per_class", s(&self.test_per_class)),
            ("data.jitter", s(&self.synth_jitter)),
            ("data.noise", s(&self.synth_noise)),
            ("data.domain", s(&self.domain)),
            ("data.shift", s(&self.synth_shift)),
            ("data.pretrain_classes", s(&self.pretrain_classes)),
            ("data.mixup_alpha", s(&self.mixup_alpha)),
            ("data.mixup_balanced", s(&self.mixup_balanced)),
            ("data.mixup_instance", s(&self.mixup_instance)),
            ("data.augment_pad", s(&self.augment_pad)),
            ("data.many_above", opt_usize(self.many_above)),
            ("data.few_below", opt_usize(self.few_below)),
            ("data.train", opt_path(&self.train_path)),
            ("data.val", opt_path(&self.val_path)),
            ("data.test", opt_path(&self.test_path)),
            ("analysis.knn_k", s(&self.knn_k)),
            ("analysis.distance", s(&self.distance)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Applies a config text on top of `self`. Every bad line is reported.
    pub fn apply_text(&mut self, text: &str) -> std::result::Result<(), Vec<String>> {
        let mut problems = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        problems.push(format!("line {}: {e}", i + 1));
                    }
                }
                None => problems.push(format!("line {}: expected `key = value`, got `{line}`", i + 1)),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut problems = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if let Err(p) = cfg.apply_text(&text) {
                problems.extend(p.into_iter().map(|p| format!("{}: {p}", path.display())));
            }
        }
        for (k, v) in overrides {
            if let Err(e) = cfg.set(k, v) {
                problems.push(format!("--{k}: {e}"));
            }
        }
        problems.extend(cfg.validate());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    /// All constraint violations.
    pub fn validate(&self) -> Vec<String> {
        let mut p = self.model.validate();
        p.extend(self.prompt.validate(self.model.depth));
        let mut need = |ok: bool, msg: String| {
            if !ok {
                p.push(msg);
            }
        };
        need(self.batch_size >= 1, "train.batch_size must be >= 1".into());
        need((0.0..1.0).contains(&self.momentum), format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        need(self.weight_decay >= 0.0, "train.weight_decay must be >= 0".into());
        need(self.eta >= 0.0, "train.eta must be >= 0".into());
        need(self.synth_shift >= 0.0 && self.synth_shift.is_finite(), "data.shift must be finite and >= 0".into());
        need(self.loss_alpha > 0.0, "loss.alpha must be > 0".into());
        need(self.loss_noise_std >= 0.0 && self.loss_noise_std.is_finite(), "loss.noise_std must be finite and >= 0".into());
        need(self.loss_lambda_pos >= 0.0, "loss.lambda_pos must be >= 0".into());
        need(self.loss_lambda_neg >= 0.0, "loss.lambda_neg must be >= 0".into());
        for (name, s) in [
            ("pretrain", &self.pretrain),
            ("probe", &self.probe),
            ("phase1", &self.phase1),
            ("phase2", &self.phase2),
            ("joint", &self.joint),
        ] {
            need(s.lr_per_256 > 0.0, format!("{name}.lr_per_256 must be > 0"));
            need(s.warmup_epochs >= 0.0, format!("{name}.warmup_epochs must be >= 0"));
            need(
                s.epochs == 0 || s.warmup_epochs < s.epochs as f64,
                format!("{name}.warmup_epochs ({}) must be below {name}.epochs ({})", s.warmup_epochs, s.epochs),
            );
        }
        need(self.classes >= 2, "data.classes must be >= 2".into());
        need(self.classes <= 256, "data.classes must fit a label byte (<= 256)".into());
        need(self.imbalance >= 1.0, "data.imbalance must be >= 1".into());
        need(self.n_max >= 1, "data.n_max must be >= 1".into());
        need(
            self.pool_per_class >= self.n_max,
            format!("data.pool_per_class ({}) must be >= data.n_max ({})", self.pool_per_class, self.n_max),
        );
        need(self.mixup_alpha > 0.0, "data.mixup_alpha must be > 0".into());
        need(self.synth_jitter >= 0.0 && self.synth_noise >= 0.0, "data.jitter and data.noise must be >= 0".into());
        need(self.domain != 0, "data.domain must differ from the pretraining domain 0".into());
        if let (Some(m), Some(f)) = (self.many_above, self.few_below) {
            need(f <= m, format!("data.few_below ({f}) must not exceed data.many_above ({m})"));
        }
        need(
            self.many_above.is_some() == self.few_below.is_some(),
            "data.many_above and data.few_below must both be set or both be auto".into(),
        );
        need(self.knn_k >= 1, "analysis.knn_k must be >= 1".into());
        for (key, path) in [("data.train", &self.train_path), ("data.val", &self.val_path), ("data.test", &self.test_path)] {
            if let Some(path) = path {
                need(path.exists(), format!("{key}: {} does not exist", path.display()));
            }
        }
        p
    }

    /// SHA-256 of the canonical text, excluding the output directory.
    pub fn digest(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| *k != "out")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        hex_digest(text.as_bytes())
    }

    pub fn gcl(&self) -> GclParams {
        GclParams {
            alpha: self.loss_alpha,
            noise: self.loss_noise,
            noise_std: self.loss_noise_std,
            training: true,
        }
    }

    pub fn agcl(&self) -> AgclParams {
        AgclParams {
            lambda_pos: self.loss_lambda_pos,
            lambda_neg: self.loss_lambda_neg,
            variant: self.loss_variant,
        }
    }

    pub fn synth(&self) -> SynthParams {
        SynthParams {
            classes: self.classes,
            image_side: self.model.image_side,
            jitter: self.synth_jitter,
            noise: self.synth_noise,
            family: 0,
            shift: self.synth_shift,

        }
    }

    /// Generator parameters of the pretraining set.
    pub fn pretrain_synth(&self) -> SynthParams {
        SynthParams {
            family: match self.pretrain_classes {
                PretrainClasses::Shared => 0,
                PretrainClasses::Disjoint => 1,
            },
            ..self.synth()
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    pub fn log_dir(&self) -> PathBuf {
        self.out.join("logs")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn train_file(&self) -> PathBuf {
        self.train_path.clone().unwrap_or_else(|| self.data_dir().join("target_train.bin"))
    }

    pub fn val_file(&self) -> PathBuf {
        self.val_path.clone().unwrap_or_else(|| self.data_dir().join("target_val.bin"))
    }

    pub fn test_file(&self) -> PathBuf {
        self.test_path.clone().unwrap_or_else(|| self.data_dir().join("target_test.bin"))
    }

    pub fn pretrain_file(&self) -> PathBuf {
        self.data_dir().join("pretrain.bin")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("prompt.top_k", "3").unwrap();
        cfg.set("data.many_above", "40").unwrap();
        cfg.set("data.few_below", "8").unwrap();
        for (k, v) in [("probe.loss", "agcl"), ("data.pretrain_classes", "shared"), ("loss.noise_std", "0.25"), ("data.shift", "0.5")] {
            cfg.set(k, v).unwrap();
        }
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn all_problems_reported_together() {
        let mut cfg = RunConfig::default();
        let err = cfg
            .apply_text("bogus = 1\nmodel.dim = x\n# fine\nseed = 4\nnot a pair\n")
            .unwrap_err();
        assert_eq!(err.len(), 3);
        assert_eq!(cfg.seed, 4);
        cfg.prompt.split_depth = cfg.model.depth;
        cfg.prompt.top_k = cfg.prompt.pool_size + 1;
        cfg.batch_size = 0;
        assert!(cfg.validate().len() >= 3, "{:?}", cfg.validate());
    }

    #[test]
    fn overrides_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        std::fs::write(&path, "seed = 3\ntrain.batch_size = 16\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!((cfg.seed, cfg.batch_size), (9, 16));
    }

    #[test]
    fn digest_ignores_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.digest(), b.digest());
        b.seed += 1;
        assert_ne!(a.digest(), b.digest());
    }
}
