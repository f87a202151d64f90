//! Training stages: backbone pretraining, linear probe, phase 1, phase 2,
//! and the joint ablation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;
use serde_json::json;

use crate::analysis::{evaluate, EvalReport};
use crate::checkpoint::{Checkpoint, Metadata};
use crate::config::{ProbeLoss, RunConfig, StageSchedule, StepMode};
use crate::data::{augment, default_shot_thresholds, mixup, shot_split, Batch, Dataset, DualSampler, Sampler, SamplerMode, ShotSplit};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::objective::{beta_for, cross_entropy_on_tape, phase1_loss, phase2_loss, BatchKind, BetaSchedule, ClassCounts};
use crate::optim::{lr_at, scaled_lr, OptimState};
use crate::rng::{rng_for, stream};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{
    forward_phase1, forward_phase2, init_pool, init_shared_prompt, key_similarity_loss, linear_head, match_prompts, ActivationCache,
    Bound, CosineClassifier, LinearHead, Model, ParamGroup, TrainMask, VisionTransformer,
};

/// Prefix of optimizer buffers inside a checkpoint.
pub const OPTIM_PREFIX: &str = "optim.";

/// True when `LPT_REFERENCE_MODE=1` is set.
pub fn reference_mode() -> bool {
    std::env::var("LPT_REFERENCE_MODE").is_ok_and(|v| v == "1")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Pretrain,
    Probe,
    Phase1,
    Phase2,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Pretrain, Stage::Probe, Stage::Phase1, Stage::Phase2, Stage::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Probe => "probe",
            Stage::Phase1 => "phase1",
            Stage::Phase2 => "phase2",
            Stage::Joint => "joint",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::Pretrain => 10,
            Stage::Probe => 11,
            Stage::Phase1 => 12,
            Stage::Phase2 => 13,
            Stage::Joint => 14,
        }
    }

    pub fn mask(self) -> TrainMask {
        match self {
            Stage::Pretrain => TrainMask::pretrain(),
            Stage::Probe => TrainMask::linear_probe(),
            Stage::Phase1 => TrainMask::phase1(),
            Stage::Phase2 => TrainMask::phase2(),
            Stage::Joint => TrainMask::joint(),
        }
    }

    pub fn schedule(self, cfg: &RunConfig) -> &StageSchedule {
        match self {
            Stage::Pretrain => &cfg.pretrain,
            Stage::Probe => &cfg.probe,
            Stage::Phase1 => &cfg.phase1,
            Stage::Phase2 => &cfg.phase2,
            Stage::Joint => &cfg.joint,
        }
    }

    /// The stage whose checkpoint this one starts from.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Pretrain => None,
            Stage::Phase2 => Some(Stage::Phase1),
            _ => Some(Stage::Pretrain),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Fresh backbone plus the throwaway pretraining head.
pub fn init_pretrain_model(cfg: &RunConfig) -> Model {
    let mut rng = rng_for(cfg.seed, &[stream::INIT, Stage::Pretrain.tag()]);
    let vit = VisionTransformer::init(&cfg.model, &mut rng);
    let head = LinearHead::init(cfg.model.dim, cfg.classes, &mut rng);
    Model {
        head: Some(head),
        ..Model::backbone_only(vit)
    }
}

/// Builds the starting model of `stage` from the prerequisite stage's
/// model, initialising whatever the stage adds.
pub fn prepare_model(stage: Stage, cfg: &RunConfig, source: &Model) -> Result<Model> {
    let mut rng = rng_for(cfg.seed, &[stream::INIT, stage.tag()]);
    let d = cfg.model.dim;
    let backbone = || Model::backbone_only(source.vit.clone());
    let model = match stage {
        Stage::Pretrain => init_pretrain_model(cfg),
        Stage::Probe => Model {
            classifier: Some(CosineClassifier::init(cfg.classes, d, &mut rng)),
            ..backbone()
        },
        Stage::Phase1 => {
            let shared = init_shared_prompt(cfg.model.depth, cfg.prompt.shared_len, d, &mut rng);
            Model {
                shared: Some(shared),
                classifier: Some(CosineClassifier::init(cfg.classes, d, &mut rng)),
                ..backbone()
            }
        }
        Stage::Phase2 => {
            if source.shared.is_none() || source.classifier.is_none() {
                return Err(Error::Config("phase2 must start from a phase1 model".into()));
            }
            Model {
                pool: Some(init_pool(&cfg.model, &cfg.prompt, &mut rng)),
                head: None,
                ..source.clone()
            }
        }
        Stage::Joint => {
            let shared = init_shared_prompt(cfg.model.depth, cfg.prompt.shared_len, d, &mut rng);
            let classifier = CosineClassifier::init(cfg.classes, d, &mut rng);
            Model {
                shared: Some(shared),
                pool: Some(init_pool(&cfg.model, &cfg.prompt, &mut rng)),
                classifier: Some(classifier),
                ..backbone()
            }
        }
    };
    if let Some(c) = &model.classifier {
        if c.classes() != cfg.classes {
            return Err(Error::Config(format!(
                "classifier has {} classes, config says {}",
                c.classes(),
                cfg.classes
            )));
        }
    }
    Ok(model)
}

/// Shot split used for evaluation: configured thresholds, or the defaults
/// for the training counts.
pub fn eval_split(cfg: &RunConfig, counts: &ClassCounts) -> Result<ShotSplit> {
    let thresholds = match (cfg.many_above, cfg.few_below) {
        (Some(m), Some(f)) => (m, f),
        _ => default_shot_thresholds(counts),
    };
    shot_split(counts, thresholds)
}

pub struct StageData<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
}

/// Where a stage writes its artefacts, and how it starts and stops.
#[derive(Default)]
pub struct RunOptions {
    /// Latest state, rewritten after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Best-on-val state.
    pub best: Option<PathBuf>,
    /// JSONL metrics log.
    pub log: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub record: &'static str,
    pub stage: &'static str,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val: Option<EvalReport>,
}

pub struct StageResult {
    pub model: Model,
    /// Model at the best validation epoch (the final model without val data).
    pub best_model: Model,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Model tensors plus optimizer buffers under [`OPTIM_PREFIX`].
pub fn make_checkpoint(cfg: &RunConfig, stage: Stage, epoch: usize, model: &Model, optim: &OptimState, best: Option<(f64, usize)>) -> Checkpoint {
    let mut tensors = model.to_named_map();
    for (name, buf) in optim.buffers() {
        tensors.insert(format!("{OPTIM_PREFIX}{name}"), buf.clone());
    }
    Checkpoint {
        meta: Metadata {
            config_digest: cfg.digest(),
            stage: stage.name().into(),
            epoch,
            rng_seed: cfg.seed,
            best_metric: best.map(|b| b.0),
            best_epoch: best.map(|b| b.1),
        },
        tensors,
    }
}

/// Model stored in a checkpoint, checked against the config.
pub fn model_from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Model> {
    let map: BTreeMap<String, Tensor> = ck
        .tensors
        .iter()
        .filter(|(k, _)| !k.starts_with(OPTIM_PREFIX))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Model::from_named(&cfg.model, Some(cfg.prompt.split_depth), Some(cfg.prompt.group_len), &map)
}

fn optim_from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> OptimState {
    let mut optim = OptimState::new(cfg.momentum, cfg.weight_decay);
    for (k, v) in &ck.tensors {
        if let Some(name) = k.strip_prefix(OPTIM_PREFIX) {
            optim.insert_buffer(name.to_string(), v.clone());
        }
    }
    optim
}

fn apply_gradients(model: &mut Model, optim: &mut OptimState, grads: &Gradients, trainable: &[(String, Var)], lr: f64) -> Result<()> {
    let mut params: HashMap<String, &mut Tensor> = model.named_mut().into_iter().collect();
    for (name, var) in trainable {
        let param = params.get_mut(name).expect("bound parameter exists");
        let decay = ParamGroup::of(name).is_some_and(ParamGroup::decays);
        optim.step(name, param, &grads.get(*var), lr, decay)?;
    }
    Ok(())
}

/// Frozen phase-1 pass: queries `c_L` (`batch × d`) and the cache after
/// block `K`.
fn query_pass(model: &Model, images: &[Image], split: usize) -> Result<(Tensor, ActivationCache)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &TrainMask::default());
    let out = forward_phase1(&mut tape, &bound, images, Some(split))?;
    let cache = out.cache.expect("cache requested");
    Ok((tape.value(out.class_tokens).clone(), cache))
}

struct StepContext<'a> {
    cfg: &'a RunConfig,
    stage: Stage,
    counts: &'a ClassCounts,
    epoch: usize,
    step: usize,
}

impl StepContext<'_> {
    fn rng(&self, tag: u64, kind: u64) -> crate::rng::SeededRng {
        rng_for(
            self.cfg.seed,
            &[tag, self.stage.tag(), self.epoch as u64, self.step as u64, kind],
        )
    }

    fn kind_tag(kind: BatchKind) -> u64 {
        match kind {
            BatchKind::Balanced => 0,
            BatchKind::Instance => 1,
        }
    }

    /// Augmentation and mixup as configured for the batch's stream.
    fn prepare(&self, mut batch: Batch) -> Result<Batch> {
        let k = Self::kind_tag(batch.kind);
        augment(&mut batch, self.cfg.augment_pad, &mut self.rng(stream::AUGMENT, k));
        let mix = match (self.stage, batch.kind) {
            (Stage::Pretrain, _) => false,
            (_, BatchKind::Balanced) => self.cfg.mixup_balanced,
            (_, BatchKind::Instance) => self.cfg.mixup_instance,
        };
        if mix {
            batch = mixup(&batch, self.cfg.mixup_alpha, &mut self.rng(stream::MIXUP, k))?;
        }
        Ok(batch)
    }

    fn classification(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
        let out = forward_phase1(tape, bound, &batch.images, None)?;
        let scores = out.scores.ok_or_else(|| Error::invalid("train", "model has no classifier"))?;
        if self.stage == Stage::Probe && self.cfg.probe_loss == ProbeLoss::CrossEntropy {
            let logits = tape.scale(scores, self.cfg.loss_alpha);
            return cross_entropy_on_tape(tape, logits, &batch.targets);
        }
        let mut rng = self.rng(stream::GCL_NOISE, Self::kind_tag(batch.kind));
        phase1_loss(tape, scores, &batch.targets, self.counts, &self.cfg.gcl(), &self.cfg.agcl(), &mut rng)
    }

    fn pretrain(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
        let out = forward_phase1(tape, bound, &batch.images, None)?;
        let logits = linear_head(tape, bound, out.class_tokens)?;
        cross_entropy_on_tape(tape, logits, &batch.targets)
    }

    fn phase2(&self, tape: &mut Tape, bound: &Bound, model: &Model, batch: &Batch) -> Result<Var> {
        let pool = model.pool.as_ref().expect("phase2 model has a pool");
        let (queries, cache) = query_pass(model, &batch.images, pool.split_depth)?;
        let matches = (0..batch.len())
            .map(|b| match_prompts(queries.row(b), &pool.keys, self.cfg.prompt.top_k).map(|m| m.indices))
            .collect::<Result<Vec<_>>>()?;
        let (_, scores) = forward_phase2(tape, bound, &cache, &matches)?;
        let sim = key_similarity_loss(tape, bound, &queries, &matches)?;
        let beta = beta_for(
            batch.kind,
            &BetaSchedule {
                eta: self.cfg.eta,
                total_epochs: self.stage.schedule(self.cfg).epochs,
                epoch: self.epoch,
            },
        );
        let mut rng = self.rng(stream::GCL_NOISE, Self::kind_tag(batch.kind));
        phase2_loss(
            tape,
            scores,
            &batch.targets,
            sim,
            beta,
            self.counts,
            &self.cfg.gcl(),
            &self.cfg.agcl(),
            &mut rng,
        )
    }
}

enum Feed {
    Single(Sampler),
    Dual(DualSampler),
}

impl Feed {
    fn steps_per_epoch(&self) -> usize {
        match self {
            Feed::Single(s) => s.steps_per_epoch(),
            Feed::Dual(d) => d.steps_per_epoch(),
        }
    }

    fn start_epoch(&mut self, epoch: usize) {
        match self {
            Feed::Single(s) => s.start_epoch(epoch),
            Feed::Dual(d) => d.start_epoch(epoch),
        }
    }
}

/// One optimisation step; returns the loss value.
fn train_step(ctx: &StepContext, model: &mut Model, optim: &mut OptimState, feed: &mut Feed, ds: &Dataset, lr: f64) -> Result<f64> {
    let mask = ctx.stage.mask();
    let run = |model: &mut Model, optim: &mut OptimState, build: &dyn Fn(&mut Tape, &Bound, &Model) -> Result<Var>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &mask);
        let loss = build(&mut tape, &bound, model)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = tape.backward(loss)?;
        apply_gradients(model, optim, &grads, &bound.trainable, lr)?;
        Ok(value)
    };
    match (ctx.stage, feed) {
        (Stage::Pretrain, Feed::Single(s)) => {
            let batch = ctx.prepare(s.next_batch(ds))?;
            run(model, optim, &|t, b, _| ctx.pretrain(t, b, &batch))
        }
        (Stage::Probe | Stage::Phase1, Feed::Single(s)) => {
            let batch = ctx.prepare(s.next_batch(ds))?;
            run(model, optim, &|t, b, _| ctx.classification(t, b, &batch))
        }
        (Stage::Phase2 | Stage::Joint, Feed::Dual(d)) => {
            let (bal, ins) = d.next_pair(ds);
            let (bal, ins) = (ctx.prepare(bal)?, ctx.prepare(ins)?);
            let joint = ctx.stage == Stage::Joint;
            let with_phase1 = |t: &mut Tape, b: &Bound, m: &Model, batch: &Batch| -> Result<Var> {
                let l2 = ctx.phase2(t, b, m, batch)?;
                if joint && batch.kind == BatchKind::Balanced {
                    let l1 = ctx.classification(t, b, batch)?;
                    t.add(l1, l2)
                } else {
                    Ok(l2)
                }
            };
            match ctx.cfg.step_mode {
                StepMode::Combined => run(model, optim, &|t, b, m| {
                    let lb = with_phase1(t, b, m, &bal)?;
                    let li = with_phase1(t, b, m, &ins)?;
                    t.add(lb, li)
                }),
                StepMode::TwoStep => {
                    let lb = run(model, optim, &|t, b, m| with_phase1(t, b, m, &bal))?;
                    if !lb.is_finite() {
                        return Ok(lb);
                    }
                    let li = run(model, optim, &|t, b, m| with_phase1(t, b, m, &ins))?;
                    Ok(lb + li)
                }
            }
        }
        _ => unreachable!("feed matches stage"),
    }
}

fn open_log(opts: &RunOptions, header: &serde_json::Value, keep_epochs: usize) -> Result<Option<fs::File>> {
    let Some(path) = &opts.log else {
        return Ok(None);
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = format!("{header}\n");
    if keep_epochs > 0 {
        let old = fs::read_to_string(path).unwrap_or_default();
        for line in old.lines().skip(1).take(keep_epochs) {
            text.push_str(line);
            text.push('\n');
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(f))
}

/// Runs `stage` from `model` (as returned by [`prepare_model`]), or from
/// `opts.resume` when given.
pub fn train_stage(stage: Stage, cfg: &RunConfig, model: Model, data: &StageData, opts: &RunOptions) -> Result<StageResult> {
    let ds = data.train;
    let counts = ds.counts();
    let split = eval_split(cfg, &counts)?;
    let sched = stage.schedule(cfg).clone();
    let (mut model, mut optim, start, mut best) = match &opts.resume {
        Some(ck) => {
            if ck.meta.stage != stage.name() {
                return Err(Error::Config(format!(
                    "cannot resume {stage} from a {} checkpoint",
                    ck.meta.stage
                )));
            }
            if ck.meta.config_digest != cfg.digest() {
                return Err(Error::Config("resume checkpoint was written under a different config".into()));
            }
            let best = ck.meta.best_metric.zip(ck.meta.best_epoch);
            (model_from_checkpoint(cfg, ck)?, optim_from_checkpoint(cfg, ck), ck.meta.epoch, best)
        }
        None => (model, OptimState::new(cfg.momentum, cfg.weight_decay), 0, None),
    };
    let mut best_model = match (&opts.resume, &opts.best) {
        (Some(_), Some(path)) if path.exists() && best.is_some() => Some(model_from_checkpoint(cfg, &Checkpoint::load(path)?)?),
        _ => None,
    };

    let mut feed = match stage {
        Stage::Pretrain => Feed::Single(Sampler::new(SamplerMode::Instance, ds, cfg.batch_size, cfg.seed)?),
        Stage::Probe | Stage::Phase1 => Feed::Single(Sampler::new(SamplerMode::ClassBalanced, ds, cfg.batch_size, cfg.seed)?),
        Stage::Phase2 | Stage::Joint => Feed::Dual(DualSampler::new(ds, cfg.batch_size, cfg.seed)?),
    };
    let steps = feed.steps_per_epoch();
    let base_lr = scaled_lr(sched.lr_per_256, cfg.batch_size);
    let mask = stage.mask();
    let trainable: Vec<String> = model.named().into_iter().map(|(n, _)| n).filter(|n| mask.allows(n)).collect();
    let trainable_params: usize = model
        .named()
        .into_iter()
        .filter(|(n, _)| mask.allows(n))
        .map(|(_, t)| t.numel())
        .sum();
    let header = json!({
        "record": "header",
        "stage": stage.name(),
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "epochs": sched.epochs,
        "steps_per_epoch": steps,
        "batch_size": cfg.batch_size,
        "base_lr": base_lr,
        "trainable_tensors": trainable,
        "trainable_params": trainable_params,
        "weight_decay_groups": ["backbone", "classifier", "head"],
        "train_samples": ds.len(),
        "shot_convention": split.convention(),
        "reference_mode": reference_mode(),
    });
    let mut log = open_log(opts, &header, start)?;
    let mut history = Vec::new();

    let save = |path: &Option<PathBuf>, ck: &Checkpoint| -> Result<()> {
        match path {
            Some(p) => ck.save(p),
            None => Ok(()),
        }
    };

    for epoch in start..sched.epochs {
        if opts.stop_after.is_some_and(|s| epoch >= s) {
            break;
        }
        feed.start_epoch(epoch);
        let mut loss_sum = 0.0;
        let mut lr = base_lr;
        for step in 0..steps {
            lr = lr_at(epoch, step, steps, base_lr, sched.warmup_epochs, sched.epochs)?;
            let ctx = StepContext {
                cfg,
                stage,
                counts: &counts,
                epoch,
                step,
            };
            let before = model.clone();
            let outcome = train_step(&ctx, &mut model, &mut optim, &mut feed, ds, lr);
            let diverged = match &outcome {
                Ok(v) => !v.is_finite() || model.named().iter().any(|(_, t)| !t.is_finite()),
                Err(Error::NonFiniteGradient(_)) => true,
                Err(Error::NonPositiveLog { value, .. }) => value.is_nan(),
                Err(_) => false,
            };
            if diverged {
                let mut path = opts.checkpoint.clone().unwrap_or_default();
                if path.as_os_str().is_empty() {
                    return Err(Error::Divergence {
                        stage: stage.name().into(),
                        epoch,
                    });
                }
                path.set_extension("diverged.ckpt");
                make_checkpoint(cfg, stage, epoch, &before, &optim, best).save(&path)?;
                return Err(Error::Divergence {
                    stage: stage.name().into(),
                    epoch,
                });
            }
            loss_sum += outcome?;
        }
        let val = match data.val {
            Some(v) if stage != Stage::Pretrain => Some(evaluate(&model, v, &split, cfg.prompt.top_k)?),
            _ => None,
        };
        if let Some(report) = &val {
            if best.is_none_or(|(b, _)| report.overall > b) {
                best = Some((report.overall, epoch + 1));
                best_model = Some(model.clone());
                save(&opts.best, &make_checkpoint(cfg, stage, epoch + 1, &model, &optim, best))?;
            }
        }
        let record = EpochRecord {
            record: "epoch",
            stage: stage.name(),
            epoch: epoch + 1,
            lr,
            loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            val,
        };
        if let Some(f) = &mut log {
            let line = serde_json::to_string(&record).expect("record serialises");
            writeln!(f, "{line}").map_err(|e| Error::io(opts.log.as_ref().expect("log path"), e))?;
        }
        history.push(record);
        save(&opts.checkpoint, &make_checkpoint(cfg, stage, epoch + 1, &model, &optim, best))?;
    }

    let done = opts.stop_after.map_or(sched.epochs, |s| s.min(sched.epochs)).max(start);
    let checkpoint = make_checkpoint(cfg, stage, done, &model, &optim, best);
    if history.is_empty() {
        save(&opts.checkpoint, &checkpoint)?;
    }
    let best_model = match (cfg.select_best, best_model) {
        (true, Some(m)) => m,
        _ => model.clone(),
    };
    Ok(StageResult {
        model,
        best_model,
        checkpoint,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("phase3".parse::<Stage>().is_err());
        assert_eq!(Stage::Phase2.prerequisite(), Some(Stage::Phase1));
    }
}
