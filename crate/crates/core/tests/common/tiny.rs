//! A run configuration small enough to train in well under a second.

use lpt_core::config::RunConfig;
use lpt_core::pipeline::{synthesize, Datasets};
use lpt_core::trainer::{init_pretrain_model, prepare_model, train_stage, RunOptions, Stage, StageData};
use lpt_core::vit::Model;

pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    let text = "
        model.image_side = 8
        model.patch = 4
        model.dim = 8
        model.depth = 2
        model.heads = 2
        model.ffn_dim = 16
        prompt.shared_len = 2
        prompt.pool_size = 4
        prompt.group_len = 2
        prompt.split_depth = 1
        prompt.top_k = 2
        data.classes = 3
        data.n_max = 20
        data.imbalance = 10
        data.pool_per_class = 20
        data.pretrain_per_class = 10
        data.val_per_class = 4
        data.test_per_class = 6
        train.batch_size = 8
        pretrain.epochs = 2
        probe.epochs = 2
        phase1.epochs = 3
        phase2.epochs = 3
        joint.epochs = 2
        loss.noise_std = 0.1
        pretrain.warmup_epochs = 0.5
        probe.warmup_epochs = 0.5
        phase1.warmup_epochs = 0.5
        phase2.warmup_epochs = 0.5
        joint.warmup_epochs = 0.5
    ";
    cfg.apply_text(text).expect("tiny config is valid");
    cfg.seed = seed;
    cfg
}

pub fn tiny_data(cfg: &RunConfig) -> Datasets {
    synthesize(cfg).expect("synthesis")
}

pub fn target(data: &Datasets) -> StageData<'_> {
    StageData {
        train: &data.train,
        val: Some(&data.val),
    }
}

pub fn pretrained(cfg: &RunConfig, data: &Datasets) -> Model {
    let d = StageData {
        train: &data.pretrain,
        val: None,
    };
    train_stage(Stage::Pretrain, cfg, init_pretrain_model(cfg), &d, &RunOptions::default())
        .expect("pretrain")
        .model
}

/// Trains `stage` from `source` with default options and returns the final model.
pub fn run(stage: Stage, cfg: &RunConfig, data: &Datasets, source: &Model) -> Model {
    let model = prepare_model(stage, cfg, source).expect("prepare");
    train_stage(stage, cfg, model, &target(data), &RunOptions::default())
        .expect("train")
        .model
}
