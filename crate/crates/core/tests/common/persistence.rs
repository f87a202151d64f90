//! Seeded reruns, interrupted-and-resumed runs and checkpoint round trips.

use std::fs;
use std::path::Path;

use lpt_core::checkpoint::Checkpoint;
use lpt_core::config::RunConfig;
use lpt_core::pipeline::Datasets;
use lpt_core::optim::OptimState;
use lpt_core::trainer::{make_checkpoint, OPTIM_PREFIX, model_from_checkpoint, prepare_model, train_stage, RunOptions, Stage, StageResult};
use lpt_core::vit::Model;

use super::tiny::{pretrained, run, target, tiny_config, tiny_data};

fn train_to(stage: Stage, cfg: &RunConfig, data: &Datasets, source: &Model, dir: &Path, stop_after: Option<usize>, resume: bool) -> Result<StageResult, String> {
    let latest = dir.join(format!("{stage}.ckpt"));
    let opts = RunOptions {
        checkpoint: Some(latest.clone()),
        best: Some(dir.join(format!("{stage}.best.ckpt"))),
        log: Some(dir.join(format!("{stage}.jsonl"))),
        resume: if resume { Some(Checkpoint::load(&latest).map_err(|e| e.to_string())?) } else { None },
        stop_after,
    };
    let model = prepare_model(stage, cfg, source).map_err(|e| e.to_string())?;
    train_stage(stage, cfg, model, &target(data), &opts).map_err(|e| e.to_string())
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn same_files(a: &Path, b: &Path, names: &[String]) -> Result<(), String> {
    for n in names {
        if read(&a.join(n))? != read(&b.join(n))? {
            return Err(format!("{n} differs"));
        }
    }
    Ok(())
}

/// Two runs with the same seed write byte-identical checkpoints and logs.
pub fn reruns_are_bit_exact(seed: u64) -> Result<(), String> {
    let cfg = tiny_config(seed);
    let data = tiny_data(&cfg);
    let pre = pretrained(&cfg, &data);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for stage in [Stage::Phase1, Stage::Phase2] {
        let src = if stage == Stage::Phase2 { run(Stage::Phase1, &cfg, &data, &pre) } else { pre.clone() };
        train_to(stage, &cfg, &data, &src, a.path(), None, false)?;
        train_to(stage, &cfg, &data, &src, b.path(), None, false)?;
        let names = [format!("{stage}.ckpt"), format!("{stage}.best.ckpt"), format!("{stage}.jsonl")];
        same_files(a.path(), b.path(), &names).map_err(|e| format!("{stage}: {e}"))?;
    }
    Ok(())
}

/// Stopping after one epoch and resuming from the checkpoint ends in the
/// same bytes as the uninterrupted run.
pub fn resume_matches_uninterrupted(seed: u64) -> Result<(), String> {
    let cfg = tiny_config(seed);
    let data = tiny_data(&cfg);
    let pre = pretrained(&cfg, &data);
    let p1 = run(Stage::Phase1, &cfg, &data, &pre);
    for (stage, src) in [(Stage::Phase1, &pre), (Stage::Phase2, &p1)] {
        let (whole, parts) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let full = train_to(stage, &cfg, &data, src, whole.path(), None, false)?;
        train_to(stage, &cfg, &data, src, parts.path(), Some(1), false)?;
        let resumed = train_to(stage, &cfg, &data, src, parts.path(), None, true)?;
        let names = [format!("{stage}.ckpt"), format!("{stage}.best.ckpt"), format!("{stage}.jsonl")];
        same_files(whole.path(), parts.path(), &names).map_err(|e| format!("{stage}: {e}"))?;
        if full.model != resumed.model || full.best_model != resumed.best_model {
            return Err(format!("{stage}: resumed model differs"));
        }
    }
    Ok(())
}

/// bytes → checkpoint → bytes, file save/load, and checkpoint → model →
/// checkpoint are all byte-identical.
pub fn checkpoint_round_trip(seed: u64) -> Result<(), String> {
    let cfg = tiny_config(seed);
    let data = tiny_data(&cfg);
    let pre = pretrained(&cfg, &data);
    let dir = tempfile::tempdir().unwrap();
    let p1 = train_to(Stage::Phase1, &cfg, &data, &pre, dir.path(), None, false)?;
    let p2 = train_to(Stage::Phase2, &cfg, &data, &p1.model, dir.path(), None, false)?;
    for (stage, result) in [(Stage::Phase1, &p1), (Stage::Phase2, &p2)] {
        let path = dir.path().join(format!("{stage}.ckpt"));
        let on_disk = read(&path)?;
        let ck = Checkpoint::from_bytes(&on_disk).map_err(|e| e.to_string())?;
        if ck.to_bytes().map_err(|e| e.to_string())? != on_disk {
            return Err(format!("{stage}: bytes do not survive parse and re-encode"));
        }
        if ck != result.checkpoint {
            return Err(format!("{stage}: file differs from the returned checkpoint"));
        }
        let copy = dir.path().join("copy.ckpt");
        ck.save(&copy).map_err(|e| e.to_string())?;
        if read(&copy)? != on_disk {
            return Err(format!("{stage}: save of a loaded checkpoint changes bytes"));
        }
        let model = model_from_checkpoint(&cfg, &ck).map_err(|e| e.to_string())?;
        if model != result.model {
            return Err(format!("{stage}: model does not survive the checkpoint"));
        }
        let mut again = make_checkpoint(&cfg, stage, ck.meta.epoch, &model, &OptimState::new(cfg.momentum, cfg.weight_decay), None);
        again.meta = ck.meta.clone();
        again.tensors.extend(ck.tensors.iter().filter(|(k, _)| k.starts_with(OPTIM_PREFIX)).map(|(k, v)| (k.clone(), v.clone())));
        if again.to_bytes().map_err(|e| e.to_string())? != on_disk {
            return Err(format!("{stage}: model re-encoding changes bytes"));
        }
    }
    Ok(())
}
