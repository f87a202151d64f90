//! Bit-exact equivalences between pathways and frozen-parameter checks.

use std::collections::BTreeSet;

use lpt_core::analysis::{evaluate, infer};
use lpt_core::tape::Tape;
use lpt_core::tensor::Tensor;
use lpt_core::trainer::{eval_split, prepare_model, Stage};
use lpt_core::vit::{
    block_forward, class_tokens, cosine_head, embed, ensemble_batch, forward_phase1, forward_phase2, match_prompts, GroupPromptPool,
    Model, TrainMask,
};

use super::tiny::{pretrained, run, tiny_config, tiny_data};

fn bits(v: &[Vec<f64>]) -> Vec<u64> {
    v.iter().flatten().map(|x| x.to_bits()).collect()
}

/// A phase-2 model whose group prompts have zero length predicts exactly
/// like the phase-1 model it was built from.
pub fn zero_length_pool_equals_phase1(seed: u64) -> Result<(), String> {
    let cfg = tiny_config(seed);
    let data = tiny_data(&cfg);
    let pre = pretrained(&cfg, &data);
    let p1 = run(Stage::Phase1, &cfg, &data, &pre);
    let (m, d, split) = (cfg.prompt.pool_size, cfg.model.dim, cfg.prompt.split_depth);
    let mut keys = Tensor::zeros(&[m, d]);
    for (i, v) in keys.data_mut().iter_mut().enumerate() {
        *v = ((i * 7919 + seed as usize) % 13) as f64 - 6.0;
    }
    let p2 = Model {
        pool: Some(GroupPromptPool {
            keys,
            prompts: Tensor::zeros(&[m, 0, d]),
            split_depth: split,
            prompt_len: 0,
        }),
        ..p1.clone()
    };
    let a = infer(&p1, &data.test.images, cfg.prompt.top_k).map_err(|e| e.to_string())?;
    let b = infer(&p2, &data.test.images, cfg.prompt.top_k).map_err(|e| e.to_string())?;
    if bits(&a.scores) != bits(&b.scores) || bits(&a.features) != bits(&b.features) {
        return Err("zero-length group prompts change the scores".into());
    }
    let split_info = eval_split(&cfg, &data.train.counts()).map_err(|e| e.to_string())?;
    let ra = evaluate(&p1, &data.test, &split_info, cfg.prompt.top_k).map_err(|e| e.to_string())?;
    let rb = evaluate(&p2, &data.test, &split_info, cfg.prompt.top_k).map_err(|e| e.to_string())?;
    if ra != rb {
        return Err("zero-length group prompts change the evaluation".into());
    }
    Ok(())
}

/// Scores from the cached `(c_K, z_K)` continuation equal a full pass
/// from the pixels with the same prompts.
pub fn cache_equals_recompute(seed: u64) -> Result<(), String> {
    let cfg = tiny_config(seed);
    let data = tiny_data(&cfg);
    let pre = pretrained(&cfg, &data);
    let p1 = run(Stage::Phase1, &cfg, &data, &pre);
    let model = run(Stage::Phase2, &cfg, &data, &p1);
    let pool = model.pool.as_ref().unwrap();
    let split = pool.split_depth;
    let glen = pool.prompt_len;
    let plen = model.shared.as_ref().unwrap().len();
    let images = &data.test.images;
    let err = |e: lpt_core::error::Error| e.to_string();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &TrainMask::default());
    let out = forward_phase1(&mut tape, &bound, images, Some(split)).map_err(err)?;
    let queries = tape.value(out.class_tokens).clone();
    let matches: Vec<Vec<usize>> = (0..images.len())
        .map(|b| match_prompts(queries.row(b), &pool.keys, cfg.prompt.top_k).unwrap().indices)
        .collect();
    let (_, cached) = forward_phase2(&mut tape, &bound, &out.cache.unwrap(), &matches).map_err(err)?;
    let cached = tape.value(cached).clone();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &TrainMask::default());
    let ensembles = ensemble_batch(&mut tape, &bound, &matches).map_err(err)?;
    let u = bound.shared.unwrap();
    let mut state = embed(&mut tape, &bound, images).map_err(err)?;
    for i in 0..cfg.model.depth {
        let ui = tape.slice_rows(u, i * plen, plen).map_err(err)?;
        let mut prompts = Vec::new();
        for &r in &ensembles {
            let mut segs = vec![ui];
            if i >= split {
                segs.push(tape.slice_rows(r, (i - split) * glen, glen).map_err(err)?);
            }
            prompts.push(segs);
        }
        state = block_forward(&mut tape, &cfg.model, &bound.blocks[i], state, &prompts).map_err(err)?;
    }
    let cls = class_tokens(&mut tape, &cfg.model, state).map_err(err)?;
    let full = cosine_head(&mut tape, cls, bound.classifier.unwrap()).map_err(err)?;
    let full = tape.value(full);
    let same = cached.data().iter().zip(full.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same || cached.shape() != full.shape() {
        return Err("cached continuation differs from full recompute".into());
    }
    Ok(())
}

fn moved(before: &Model, after: &Model) -> BTreeSet<String> {
    let a = after.to_named_map();
    before
        .to_named_map()
        .into_iter()
        .filter(|(name, t)| {
            a.get(name)
                .is_none_or(|u| u.shape() != t.shape() || u.data().iter().zip(t.data()).any(|(x, y)| x.to_bits() != y.to_bits()))
        })
        .map(|(name, _)| name)
        .collect()
}

/// The tensors whose bytes change during a stage are exactly the ones its
/// mask trains: the backbone stays fixed after pretraining and the shared
/// prompt stays fixed in phase 2.
pub fn frozen_masks_hold(seed: u64) -> Result<(), String> {
    let cfg = tiny_config(seed);
    let data = tiny_data(&cfg);
    let pre = pretrained(&cfg, &data);
    let p1 = run(Stage::Phase1, &cfg, &data, &pre);
    for (stage, source) in [(Stage::Probe, &pre), (Stage::Phase1, &pre), (Stage::Phase2, &p1)] {
        let start = prepare_model(stage, &cfg, source).map_err(|e| e.to_string())?;
        let end = run(stage, &cfg, &data, source);
        let mask = stage.mask();
        let expected: BTreeSet<String> = start.named().into_iter().map(|(n, _)| n).filter(|n| mask.allows(n)).collect();
        let got = moved(&start, &end);
        if got != expected {
            return Err(format!("{stage}: changed {got:?}, mask trains {expected:?}"));
        }
        if moved(&Model::backbone_only(source.vit.clone()), &Model::backbone_only(end.vit.clone())).len() > 0 {
            return Err(format!("{stage}: backbone moved"));
        }
    }
    Ok(())
}
