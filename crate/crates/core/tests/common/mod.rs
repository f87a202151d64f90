#![allow(dead_code)]

pub mod oracles;
pub mod persistence;
pub mod sampling;
pub mod structure;
pub mod tiny;

use lpt_core::image::Image;
use lpt_core::objective::{phase1_loss, phase2_loss, AgclParams, ClassCounts, GclParams, LossVariant, NoiseMode, Target};
use lpt_core::rng::rng_for;
use lpt_core::tape::{Tape, Var};
use lpt_core::tensor::Tensor;
use lpt_core::vit::{
    forward_phase1, forward_phase2, init_pool, init_shared_prompt, key_similarity_loss, match_prompts, CosineClassifier, Model,
    PromptConfig, TrainMask, VisionTransformer, VitConfig,
};
use rand::Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_image(side: usize, rng: &mut impl Rng) -> Image {
    Image::new(side, side, (0..side * side * 3).map(|_| rng.random::<f64>()).collect())
}

/// Worst violation ratio `|a − n| / max(ABS_TOL, REL_TOL·max(|a|, |n|))`;
/// values ≤ 1 pass.
pub fn violation(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / ABS_TOL.max(REL_TOL * analytic.abs().max(numeric.abs()))
}

/// Compares reverse-mode gradients with central differences for every
/// element of every input. `build` receives the input values, binds them
/// as grad-flagged leaves, and returns `(loss, leaves)`.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> Result<(), String>
where
    F: Fn(&mut Tape, &[Tensor]) -> (Var, Vec<Var>),
{
    let mut tape = Tape::new();
    let (loss, leaves) = build(&mut tape, inputs);
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let (l, _) = build(&mut t, vals);
        t.value(l).item()
    };
    let mut vals = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let g = grads.get(*leaf);
        for j in 0..vals[i].numel() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + H;
            let up = eval(&vals);
            vals[i].data_mut()[j] = orig - H;
            let down = eval(&vals);
            vals[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = g.data()[j];
            if violation(analytic, numeric) > 1.0 {
                return Err(format!(
                    "input {i} element {j}: analytic {analytic:e} vs numeric {numeric:e}"
                ));
            }
        }
    }
    Ok(())
}

/// Micro model used by the gradient checks: L=2, d=16, N=4, p=2, m=3.
pub fn micro_config() -> (VitConfig, PromptConfig) {
    (
        VitConfig {
            image_side: 4,
            patch: 2,
            dim: 16,
            depth: 2,
            heads: 2,
            ffn_dim: 32,
        },
        PromptConfig {
            shared_len: 2,
            pool_size: 3,
            group_len: 2,
            split_depth: 1,
            top_k: 2,
        },
    )
}

pub const MICRO_CLASSES: usize = 3;

/// Full model with random (not tiny) prompts so the prompt path matters.
pub fn micro_model(seed: u64) -> Model {
    let (vit, prompts) = micro_config();
    let mut rng = rng_for(seed, &[42]);
    let backbone = VisionTransformer::init(&vit, &mut rng);
    let mut shared = init_shared_prompt(vit.depth, prompts.shared_len, vit.dim, &mut rng);
    shared.tokens = random_tensor(shared.tokens.shape(), &mut rng, -1.0, 1.0);
    let mut pool = init_pool(&vit, &prompts, &mut rng);
    pool.prompts = random_tensor(pool.prompts.shape(), &mut rng, -1.0, 1.0);
    let mut classifier = CosineClassifier::init(MICRO_CLASSES, vit.dim, &mut rng);
    classifier.weight = random_tensor(classifier.weight.shape(), &mut rng, -1.0, 1.0);
    Model {
        shared: Some(shared),
        pool: Some(pool),
        classifier: Some(classifier),
        ..Model::backbone_only(backbone)
    }
}

pub struct MicroBatch {
    pub images: Vec<Image>,
    pub targets: Vec<Target>,
    pub counts: ClassCounts,
}

pub fn micro_batch(seed: u64) -> MicroBatch {
    let mut rng = rng_for(seed, &[43]);
    let images = (0..2).map(|_| random_image(4, &mut rng)).collect();
    let targets = vec![
        Target::single(rng.random_range(0..MICRO_CLASSES)),
        Target {
            a: 0,
            b: 2,
            lambda: rng.random_range(0.2..0.8),
        },
    ];
    MicroBatch {
        images,
        targets,
        counts: ClassCounts::new(vec![50, 12, 3]),
    }
}

pub fn micro_losses(variant: LossVariant) -> (GclParams, AgclParams) {
    (
        GclParams {
            alpha: 4.0,
            noise: NoiseMode::PerClass,
            noise_std: 1.0,
            training: true,
        },
        AgclParams {
            lambda_pos: 1.0,
            lambda_neg: 4.0,
            variant,
        },
    )
}

/// Phase-1 loss as a function of `(u, W)`.
pub fn phase1_gradcheck(seed: u64) -> Result<(), String> {
    let model = micro_model(seed);
    let batch = micro_batch(seed);
    let variant = if seed % 2 == 0 { LossVariant::NegatedLiteral } else { LossVariant::AsymmetricReference };
    let (gcl, agcl) = micro_losses(variant);
    let inputs = vec![
        model.shared.as_ref().unwrap().tokens.clone(),
        model.classifier.as_ref().unwrap().weight.clone(),
    ];
    gradcheck(&inputs, |tape, vals| {
        let mut m = model.clone();
        m.pool = None;
        m.shared.as_mut().unwrap().tokens = vals[0].clone();
        m.classifier.as_mut().unwrap().weight = vals[1].clone();
        let bound = m.bind(tape, &TrainMask::phase1());
        let out = forward_phase1(tape, &bound, &batch.images, None).unwrap();
        let mut rng = rng_for(seed, &[44]);
        let loss = phase1_loss(tape, out.scores.unwrap(), &batch.targets, &batch.counts, &gcl, &agcl, &mut rng).unwrap();
        (loss, vec![bound.shared.unwrap(), bound.classifier.unwrap()])
    })
}

/// Phase-2 loss as a function of `(keys, pool prompts, W)`; matches are
/// fixed at the unperturbed keys.
pub fn phase2_gradcheck(seed: u64) -> Result<(), String> {
    let model = micro_model(seed);
    let batch = micro_batch(seed);
    let (_, prompts_cfg) = micro_config();
    let variant = if seed % 2 == 0 { LossVariant::NegatedLiteral } else { LossVariant::AsymmetricReference };
    let (gcl, agcl) = micro_losses(variant);
    let pool = model.pool.as_ref().unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &TrainMask::default());
    let p1 = forward_phase1(&mut tape, &bound, &batch.images, Some(pool.split_depth)).unwrap();
    let queries = tape.value(p1.class_tokens).clone();
    let cache = p1.cache.unwrap();
    let matches: Vec<Vec<usize>> = (0..batch.images.len())
        .map(|b| match_prompts(queries.row(b), &pool.keys, prompts_cfg.top_k).unwrap().indices)
        .collect();
    let inputs = vec![pool.keys.clone(), pool.prompts.clone(), model.classifier.as_ref().unwrap().weight.clone()];
    gradcheck(&inputs, |tape, vals| {
        let mut m = model.clone();
        let p = m.pool.as_mut().unwrap();
        p.keys = vals[0].clone();
        p.prompts = vals[1].clone();
        m.classifier.as_mut().unwrap().weight = vals[2].clone();
        let bound = m.bind(tape, &TrainMask::phase2());
        let (_, scores) = forward_phase2(tape, &bound, &cache, &matches).unwrap();
        let sim = key_similarity_loss(tape, &bound, &queries, &matches).unwrap();
        let mut rng = rng_for(seed, &[45]);
        let loss = phase2_loss(tape, scores, &batch.targets, sim, 0.7, &batch.counts, &gcl, &agcl, &mut rng).unwrap();
        (loss, vec![bound.keys.unwrap(), bound.prompts.unwrap(), bound.classifier.unwrap()])
    })
}

/// Weighted sum `Σ out ⊙ R` so every output element gets a distinct
/// upstream gradient.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = rng_for(seed, &[46]);
    let r = tape.constant(random_tensor(&shape, &mut rng, -1.0, 1.0));
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

/// Gradient check of every tape primitive for one seed.
pub fn primitive_gradchecks(seed: u64) -> Result<(), String> {
    let mut rng = rng_for(seed, &[47]);
    let a = random_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let pos = random_tensor(&[3, 4], &mut rng, 0.2, 2.0);
    let m = random_tensor(&[4, 5], &mut rng, -1.0, 1.0);
    let n = random_tensor(&[5, 4], &mut rng, -1.0, 1.0);
    let row = random_tensor(&[4], &mut rng, -1.0, 1.0);
    let gamma = random_tensor(&[4], &mut rng, 0.5, 1.5);
    let probs = random_tensor(&[3, 4], &mut rng, 0.05, 0.95);

    type Unary = fn(&mut Tape, Var) -> Var;
    let unary: [(&str, Unary, &Tensor); 11] = [
        ("scale", |t, x| t.scale(x, -1.7), &a),
        ("add_scalar", |t, x| t.add_scalar(x, 0.3), &a),
        ("one_minus", |t, x| t.one_minus(x), &a),
        ("gelu", |t, x| t.gelu(x), &a),
        ("log", |t, x| t.log(x).unwrap(), &pos),
        ("pow", |t, x| t.pow(x, 2.5), &pos),
        ("clamp", |t, x| t.clamp(x, 0.01, 0.99), &probs),
        ("l2_normalize", |t, x| t.l2_normalize(x), &a),
        ("softmax_rows", |t, x| t.softmax_rows(x).unwrap(), &a),
        ("softmax_complement_rows", |t, x| t.softmax_complement_rows(x).unwrap(), &a),
        ("slice_rows", |t, x| t.slice_rows(x, 1, 2).unwrap(), &a),
    ];
    for (name, op, x) in unary {
        gradcheck(std::slice::from_ref(x), |tape, v| {
            let x = tape.leaf(v[0].clone(), true);
            let y = op(tape, x);
            (project(tape, y, seed), vec![x])
        })
        .map_err(|e| format!("{name}: {e}"))?;
    }
    for (name, reduce) in [("sum", true), ("mean", false)] {
        gradcheck(std::slice::from_ref(&a), |tape, v| {
            let x = tape.leaf(v[0].clone(), true);
            let sq = tape.mul(x, x).unwrap();
            let y = if reduce { tape.sum(sq) } else { tape.mean(sq) };
            (y, vec![x])
        })
        .map_err(|e| format!("{name}: {e}"))?;
    }
    gradcheck(std::slice::from_ref(&a), |tape, v| {
        let x = tape.leaf(v[0].clone(), true);
        let y = tape.select_rows(x, &[2, 0, 2]).unwrap();
        (project(tape, y, seed), vec![x])
    })
    .map_err(|e| format!("select_rows: {e}"))?;

    type Binary = fn(&mut Tape, Var, Var) -> Var;
    let binary: [(&str, Binary, &Tensor, &Tensor); 7] = [
        ("add", |t, x, y| t.add(x, y).unwrap(), &a, &b),
        ("sub", |t, x, y| t.sub(x, y).unwrap(), &a, &b),
        ("mul", |t, x, y| t.mul(x, y).unwrap(), &a, &b),
        ("matmul", |t, x, y| t.matmul(x, y).unwrap(), &a, &m),
        ("matmul_nt", |t, x, y| t.matmul_nt(x, y).unwrap(), &a, &b),
        ("add_row", |t, x, y| t.add_row(x, y).unwrap(), &a, &row),
        ("concat_rows", |t, x, y| t.concat_rows(&[x, y, x]).unwrap(), &a, &b),
    ];
    for (name, op, x, y) in binary {
        gradcheck(&[x.clone(), y.clone()], |tape, v| {
            let x = tape.leaf(v[0].clone(), true);
            let y = tape.leaf(v[1].clone(), true);
            let z = op(tape, x, y);
            (project(tape, z, seed), vec![x, y])
        })
        .map_err(|e| format!("{name}: {e}"))?;
    }
    gradcheck(&[a.clone(), b.clone(), pos.clone()], |tape, v| {
        let parts: Vec<Var> = v.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let y = tape.mean_of(&parts).unwrap();
        (project(tape, y, seed), parts)
    })
    .map_err(|e| format!("mean_of: {e}"))?;
    gradcheck(&[a.clone(), gamma, row], |tape, v| {
        let x = tape.leaf(v[0].clone(), true);
        let g = tape.leaf(v[1].clone(), true);
        let bt = tape.leaf(v[2].clone(), true);
        let y = tape.layer_norm(x, g, bt).unwrap();
        (project(tape, y, seed), vec![x, g, bt])
    })
    .map_err(|e| format!("layer_norm: {e}"))?;
    // 3 queries attending over 5 keys, 2 heads of width 2
    let q = random_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let k = random_tensor(&[5, 4], &mut rng, -1.0, 1.0);
    gradcheck(&[q, k, n], |tape, v| {
        let q = tape.leaf(v[0].clone(), true);
        let k = tape.leaf(v[1].clone(), true);
        let vv = tape.leaf(v[2].clone(), true);
        let y = tape.attention(q, k, vv, 2).unwrap();
        (project(tape, y, seed), vec![q, k, vv])
    })
    .map_err(|e| format!("attention: {e}"))?;
    Ok(())
}
