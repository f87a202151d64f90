//! Plain-f64 reference evaluations of the loss pieces.

use lpt_core::objective::{
    agcl_loss, gcl_adjust, phase2_loss, AgclParams, ClassCounts, GclParams, LossVariant, NoiseMode, Target, PROB_CLAMP,
};
use lpt_core::rng::{rng_for, SeededRng};
use lpt_core::tape::Tape;
use lpt_core::vit::{key_similarity_loss, match_prompts, TrainMask};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{micro_model, random_tensor};

pub const ORACLE_TOL: f64 = 1e-10;

fn close(what: &str, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= ORACLE_TOL * want.abs().max(1.0) {
        Ok(())
    } else {
        Err(format!("{what}: got {got:.15e}, oracle {want:.15e}"))
    }
}

pub fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn agcl_oracle(p: &[f64], j: usize, params: &AgclParams) -> f64 {
    let q: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
    agcl_split_oracle(p, &q, j, params)
}

/// A-GCL of `softmax(v)` with `1 − p_i` summed from the other classes.
pub fn agcl_logits_oracle(v: &[f64], j: usize, params: &AgclParams) -> f64 {
    let p = softmax_oracle(v);
    let q: Vec<f64> = (0..p.len()).map(|i| p.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, x)| x).sum()).collect();
    agcl_split_oracle(&p, &q, j, params)
}

fn agcl_split_oracle(p: &[f64], q: &[f64], j: usize, params: &AgclParams) -> f64 {
    let mut loss = 0.0;
    for (i, (&raw, &rest)) in p.iter().zip(q).enumerate() {
        let pi = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let qi = rest.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if i == j {
            loss -= qi.powf(params.lambda_pos) * pi.ln();
        } else {
            let tail = match params.variant {
                LossVariant::NegatedLiteral => pi.ln(),
                LossVariant::AsymmetricReference => qi.ln(),
            };
            loss -= pi.powf(params.lambda_neg) * tail;
        }
    }
    loss
}

/// `α·(s_i − (ln n_max − ln n_i)·|σ·ε_i|)` with ε drawn from a clone of
/// the caller's generator in the documented order.
pub fn gcl_oracle(s: &[f64], counts: &[usize], params: &GclParams, rng: &SeededRng) -> Vec<f64> {
    let mut rng = rng.clone();
    let n_max = *counts.iter().max().unwrap() as f64;
    let shared: f64 = match params.noise {
        NoiseMode::PerSample if params.training => StandardNormal.sample(&mut rng),
        _ => 0.0,
    };
    s.iter()
        .zip(counts)
        .map(|(&si, &ni)| {
            if !params.training {
                return params.alpha * si;
            }
            let eps = match params.noise {
                NoiseMode::PerClass => StandardNormal.sample(&mut rng),
                NoiseMode::PerSample => shared,
            };
            params.alpha * (si - (n_max.ln() - (ni as f64).ln()) * (params.noise_std * eps).abs())
        })
        .collect()
}

fn random_counts(c: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..c).map(|_| rng.random_range(1..500)).collect()
}

fn random_probs(c: usize, rng: &mut impl Rng) -> Vec<f64> {
    let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..6.0)).collect();
    softmax_oracle(&logits)
}

fn random_gcl(rng: &mut impl Rng) -> GclParams {
    GclParams {
        alpha: rng.random_range(0.5..32.0),
        noise: if rng.random::<bool>() { NoiseMode::PerClass } else { NoiseMode::PerSample },
        noise_std: rng.random_range(0.0..1.5),
        training: rng.random::<f64>() < 0.9,
    }
}

fn random_agcl(rng: &mut impl Rng) -> AgclParams {
    AgclParams {
        lambda_pos: rng.random_range(0.0..3.0),
        lambda_neg: rng.random_range(0.0..6.0),
        variant: if rng.random::<bool>() { LossVariant::NegatedLiteral } else { LossVariant::AsymmetricReference },
    }
}

pub fn worked_value() -> Result<f64, String> {
    let params = AgclParams {
        lambda_pos: 0.0,
        lambda_neg: 4.0,
        variant: LossVariant::NegatedLiteral,
    };
    let got = agcl_loss(&[0.7, 0.2, 0.1], 0, &params).map_err(|e| e.to_string())?;
    if (got - 0.3594803).abs() > 5e-8 {
        return Err(format!("worked value {got:.10} != 0.3594803"));
    }
    let direct = -(0.7f64.ln() + 0.2f64.powi(4) * 0.2f64.ln() + 0.1f64.powi(4) * 0.1f64.ln());
    close("worked value", got, direct)?;
    Ok(got)
}

pub fn softmax_case(case: u64) -> Result<(), String> {
    let mut rng = rng_for(case, &[900]);
    let rows = rng.random_range(1..5);
    let cols = rng.random_range(1..12);
    let x = random_tensor(&[rows, cols], &mut rng, -30.0, 30.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax_rows(v).map_err(|e| e.to_string())?;
    let y = tape.value(y);
    for r in 0..rows {
        for (got, want) in y.row(r).iter().zip(softmax_oracle(x.row(r))) {
            close("softmax_rows", *got, want)?;
        }
    }
    Ok(())
}

pub fn gcl_case(case: u64) -> Result<(), String> {
    let mut rng = rng_for(case, &[901]);
    let c = rng.random_range(2..16);
    let counts = random_counts(c, &mut rng);
    let s: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params = random_gcl(&mut rng);
    let draw = rng_for(case, &[902]);
    let want = gcl_oracle(&s, &counts, &params, &draw);
    let got = gcl_adjust(&s, &ClassCounts::new(counts), &params, &mut draw.clone()).map_err(|e| e.to_string())?;
    for (g, w) in got.iter().zip(&want) {
        close("gcl_adjust", *g, *w)?;
    }
    Ok(())
}

pub fn agcl_case(case: u64) -> Result<(), String> {
    let mut rng = rng_for(case, &[903]);
    let c = rng.random_range(2..16);
    let p = random_probs(c, &mut rng);
    let j = rng.random_range(0..c);
    let mut params = random_agcl(&mut rng);
    for variant in [LossVariant::NegatedLiteral, LossVariant::AsymmetricReference] {
        params.variant = variant;
        let got = agcl_loss(&p, j, &params).map_err(|e| e.to_string())?;
        close(&format!("agcl_loss {variant}"), got, agcl_oracle(&p, j, &params))?;
    }
    Ok(())
}

/// Batch phase-2 loss on the micro model's keys against the composition
/// of the scalar oracles.
pub fn phase2_case(case: u64) -> Result<(), String> {
    let mut rng = rng_for(case, &[904]);
    let model = micro_model(case);
    let pool = model.pool.as_ref().unwrap();
    let batch = rng.random_range(1..5);
    let c = rng.random_range(2..8);
    let counts = random_counts(c, &mut rng);
    let scores = random_tensor(&[batch, c], &mut rng, -1.0, 1.0);
    let queries = random_tensor(&[batch, pool.dim()], &mut rng, -1.0, 1.0);
    let k = rng.random_range(1..=pool.size());
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..c)).collect();
    let gcl = random_gcl(&mut rng);
    let agcl = random_agcl(&mut rng);
    let beta = rng.random_range(0.0..1.0);
    let matched: Vec<_> = (0..batch)
        .map(|b| match_prompts(queries.row(b), &pool.keys, k).unwrap())
        .collect();
    let matches: Vec<Vec<usize>> = matched.iter().map(|m| m.indices.clone()).collect();

    let draw = rng_for(case, &[905]);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &TrainMask::phase2());
    let sim = key_similarity_loss(&mut tape, &bound, &queries, &matches).map_err(|e| e.to_string())?;
    let s = tape.constant(scores.clone());
    let targets: Vec<Target> = labels.iter().map(|&l| Target::single(l)).collect();
    let loss = phase2_loss(&mut tape, s, &targets, sim, beta, &ClassCounts::new(counts.clone()), &gcl, &agcl, &mut draw.clone())
        .map_err(|e| e.to_string())?;
    let got = tape.value(loss).item();

    // margins for the whole batch come from one stream, row by row
    let mut stream = draw.clone();
    let mut cls = 0.0;
    let mut sim_term = 0.0;
    for b in 0..batch {
        let v = gcl_oracle(scores.row(b), &counts, &gcl, &stream);
        advance(&mut stream, &gcl, c);
        cls += agcl_logits_oracle(&v, labels[b], &agcl);
        let mean: f64 = matched[b].similarities.iter().sum::<f64>() / k as f64;
        sim_term += 1.0 - mean;
    }
    let want = beta * cls / batch as f64 + sim_term / batch as f64;
    close("phase2_loss", got, want)
}

fn advance(rng: &mut SeededRng, gcl: &GclParams, c: usize) {
    if !gcl.training {
        return;
    }
    let draws = match gcl.noise {
        NoiseMode::PerClass => c,
        NoiseMode::PerSample => 1,
    };
    for _ in 0..draws {
        let _: f64 = StandardNormal.sample(rng);
    }
}

pub fn all_cases(n: u64) -> Result<(), String> {
    worked_value()?;
    for case in 0..n {
        softmax_case(case).map_err(|e| format!("case {case}: {e}"))?;
        gcl_case(case).map_err(|e| format!("case {case}: {e}"))?;
        agcl_case(case).map_err(|e| format!("case {case}: {e}"))?;
        phase2_case(case).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(())
}
