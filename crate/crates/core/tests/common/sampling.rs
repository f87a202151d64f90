//! Prompt matching against an exhaustive oracle, sampler frequencies and
//! the long-tail subsampler.

use lpt_core::data::{longtail_counts, make_longtailed, Dataset, Sampler, SamplerMode, Split};
use lpt_core::image::Image;
use lpt_core::rng::rng_for;
use lpt_core::tensor::Tensor;
use lpt_core::vit::{cosine, match_prompts};
use rand::Rng;

/// Repeatedly takes the unselected key with the highest similarity,
/// lowest index first among equals.
pub fn brute_force_top_k(query: &[f64], keys: &Tensor, k: usize) -> Vec<usize> {
    let sims: Vec<f64> = (0..keys.rows()).map(|i| cosine(query, keys.row(i))).collect();
    let mut taken = vec![false; sims.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..sims.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| sims[i] > sims[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

/// One random case; about half the cases copy rows so that ties occur.
pub fn match_case(case: u64) -> Result<bool, String> {
    let mut rng = rng_for(case, &[910]);
    let m = rng.random_range(1..=64);
    let d = rng.random_range(1..=8);
    let k = rng.random_range(1..=m);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    let ties = rng.random::<bool>();
    for i in 0..m {
        if ties && i > 0 && rng.random::<f64>() < 0.4 {
            let j = rng.random_range(0..i);
            rows.push(rows[j].clone());
        } else if ties {
            rows.push((0..d).map(|_| rng.random_range(-2i32..=2) as f64).collect());
        } else {
            rows.push((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
    }
    let keys = Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
    let query: Vec<f64> = if ties && rng.random::<bool>() {
        rows[rng.random_range(0..m)].clone()
    } else {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let got = match_prompts(&query, &keys, k).map_err(|e| e.to_string())?;
    let want = brute_force_top_k(&query, &keys, k);
    if got.indices != want {
        return Err(format!("case {case}: got {:?}, oracle {want:?}", got.indices));
    }
    for (i, &j) in want.iter().enumerate() {
        if got.similarities[i] != cosine(&query, keys.row(j)) {
            return Err(format!("case {case}: similarity {i} differs"));
        }
    }
    let sims: Vec<f64> = (0..m).map(|i| cosine(&query, keys.row(i))).collect();
    let tied = (0..m).any(|i| (0..i).any(|j| sims[i] == sims[j]));
    Ok(tied)
}

/// Runs `n` cases; returns how many contained tied similarities.
pub fn match_cases(n: u64) -> Result<usize, String> {
    let mut tied = 0;
    for case in 0..n {
        if match_case(case)? {
            tied += 1;
        }
    }
    Ok(tied)
}

pub fn label_dataset(counts: &[usize]) -> Dataset {
    let mut labels = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(c, n));
    }
    let images = vec![Image::filled(1, 1, 0.0); labels.len()];
    Dataset::new(images, labels, counts.len(), Split::Train, "test".into()).unwrap()
}

/// Class frequencies over `draws` sampled indices, compared with the
/// expected Bernoulli rates at three standard deviations.
pub fn sampler_frequencies(mode: SamplerMode, counts: &[usize], draws: usize, seed: u64) -> Result<(), String> {
    let ds = label_dataset(counts);
    let mut sampler = Sampler::new(mode, &ds, 64, seed).map_err(|e| e.to_string())?;
    let mut hits = vec![0usize; counts.len()];
    let mut seen = 0;
    let mut epoch = 0;
    while seen < draws {
        for _ in 0..sampler.steps_per_epoch() {
            for i in sampler.next_indices() {
                if seen < draws {
                    hits[ds.labels[i]] += 1;
                    seen += 1;
                }
            }
        }
        epoch += 1;
        sampler.start_epoch(epoch);
    }
    let total: usize = counts.iter().sum();
    let nonempty = counts.iter().filter(|&&n| n > 0).count();
    for (c, &n) in counts.iter().enumerate() {
        let p = match mode {
            SamplerMode::ClassBalanced if n > 0 => 1.0 / nonempty as f64,
            SamplerMode::ClassBalanced => 0.0,
            SamplerMode::Instance => n as f64 / total as f64,
        };
        let freq = hits[c] as f64 / draws as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        if (freq - p).abs() > 3.0 * sigma + 1e-12 {
            return Err(format!("{mode:?} class {c}: frequency {freq:.5}, expected {p:.5} ± {:.5}", 3.0 * sigma));
        }
    }
    Ok(())
}

/// The balanced sampler also spreads draws evenly inside a class.
pub fn balanced_within_class(seed: u64) -> Result<(), String> {
    let counts = [5, 40];
    let ds = label_dataset(&counts);
    let mut sampler = Sampler::new(SamplerMode::ClassBalanced, &ds, 50, seed).map_err(|e| e.to_string())?;
    let draws = 100_000;
    let mut hits = vec![0usize; ds.len()];
    for _ in 0..draws / 50 {
        for i in sampler.next_indices() {
            hits[i] += 1;
        }
    }
    for (i, &h) in hits.iter().enumerate() {
        let p = 0.5 / counts[ds.labels[i]] as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        let freq = h as f64 / draws as f64;
        if (freq - p).abs() > 3.0 * sigma {
            return Err(format!("sample {i}: frequency {freq:.5}, expected {p:.5}"));
        }
    }
    Ok(())
}

pub fn longtail_reference() -> Result<(), String> {
    let counts = longtail_counts(3, 100, 100.0).map_err(|e| e.to_string())?;
    if counts != [100, 10, 1] {
        return Err(format!("longtail_counts gave {counts:?}"));
    }
    let pool = label_dataset(&[120, 120, 120]);
    let lt = make_longtailed(&pool, 100, 100.0, 0).map_err(|e| e.to_string())?;
    if lt.counts().as_slice() != [100, 10, 1] {
        return Err(format!("make_longtailed gave {:?}", lt.counts().as_slice()));
    }
    Ok(())
}

pub fn sampler_suite(seed: u64) -> Result<(), String> {
    const DRAWS: usize = 100_000;
    sampler_frequencies(SamplerMode::ClassBalanced, &[90, 10], DRAWS, seed)?;
    sampler_frequencies(SamplerMode::Instance, &[90, 10], DRAWS, seed)?;
    sampler_frequencies(SamplerMode::ClassBalanced, &[500, 158, 50, 16, 5], DRAWS, seed)?;
    sampler_frequencies(SamplerMode::Instance, &[500, 158, 50, 16, 5], DRAWS, seed)?;
    balanced_within_class(seed)
}
