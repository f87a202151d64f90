//! Evaluation and feature diagnostics.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::Distance;
use crate::data::{write_atomic, Dataset, Shot, ShotSplit};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tape::Tape;
use crate::vit::{cosine, forward_phase1, forward_phase2, linear_head, match_prompts, Model, TrainMask};

/// Images per forward pass during inference.
pub const INFER_CHUNK: usize = 32;

/// Per-sample outputs of a frozen model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Inference {
    /// Class scores: cosine scores when a classifier exists, else head logits.
    pub scores: Vec<Vec<f64>>,
    /// `c_L` of the phase-1 pathway (the matching query).
    pub query: Vec<Vec<f64>>,
    /// Class token the prediction is made from: `ĉ_L` with a pool, else `c_L`.
    pub features: Vec<Vec<f64>>,
    /// Matched pool indices per sample, when a pool exists.
    pub matches: Option<Vec<Vec<usize>>>,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        self.scores.iter().map(|s| argmax(s)).collect()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn rows(t: &crate::tensor::Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Runs the model in eval mode. With a prompt pool the prediction goes
/// through the phase-2 pathway using `top_k` matched prompts.
pub fn infer(model: &Model, images: &[Image], top_k: usize) -> Result<Inference> {
    let mut out = Inference {
        matches: model.pool.as_ref().map(|_| Vec::new()),
        ..Default::default()
    };
    for chunk in images.chunks(INFER_CHUNK) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &TrainMask::default());
        let split = model.pool.as_ref().map(|p| p.split_depth);
        let p1 = forward_phase1(&mut tape, &bound, chunk, split)?;
        let query = tape.value(p1.class_tokens).clone();
        match (&model.pool, p1.cache) {
            (Some(pool), Some(cache)) => {
                let matches = (0..chunk.len())
                    .map(|b| match_prompts(query.row(b), &pool.keys, top_k).map(|m| m.indices))
                    .collect::<Result<Vec<_>>>()?;
                let (state, scores) = forward_phase2(&mut tape, &bound, &cache, &matches)?;
                let cls = crate::vit::class_tokens(&mut tape, &bound.cfg, state)?;
                out.features.extend(rows(tape.value(cls)));
                out.scores.extend(rows(tape.value(scores)));
                out.matches.as_mut().expect("pool").extend(matches);
            }
            _ => {
                out.features.extend(rows(&query));
                let scores = match (p1.scores, bound.head) {
                    (Some(s), _) => Some(s),
                    (None, Some(_)) => Some(linear_head(&mut tape, &bound, p1.class_tokens)?),
                    (None, None) => None,
                };
                if let Some(s) = scores {
                    out.scores.extend(rows(tape.value(s)));
                }
            }
        }
        out.query.extend(rows(&query));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketAccuracy {
    /// Absent when the bucket holds no test samples.
    pub accuracy: Option<f64>,
    pub samples: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: f64,
    pub samples: usize,
    pub many: BucketAccuracy,
    pub medium: BucketAccuracy,
    pub few: BucketAccuracy,
    pub per_class: Vec<Option<f64>>,
    pub convention: String,
}

impl EvalReport {
    /// One JSON object, keys in declaration order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }

    pub fn summary(&self) -> String {
        let pct = |b: &BucketAccuracy| b.accuracy.map_or_else(|| "n/a".to_string(), |a| format!("{:.2}", 100.0 * a));
        format!(
            "overall {:.2}  many {}  medium {}  few {}  ({})",
            100.0 * self.overall,
            pct(&self.many),
            pct(&self.medium),
            pct(&self.few),
            self.convention
        )
    }

    pub fn bucket(&self, shot: Shot) -> &BucketAccuracy {
        match shot {
            Shot::Many => &self.many,
            Shot::Medium => &self.medium,
            Shot::Few => &self.few,
        }
    }
}

/// Accuracies of `predictions` against `labels`, bucketed by the
/// training-count split.
pub fn evaluate_predictions(predictions: &[usize], labels: &[usize], split: &ShotSplit) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("evaluate", "no samples"));
    }
    let classes = split.buckets.len();
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= classes {
            return Err(Error::invalid("evaluate", format!("label {l} outside the {classes}-class split")));
        }
        total[l] += 1;
        correct[l] += usize::from(p == l);
    }
    let bucket = |shot: Shot| {
        let (mut c, mut n, mut k) = (0, 0, 0);
        for i in (0..classes).filter(|&i| split.buckets[i] == shot) {
            c += correct[i];
            n += total[i];
            k += 1;
        }
        BucketAccuracy {
            accuracy: (n > 0).then(|| c as f64 / n as f64),
            samples: n,
            classes: k,
        }
    };
    Ok(EvalReport {
        overall: correct.iter().sum::<usize>() as f64 / labels.len() as f64,
        samples: labels.len(),
        many: bucket(Shot::Many),
        medium: bucket(Shot::Medium),
        few: bucket(Shot::Few),
        per_class: (0..classes)
            .map(|i| (total[i] > 0).then(|| correct[i] as f64 / total[i] as f64))
            .collect(),
        convention: split.convention(),
    })
}

pub fn evaluate(model: &Model, ds: &Dataset, split: &ShotSplit, top_k: usize) -> Result<EvalReport> {
    let inf = infer(model, &ds.images, top_k)?;
    if inf.scores.is_empty() && !ds.is_empty() {
        return Err(Error::invalid("evaluate", "model has neither classifier nor head"));
    }
    evaluate_predictions(&inf.predictions(), &ds.labels, split)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterStats {
    /// Classes present in the input, ascending.
    pub classes: Vec<usize>,
    /// Mean distance from samples to their class centroid.
    pub inner: Vec<f64>,
    /// Mean pairwise distance between class centroids.
    pub inter: f64,
    pub gamma: f64,
    pub distance: String,
}

fn dist(a: &[f64], b: &[f64], metric: Distance) -> f64 {
    match metric {
        Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        Distance::Cosine => 1.0 - cosine(a, b),
    }
}

pub fn cluster_stats(features: &[Vec<f64>], labels: &[usize], metric: Distance) -> Result<ClusterStats> {
    if features.len() != labels.len() {
        return Err(Error::invalid("cluster_stats", "features and labels differ in length"));
    }
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::invalid(
            "cluster_stats",
            format!("need at least 2 classes, found {}", classes.len()),
        ));
    }
    let d = features[0].len();
    let mut centroids = Vec::with_capacity(classes.len());
    for &c in &classes {
        let mut sum = vec![0.0; d];
        let mut n = 0.0;
        for (f, _) in features.iter().zip(labels).filter(|(_, &l)| l == c) {
            for (s, v) in sum.iter_mut().zip(f) {
                *s += v;
            }
            n += 1.0;
        }
        centroids.push(sum.into_iter().map(|s| s / n).collect::<Vec<_>>());
    }
    let inner: Vec<f64> = classes
        .iter()
        .zip(&centroids)
        .map(|(&c, mu)| {
            let members: Vec<f64> = features
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(f, _)| dist(f, mu, metric))
                .collect();
            members.iter().sum::<f64>() / members.len() as f64
        })
        .collect();
    let mut pair_sum = 0.0;
    let mut pairs = 0.0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            pair_sum += dist(&centroids[i], &centroids[j], metric);
            pairs += 1.0;
        }
    }
    let inter = pair_sum / pairs;
    if !(inter > 0.0) {
        return Err(Error::invalid("cluster_stats", "class centroids coincide; ratio undefined"));
    }
    let gamma = inner.iter().sum::<f64>() / (classes.len() as f64 * inter);
    Ok(ClusterStats {
        classes,
        inner,
        inter,
        gamma,
        distance: metric.to_string(),
    })
}

/// Majority vote of the `k` most cosine-similar gallery samples; ties in
/// similarity go to the lower gallery index, ties in votes to the class of
/// the nearest neighbour among the tied classes.
pub fn knn_predict(gallery: &[Vec<f64>], gallery_labels: &[usize], query: &[f64], k: usize) -> Result<usize> {
    if gallery.is_empty() {
        return Err(Error::invalid("knn_accuracy", "empty gallery"));
    }
    if k == 0 {
        return Err(Error::invalid("knn_accuracy", "k must be at least 1"));
    }
    let mut order: Vec<(f64, usize)> = gallery.iter().enumerate().map(|(i, g)| (cosine(query, g) + 0.0, i)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let neighbours: Vec<usize> = order.iter().take(k).map(|&(_, i)| gallery_labels[i]).collect();
    let classes = gallery_labels.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![0usize; classes];
    for &l in &neighbours {
        votes[l] += 1;
    }
    let top = *votes.iter().max().expect("non-empty");
    Ok(*neighbours.iter().find(|&&l| votes[l] == top).expect("a neighbour holds the top vote"))
}

pub fn knn_accuracy(
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("knn_accuracy", "no test samples"));
    }
    let mut correct = 0;
    for (q, &l) in test.iter().zip(test_labels) {
        correct += usize::from(knn_predict(gallery, gallery_labels, q, k)? == l);
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Per-class counts of matched pool indices.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchHistogram {
    /// `counts[c][j]`: how many samples of class `c` matched pool entry `j`.
    pub counts: Vec<Vec<usize>>,
    /// Samples per class.
    pub samples: Vec<usize>,
}

impl MatchHistogram {
    pub fn new(matches: &[Vec<usize>], labels: &[usize], classes: usize, pool_size: usize) -> Result<Self> {
        let mut counts = vec![vec![0; pool_size]; classes];
        let mut samples = vec![0; classes];
        for (m, &l) in matches.iter().zip(labels) {
            samples[l] += 1;
            for &j in m {
                if j >= pool_size {
                    return Err(Error::invalid("prompt_match_stats", format!("index {j} outside pool of {pool_size}")));
                }
                counts[l][j] += 1;
            }
        }
        Ok(MatchHistogram { counts, samples })
    }

    /// Fraction of class-`c` samples whose matches include one of the
    /// class's `top` most frequent pool indices. `None` for an absent class.
    pub fn coverage(&self, c: usize, top: usize, matches: &[Vec<usize>], labels: &[usize]) -> Option<f64> {
        if self.samples[c] == 0 {
            return None;
        }
        let mut order: Vec<usize> = (0..self.counts[c].len()).collect();
        order.sort_by(|&a, &b| self.counts[c][b].cmp(&self.counts[c][a]).then(a.cmp(&b)));
        let favourites = &order[..top.min(order.len())];
        let hit = matches
            .iter()
            .zip(labels)
            .filter(|(m, &l)| l == c && m.iter().any(|j| favourites.contains(j)))
            .count();
        Some(hit as f64 / self.samples[c] as f64)
    }

    /// Share of class-`c` match slots taken by each of its `top` most
    /// frequent indices, in descending order.
    pub fn top_shares(&self, c: usize, top: usize) -> Vec<f64> {
        let total: usize = self.counts[c].iter().sum();
        if total == 0 {
            return Vec::new();
        }
        let mut sorted = self.counts[c].clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted.into_iter().take(top).map(|n| n as f64 / total as f64).collect()
    }
}

/// Matching statistics for a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchStats {
    pub histogram: MatchHistogram,
    /// Per class: fraction of samples matched to at least one of the
    /// class's two most frequent pool indices.
    pub top2_coverage: Vec<Option<f64>>,
    /// Per class: combined share of match slots held by the two most
    /// frequent indices.
    pub top2_share: Vec<Option<f64>>,
}

pub fn match_stats(matches: &[Vec<usize>], labels: &[usize], classes: usize, pool_size: usize) -> Result<MatchStats> {
    let histogram = MatchHistogram::new(matches, labels, classes, pool_size)?;
    let top2_coverage = (0..classes).map(|c| histogram.coverage(c, 2, matches, labels)).collect();
    let top2_share = (0..classes)
        .map(|c| {
            let s = histogram.top_shares(c, 2);
            (!s.is_empty()).then(|| s.iter().sum())
        })
        .collect();
    Ok(MatchStats {
        histogram,
        top2_coverage,
        top2_share,
    })
}

pub fn prompt_match_stats(model: &Model, ds: &Dataset, top_k: usize) -> Result<MatchStats> {
    let pool = model
        .pool
        .as_ref()
        .ok_or_else(|| Error::invalid("prompt_match_stats", "model has no prompt pool"))?;
    let inf = infer(model, &ds.images, top_k)?;
    match_stats(inf.matches.as_deref().unwrap_or(&[]), &ds.labels, ds.classes, pool.size())
}

/// Header `n d`, then `label v_1 … v_d` per sample.
pub fn features_text(features: &[Vec<f64>], labels: &[usize], dim: usize) -> Result<String> {
    let mut out = format!("{} {dim}\n", features.len());
    for (f, l) in features.iter().zip(labels) {
        if f.len() != dim {
            return Err(Error::invalid("export_features", format!("row of {} values, header says {dim}", f.len())));
        }
        let _ = write!(out, "{l}");
        for v in f {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_features(features: &[Vec<f64>], labels: &[usize], dim: usize, path: &Path) -> Result<()> {
    write_atomic(path, features_text(features, labels, dim)?.as_bytes())
}

pub fn parse_features(text: &str) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let bad = |line: usize, what: &str| Error::Dataset(format!("feature file line {line}: {what}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let mut it = header.split_whitespace().map(str::parse::<usize>);
    let (n, d) = match (it.next(), it.next()) {
        (Some(Ok(n)), Some(Ok(d))) => (n, d),
        _ => return Err(bad(1, "header must be `n d`")),
    };
    let mut feats = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let mut parts = line.split_whitespace();
        let label = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(i + 2, "missing label"))?;
        let row = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(i + 2, "unparsable value"))?;
        if row.len() != d {
            return Err(bad(i + 2, &format!("{} values, expected {d}", row.len())));
        }
        feats.push(row);
        labels.push(label);
    }
    if feats.len() != n {
        return Err(bad(1, &format!("header announces {n} rows, found {}", feats.len())));
    }
    Ok((feats, labels))
}
