//! Long-tailed classification objectives.
//!
//! Scores from the cosine classifier are pushed away from the head classes
//! by a Gaussian-clouded margin `(ln n_max − ln n_i)·|ε|` during training,
//! scaled by `α`, turned into probabilities, and scored by an asymmetric
//! focusing loss with separate exponents for the ground truth and the
//! negatives.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Per-class training counts `n_i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    counts: Vec<usize>,
}

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Self {
        ClassCounts { counts }
    }

    pub fn from_labels(labels: &[usize], classes: usize) -> Self {
        let mut counts = vec![0; classes];
        for &l in labels {
            counts[l] += 1;
        }
        ClassCounts { counts }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.counts
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn n_max(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn n_min(&self) -> usize {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `ln n_max − ln n_i` per class; fails if any class is absent.
    pub fn log_gaps(&self) -> Result<Vec<f64>> {
        if let Some(i) = self.counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(
                "gcl_adjust",
                format!("class {i} has no training samples"),
            ));
        }
        let ln_max = (self.n_max() as f64).ln();
        Ok(self.counts.iter().map(|&n| ln_max - (n as f64).ln()).collect())
    }
}

/// How `|ε|` is drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// Independent draw per class.
    PerClass,
    /// One draw shared by every class of the sample.
    PerSample,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GclParams {
    pub alpha: f64,
    pub noise: NoiseMode,
    /// Standard deviation of the Gaussian `ε`.
    pub noise_std: f64,
    pub training: bool,
}

impl Default for GclParams {
    fn default() -> Self {
        GclParams {
            alpha: 16.0,
            noise: NoiseMode::PerClass,
            noise_std: 1.0,
            training: true,
        }
    }
}

impl GclParams {
    pub fn eval(self) -> Self {
        GclParams {
            training: false,
            ..self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    /// `−[(1−p_j)^{λ₊} ln p_j + Σ_{i≠j} p_i^{λ₋} ln p_i]`
    NegatedLiteral,
    /// `−[(1−p_j)^{λ₊} ln p_j + Σ_{i≠j} p_i^{λ₋} ln(1−p_i)]`
    AsymmetricReference,
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::NegatedLiteral => "negated-literal",
            LossVariant::AsymmetricReference => "asymmetric-reference",
        })
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negated-literal" => Ok(LossVariant::NegatedLiteral),
            "asymmetric-reference" => Ok(LossVariant::AsymmetricReference),
            other => Err(Error::Config(format!(
                "loss.variant must be negated-literal or asymmetric-reference, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgclParams {
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub variant: LossVariant,
}

impl Default for AgclParams {
    fn default() -> Self {
        AgclParams {
            lambda_pos: 0.0,
            lambda_neg: 4.0,
            variant: LossVariant::NegatedLiteral,
        }
    }
}

/// A training target, possibly a mixup pair: the loss is
/// `λ·L(·, a) + (1−λ)·L(·, b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub a: usize,
    pub b: usize,
    pub lambda: f64,
}

impl Target {
    pub fn single(label: usize) -> Self {
        Target {
            a: label,
            b: label,
            lambda: 1.0,
        }
    }
}

/// Draws the per-sample margins `(ln n_max − ln n_i)·|ε_i|` for a batch,
/// `batch × C`. Zero in eval mode.
pub fn gcl_margins(counts: &ClassCounts, params: &GclParams, batch: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let c = counts.classes();
    if !params.training {
        return Ok(Tensor::zeros(&[batch, c]));
    }
    let gaps = counts.log_gaps()?;
    let mut out = Tensor::zeros(&[batch, c]);
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let shared: f64 = match params.noise {
            NoiseMode::PerSample => StandardNormal.sample(rng),
            NoiseMode::PerClass => 0.0,
        };
        for (v, g) in row.iter_mut().zip(&gaps) {
            let eps: f64 = match params.noise {
                NoiseMode::PerClass => StandardNormal.sample(rng),
                NoiseMode::PerSample => shared,
            };
            *v = g * (params.noise_std * eps).abs();
        }
    }
    Ok(out)
}

/// `v = α·(s − margins)` on the tape.
pub fn apply_margins(tape: &mut Tape, scores: Var, margins: Tensor, alpha: f64) -> Result<Var> {
    let m = tape.constant(margins);
    let shifted = tape.sub(scores, m)?;
    Ok(tape.scale(shifted, alpha))
}

/// Adjusted logits for a single score vector.
pub fn gcl_adjust(scores: &[f64], counts: &ClassCounts, params: &GclParams, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if scores.len() != counts.classes() {
        return Err(Error::ShapeMismatch {
            op: "gcl_adjust",
            left: vec![scores.len()],
            right: vec![counts.classes()],
        });
    }
    let margins = gcl_margins(counts, params, 1, rng)?;
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(scores));
    let v = apply_margins(&mut tape, s, margins, params.alpha)?;
    Ok(tape.value(v).data().to_vec())
}

fn check_targets(targets: &[Target], batch: usize, classes: usize) -> Result<()> {
    if targets.len() != batch {
        return Err(Error::invalid(
            "agcl_loss",
            format!("{} targets for batch of {batch}", targets.len()),
        ));
    }
    for t in targets {
        for l in [t.a, t.b] {
            if l >= classes {
                return Err(Error::invalid(
                    "agcl_loss",
                    format!("label {l} out of range for {classes} classes"),
                ));
            }
        }
    }
    Ok(())
}

/// Batch-mean asymmetric focusing loss over probabilities `batch × C`.
pub fn agcl_on_tape(tape: &mut Tape, probs: Var, targets: &[Target], params: &AgclParams) -> Result<Var> {
    let complement = tape.one_minus(probs);
    agcl_with_complement(tape, probs, complement, targets, params)
}

/// The same loss given `1 − p` separately, for callers that can compute
/// it without cancellation.
fn agcl_with_complement(tape: &mut Tape, probs: Var, complement: Var, targets: &[Target], params: &AgclParams) -> Result<Var> {
    let (batch, classes) = (tape.value(probs).rows(), tape.value(probs).cols());
    check_targets(targets, batch, classes)?;
    let mut pos_w = Tensor::zeros(&[batch, classes]);
    let mut neg_w = Tensor::full(&[batch, classes], 0.0);
    {
        let (pw, nw) = (pos_w.data_mut(), neg_w.data_mut());
        for (b, t) in targets.iter().enumerate() {
            for (label, w) in [(t.a, t.lambda), (t.b, 1.0 - t.lambda)] {
                if w == 0.0 {
                    continue;
                }
                for i in 0..classes {
                    if i == label {
                        pw[b * classes + i] += w;
                    } else {
                        nw[b * classes + i] += w;
                    }
                }
            }
        }
    }
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = tape.log(p)?;
    let q = tape.clamp(complement, PROB_CLAMP, 1.0 - PROB_CLAMP);

    let focus_pos = tape.pow(q, params.lambda_pos);
    let pos = tape.mul(focus_pos, log_p)?;
    let pw = tape.constant(pos_w);
    let pos = tape.mul(pos, pw)?;

    let focus_neg = tape.pow(p, params.lambda_neg);
    let neg_log = match params.variant {
        LossVariant::NegatedLiteral => log_p,
        LossVariant::AsymmetricReference => tape.log(q)?,
    };
    let neg = tape.mul(focus_neg, neg_log)?;
    let nw = tape.constant(neg_w);
    let neg = tape.mul(neg, nw)?;

    let total = tape.add(pos, neg)?;
    let s = tape.sum(total);
    Ok(tape.scale(s, -1.0 / batch as f64))
}

/// Loss for a single probability vector and ground-truth index.
pub fn agcl_loss(probs: &[f64], label: usize, params: &AgclParams) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(probs));
    let l = agcl_on_tape(&mut tape, p, &[Target::single(label)], params)?;
    Ok(tape.value(l).item())
}

/// Classification loss `L_cls` on raw cosine scores (`batch × C`): GCL
/// margins, softmax, then the asymmetric loss, averaged over the batch.
pub fn classification_loss(
    tape: &mut Tape,
    scores: Var,
    targets: &[Target],
    counts: &ClassCounts,
    gcl: &GclParams,
    agcl: &AgclParams,
    rng: &mut impl Rng,
) -> Result<Var> {
    let (batch, classes) = (tape.value(scores).rows(), tape.value(scores).cols());
    if classes != counts.classes() {
        return Err(Error::ShapeMismatch {
            op: "classification_loss",
            left: tape.value(scores).shape().to_vec(),
            right: vec![counts.classes()],
        });
    }
    let margins = gcl_margins(counts, gcl, batch, rng)?;
    let logits = apply_margins(tape, scores, margins, gcl.alpha)?;
    let probs = tape.softmax_rows(logits)?;
    let complement = tape.softmax_complement_rows(logits)?;
    agcl_with_complement(tape, probs, complement, targets, agcl)
}

/// Phase-1 objective: the classification loss alone.
pub fn phase1_loss(
    tape: &mut Tape,
    scores: Var,
    targets: &[Target],
    counts: &ClassCounts,
    gcl: &GclParams,
    agcl: &AgclParams,
    rng: &mut impl Rng,
) -> Result<Var> {
    classification_loss(tape, scores, targets, counts, gcl, agcl, rng)
}

/// Phase-2 objective: `β·L_cls + key-similarity term`.
#[allow(clippy::too_many_arguments)]
pub fn phase2_loss(
    tape: &mut Tape,
    scores: Var,
    targets: &[Target],
    similarity_term: Var,
    beta: f64,
    counts: &ClassCounts,
    gcl: &GclParams,
    agcl: &AgclParams,
    rng: &mut impl Rng,
) -> Result<Var> {
    let cls = classification_loss(tape, scores, targets, counts, gcl, agcl, rng)?;
    let weighted = tape.scale(cls, beta);
    tape.add(weighted, similarity_term)
}

/// `1 − mean(sims)` for one sample's matched similarities.
pub fn similarity_term(sims: &[f64]) -> f64 {
    1.0 - sims.iter().sum::<f64>() / sims.len() as f64
}

/// Scalar phase-2 loss from an already computed classification loss.
pub fn phase2_value(cls: f64, sims: &[f64], beta: f64) -> f64 {
    beta * cls + similarity_term(sims)
}

/// Batch-mean cross-entropy of raw logits against (possibly mixed) targets.
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, targets: &[Target]) -> Result<Var> {
    let (batch, classes) = (tape.value(logits).rows(), tape.value(logits).cols());
    check_targets(targets, batch, classes)?;
    let mut w = Tensor::zeros(&[batch, classes]);
    for (b, t) in targets.iter().enumerate() {
        w.data_mut()[b * classes + t.a] += t.lambda;
        w.data_mut()[b * classes + t.b] += 1.0 - t.lambda;
    }
    let probs = tape.softmax_rows(logits)?;
    let p = tape.clamp(probs, PROB_CLAMP, 1.0);
    let log_p = tape.log(p)?;
    let w = tape.constant(w);
    let picked = tape.mul(log_p, w)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / batch as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BatchKind {
    Balanced,
    Instance,
}

impl fmt::Display for BatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchKind::Balanced => "balanced",
            BatchKind::Instance => "instance",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaSchedule {
    pub eta: f64,
    pub total_epochs: usize,
    pub epoch: usize,
}

/// `1` for balanced batches, `η·(E−e)/E` for instance batches.
pub fn beta_for(kind: BatchKind, sched: &BetaSchedule) -> f64 {
    match kind {
        BatchKind::Balanced => 1.0,
        BatchKind::Instance => {
            if sched.total_epochs == 0 {
                return 0.0;
            }
            let e = sched.epoch.min(sched.total_epochs) as f64;
            let total = sched.total_epochs as f64;
            sched.eta * (total - e) / total
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn balanced_counts_leave_scores_untouched() {
        let counts = ClassCounts::new(vec![7, 7, 7]);
        let params = GclParams {
            alpha: 2.0,
            ..Default::default()
        };
        let v = gcl_adjust(&[0.1, -0.4, 0.9], &counts, &params, &mut rng_for(1, &[])).unwrap();
        assert_eq!(v, vec![0.2, -0.8, 1.8]);
    }

    #[test]
    fn eval_mode_bypasses_adjustment() {
        let counts = ClassCounts::new(vec![100, 1]);
        let params = GclParams {
            alpha: 16.0,
            training: false,
            ..Default::default()
        };
        let v = gcl_adjust(&[0.5, -0.5], &counts, &params, &mut rng_for(1, &[])).unwrap();
        assert_eq!(v, vec![8.0, -8.0]);
    }

    #[test]
    fn absent_class_is_an_error() {
        let counts = ClassCounts::new(vec![5, 0]);
        assert!(gcl_adjust(&[0.0, 0.0], &counts, &GclParams::default(), &mut rng_for(1, &[])).is_err());
    }

    #[test]
    fn worked_agcl_value() {
        let l = agcl_loss(&[0.7, 0.2, 0.1], 0, &AgclParams::default()).unwrap();
        let oracle = -(0.7f64.ln() + 0.2f64.powi(4) * 0.2f64.ln() + 0.1f64.powi(4) * 0.1f64.ln());
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.3594803).abs() < 5e-8);
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        for variant in [LossVariant::NegatedLiteral, LossVariant::AsymmetricReference] {
            let params = AgclParams {
                variant,
                ..Default::default()
            };
            let l = agcl_loss(&[1.0, 0.0, 0.0], 0, &params).unwrap();
            assert!(l >= 0.0 && l < 1e-9, "{variant}: {l}");
        }
    }

    #[test]
    fn label_out_of_range() {
        assert!(agcl_loss(&[0.5, 0.5], 2, &AgclParams::default()).is_err());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("negated-literal".parse::<LossVariant>().unwrap(), LossVariant::NegatedLiteral);
        assert_eq!(
            LossVariant::AsymmetricReference.to_string().parse::<LossVariant>().unwrap(),
            LossVariant::AsymmetricReference
        );
        assert!("focal".parse::<LossVariant>().is_err());
    }

    #[test]
    fn beta_schedule() {
        let s = BetaSchedule {
            eta: 0.5,
            total_epochs: 40,
            epoch: 0,
        };
        assert_eq!(beta_for(BatchKind::Balanced, &s), 1.0);
        assert_eq!(beta_for(BatchKind::Instance, &s), 0.5);
        let end = BetaSchedule { epoch: 40, ..s };
        assert_eq!(beta_for(BatchKind::Instance, &end), 0.0);
        assert_eq!(beta_for(BatchKind::Balanced, &end), 1.0);
    }

    #[test]
    fn phase2_arithmetic() {
        assert!((phase2_value(3.0, &[0.96, 0.80], 0.0) - 0.12).abs() < 1e-12);
        assert_eq!(phase2_value(2.5, &[1.0, 1.0], 0.7), 0.7 * 2.5);
    }

    #[test]
    fn duplicate_batch_rows_keep_the_mean() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::vector(&[0.6, 0.3, 0.1]));
        let two = tape.constant(Tensor::from_rows(&[vec![0.6, 0.3, 0.1], vec![0.6, 0.3, 0.1]]).unwrap());
        let p = AgclParams::default();
        let a = agcl_on_tape(&mut tape, one, &[Target::single(1)], &p).unwrap();
        let b = agcl_on_tape(&mut tape, two, &[Target::single(1); 2], &p).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-15);
    }
}
