//! Adaptation objectives and the low-entropy reliability filter.
//!
//! Every loss is the arithmetic mean over the samples that contribute to it,
//! and every loss over an empty sample set is the constant 0.

use serde::{Deserialize, Serialize};

use crate::engine::Method;
use crate::error::{CtaError, Result};
use crate::numerics::{argmax, entropy, Tape, Tensor, Var};
use crate::prototypes::{SourcePrototypes, TargetPrototypes};

/// Entropy threshold `0.4 · ln C` below which a sample counts as reliable.
pub fn default_entropy_threshold(classes: usize) -> f64 {
    0.4 * (classes as f64).ln()
}

/// Low-entropy samples of a batch with their pseudo-labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReliableSet {
    pub indices: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
    pub entropies: Vec<f64>,
}

impl ReliableSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Keeps the rows whose prediction entropy is strictly below `e0`.
pub fn reliability_mask(logits: &Tensor, e0: f64) -> Result<ReliableSet> {
    let mut set = ReliableSet::default();
    for (i, row) in logits.iter_rows().enumerate() {
        let h = entropy(row)?;
        if h < e0 {
            set.indices.push(i);
            set.pseudo_labels.push(argmax(row));
            set.entropies.push(h);
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    #[default]
    Hard,
    Soft,
}

/// Targets for the prototype classification loss.
#[derive(Debug, Clone, Copy)]
pub enum PseudoLabels<'a> {
    Hard(&'a [usize]),
    /// Per-row target distributions `[R, C]`, treated as constants.
    Soft(&'a Tensor),
}

impl PseudoLabels<'_> {
    fn len(&self) -> usize {
        match self {
            PseudoLabels::Hard(l) => l.len(),
            PseudoLabels::Soft(t) => t.rows(),
        }
    }
}

fn zero(tape: &mut Tape) -> Result<Var> {
    tape.constant(Tensor::scalar(0.0))
}

/// Cross-entropy of `features · normalize(P^t)ᵀ` against the pseudo-labels.
///
/// Features enter unnormalized. Prototypes are recorded as constants, so the
/// gradient reaches only the feature extractor.
pub fn ema_proto_loss(
    tape: &mut Tape,
    features: Option<Var>,
    labels: PseudoLabels<'_>,
    targets: &TargetPrototypes,
) -> Result<Var> {
    let Some(features) = features else {
        return zero(tape);
    };
    let r = tape.value(features)?.rows();
    if labels.len() != r {
        return Err(CtaError::Shape(format!("{} labels for {r} features", labels.len())));
    }
    let protos = tape.constant(targets.normalized())?;
    let logits = tape.matmul_t(features, protos)?;
    let logp = tape.log_softmax(logits)?;
    let total = match labels {
        PseudoLabels::Hard(y) => {
            let picked = tape.gather(logp, y)?;
            tape.sum(picked)?
        }
        PseudoLabels::Soft(q) => {
            let q = tape.constant(q.clone())?;
            let prod = tape.mul(q, logp)?;
            tape.sum(prod)?
        }
    };
    tape.scale(total, -1.0 / r as f64)
}

/// Mean squared distance between each feature and the source prototype of
/// its pseudo-label.
pub fn source_align_loss(
    tape: &mut Tape,
    features: Option<Var>,
    pseudo_labels: &[usize],
    source: &SourcePrototypes,
) -> Result<Var> {
    let Some(features) = features else {
        return zero(tape);
    };
    let r = tape.value(features)?.rows();
    if pseudo_labels.len() != r {
        return Err(CtaError::Shape(format!(
            "{} labels for {r} features",
            pseudo_labels.len()
        )));
    }
    let classes = source.matrix().rows();
    if let Some(&bad) = pseudo_labels.iter().find(|&&y| y >= classes) {
        return Err(CtaError::LabelOutOfRange { label: bad, classes });
    }
    let anchors = source.matrix().select_rows(pseudo_labels)?;
    let anchors = tape.constant(anchors)?;
    let diff = tape.sub(features, anchors)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / r as f64)
}

/// Mean prediction entropy over the rows of `logits`.
pub fn entropy_min_loss(tape: &mut Tape, logits: Option<Var>) -> Result<Var> {
    let Some(logits) = logits else {
        return zero(tape);
    };
    let n = tape.value(logits)?.rows();
    let p = tape.softmax(logits)?;
    let logp = tape.log_softmax(logits)?;
    let plogp = tape.mul(p, logp)?;
    let total = tape.sum(plogp)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Mean cross-entropy `−Σ σ(z_orig) log σ(z_aug)`; both branches carry gradient.
pub fn consistency_loss(tape: &mut Tape, logits_orig: Var, logits_aug: Var) -> Result<Var> {
    let (a, b) = (tape.value(logits_orig)?, tape.value(logits_aug)?);
    a.same_shape(b)?;
    let n = a.rows();
    let p = tape.softmax(logits_orig)?;
    let logq = tape.log_softmax(logits_aug)?;
    let prod = tape.mul(p, logq)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ema: f64,
    pub src: f64,
    pub cons: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_ema", self.ema), ("lambda_src", self.src), ("lambda_cons", self.cons)] {
            if !v.is_finite() || v < 0.0 {
                return Err(CtaError::InvalidArgument(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Loss terms computed on one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub unsup: Var,
    pub ema: Var,
    pub src: Var,
    pub cons: Option<Var>,
}

/// `L_unsup + λ_ema·L_ema + λ_src·L_src (+ λ_cons·L_cons)`; the unsupervised
/// term is dropped for [`Method::OursOnly`].
pub fn overall_loss(tape: &mut Tape, parts: LossParts, weights: &LossWeights, method: Method) -> Result<Var> {
    weights.validate()?;
    let mut total = match method {
        Method::OursOnly => zero(tape)?,
        _ => parts.unsup,
    };
    let ema = tape.scale(parts.ema, weights.ema)?;
    total = tape.add(total, ema)?;
    let src = tape.scale(parts.src, weights.src)?;
    total = tape.add(total, src)?;
    if let Some(cons) = parts.cons {
        let c = tape.scale(cons, weights.cons)?;
        total = tape.add(total, c)?;
    }
    Ok(total)
}
