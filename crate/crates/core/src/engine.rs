//! Online predict-then-adapt loop over a stream of target batches.
//!
//! Each batch is scored by the model state at its arrival; only then are the
//! losses computed, the target prototypes blended and one optimizer step
//! taken. Domain boundaries never reach this module's adaptation logic.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtaError, Result};
use crate::losses::{
    consistency_loss, default_entropy_threshold, ema_proto_loss, entropy_min_loss, overall_loss,
    reliability_mask, source_align_loss, LabelMode, LossParts, LossWeights, PseudoLabels,
};
use crate::metrics::{LossRecord, Recorder, RunReport};
use crate::model::{Mode, Model, ParamKind, TrainScope, Trainable};
use crate::numerics::{argmax, entropy, softmax, Tape, Tensor, Var};
use crate::optim::Sgd;
use crate::prototypes::{SourcePrototypes, TargetPrototypes, DEFAULT_ALPHA};
use crate::streams::{augment, DomainStream};

/// Default adaptation learning rate.
pub const DEFAULT_LR: f64 = 0.00025;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// No adaptation; frozen running statistics.
    #[serde(rename = "source")]
    Source,
    /// Entropy minimization on batch-normalized outputs.
    #[serde(rename = "tent")]
    Tent,
    /// Prototype losses without the entropy term.
    #[serde(rename = "ours-only")]
    OursOnly,
    /// Entropy minimization plus prototype losses.
    #[serde(rename = "tent+ours")]
    TentOurs,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Source, Method::Tent, Method::OursOnly, Method::TentOurs];

    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::Tent => "tent",
            Method::OursOnly => "ours-only",
            Method::TentOurs => "tent+ours",
        }
    }

    pub fn adapts(self) -> bool {
        self != Method::Source
    }

    pub fn uses_entropy(self) -> bool {
        matches!(self, Method::Tent | Method::TentOurs)
    }

    pub fn uses_prototypes(self) -> bool {
        matches!(self, Method::OursOnly | Method::TentOurs)
    }

    /// `(λ_ema, λ_src)` defaults; λ_src is lower when the prototype terms
    /// stand alone.
    pub fn default_weights(self) -> LossWeights {
        let (ema, src) = match self {
            Method::Source | Method::Tent => (0.0, 0.0),
            Method::OursOnly => (2.0, 20.0),
            Method::TentOurs => (2.0, 50.0),
        };
        LossWeights { ema, src, cons: 1.0 }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CtaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CtaError::Unknown {
                what: "method",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub method: Method,
    pub weights: LossWeights,
    pub alpha: f64,
    pub entropy_threshold: f64,
    pub lr: f64,
    pub momentum: f64,
    pub scope: TrainScope,
    pub label_mode: LabelMode,
    /// Restrict the entropy term to reliable samples.
    pub filter_unsup: bool,
    /// Add the augmentation consistency term.
    pub consistency: bool,
    /// Seed of the augmentation stream.
    pub seed: u64,
}

impl AdaptConfig {
    pub fn for_method(method: Method, classes: usize) -> Self {
        Self {
            method,
            weights: method.default_weights(),
            alpha: DEFAULT_ALPHA,
            entropy_threshold: default_entropy_threshold(classes),
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            scope: TrainScope::BnAffine,
            label_mode: LabelMode::Hard,
            filter_unsup: false,
            consistency: false,
            seed: 0,
        }
    }
}

pub fn make_optimizer(lr: f64, momentum: f64) -> Result<Sgd<ParamKind>> {
    Sgd::new(lr, momentum)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub reliable: usize,
    pub losses: LossRecord,
    /// Whether an optimizer step was taken.
    pub updated: bool,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub predictions: Vec<usize>,
    pub confidences: Vec<f64>,
    pub entropies: Vec<f64>,
    /// Features of every row from the scoring forward pass.
    pub features: Tensor,
    pub record: StepRecord,
}

/// Mutable state carried across the whole stream.
#[derive(Debug, Clone)]
pub struct AdaptationState {
    model: Model,
    source: SourcePrototypes,
    target: TargetPrototypes,
    optimizer: Sgd<ParamKind>,
    cfg: AdaptConfig,
    step: u64,
    aug_rng: ChaCha8Rng,
}

impl AdaptationState {
    pub fn new(model0: Model, source: SourcePrototypes, cfg: AdaptConfig) -> Result<Self> {
        cfg.weights.validate()?;
        if source.matrix().shape() != [model0.classes(), model0.feature_dim()] {
            return Err(CtaError::Shape("source prototypes do not match the model".into()));
        }
        let target = TargetPrototypes::from_head(model0.head(), cfg.alpha)?;
        let optimizer = make_optimizer(cfg.lr, cfg.momentum)?;
        Ok(Self {
            model: model0,
            source,
            target,
            optimizer,
            aug_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn source(&self) -> &SourcePrototypes {
        &self.source
    }

    pub fn target(&self) -> &TargetPrototypes {
        &self.target
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Scores the batch with the current model, then adapts on it.
    pub fn adapt_batch(&mut self, inputs: &Tensor) -> Result<BatchOutcome> {
        let step = self.step;
        self.step += 1;
        if !self.cfg.method.adapts() {
            return self.score_frozen(inputs, step);
        }
        if inputs.rows() < 2 {
            return Err(CtaError::DegenerateBatch(inputs.rows()));
        }
        match self.adapt_inner(inputs, step) {
            Err(CtaError::NonFinite(_)) => Err(CtaError::NonFiniteLoss {
                step,
                reliable: 0,
                unsup: f64::NAN,
                ema: f64::NAN,
                src: f64::NAN,
                cons: f64::NAN,
            }),
            other => other,
        }
    }

    fn score_frozen(&self, inputs: &Tensor, step: u64) -> Result<BatchOutcome> {
        let out = self.model.forward(inputs, Mode::Frozen)?;
        let (predictions, confidences, entropies) = score(&out.logits)?;
        Ok(BatchOutcome {
            predictions,
            confidences,
            entropies,
            features: out.features,
            record: StepRecord {
                step,
                reliable: 0,
                losses: LossRecord::default(),
                updated: false,
            },
        })
    }

    fn adapt_inner(&mut self, inputs: &Tensor, step: u64) -> Result<BatchOutcome> {
        let cfg = self.cfg.clone();
        let method = cfg.method;
        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape, Trainable::Scope(cfg.scope))?;
        let x = tape.constant(inputs.clone())?;
        let (out, _) = self.model.forward_on(&mut tape, &params, x, Mode::Adapt)?;
        let logits = tape.value(out.logits)?.clone();
        let features = tape.value(out.features)?.clone();
        let (predictions, confidences, entropies) = score(&logits)?;

        let reliable = reliability_mask(&logits, cfg.entropy_threshold)?;
        let rel_rows = |tape: &mut Tape, v: Var| -> Result<Option<Var>> {
            if reliable.is_empty() {
                Ok(None)
            } else {
                tape.select_rows(v, &reliable.indices).map(Some)
            }
        };

        let unsup = if !method.uses_entropy() {
            tape.constant(Tensor::scalar(0.0))?
        } else if cfg.filter_unsup {
            let z = rel_rows(&mut tape, out.logits)?;
            entropy_min_loss(&mut tape, z)?
        } else {
            entropy_min_loss(&mut tape, Some(out.logits))?
        };

        let rel_feats = rel_rows(&mut tape, out.features)?;
        let (ema, src) = if method.uses_prototypes() {
            let soft;
            let labels = match cfg.label_mode {
                LabelMode::Hard => PseudoLabels::Hard(&reliable.pseudo_labels),
                LabelMode::Soft if reliable.is_empty() => PseudoLabels::Hard(&[]),
                LabelMode::Soft => {
                    let rows = reliable
                        .indices
                        .iter()
                        .map(|&i| softmax(logits.row(i)))
                        .collect::<Result<Vec<_>>>()?;
                    soft = Tensor::from_rows(&rows)?;
                    PseudoLabels::Soft(&soft)
                }
            };
            let ema = ema_proto_loss(&mut tape, rel_feats, labels, &self.target)?;
            let src = source_align_loss(&mut tape, rel_feats, &reliable.pseudo_labels, &self.source)?;
            (ema, src)
        } else {
            let z = tape.constant(Tensor::scalar(0.0))?;
            (z, z)
        };

        let cons = if cfg.consistency {
            let side = (inputs.cols() as f64).sqrt().round() as usize;
            if side * side != inputs.cols() {
                return Err(CtaError::Shape("consistency augmentation needs square images".into()));
            }
            let rows: Vec<Vec<f64>> = inputs
                .iter_rows()
                .map(|r| augment(r, side, &mut self.aug_rng))
                .collect();
            let xa = tape.constant(Tensor::from_rows(&rows)?)?;
            let (aug, _) = self.model.forward_on(&mut tape, &params, xa, Mode::Adapt)?;
            Some(consistency_loss(&mut tape, out.logits, aug.logits)?)
        } else {
            None
        };

        let parts = LossParts { unsup, ema, src, cons };
        let total = overall_loss(&mut tape, parts, &cfg.weights, method)?;
        let value = |v: Var| tape.value(v).map(Tensor::item);
        let losses = LossRecord {
            total: value(total)?,
            unsup: value(unsup)?,
            ema: value(ema)?,
            src: value(src)?,
            cons: cons.map(value).transpose()?.unwrap_or(0.0),
        };
        if ![losses.total, losses.unsup, losses.ema, losses.src, losses.cons]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(CtaError::NonFiniteLoss {
                step,
                reliable: reliable.len(),
                unsup: losses.unsup,
                ema: losses.ema,
                src: losses.src,
                cons: losses.cons,
            });
        }

        // The prototype loss above already used the pre-update prototypes.
        if method.uses_prototypes() && !reliable.is_empty() {
            let rel = features.select_rows(&reliable.indices)?;
            self.target.ema_update(&rel, &reliable.pseudo_labels)?;
        }

        let contributes = cfg.consistency
            || (method.uses_entropy() && !(cfg.filter_unsup && reliable.is_empty()))
            || (method.uses_prototypes() && !reliable.is_empty());
        if contributes {
            let grads = tape.gradients(total)?;
            for &kind in params.tracked() {
                let g = grads.wrt(&tape, params.var(kind))?;
                self.optimizer.step(kind, self.model.param_mut(kind), &g)?;
            }
        }

        Ok(BatchOutcome {
            predictions,
            confidences,
            entropies,
            features,
            record: StepRecord {
                step,
                reliable: reliable.len(),
                losses,
                updated: contributes,
            },
        })
    }
}

fn score(logits: &Tensor) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    let mut preds = Vec::with_capacity(logits.rows());
    let mut conf = Vec::with_capacity(logits.rows());
    let mut ent = Vec::with_capacity(logits.rows());
    for row in logits.iter_rows() {
        let p = softmax(row)?;
        let k = argmax(row);
        preds.push(k);
        conf.push(p[k]);
        ent.push(entropy(row)?);
    }
    Ok((preds, conf, ent))
}

/// Feeds every batch of every domain through `state` in stream order.
/// Labels go only to the recorder.
pub fn run_stream(state: &mut AdaptationState, stream: &DomainStream) -> Result<RunReport> {
    let names: Vec<String> = stream.domains().iter().map(|d| d.name()).collect();
    let mut recorder = Recorder::new(
        state.cfg.method.name(),
        state.model.classes(),
        names,
        state.source.matrix(),
    );
    for k in 0..stream.domains().len() {
        for batch in stream.domain_batches(k)? {
            let outcome = state.adapt_batch(&batch.inputs)?;
            recorder.record(k, &batch.labels, &outcome, &state.target);
        }
    }
    Ok(recorder.finish(&state.target))
}
