//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod oracles;

use cta_core::losses::{
    consistency_loss, ema_proto_loss, entropy_min_loss, source_align_loss, PseudoLabels,
};
use cta_core::model::{Mode, Model, ParamKind, Trainable};
use cta_core::numerics::{Tape, Tensor, Var};
use cta_core::prototypes::{SourcePrototypes, TargetPrototypes};
use cta_core::{ArchConfig, Result, TrainScope};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_arch() -> ArchConfig {
    ArchConfig {
        input_dim: 12,
        hidden: vec![10],
        feature_dim: 6,
        classes: 4,
    }
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Model with non-trivial BN affine parameters so every gradient path is exercised.
pub fn perturbed_model(seed: u64) -> Model {
    let mut m = Model::init(small_arch(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for kind in m.param_kinds() {
        if matches!(kind, ParamKind::Gamma(_) | ParamKind::Beta(_)) {
            for v in m.param_mut(kind).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossUnderTest {
    Entropy,
    EmaHard,
    EmaSoft,
    Source,
    Consistency,
}

impl LossUnderTest {
    pub const ALL: [LossUnderTest; 5] = [
        LossUnderTest::Entropy,
        LossUnderTest::EmaHard,
        LossUnderTest::EmaSoft,
        LossUnderTest::Source,
        LossUnderTest::Consistency,
    ];
}

/// Fixed inputs of one loss evaluation. Pseudo-labels, soft targets and
/// prototypes are computed once so the loss is a smooth function of the
/// parameters.
pub struct LossFixture {
    pub x: Tensor,
    pub x_aug: Tensor,
    pub labels: Vec<usize>,
    pub soft: Tensor,
    pub source: SourcePrototypes,
    pub target: TargetPrototypes,
}

impl LossFixture {
    pub fn new(model: &Model, seed: u64) -> Self {
        let x = random_tensor(8, model.arch().input_dim, seed);
        let x_aug = random_tensor(8, model.arch().input_dim, seed + 1);
        let out = model.forward(&x, Mode::Adapt).unwrap();
        let labels: Vec<usize> = out.logits.iter_rows().map(cta_core::numerics::argmax).collect();
        let soft_rows: Vec<Vec<f64>> = out
            .logits
            .iter_rows()
            .map(|r| cta_core::numerics::softmax(r).unwrap())
            .collect();
        let soft = Tensor::from_rows(&soft_rows).unwrap();
        let c = model.classes();
        let src = random_tensor(c, model.feature_dim(), seed + 2).map(|v| v.abs());
        let source = SourcePrototypes::from_features(&src, &(0..c).collect::<Vec<_>>(), c).unwrap();
        let target = TargetPrototypes::from_head(model.head(), 0.996).unwrap();
        Self {
            x,
            x_aug,
            labels,
            soft,
            source,
            target,
        }
    }

    pub fn record(&self, tape: &mut Tape, model: &Model, scope: TrainScope, which: LossUnderTest) -> Result<(Var, cta_core::model::BoundParams)> {
        let params = model.bind(tape, Trainable::Scope(scope))?;
        let x = tape.constant(self.x.clone())?;
        let (out, _) = model.forward_on(tape, &params, x, Mode::Adapt)?;
        let loss = match which {
            LossUnderTest::Entropy => entropy_min_loss(tape, Some(out.logits))?,
            LossUnderTest::EmaHard => {
                ema_proto_loss(tape, Some(out.features), PseudoLabels::Hard(&self.labels), &self.target)?
            }
            LossUnderTest::EmaSoft => {
                ema_proto_loss(tape, Some(out.features), PseudoLabels::Soft(&self.soft), &self.target)?
            }
            LossUnderTest::Source => source_align_loss(tape, Some(out.features), &self.labels, &self.source)?,
            LossUnderTest::Consistency => {
                let xa = tape.constant(self.x_aug.clone())?;
                let (aug, _) = model.forward_on(tape, &params, xa, Mode::Adapt)?;
                consistency_loss(tape, out.logits, aug.logits)?
            }
        };
        Ok((loss, params))
    }

    pub fn value(&self, model: &Model, which: LossUnderTest) -> f64 {
        let mut tape = Tape::new();
        let (loss, _) = self.record(&mut tape, model, TrainScope::BnAffine, which).unwrap();
        tape.value(loss).unwrap().item()
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over `samples` components of every tracked parameter.
pub fn max_fd_error(model: &Model, scope: TrainScope, which: LossUnderTest, samples: usize, seed: u64) -> f64 {
    let fx = LossFixture::new(model, seed);
    let mut tape = Tape::new();
    let (loss, params) = fx.record(&mut tape, model, scope, which).unwrap();
    let grads = tape.gradients(loss).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &kind in params.tracked() {
        let g = grads.wrt(&tape, params.var(kind)).unwrap();
        let n = g.len();
        let picks: Vec<usize> = if n <= samples { (0..n).collect() } else { (0..samples).map(|_| rng.random_range(0..n)).collect() };
        for i in picks {
            let mut plus = model.clone();
            plus.param_mut(kind).data_mut()[i] += h;
            let mut minus = model.clone();
            minus.param_mut(kind).data_mut()[i] -= h;
            let fd = (fx.value(&plus, which) - fx.value(&minus, which)) / (2.0 * h);
            let an = g.data()[i];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-5);
            worst = worst.max(err);
        }
    }
    worst
}

/// Small end-to-end configuration that pretrains in well under a second.
pub fn small_config() -> cta_core::ExperimentConfig {
    let mut cfg = cta_core::ExperimentConfig::default();
    cfg.stream.source_per_class = 80;
    cfg.stream.samples_per_domain = 320;
    cfg.stream.kinds = vec!["gaussian-noise".into(), "contrast".into()];
    cfg.adapt.batch_size = 32;
    cfg.pretrain.epochs = 6;
    cfg.pretrain.min_heldout_accuracy = 0.0;
    cfg
}
