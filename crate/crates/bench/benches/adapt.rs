use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use cta_core::engine::AdaptationState;
use cta_core::metrics::{calibration, CALIBRATION_BINS};
use cta_core::model::{Mode, Trainable};
use cta_core::numerics::{Tape, Tensor};
use cta_core::{ExperimentConfig, Method, Model, SourcePrototypes, TrainScope};

fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
    // xorshift, enough for benchmark inputs
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn setup(method: Method) -> (ExperimentConfig, Model, SourcePrototypes, Tensor) {
    let cfg = ExperimentConfig {
        method,
        ..ExperimentConfig::default()
    }
    .resolve()
    .unwrap();
    let arch = cfg.arch_config();
    let model = Model::init(arch.clone(), 0).unwrap();
    let b = cfg.adapt.batch_size;
    let x = Tensor::matrix(b, arch.input_dim, pseudo_random(b * arch.input_dim, 1)).unwrap();
    let c = arch.classes;
    let feats = Tensor::matrix(c, arch.feature_dim, pseudo_random(c * arch.feature_dim, 2)).unwrap();
    let source = SourcePrototypes::from_features(&feats, &(0..c).collect::<Vec<_>>(), c).unwrap();
    (cfg, model, source, x)
}

fn forward_backward(c: &mut Criterion) {
    let (_, model, _, x) = setup(Method::Tent);
    let mut g = c.benchmark_group("model");
    g.bench_function("forward_frozen_b64", |b| b.iter(|| model.forward(black_box(&x), Mode::Frozen).unwrap()));
    for scope in [TrainScope::BnAffine, TrainScope::FullExtractor] {
        g.bench_function(format!("entropy_backward_{scope:?}_b64"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let params = model.bind(&mut tape, Trainable::Scope(scope)).unwrap();
                let xv = tape.constant(x.clone()).unwrap();
                let (out, _) = model.forward_on(&mut tape, &params, xv, Mode::Adapt).unwrap();
                let loss = cta_core::losses::entropy_min_loss(&mut tape, Some(out.logits)).unwrap();
                tape.gradients(loss).unwrap()
            })
        });
    }
    g.finish();
}

fn adapt_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("adapt_batch");
    for method in Method::ALL {
        let (cfg, model, source, x) = setup(method);
        let state = AdaptationState::new(model, source, cfg.adapt_config()).unwrap();
        g.bench_function(method.name(), |b| {
            b.iter_batched(
                || state.clone(),
                |mut st| st.adapt_batch(black_box(&x)).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn ece(c: &mut Criterion) {
    let n = 10_000;
    let conf = pseudo_random(n, 3);
    let correct: Vec<bool> = pseudo_random(n, 4).iter().zip(&conf).map(|(u, p)| u < p).collect();
    let ent = pseudo_random(n, 5);
    c.bench_function("calibration_10k", |b| {
        b.iter(|| calibration(black_box(&conf), &correct, &ent, CALIBRATION_BINS))
    });
}

criterion_group!(benches, forward_backward, adapt_step, ece);
criterion_main!(benches);
