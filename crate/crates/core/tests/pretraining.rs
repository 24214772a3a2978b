use cta_core::model::{evaluate_accuracy, pretrain_source, Model, PretrainConfig};
use cta_core::numerics::Tensor;
use cta_core::ArchConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two Gaussian blobs separated by a margin along a random direction.
fn separable(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 6;
    let w: Vec<f64> = (0..dim).map(|j| if j % 2 == 0 { 1.0 } else { -0.5 }).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    while rows.len() < n {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        if s.abs() < 0.2 {
            continue;
        }
        labels.push(usize::from(s > 0.0));
        rows.push(x);
    }
    (Tensor::from_rows(&rows).unwrap(), labels)
}

/// Logistic regression by full-batch gradient descent.
fn logistic_accuracy(train: &(Tensor, Vec<usize>), test: &(Tensor, Vec<usize>)) -> f64 {
    let d = train.0.cols();
    let mut w = vec![0.0; d + 1];
    for _ in 0..2000 {
        let mut g = vec![0.0; d + 1];
        for (x, &y) in train.0.iter_rows().zip(&train.1) {
            let z: f64 = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let e = p - y as f64;
            for j in 0..d {
                g[j] += e * x[j];
            }
            g[d] += e;
        }
        for j in 0..=d {
            w[j] -= 0.5 * g[j] / train.1.len() as f64;
        }
    }
    let hits = test
        .0
        .iter_rows()
        .zip(&test.1)
        .filter(|(x, &y)| {
            let z: f64 = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            usize::from(z > 0.0) == y
        })
        .count();
    hits as f64 / test.1.len() as f64
}

#[test]
fn separable_toy_reaches_99_percent() {
    let train = separable(400, 1);
    let test = separable(400, 2);
    let oracle = logistic_accuracy(&train, &test);
    assert!(oracle >= 0.99, "oracle itself only reaches {oracle}");

    let arch = ArchConfig {
        input_dim: 6,
        hidden: vec![16],
        feature_dim: 8,
        classes: 2,
    };
    let cfg = PretrainConfig {
        epochs: 30,
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        batch_size: 32,
        seed: 3,
    };
    let model = pretrain_source(Model::init(arch, 4).unwrap(), &train.0, &train.1, &cfg).unwrap();
    let acc = evaluate_accuracy(&model, &test.0, &test.1).unwrap();
    assert!(acc >= 0.99, "held-out accuracy {acc}, oracle {oracle}");
}
