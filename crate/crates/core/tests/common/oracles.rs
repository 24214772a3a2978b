//! Brute-force recomputations of the run metrics on random records. Each
//! check returns the largest absolute deviation from the library value, or
//! infinity on a structural mismatch (bin counts, skipped classes).

use cta_core::metrics::{calibration, class_prediction_histogram, feature_geometry, CALIBRATION_BINS};
use cta_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RECORDS: usize = 1000;

fn sqd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn ece_deviation(seed: u64) -> f64 {
    let n_rec = RECORDS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conf: Vec<f64> = (0..n_rec).map(|_| rng.random_range(0.0..=1.0)).collect();
    // Exact bin edges and zero exercise the boundary rule.
    conf[0] = 0.0;
    conf[1] = 0.5;
    conf[2] = 1.0;
    conf[3] = 0.05;
    let correct: Vec<bool> = conf.iter().map(|&c| rng.random_bool(c)).collect();
    let ent: Vec<f64> = (0..n_rec).map(|_| rng.random_range(0.0..2.0)).collect();
    let cal = calibration(&conf, &correct, &ent, CALIBRATION_BINS);

    let n = CALIBRATION_BINS as f64;
    let mut ece = 0.0;
    let mut total = 0;
    for b in 0..CALIBRATION_BINS {
        let (lo, hi) = (b as f64 / n, (b + 1) as f64 / n);
        let members: Vec<usize> = (0..n_rec)
            .filter(|&i| (conf[i] > lo && conf[i] <= hi) || (b == 0 && conf[i] == 0.0))
            .collect();
        total += members.len();
        if cal.bins[b].count != members.len() {
            return f64::INFINITY;
        }
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / k;
        let mc = members.iter().map(|&i| conf[i]).sum::<f64>() / k;
        ece += k / n_rec as f64 * (acc - mc).abs();
    }
    if total != n_rec {
        return f64::INFINITY;
    }
    let high = conf.iter().filter(|&&c| c > 0.95).count() as f64 / n_rec as f64;
    (cal.ece - ece).abs().max((cal.high_confidence_fraction - high).abs())
}

pub fn bias_deviation(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 10;
    // Skewed draws so the histogram is far from uniform.
    let preds: Vec<usize> = (0..RECORDS)
        .map(|_| (rng.random_range(0.0f64..1.0).powi(2) * c as f64) as usize)
        .collect();
    let h = class_prediction_histogram(&preds, c);
    if h.counts.iter().sum::<usize>() != RECORDS {
        return f64::INFINITY;
    }
    let q: Vec<f64> = (0..c)
        .map(|k| preds.iter().filter(|&&p| p == k).count() as f64 / RECORDS as f64)
        .collect();
    // Direct KL(q || uniform) next to the ln C - H(q) identity.
    let kl: f64 = q.iter().filter(|&&p| p > 0.0).map(|&p| p * (p * c as f64).ln()).sum();
    let identity = (c as f64).ln() + q.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    (h.bias - kl).abs().max((h.bias - identity).abs())
}

pub fn geometry_deviation(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d) = (5, 8);
    let labels: Vec<usize> = (0..RECORDS).map(|_| rng.random_range(0..c)).collect();
    let feats: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| (0..d).map(|j| y as f64 * 0.3 * (j % 3) as f64 + rng.random_range(-1.0..1.0)).collect())
        .collect();
    let source: Vec<Vec<f64>> = (0..c).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let g = feature_geometry(
        &Tensor::from_rows(&feats).unwrap(),
        &labels,
        &Tensor::from_rows(&source).unwrap(),
    );
    if !g.skipped.is_empty() {
        return f64::INFINITY;
    }

    let members = |k: usize| -> Vec<&Vec<f64>> { feats.iter().zip(&labels).filter(|(_, &y)| y == k).map(|(f, _)| f).collect() };
    let cents: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let m = members(k);
            (0..d).map(|j| m.iter().map(|f| f[j]).sum::<f64>() / m.len() as f64).collect()
        })
        .collect();
    // Mean squared distance to the centroid equals half the mean pairwise squared distance.
    let intra: Vec<f64> = (0..c)
        .map(|k| {
            let m = members(k);
            let n = m.len() as f64;
            let mut s = 0.0;
            for a in &m {
                for b in &m {
                    s += sqd(a, b);
                }
            }
            s / (2.0 * n * n)
        })
        .collect();
    let inter: Vec<f64> = (0..c)
        .map(|k| (0..c).filter(|&o| o != k).map(|o| sqd(&cents[k], &cents[o])).sum::<f64>() / (c - 1) as f64)
        .collect();
    let gap = (0..c).map(|k| sqd(&source[k], &cents[k])).sum::<f64>() / c as f64;
    let d_intra = intra.iter().sum::<f64>() / c as f64;
    let d_inter = inter.iter().sum::<f64>() / c as f64;
    let ratio = (0..c).map(|k| intra[k] / inter[k]).sum::<f64>() / c as f64;
    let (Some(gi), Some(gr)) = (g.d_inter, g.ratio) else {
        return f64::INFINITY;
    };
    [
        (g.gap - gap).abs(),
        (g.d_intra - d_intra).abs(),
        (gi - d_inter).abs(),
        (gr - ratio).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}
