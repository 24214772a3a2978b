//! Diagnostics of an adaptation run: accuracy, prediction bias, calibration,
//! feature-space geometry and prototype similarity.

mod io;
mod report;

pub use io::{write_calibration_csv, write_metrics_csv, write_summary_json};
pub use report::{BatchRecord, DomainSummary, LossRecord, Recorder, RunReport, RunSummary};

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, norm2, squared_distance, Tensor};

/// Number of confidence bins used throughout.
pub const CALIBRATION_BINS: usize = 20;
/// Predictions above this confidence count as high-confidence.
pub const HIGH_CONFIDENCE: f64 = 0.95;

/// Percentage of `predictions` equal to `labels`.
pub fn accuracy_percent(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    100.0 * correct as f64 / predictions.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
    /// KL divergence of the prediction distribution from uniform, in nats.
    pub bias: f64,
}

/// Predicted-class counts and their KL divergence from the uniform distribution.
pub fn class_prediction_histogram(predictions: &[usize], classes: usize) -> Histogram {
    let mut counts = vec![0usize; classes];
    for &p in predictions {
        if p < classes {
            counts[p] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    let bias = if n == 0 {
        0.0
    } else {
        let u = 1.0 / classes as f64;
        counts
            .iter()
            .filter(|&&k| k > 0)
            .map(|&k| {
                let q = k as f64 / n as f64;
                q * (q / u).ln()
            })
            .sum::<f64>()
            .max(0.0)
    };
    Histogram { counts, bias }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub high_confidence_fraction: f64,
}

/// Bin of `conf` among `bins` equal bins: bin `b` covers `(b/n, (b+1)/n]`,
/// and confidence 0 falls in bin 0.
pub fn confidence_bin(conf: f64, bins: usize) -> usize {
    let n = bins as f64;
    let mut b = ((conf * n).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    while b > 0 && conf <= b as f64 / n {
        b -= 1;
    }
    while b + 1 < bins && conf > (b + 1) as f64 / n {
        b += 1;
    }
    b
}

/// Reliability-diagram statistics and expected calibration error
/// `Σ_b (n_b/N)·|acc_b − conf_b|`.
pub fn calibration(confidences: &[f64], correct: &[bool], entropies: &[f64], bins: usize) -> Calibration {
    let bins = bins.max(1);
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit = vec![0usize; bins];
    let mut ent_sum = vec![0.0; bins];
    for ((&c, &ok), &h) in confidences.iter().zip(correct).zip(entropies) {
        let b = confidence_bin(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        ent_sum[b] += h;
        hit[b] += ok as usize;
    }
    let n = confidences.len();
    let mut ece = 0.0;
    let bins_out = (0..bins)
        .map(|b| {
            if count[b] == 0 {
                return CalibrationBin {
                    count: 0,
                    mean_confidence: 0.0,
                    accuracy: 0.0,
                    mean_entropy: 0.0,
                };
            }
            let k = count[b] as f64;
            let bin = CalibrationBin {
                count: count[b],
                mean_confidence: conf_sum[b] / k,
                accuracy: hit[b] as f64 / k,
                mean_entropy: ent_sum[b] / k,
            };
            ece += k / n as f64 * (bin.accuracy - bin.mean_confidence).abs();
            bin
        })
        .collect();
    let high = confidences.iter().filter(|&&c| c > HIGH_CONFIDENCE).count();
    Calibration {
        bins: bins_out,
        ece,
        high_confidence_fraction: if n == 0 { 0.0 } else { high as f64 / n as f64 },
    }
}

/// Per-class feature means under true labels (`None` for unseen classes).
pub fn ground_truth_prototypes(features: &Tensor, labels: &[usize], classes: usize) -> Vec<Option<Vec<f64>>> {
    let d = features.cols();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        if y >= classes {
            continue;
        }
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, k)| (k > 0).then(|| s.into_iter().map(|v| v / k as f64).collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Mean squared distance between source and ground-truth target prototypes.
    pub gap: f64,
    pub d_intra: f64,
    pub d_inter: Option<f64>,
    /// Mean over classes of `d_intra_c / d_inter_c`.
    pub ratio: Option<f64>,
    /// Classes absent from the domain.
    pub skipped: Vec<usize>,
}

/// Domain gap, intra/inter-class distances and their ratio from features
/// with true labels. Classes without samples are skipped and listed.
pub fn feature_geometry(features: &Tensor, labels: &[usize], source: &Tensor) -> Geometry {
    let classes = source.rows();
    let gt = ground_truth_prototypes(features, labels, classes);
    let present: Vec<usize> = (0..classes).filter(|&c| gt[c].is_some()).collect();
    let skipped = (0..classes).filter(|&c| gt[c].is_none()).collect();
    let proto = |c: usize| gt[c].as_deref().expect("present class");

    let mut intra_sum = vec![0.0; classes];
    let mut intra_n = vec![0usize; classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        if y < classes {
            intra_sum[y] += squared_distance(proto(y), row);
            intra_n[y] += 1;
        }
    }
    let k = present.len().max(1) as f64;
    let gap = present
        .iter()
        .map(|&c| squared_distance(source.row(c), proto(c)))
        .sum::<f64>()
        / k;
    let intra: Vec<f64> = present
        .iter()
        .map(|&c| intra_sum[c] / intra_n[c] as f64)
        .collect();
    let d_intra = intra.iter().sum::<f64>() / k;
    if present.len() < 2 {
        return Geometry {
            gap,
            d_intra,
            d_inter: None,
            ratio: None,
            skipped,
        };
    }
    let inter: Vec<f64> = present
        .iter()
        .map(|&c| {
            present
                .iter()
                .filter(|&&o| o != c)
                .map(|&o| squared_distance(proto(c), proto(o)))
                .sum::<f64>()
                / (present.len() - 1) as f64
        })
        .collect();
    let d_inter = inter.iter().sum::<f64>() / k;
    let ratios: Vec<f64> = intra
        .iter()
        .zip(&inter)
        .filter(|(_, &e)| e > 0.0)
        .map(|(a, e)| a / e)
        .collect();
    let ratio = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
    Geometry {
        gap,
        d_intra,
        d_inter: Some(d_inter),
        ratio,
        skipped,
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm2(a), norm2(b));
    (na > 0.0 && nb > 0.0).then(|| dot(a, b) / (na * nb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub to_source: Option<f64>,
    pub to_ground_truth: Option<f64>,
    /// Classes left out of either average (zero or missing prototype).
    pub skipped: Vec<usize>,
}

/// Class-averaged cosine similarity of the target prototypes to the source
/// prototypes and to the ground-truth target prototypes.
pub fn prototype_similarity(target: &Tensor, source: &Tensor, ground_truth: &[Option<Vec<f64>>]) -> Similarity {
    let mut skipped = Vec::new();
    let (mut src, mut gt) = (Vec::new(), Vec::new());
    for c in 0..target.rows() {
        let s = cosine(target.row(c), source.row(c));
        let g = ground_truth
            .get(c)
            .and_then(Option::as_deref)
            .and_then(|p| cosine(target.row(c), p));
        if s.is_none() || g.is_none() {
            skipped.push(c);
        }
        src.extend(s);
        gt.extend(g);
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Similarity {
        to_source: mean(&src),
        to_ground_truth: mean(&gt),
        skipped,
    }
}
