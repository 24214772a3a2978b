use serde::{Deserialize, Serialize};

use super::{
    accuracy_percent, calibration, class_prediction_histogram, feature_geometry, ground_truth_prototypes,
    prototype_similarity, Calibration, Geometry, Similarity, CALIBRATION_BINS,
};
use crate::engine::BatchOutcome;
use crate::numerics::Tensor;
use crate::prototypes::TargetPrototypes;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossRecord {
    pub total: f64,
    pub unsup: f64,
    pub ema: f64,
    pub src: f64,
    pub cons: f64,
}

/// Everything logged for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub step: u64,
    pub domain: usize,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub entropies: Vec<f64>,
    pub losses: LossRecord,
    pub reliable: usize,
    pub updated: bool,
}

impl BatchRecord {
    pub fn accuracy(&self) -> f64 {
        accuracy_percent(&self.predictions, &self.labels)
    }

    pub fn mean_entropy(&self) -> f64 {
        mean(&self.entropies)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub index: usize,
    pub name: String,
    pub samples: usize,
    pub accuracy: f64,
    pub mean_entropy: f64,
    pub histogram: Vec<usize>,
    pub bias: f64,
    pub ece: f64,
    pub high_confidence_fraction: f64,
    pub geometry: Option<Geometry>,
    pub similarity: Option<Similarity>,
    pub target_norm_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub method: String,
    pub classes: usize,
    pub steps: u64,
    pub updates: u64,
    /// Mean of per-domain accuracies (percent).
    pub mean_accuracy: f64,
    pub overall_accuracy: f64,
    pub bias: f64,
    pub ece: f64,
    pub high_confidence_fraction: f64,
    pub calibration: Calibration,
    pub domains: Vec<DomainSummary>,
}

/// Complete log of a run plus its derived summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub classes: usize,
    pub domain_names: Vec<String>,
    pub batches: Vec<BatchRecord>,
    pub summary: RunSummary,
    /// Per-domain feature-derived diagnostics, kept because features are not stored.
    #[serde(default)]
    pub domain_features: Vec<DomainFeatureStats>,
    /// Ground-truth target prototypes of the last domain.
    #[serde(skip)]
    pub last_ground_truth: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainFeatureStats {
    pub domain: usize,
    pub geometry: Option<Geometry>,
    pub similarity: Option<Similarity>,
    pub target_norm_max: f64,
}

impl RunReport {
    pub fn empty(method: &str, classes: usize, domain_names: Vec<String>) -> Self {
        let mut r = Self {
            method: method.to_string(),
            classes,
            domain_names,
            batches: Vec::new(),
            summary: summarize(method, classes, &[], &[], &[]),
            domain_features: Vec::new(),
            last_ground_truth: Vec::new(),
        };
        r.summary = r.recompute_summary();
        r
    }

    /// Online accuracy of one domain, percent; `None` if it saw no batches.
    pub fn online_accuracy(&self, domain: usize) -> Option<f64> {
        let (p, y): (Vec<usize>, Vec<usize>) = self
            .batches
            .iter()
            .filter(|b| b.domain == domain)
            .flat_map(|b| b.predictions.iter().copied().zip(b.labels.iter().copied()))
            .unzip();
        (!p.is_empty()).then(|| accuracy_percent(&p, &y))
    }

    /// Rebuilds the summary from the batch log and stored feature statistics.
    pub fn recompute_summary(&self) -> RunSummary {
        summarize(
            &self.method,
            self.classes,
            &self.domain_names,
            &self.batches,
            &self.domain_features,
        )
    }
}

fn summarize(
    method: &str,
    classes: usize,
    names: &[String],
    batches: &[BatchRecord],
    feature_stats: &[DomainFeatureStats],
) -> RunSummary {
    let collect = |filter: &dyn Fn(&BatchRecord) -> bool| {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut conf = Vec::new();
        let mut ent = Vec::new();
        for b in batches.iter().filter(|b| filter(b)) {
            preds.extend(&b.predictions);
            labels.extend(&b.labels);
            conf.extend(&b.confidences);
            ent.extend(&b.entropies);
        }
        (preds, labels, conf, ent)
    };
    let mut domains = Vec::new();
    for (index, name) in names.iter().enumerate() {
        let (p, y, c, e) = collect(&|b| b.domain == index);
        if p.is_empty() {
            continue;
        }
        let correct: Vec<bool> = p.iter().zip(&y).map(|(a, b)| a == b).collect();
        let hist = class_prediction_histogram(&p, classes);
        let cal = calibration(&c, &correct, &e, CALIBRATION_BINS);
        let fs = feature_stats.iter().find(|f| f.domain == index);
        domains.push(DomainSummary {
            index,
            name: name.clone(),
            samples: p.len(),
            accuracy: accuracy_percent(&p, &y),
            mean_entropy: mean(&e),
            histogram: hist.counts,
            bias: hist.bias,
            ece: cal.ece,
            high_confidence_fraction: cal.high_confidence_fraction,
            geometry: fs.and_then(|f| f.geometry.clone()),
            similarity: fs.and_then(|f| f.similarity.clone()),
            target_norm_max: fs.map(|f| f.target_norm_max).unwrap_or(0.0),
        });
    }
    let (p, y, c, e) = collect(&|_| true);
    let correct: Vec<bool> = p.iter().zip(&y).map(|(a, b)| a == b).collect();
    let cal = calibration(&c, &correct, &e, CALIBRATION_BINS);
    let hist = class_prediction_histogram(&p, classes);
    let mean_accuracy = mean(&domains.iter().map(|d| d.accuracy).collect::<Vec<_>>());
    RunSummary {
        version: crate::VERSION.to_string(),
        method: method.to_string(),
        classes,
        steps: batches.len() as u64,
        updates: batches.iter().filter(|b| b.updated).count() as u64,
        mean_accuracy,
        overall_accuracy: accuracy_percent(&p, &y),
        bias: hist.bias,
        ece: cal.ece,
        high_confidence_fraction: cal.high_confidence_fraction,
        calibration: cal,
        domains,
    }
}

/// Accumulates batch outcomes into a [`RunReport`].
///
/// Features are buffered for the current domain only and reduced to
/// geometry statistics when the domain ends.
#[derive(Debug)]
pub struct Recorder {
    method: String,
    classes: usize,
    names: Vec<String>,
    source: Tensor,
    batches: Vec<BatchRecord>,
    current: Option<usize>,
    feats: Vec<f64>,
    feat_labels: Vec<usize>,
    width: usize,
    feature_stats: Vec<DomainFeatureStats>,
    last_gt: Vec<Option<Vec<f64>>>,
}

impl Recorder {
    pub fn new(method: &str, classes: usize, domain_names: Vec<String>, source: &Tensor) -> Self {
        Self {
            method: method.to_string(),
            classes,
            names: domain_names,
            source: source.clone(),
            batches: Vec::new(),
            current: None,
            feats: Vec::new(),
            feat_labels: Vec::new(),
            width: source.cols(),
            feature_stats: Vec::new(),
            last_gt: Vec::new(),
        }
    }

    pub fn record(&mut self, domain: usize, labels: &[usize], outcome: &BatchOutcome, targets: &TargetPrototypes) {
        if self.current != Some(domain) {
            self.close_domain(targets);
            self.current = Some(domain);
        }
        self.feats.extend_from_slice(outcome.features.data());
        self.feat_labels.extend_from_slice(labels);
        self.width = outcome.features.cols();
        let r = &outcome.record;
        self.batches.push(BatchRecord {
            step: r.step,
            domain,
            predictions: outcome.predictions.clone(),
            labels: labels.to_vec(),
            confidences: outcome.confidences.clone(),
            entropies: outcome.entropies.clone(),
            losses: r.losses,
            reliable: r.reliable,
            updated: r.updated,
        });
    }

    fn close_domain(&mut self, targets: &TargetPrototypes) {
        let Some(domain) = self.current.take() else { return };
        let n = self.feat_labels.len();
        let stats = if n == 0 {
            DomainFeatureStats {
                domain,
                geometry: None,
                similarity: None,
                target_norm_max: targets.max_norm(),
            }
        } else {
            let feats = Tensor::matrix(n, self.width, std::mem::take(&mut self.feats))
                .expect("feature buffer matches its row count");
            let gt = ground_truth_prototypes(&feats, &self.feat_labels, self.classes);
            let geometry = feature_geometry(&feats, &self.feat_labels, &self.source);
            let similarity = prototype_similarity(targets.matrix(), &self.source, &gt);
            self.last_gt = gt;
            DomainFeatureStats {
                domain,
                geometry: Some(geometry),
                similarity: Some(similarity),
                target_norm_max: targets.max_norm(),
            }
        };
        self.feats.clear();
        self.feat_labels.clear();
        self.feature_stats.push(stats);
    }

    pub fn finish(mut self, targets: &TargetPrototypes) -> RunReport {
        self.close_domain(targets);
        let mut report = RunReport {
            method: self.method,
            classes: self.classes,
            domain_names: self.names,
            batches: self.batches,
            summary: summarize("", 0, &[], &[], &[]),
            domain_features: self.feature_stats,
            last_ground_truth: self.last_gt,
        };
        report.summary = report.recompute_summary();
        report
    }
}
