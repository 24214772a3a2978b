//! Class prototypes: frozen source means and EMA-tracked target prototypes.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CtaError, Result};
use crate::model::Model;
use crate::numerics::{l2_normalize, norm2, Tensor};

/// Default blending factor for the target prototype EMA.
pub const DEFAULT_ALPHA: f64 = 0.996;
/// Default cap on the number of source samples used for prototypes.
pub const DEFAULT_SOURCE_CAP: usize = 100_000;

/// Per-class mean features of the source model on source data. Immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePrototypes {
    protos: Tensor,
    counts: Vec<usize>,
}

impl SourcePrototypes {
    /// Class means of `features` grouped by `labels`.
    pub fn from_features(features: &Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(CtaError::Shape("features and labels differ in length".into()));
        }
        let d = features.cols();
        let mut sums = vec![0.0; classes * d];
        let mut counts = vec![0usize; classes];
        for (row, &y) in features.iter_rows().zip(labels) {
            if y >= classes {
                return Err(CtaError::LabelOutOfRange { label: y, classes });
            }
            counts[y] += 1;
            for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(CtaError::EmptyClass(c));
        }
        for (c, &n) in counts.iter().enumerate() {
            sums[c * d..(c + 1) * d].iter_mut().for_each(|s| *s /= n as f64);
        }
        Ok(Self {
            protos: Tensor::matrix(classes, d, sums)?,
            counts,
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.protos
    }

    pub fn row(&self, c: usize) -> &[f64] {
        self.protos.row(c)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn fingerprint(&self) -> String {
        matrix_fingerprint(&self.protos)
    }
}

/// Source prototypes from the frozen-statistics features of `model0`.
///
/// When the dataset exceeds `cap`, exactly `cap` rows are drawn uniformly
/// without replacement using `seed`.
pub fn build_source_prototypes(
    model0: &Model,
    inputs: &Tensor,
    labels: &[usize],
    cap: usize,
    seed: u64,
) -> Result<SourcePrototypes> {
    if inputs.rows() != labels.len() {
        return Err(CtaError::Shape("inputs and labels differ in length".into()));
    }
    if cap == 0 {
        return Err(CtaError::InvalidArgument("source cap must be positive".into()));
    }
    let mut idx: Vec<usize> = if labels.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, labels.len(), cap).into_vec()
    } else {
        (0..labels.len()).collect()
    };
    idx.sort_unstable();
    let x = inputs.select_rows(&idx)?;
    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let feats = model0.forward_frozen_chunked(&x, 256)?.features;
    SourcePrototypes::from_features(&feats, &y, model0.classes())
}

/// EMA target prototypes, one row per class, seeded from the normalized head.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPrototypes {
    protos: Tensor,
    alpha: f64,
}

impl TargetPrototypes {
    pub fn from_head(head: &Tensor, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CtaError::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
        }
        let mut protos = head.clone();
        for c in 0..head.rows() {
            if norm2(head.row(c)) == 0.0 {
                return Err(CtaError::ZeroPrototype(c));
            }
            let n = l2_normalize(head.row(c));
            protos.row_mut(c).copy_from_slice(&n);
        }
        Ok(Self { protos, alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn classes(&self) -> usize {
        self.protos.rows()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.protos
    }

    pub fn row(&self, c: usize) -> &[f64] {
        self.protos.row(c)
    }

    /// Prototypes rescaled to unit norm, as used for classification logits.
    pub fn normalized(&self) -> Tensor {
        let mut out = self.protos.clone();
        for c in 0..out.rows() {
            let n = l2_normalize(self.protos.row(c));
            out.row_mut(c).copy_from_slice(&n);
        }
        out
    }

    /// Blends the normalized per-class mean of `features` into each class
    /// present in `pseudo_labels`; absent classes are untouched.
    ///
    /// `features` must be detached values of reliable samples.
    pub fn ema_update(&mut self, features: &Tensor, pseudo_labels: &[usize]) -> Result<()> {
        if pseudo_labels.is_empty() {
            return Ok(());
        }
        if features.rows() != pseudo_labels.len() {
            return Err(CtaError::Shape("features and pseudo-labels differ in length".into()));
        }
        let (classes, d) = (self.protos.rows(), self.protos.cols());
        if features.cols() != d {
            return Err(CtaError::Shape(format!(
                "feature width {} vs prototype width {d}",
                features.cols()
            )));
        }
        let mut sums = vec![0.0; classes * d];
        let mut counts = vec![0usize; classes];
        for (row, &y) in features.iter_rows().zip(pseudo_labels) {
            if y >= classes {
                return Err(CtaError::LabelOutOfRange { label: y, classes });
            }
            counts[y] += 1;
            for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
        for c in 0..classes {
            if counts[c] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[c * d..(c + 1) * d]
                .iter()
                .map(|s| s / counts[c] as f64)
                .collect();
            let unit = l2_normalize(&mean);
            let a = self.alpha;
            for (p, u) in self.protos.row_mut(c).iter_mut().zip(&unit) {
                *p = a * *p + (1.0 - a) * u;
            }
        }
        Ok(())
    }

    pub fn max_norm(&self) -> f64 {
        self.protos.iter_rows().map(norm2).fold(0.0, f64::max)
    }

    pub fn min_norm(&self) -> f64 {
        self.protos.iter_rows().map(norm2).fold(f64::INFINITY, f64::min)
    }
}

fn matrix_fingerprint(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Kind column of the prototype CSV export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeKind {
    Source,
    Target,
    TargetGt,
}

impl PrototypeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PrototypeKind::Source => "source",
            PrototypeKind::Target => "target",
            PrototypeKind::TargetGt => "target-gt",
        }
    }
}

/// Writes prototype rows as CSV: `kind,class,v0,…,v{d-1}`.
///
/// Rows of a `None` matrix entry are skipped (e.g. classes never observed).
pub fn write_prototypes_csv<W: Write>(
    w: W,
    sets: &[(PrototypeKind, Vec<Option<Vec<f64>>>)],
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let d = sets
        .iter()
        .flat_map(|(_, rows)| rows.iter().flatten())
        .map(Vec::len)
        .next()
        .unwrap_or(0);
    let mut header = vec!["kind".to_string(), "class".to_string()];
    header.extend((0..d).map(|j| format!("v{j}")));
    out.write_record(&header)?;
    for (kind, rows) in sets {
        for (c, row) in rows.iter().enumerate() {
            let Some(row) = row else { continue };
            let mut rec = vec![kind.as_str().to_string(), c.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Rows of a matrix, all present.
pub fn all_rows(t: &Tensor) -> Vec<Option<Vec<f64>>> {
    t.iter_rows().map(|r| Some(r.to_vec())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn source_means() {
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let p = SourcePrototypes::from_features(&f, &[0, 0, 1], 2).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
        assert_eq!(p.row(1), &[2.0, 3.0]);
        assert_eq!(p.counts(), &[2, 1]);
        assert!(matches!(
            SourcePrototypes::from_features(&f, &[0, 0, 0], 2),
            Err(CtaError::EmptyClass(1))
        ));
    }

    #[test]
    fn target_init_normalizes_head() {
        let head = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 1.0]]).unwrap();
        let t = TargetPrototypes::from_head(&head, 0.9).unwrap();
        assert!(close(t.row(0), &[0.6, 0.8], 1e-12));
        assert!(close(t.row(1), &[0.0, 1.0], 1e-11));
        assert_eq!(t.matrix().shape(), &[2, 2]);
        let zero = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            TargetPrototypes::from_head(&zero, 0.9),
            Err(CtaError::ZeroPrototype(1))
        ));
    }

    #[test]
    fn ema_single_feature() {
        let head = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let mut t = TargetPrototypes::from_head(&head, 0.996).unwrap();
        let f = Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        t.ema_update(&f, &[0]).unwrap();
        assert!(close(t.row(0), &[0.996, 0.004, 0.0], 1e-12));
        assert!(close(t.row(1), &[0.0, 0.0, 1.0], 1e-11));
    }

    #[test]
    fn ema_averages_then_normalizes() {
        let head = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut t = TargetPrototypes::from_head(&head, 0.5).unwrap();
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        t.ema_update(&f, &[1, 1]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(t.row(1), &[0.5 * h, 0.5 + 0.5 * h], 1e-11));
        assert!(close(t.row(0), &[1.0, 0.0], 1e-11));
    }

    #[test]
    fn ema_empty_and_bad_labels() {
        let head = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut t = TargetPrototypes::from_head(&head, 0.9).unwrap();
        let before = t.clone();
        t.ema_update(&Tensor::zeros(&[1, 2]), &[]).unwrap();
        assert_eq!(t, before);
        let f = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            t.ema_update(&f, &[2]),
            Err(CtaError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn ema_contracts_at_rate_alpha() {
        let head = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let mut t = TargetPrototypes::from_head(&head, 0.996).unwrap();
        let v = [0.0, 2.0, 5.0];
        let u = l2_normalize(&v);
        let f = Tensor::from_rows(&[v.to_vec()]).unwrap();
        let dist = |t: &TargetPrototypes| crate::numerics::squared_distance(t.row(0), &u).sqrt();
        let mut prev = dist(&t);
        for _ in 0..100 {
            t.ema_update(&f, &[0]).unwrap();
            let now = dist(&t);
            assert!((now - 0.996 * prev).abs() <= 1e-9);
            prev = now;
        }
    }

    #[test]
    fn prototype_csv_layout() {
        let head = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let mut buf = Vec::new();
        write_prototypes_csv(
            &mut buf,
            &[
                (PrototypeKind::Source, all_rows(&head)),
                (PrototypeKind::TargetGt, vec![None, Some(vec![0.5, 0.25])]),
            ],
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "kind,class,v0,v1");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("target-gt,1,"));
    }

    proptest! {
        #[test]
        fn norms_stay_bounded(
            seed_rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 3),
            updates in prop::collection::vec((prop::collection::vec(-10.0f64..10.0, 4), 0usize..3), 1..60),
            alpha in 0.5f64..0.999,
        ) {
            prop_assume!(seed_rows.iter().all(|r| norm2(r) > 1e-3));
            let head = Tensor::from_rows(&seed_rows).unwrap();
            let mut t = TargetPrototypes::from_head(&head, alpha).unwrap();
            for (f, y) in updates {
                let feat = Tensor::from_rows(&[f]).unwrap();
                t.ema_update(&feat, &[y]).unwrap();
                for r in t.matrix().iter_rows() {
                    let n = norm2(r);
                    prop_assert!(n <= 1.0 + 1e-9);
                }
            }
        }
    }
}
