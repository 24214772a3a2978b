//! Synthetic classification task, corruption operators and domain streams.

mod corruption;
mod dump;
mod schedule;

pub use corruption::{augment, corrupt, Corruption, CorruptionKind, AUGMENT_CUTOUT_FRACTION, AUGMENT_NOISE_STD};
pub use dump::{read_dataset, write_dataset, DumpRecord, DUMP_MAGIC, DUMP_VERSION};
pub use schedule::{make_domain_sequence, Batch, Domain, DomainOrder, DomainStream};

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CtaError, Result};
use crate::numerics::Tensor;

/// Generator parameters of the synthetic image task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub classes: usize,
    /// Images are `side × side`, single channel, values in `[0, 1]`.
    pub side: usize,
    /// Amplitude of the class grating around mid-gray.
    pub grating_amplitude: f64,
    /// Peak of the class-specific blob.
    pub blob_amplitude: f64,
    /// Std-dev of the per-sample phase jitter (radians).
    pub phase_jitter: f64,
    /// Std-dev of the per-sample global brightness offset.
    pub brightness_jitter: f64,
    /// Std-dev of per-pixel sensor noise.
    pub pixel_noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            side: 16,
            grating_amplitude: 0.2,
            blob_amplitude: 0.2,
            phase_jitter: 0.5,
            brightness_jitter: 0.05,
            pixel_noise: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
struct ClassPattern {
    angle: f64,
    freq: f64,
    phase: f64,
    blob: (f64, f64),
}

/// Seeded family of class-conditional image generators: each class draws an
/// oriented grating plus a soft blob, and every sample jitters phase,
/// amplitude and brightness and adds pixel noise.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    cfg: TaskConfig,
    seed: u64,
    patterns: Vec<ClassPattern>,
}

/// Labeled images, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Even indices train, odd indices held out.
    pub fn split_by_parity(&self) -> Result<(LabeledSet, LabeledSet)> {
        let even: Vec<usize> = (0..self.len()).step_by(2).collect();
        let odd: Vec<usize> = (1..self.len()).step_by(2).collect();
        Ok((self.subset(&even)?, self.subset(&odd)?))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<LabeledSet> {
        Ok(LabeledSet {
            inputs: self.inputs.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.inputs.data() {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SyntheticTask {
    pub fn new(cfg: TaskConfig, seed: u64) -> Result<Self> {
        if cfg.classes < 2 || cfg.side < 2 {
            return Err(CtaError::InvalidArgument("task needs >= 2 classes and side >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7A5C));
        let c = cfg.classes;
        let patterns = (0..c)
            .map(|k| ClassPattern {
                angle: PI * k as f64 / c as f64 + rng.random_range(-0.1..0.1),
                freq: rng.random_range(1.5..3.0),
                phase: rng.random_range(0.0..2.0 * PI),
                blob: (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
            })
            .collect();
        Ok(Self { cfg, seed, patterns })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn classes(&self) -> usize {
        self.cfg.classes
    }

    pub fn side(&self) -> usize {
        self.cfg.side
    }

    pub fn input_dim(&self) -> usize {
        self.cfg.side * self.cfg.side
    }

    /// One image of class `label`, determined by `sample_seed`.
    pub fn sample(&self, label: usize, sample_seed: u64) -> Vec<f64> {
        let cfg = &self.cfg;
        let p = &self.patterns[label];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, sample_seed));
        let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
        let phase = p.phase + cfg.phase_jitter * std_normal.sample(&mut rng);
        let amp = rng.random_range(0.75..1.25);
        let bright = cfg.brightness_jitter * std_normal.sample(&mut rng);
        let (cx, cy) = (
            p.blob.0 + 0.05 * std_normal.sample(&mut rng),
            p.blob.1 + 0.05 * std_normal.sample(&mut rng),
        );
        let n = cfg.side as f64;
        let (s, c) = p.angle.sin_cos();
        let mut img = Vec::with_capacity(cfg.side * cfg.side);
        for y in 0..cfg.side {
            for x in 0..cfg.side {
                let (u, v) = (x as f64 / n, y as f64 / n);
                let wave = (2.0 * PI * p.freq * (u * c + v * s) + phase).sin();
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                let blob = (-d2 / (2.0 * 0.12 * 0.12)).exp();
                let val = 0.5
                    + bright
                    + amp * cfg.grating_amplitude * wave
                    + cfg.blob_amplitude * blob
                    + cfg.pixel_noise * std_normal.sample(&mut rng);
                img.push(val.clamp(0.0, 1.0));
            }
        }
        img
    }

    /// `n` class-balanced images in a seeded random order.
    pub fn make_set(&self, n_per_class: usize, seed: u64) -> Result<LabeledSet> {
        if n_per_class == 0 {
            return Err(CtaError::InvalidArgument("need at least one sample per class".into()));
        }
        let mut labels: Vec<usize> = (0..self.classes())
            .flat_map(|c| std::iter::repeat_n(c, n_per_class))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EED));
        labels.shuffle(&mut rng);
        let mut data = Vec::with_capacity(labels.len() * self.input_dim());
        for (i, &y) in labels.iter().enumerate() {
            data.extend(self.sample(y, mix_seed(seed, i as u64)));
        }
        Ok(LabeledSet {
            inputs: Tensor::matrix(labels.len(), self.input_dim(), data)?,
            labels,
        })
    }
}

/// Class-balanced labeled source data.
pub fn make_source_dataset(task: &SyntheticTask, n_per_class: usize, seed: u64) -> Result<LabeledSet> {
    task.make_set(n_per_class, mix_seed(seed, 0x50_0C))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SyntheticTask {
        SyntheticTask::new(TaskConfig::default(), 3).unwrap()
    }

    #[test]
    fn deterministic_dataset() {
        let a = make_source_dataset(&task(), 4, 9).unwrap();
        let b = make_source_dataset(&task(), 4, 9).unwrap();
        let c = make_source_dataset(&task(), 4, 10).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn balanced_and_sized() {
        let t = task();
        let one = make_source_dataset(&t, 1, 0).unwrap();
        assert_eq!(one.len(), t.classes());
        let mut sorted = one.labels.clone();
        sorted.sort();
        assert_eq!(sorted, (0..t.classes()).collect::<Vec<_>>());
        assert!(one.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn parity_split_is_disjoint() {
        let set = make_source_dataset(&task(), 5, 1).unwrap();
        let (train, held) = set.split_by_parity().unwrap();
        assert_eq!(train.len() + held.len(), set.len());
        assert_eq!(train.inputs.row(0), set.inputs.row(0));
        assert_eq!(held.inputs.row(0), set.inputs.row(1));
        assert_eq!(train.inputs.row(1), set.inputs.row(2));
    }

    #[test]
    fn zero_per_class_rejected() {
        assert!(make_source_dataset(&task(), 0, 0).is_err());
    }
}
