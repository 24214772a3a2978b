use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CtaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    Blur,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Blur,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    fn id(self) -> u64 {
        self as u64 + 1
    }

    /// Per-pixel noise std-dev for gaussian noise at `severity`.
    pub fn gaussian_sigma(severity: u8) -> f64 {
        0.08 * severity as f64
    }

    /// Fraction of pixels replaced by salt/pepper at `severity`.
    pub fn impulse_fraction(severity: u8) -> f64 {
        0.03 * severity as f64
    }

    /// Number of 3×3 box-smoothing passes at `severity`.
    pub fn blur_passes(severity: u8) -> usize {
        severity as usize
    }

    /// Factor applied to deviations from the image mean at `severity`.
    pub fn contrast_factor(severity: u8) -> f64 {
        [1.0, 0.75, 0.6, 0.45, 0.3, 0.2][severity as usize]
    }

    /// Side of the averaging block at `severity`.
    pub fn pixelate_block(severity: u8) -> usize {
        severity as usize + 1
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = CtaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CtaError::Unknown {
                what: "corruption kind",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(CtaError::InvalidArgument(format!("severity {severity} outside [0, 5]")));
        }
        Ok(Self { kind, severity })
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.kind, self.severity)
    }

    pub(crate) fn seed_tag(&self) -> u64 {
        self.kind.id() * 16 + self.severity as u64
    }
}

/// Applies `c` to a `side × side` image with values in `[0, 1]`.
///
/// Severity 0 returns the input unchanged; noise kinds are deterministic in `seed`.
pub fn corrupt(img: &[f64], side: usize, c: Corruption, seed: u64) -> Result<Vec<f64>> {
    if img.len() != side * side {
        return Err(CtaError::Shape(format!("{} pixels for side {side}", img.len())));
    }
    if c.severity > 5 {
        return Err(CtaError::InvalidArgument(format!("severity {} outside [0, 5]", c.severity)));
    }
    if c.severity == 0 {
        return Ok(img.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = c.severity;
    let mut out = match c.kind {
        CorruptionKind::GaussianNoise => {
            let noise = Normal::new(0.0, CorruptionKind::gaussian_sigma(s)).expect("valid std");
            img.iter().map(|v| v + noise.sample(&mut rng)).collect()
        }
        CorruptionKind::ImpulseNoise => {
            let p = CorruptionKind::impulse_fraction(s);
            img.iter()
                .map(|&v| {
                    if rng.random_bool(p) {
                        if rng.random_bool(0.5) {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v
                    }
                })
                .collect()
        }
        CorruptionKind::Blur => {
            let mut cur = img.to_vec();
            for _ in 0..CorruptionKind::blur_passes(s) {
                cur = box_smooth(&cur, side);
            }
            cur
        }
        CorruptionKind::Contrast => {
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            let f = CorruptionKind::contrast_factor(s);
            img.iter().map(|v| mean + (v - mean) * f).collect()
        }
        CorruptionKind::Pixelate => pixelate(img, side, CorruptionKind::pixelate_block(s)),
    };
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

fn box_smooth(img: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..side {
        for x in 0..side {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(side - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(side - 1) {
                    acc += img[yy * side + xx];
                    n += 1.0;
                }
            }
            out[y * side + x] = acc / n;
        }
    }
    out
}

fn pixelate(img: &[f64], side: usize, block: usize) -> Vec<f64> {
    let mut out = img.to_vec();
    for by in (0..side).step_by(block) {
        for bx in (0..side).step_by(block) {
            let ys = by..(by + block).min(side);
            let xs = bx..(bx + block).min(side);
            let mut acc = 0.0;
            let mut n = 0.0;
            for y in ys.clone() {
                for x in xs.clone() {
                    acc += img[y * side + x];
                    n += 1.0;
                }
            }
            for y in ys.clone() {
                for x in xs.clone() {
                    out[y * side + x] = acc / n;
                }
            }
        }
    }
    out
}

/// Std-dev of the additive noise in the consistency augmentation.
pub const AUGMENT_NOISE_STD: f64 = 0.1;
/// Cutout square side as a fraction of the image side.
pub const AUGMENT_CUTOUT_FRACTION: f64 = 0.25;

/// Strong augmentation for the consistency objective: additive gaussian
/// noise plus one zeroed square patch at a random position.
pub fn augment<R: Rng>(img: &[f64], side: usize, rng: &mut R) -> Vec<f64> {
    let noise = Normal::new(0.0, AUGMENT_NOISE_STD).expect("valid std");
    let mut out: Vec<f64> = img
        .iter()
        .map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0))
        .collect();
    let cut = ((side as f64 * AUGMENT_CUTOUT_FRACTION).round() as usize).clamp(1, side);
    let y0 = rng.random_range(0..=side - cut);
    let x0 = rng.random_range(0..=side - cut);
    for y in y0..y0 + cut {
        for x in x0..x0 + cut {
            out[y * side + x] = 0.0;
        }
    }
    out
}
