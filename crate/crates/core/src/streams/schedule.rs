use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corruption::{corrupt, Corruption};
use super::{mix_seed, LabeledSet, SyntheticTask};
use crate::error::{CtaError, Result};
use crate::numerics::Tensor;

/// One target domain; `None` is the uncorrupted test distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub corruption: Option<Corruption>,
}

impl Domain {
    pub fn clean() -> Self {
        Self { corruption: None }
    }

    pub fn name(&self) -> String {
        match &self.corruption {
            Some(c) => c.name(),
            None => "clean".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DomainOrder {
    #[default]
    Fixed,
    Shuffled,
}

/// Orders the corrupted domains and optionally appends the clean domain.
///
/// `Shuffled` permutes only the corrupted domains; the clean domain stays last.
pub fn make_domain_sequence(
    corrupted: &[Corruption],
    order: DomainOrder,
    shuffle_seed: u64,
    clean_last: bool,
) -> Result<Vec<Domain>> {
    if corrupted.is_empty() && !clean_last {
        return Err(CtaError::InvalidArgument("domain sequence is empty".into()));
    }
    let mut domains: Vec<Domain> = corrupted
        .iter()
        .map(|&c| Domain { corruption: Some(c) })
        .collect();
    if order == DomainOrder::Shuffled {
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        domains.shuffle(&mut rng);
    }
    if clean_last {
        domains.push(Domain::clean());
    }
    Ok(domains)
}

/// A batch delivered to the adaptation loop. Labels travel alongside for
/// scoring only.
#[derive(Debug, Clone)]
pub struct Batch {
    pub domain: usize,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Ordered target domains built from one base test set. Each domain applies
/// its corruption to every base image; the corruption noise depends on the
/// domain identity and image index, not on the domain's position.
#[derive(Debug, Clone)]
pub struct DomainStream {
    base: LabeledSet,
    side: usize,
    domains: Vec<Domain>,
    batch_size: usize,
    seed: u64,
}

impl DomainStream {
    pub fn new(
        task: &SyntheticTask,
        domains: Vec<Domain>,
        samples_per_domain: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(CtaError::InvalidArgument("batch size must be positive".into()));
        }
        let per_class = samples_per_domain.div_ceil(task.classes()).max(1);
        let full = task.make_set(per_class, mix_seed(seed, 0x7E57))?;
        let keep: Vec<usize> = (0..samples_per_domain.min(full.len())).collect();
        let base = if keep.is_empty() { full } else { full.subset(&keep)? };
        Ok(Self {
            base,
            side: task.side(),
            domains,
            batch_size,
            seed,
        })
    }

    /// Stream over an explicit base set (e.g. for tests).
    pub fn from_base(base: LabeledSet, side: usize, domains: Vec<Domain>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(CtaError::InvalidArgument("batch size must be positive".into()));
        }
        if base.inputs.cols() != side * side {
            return Err(CtaError::Shape("base images do not match side".into()));
        }
        Ok(Self {
            base,
            side,
            domains,
            batch_size,
            seed,
        })
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn samples_per_domain(&self) -> usize {
        self.base.len()
    }

    pub fn batches_per_domain(&self) -> usize {
        self.base.len() / self.batch_size
    }

    /// All images of domain `k` with their labels, in base order.
    pub fn domain_set(&self, k: usize) -> Result<LabeledSet> {
        let domain = self
            .domains
            .get(k)
            .ok_or_else(|| CtaError::InvalidArgument(format!("domain {k} out of range")))?;
        let Some(c) = domain.corruption else {
            return Ok(self.base.clone());
        };
        let mut inputs = self.base.inputs.clone();
        for i in 0..self.base.len() {
            let seed = mix_seed(mix_seed(self.seed, c.seed_tag()), i as u64);
            let img = corrupt(self.base.inputs.row(i), self.side, c, seed)?;
            inputs.row_mut(i).copy_from_slice(&img);
        }
        Ok(LabeledSet {
            inputs,
            labels: self.base.labels.clone(),
        })
    }

    /// Full batches of domain `k`; a trailing partial batch is dropped.
    pub fn domain_batches(&self, k: usize) -> Result<Vec<Batch>> {
        let set = self.domain_set(k)?;
        (0..self.batches_per_domain())
            .map(|b| {
                let idx: Vec<usize> = (b * self.batch_size..(b + 1) * self.batch_size).collect();
                let part = set.subset(&idx)?;
                Ok(Batch {
                    domain: k,
                    inputs: part.inputs,
                    labels: part.labels,
                })
            })
            .collect()
    }

    /// Same images and corruption noise, different domain order.
    pub fn with_domains(&self, domains: Vec<Domain>) -> Self {
        Self {
            domains,
            ..self.clone()
        }
    }

    pub fn with_batch_size(&self, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(CtaError::InvalidArgument("batch size must be positive".into()));
        }
        Ok(Self {
            batch_size,
            ..self.clone()
        })
    }
}
