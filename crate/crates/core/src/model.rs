//! Batch-normalized MLP classifier: feature extractor blocks
//! (linear → batch norm → ReLU) followed by a bias-free linear head.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CtaError, Result};
use crate::numerics::{NormStats, Tape, Tensor, Var};
use crate::optim::Sgd;

/// Momentum of the running-statistics update during pretraining.
pub const RUNNING_STATS_MOMENTUM: f64 = 0.1;

const CHECKPOINT_MAGIC: &[u8; 8] = b"CTAMODEL";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    /// Widths of the hidden blocks before the feature block.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 256,
            hidden: vec![128, 128],
            feature_dim: 64,
            classes: 10,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(CtaError::InvalidArgument("layer widths must be positive".into()));
        }
        if self.classes < 2 {
            return Err(CtaError::InvalidArgument("need at least 2 classes".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.feature_dim);
        w
    }
}

/// Which extractor parameters adapt at test time. The head is never included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrainScope {
    #[default]
    BnAffine,
    FullExtractor,
}

/// Normalization behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; caller may fold them into the running statistics.
    Pretrain,
    /// Batch statistics of the current batch, running statistics untouched.
    Adapt,
    /// Running statistics; output rows do not depend on each other.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    Weight(usize),
    Gamma(usize),
    Beta(usize),
    Head,
}

/// Which parameters a tape binding tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Scope(TrainScope),
    Everything,
}

impl Trainable {
    fn includes(self, kind: ParamKind) -> bool {
        match (self, kind) {
            (Trainable::Nothing, _) => false,
            (Trainable::Everything, _) => true,
            (Trainable::Scope(_), ParamKind::Head) => false,
            (Trainable::Scope(_), ParamKind::Gamma(_) | ParamKind::Beta(_)) => true,
            (Trainable::Scope(s), ParamKind::Weight(_)) => s == TrainScope::FullExtractor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnBlock {
    pub weight: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: ArchConfig,
    blocks: Vec<BnBlock>,
    head: Tensor,
}

/// Model parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<ParamKind, Var>,
    tracked: Vec<ParamKind>,
}

impl BoundParams {
    pub fn var(&self, kind: ParamKind) -> Var {
        self.vars[&kind]
    }

    /// Parameters whose gradient is tracked, in canonical order.
    pub fn tracked(&self) -> &[ParamKind] {
        &self.tracked
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TapeForward {
    pub features: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub features: Tensor,
    pub logits: Tensor,
}

impl Model {
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = arch.widths();
        let mut blocks = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, out) = (pair[0], pair[1]);
            let he = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let data = (0..out * fan_in).map(|_| he.sample(&mut rng)).collect();
            blocks.push(BnBlock {
                weight: Tensor::matrix(out, fan_in, data)?,
                gamma: Tensor::filled(&[out], 1.0),
                beta: Tensor::zeros(&[out]),
                running_mean: vec![0.0; out],
                running_var: vec![1.0; out],
            });
        }
        let d = arch.feature_dim;
        let std = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let head = (0..arch.classes * d).map(|_| std.sample(&mut rng)).collect();
        let head = Tensor::matrix(arch.classes, d, head)?;
        Ok(Self { arch, blocks, head })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    pub fn blocks(&self) -> &[BnBlock] {
        &self.blocks
    }

    /// Classification head `ω ∈ R^{C×d}`; row `c` is the template of class `c`.
    pub fn head(&self) -> &Tensor {
        &self.head
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut kinds = Vec::new();
        for l in 0..self.blocks.len() {
            kinds.extend([ParamKind::Weight(l), ParamKind::Gamma(l), ParamKind::Beta(l)]);
        }
        kinds.push(ParamKind::Head);
        kinds.sort();
        kinds
    }

    pub fn trainable_kinds(&self, which: Trainable) -> Vec<ParamKind> {
        self.param_kinds()
            .into_iter()
            .filter(|&k| which.includes(k))
            .collect()
    }

    pub fn param(&self, kind: ParamKind) -> &Tensor {
        match kind {
            ParamKind::Weight(l) => &self.blocks[l].weight,
            ParamKind::Gamma(l) => &self.blocks[l].gamma,
            ParamKind::Beta(l) => &self.blocks[l].beta,
            ParamKind::Head => &self.head,
        }
    }

    pub fn param_mut(&mut self, kind: ParamKind) -> &mut Tensor {
        match kind {
            ParamKind::Weight(l) => &mut self.blocks[l].weight,
            ParamKind::Gamma(l) => &mut self.blocks[l].gamma,
            ParamKind::Beta(l) => &mut self.blocks[l].beta,
            ParamKind::Head => &mut self.head,
        }
    }

    /// Records all parameters on `tape`; only those selected by `which` are tracked.
    pub fn bind(&self, tape: &mut Tape, which: Trainable) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        let mut tracked = Vec::new();
        for kind in self.param_kinds() {
            let value = self.param(kind).clone();
            let v = if which.includes(kind) {
                tracked.push(kind);
                tape.param(value)?
            } else {
                tape.constant(value)?
            };
            vars.insert(kind, v);
        }
        Ok(BoundParams { vars, tracked })
    }

    /// Forward pass recorded on `tape`. Also returns the batch statistics of
    /// every block when `mode` normalizes with them.
    #[allow(clippy::type_complexity)]
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        input: Var,
        mode: Mode,
    ) -> Result<(TapeForward, Vec<(Vec<f64>, Vec<f64>)>)> {
        let width = tape.value(input)?.cols();
        if width != self.arch.input_dim {
            return Err(CtaError::Shape(format!(
                "input width {width}, model expects {}",
                self.arch.input_dim
            )));
        }
        let mut h = input;
        let mut batch_stats = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            let z = tape.matmul_t(h, params.var(ParamKind::Weight(l)))?;
            let stats = match mode {
                Mode::Pretrain | Mode::Adapt => NormStats::Batch,
                Mode::Frozen => NormStats::Fixed {
                    mean: block.running_mean.clone(),
                    var: block.running_var.clone(),
                },
            };
            let (normed, s) = tape.batch_norm(
                z,
                params.var(ParamKind::Gamma(l)),
                params.var(ParamKind::Beta(l)),
                &stats,
            )?;
            if let Some(s) = s {
                batch_stats.push(s);
            }
            h = tape.relu(normed)?;
        }
        let logits = tape.matmul_t(h, params.var(ParamKind::Head))?;
        Ok((TapeForward { features: h, logits }, batch_stats))
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<Forward> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, Trainable::Nothing)?;
        let x = tape.constant(input.clone())?;
        let (out, _) = self.forward_on(&mut tape, &params, x, mode)?;
        Ok(Forward {
            features: tape.value(out.features)?.clone(),
            logits: tape.value(out.logits)?.clone(),
        })
    }

    /// Frozen-statistics forward in chunks, for inputs of any size.
    pub fn forward_frozen_chunked(&self, input: &Tensor, chunk: usize) -> Result<Forward> {
        let n = input.rows();
        let mut feats = Vec::with_capacity(n * self.feature_dim());
        let mut logits = Vec::with_capacity(n * self.classes());
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let out = self.forward(&input.select_rows(&idx)?, Mode::Frozen)?;
            feats.extend_from_slice(out.features.data());
            logits.extend_from_slice(out.logits.data());
            start = end;
        }
        Ok(Forward {
            features: Tensor::matrix(n, self.feature_dim(), feats)?,
            logits: Tensor::matrix(n, self.classes(), logits)?,
        })
    }

    /// Exponential update of the running statistics from a pretraining batch.
    pub fn fold_running_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(CtaError::Shape("running stats per block".into()));
        }
        let m = RUNNING_STATS_MOMENTUM;
        for (block, (mean, var)) in self.blocks.iter_mut().zip(stats) {
            for (r, v) in block.running_mean.iter_mut().zip(mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in block.running_var.iter_mut().zip(var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
        Ok(())
    }

    /// Pretrain-mode forward that also folds the batch statistics in.
    pub fn forward_train(&mut self, input: &Tensor) -> Result<Forward> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, Trainable::Nothing)?;
        let x = tape.constant(input.clone())?;
        let (out, stats) = self.forward_on(&mut tape, &params, x, Mode::Pretrain)?;
        let fwd = Forward {
            features: tape.value(out.features)?.clone(),
            logits: tape.value(out.logits)?.clone(),
        };
        self.fold_running_stats(&stats)?;
        Ok(fwd)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let put_u32 = |w: &mut W, v: usize| -> Result<()> {
            let v = u32::try_from(v).map_err(|_| CtaError::Checkpoint("dimension too large".into()))?;
            w.write_all(&v.to_le_bytes())?;
            Ok(())
        };
        put_u32(&mut w, self.arch.input_dim)?;
        put_u32(&mut w, self.arch.hidden.len())?;
        for &h in &self.arch.hidden {
            put_u32(&mut w, h)?;
        }
        put_u32(&mut w, self.arch.feature_dim)?;
        put_u32(&mut w, self.arch.classes)?;
        let put_f64s = |w: &mut W, vs: &[f64]| -> Result<()> {
            for v in vs {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for b in &self.blocks {
            put_f64s(&mut w, b.weight.data())?;
            put_f64s(&mut w, b.gamma.data())?;
            put_f64s(&mut w, b.beta.data())?;
            put_f64s(&mut w, &b.running_mean)?;
            put_f64s(&mut w, &b.running_var)?;
        }
        put_f64s(&mut w, self.head.data())?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CtaError::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut get_u32 = |r: &mut R| -> Result<usize> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4) as usize)
        };
        let version = get_u32(&mut r)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(CtaError::Checkpoint(format!("unsupported version {version}")));
        }
        let input_dim = get_u32(&mut r)?;
        let n_hidden = get_u32(&mut r)?;
        if n_hidden > 1024 {
            return Err(CtaError::Checkpoint("implausible depth".into()));
        }
        let hidden = (0..n_hidden).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let feature_dim = get_u32(&mut r)?;
        let classes = get_u32(&mut r)?;
        let arch = ArchConfig {
            input_dim,
            hidden,
            feature_dim,
            classes,
        };
        arch.validate()
            .map_err(|e| CtaError::Checkpoint(e.to_string()))?;
        let get_f64s = |r: &mut R, n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            let mut b8 = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b8)?;
                out.push(f64::from_le_bytes(b8));
            }
            Ok(out)
        };
        let widths = arch.widths();
        let mut blocks = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, out) = (pair[0], pair[1]);
            blocks.push(BnBlock {
                weight: Tensor::matrix(out, fan_in, get_f64s(&mut r, out * fan_in)?)?,
                gamma: Tensor::vector(get_f64s(&mut r, out)?),
                beta: Tensor::vector(get_f64s(&mut r, out)?),
                running_mean: get_f64s(&mut r, out)?,
                running_var: get_f64s(&mut r, out)?,
            });
        }
        let head = Tensor::matrix(classes, feature_dim, get_f64s(&mut r, classes * feature_dim)?)?;
        Ok(Self { arch, blocks, head })
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// SHA-256 of the checkpoint encoding, hex.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_checkpoint_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// L2 penalty added to every parameter's gradient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.005,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Supervised cross-entropy training of every parameter with momentum SGD.
/// Produces the source model used for adaptation.
pub fn pretrain_source(
    mut model: Model,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &PretrainConfig,
) -> Result<Model> {
    if inputs.rows() != labels.len() {
        return Err(CtaError::Shape("inputs and labels differ in length".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.classes()) {
        return Err(CtaError::LabelOutOfRange {
            label: bad,
            classes: model.classes(),
        });
    }
    if !(cfg.weight_decay.is_finite() && cfg.weight_decay >= 0.0) {
        return Err(CtaError::InvalidArgument("weight decay must be finite and >= 0".into()));
    }
    if cfg.batch_size < 2 {
        return Err(CtaError::InvalidArgument("pretraining batch size must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = inputs.select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, Trainable::Everything)?;
            let xv = tape.constant(x)?;
            let step = (|| -> Result<_> {
                let (out, stats) = model.forward_on(&mut tape, &params, xv, Mode::Pretrain)?;
                let logp = tape.log_softmax(out.logits)?;
                let picked = tape.gather(logp, &y)?;
                let total = tape.sum(picked)?;
                let loss = tape.scale(total, -1.0 / y.len() as f64)?;
                Ok((loss, stats))
            })();
            let (loss, stats) = match step {
                Ok(v) => v,
                Err(e) if e.is_numerical() => return Err(CtaError::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            if !tape.value(loss)?.item().is_finite() {
                return Err(CtaError::Diverged { epoch });
            }
            let grads = tape.gradients(loss)?;
            for &kind in params.tracked() {
                let mut g = grads.wrt(&tape, params.var(kind))?;
                if cfg.weight_decay > 0.0 {
                    let p = model.param(kind);
                    g = g.zip_map(p, |g, p| g + cfg.weight_decay * p)?;
                }
                opt.step(kind, model.param_mut(kind), &g)?;
            }
            if model.param_kinds().iter().any(|&k| !model.param(k).is_finite()) {
                return Err(CtaError::Diverged { epoch });
            }
            model.fold_running_stats(&stats)?;
            let stats_finite = model
                .blocks()
                .iter()
                .all(|b| b.running_mean.iter().chain(&b.running_var).all(|v| v.is_finite()));
            if !stats_finite {
                return Err(CtaError::Diverged { epoch });
            }
        }
    }
    Ok(model)
}

/// Frozen-statistics accuracy (fraction in `[0, 1]`).
pub fn evaluate_accuracy(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let out = model.forward_frozen_chunked(inputs, 256)?;
    let correct = out
        .logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| crate::numerics::argmax(row) == y)
        .count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            input_dim: 6,
            hidden: vec![5],
            feature_dim: 4,
            classes: 3,
        }
    }

    fn rows(n: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        Tensor::matrix(n, w, (0..n * w).map(|_| d.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(ArchConfig::default(), 7).unwrap();
        let b = Model::init(ArchConfig::default(), 7).unwrap();
        let c = Model::init(ArchConfig::default(), 8).unwrap();
        assert_eq!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());
        assert_ne!(a.head(), c.head());
        assert_eq!(a.head().shape(), &[10, 64]);
        for b in a.blocks() {
            assert!(b.gamma.data().iter().all(|&g| g == 1.0));
            assert!(b.beta.data().iter().all(|&g| g == 0.0));
            assert!(b.running_mean.iter().all(|&g| g == 0.0));
            assert!(b.running_var.iter().all(|&g| g == 1.0));
        }
    }

    #[test]
    fn invalid_widths_rejected() {
        let mut a = small_arch();
        a.hidden = vec![0];
        assert!(Model::init(a, 0).is_err());
        let mut a = small_arch();
        a.classes = 1;
        assert!(Model::init(a, 0).is_err());
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let m = Model::init(small_arch(), 1).unwrap();
        let out = m.forward(&Tensor::zeros(&[3, 6]), Mode::Adapt).unwrap();
        assert!(out.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapt_mode_rejects_single_sample() {
        let m = Model::init(small_arch(), 1).unwrap();
        let x = rows(1, 6, 2);
        assert!(matches!(m.forward(&x, Mode::Adapt), Err(CtaError::DegenerateBatch(1))));
        assert!(m.forward(&x, Mode::Frozen).is_ok());
    }

    #[test]
    fn duplicated_batch_keeps_adapt_outputs() {
        let m = Model::init(small_arch(), 3).unwrap();
        let x = rows(5, 6, 4);
        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let x2 = Tensor::matrix(10, 6, doubled).unwrap();
        let a = m.forward(&x, Mode::Adapt).unwrap();
        let b = m.forward(&x2, Mode::Adapt).unwrap();
        for r in 0..5 {
            for (p, q) in a.logits.row(r).iter().zip(b.logits.row(r)) {
                assert!((p - q).abs() < 1e-9);
            }
            for (p, q) in a.logits.row(r).iter().zip(b.logits.row(r + 5)) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frozen_forward_permutes_with_rows() {
        let m = Model::init(small_arch(), 3).unwrap();
        let x = rows(6, 6, 5);
        let perm = [3, 0, 5, 1, 4, 2];
        let a = m.forward(&x, Mode::Frozen).unwrap();
        let b = m.forward(&x.select_rows(&perm).unwrap(), Mode::Frozen).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(a.logits.row(p), b.logits.row(k));
        }
    }

    #[test]
    fn scope_partition() {
        let m = Model::init(small_arch(), 0).unwrap();
        let bn = m.trainable_kinds(Trainable::Scope(TrainScope::BnAffine));
        assert!(bn.iter().all(|k| matches!(k, ParamKind::Gamma(_) | ParamKind::Beta(_))));
        assert_eq!(bn.len(), 2 * m.blocks().len());
        let full = m.trainable_kinds(Trainable::Scope(TrainScope::FullExtractor));
        assert!(bn.iter().all(|k| full.contains(k)));
        assert!(!full.contains(&ParamKind::Head));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Model::init(small_arch(), 11).unwrap();
        let bytes = m.to_checkpoint_bytes();
        let back = Model::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        assert_eq!(back, m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::read_checkpoint(&bad[..]).is_err());
        assert!(Model::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let m = Model::init(small_arch(), 2).unwrap();
        let x = rows(8, 6, 1);
        let y = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let cfg = PretrainConfig {
            weight_decay: 0.0,
            epochs: 0,
            ..PretrainConfig::default()
        };
        let out = pretrain_source(m.clone(), &x, &y, &cfg).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn pretraining_is_reproducible() {
        let x = rows(32, 6, 9);
        let y: Vec<usize> = (0..32).map(|i| i % 3).collect();
        let cfg = PretrainConfig {
            weight_decay: 0.0,
            epochs: 3,
            batch_size: 8,
            ..PretrainConfig::default()
        };
        let a = pretrain_source(Model::init(small_arch(), 2).unwrap(), &x, &y, &cfg).unwrap();
        let b = pretrain_source(Model::init(small_arch(), 2).unwrap(), &x, &y, &cfg).unwrap();
        assert_eq!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());
    }

    #[test]
    fn divergence_reports_epoch() {
        let x = rows(32, 6, 9).map(|v| v * 1e3);
        let y: Vec<usize> = (0..32).map(|i| i % 3).collect();
        let cfg = PretrainConfig {
            weight_decay: 0.0,
            epochs: 50,
            lr: 1e12,
            batch_size: 8,
            momentum: 0.9,
            seed: 1,
        };
        let err = pretrain_source(Model::init(small_arch(), 2).unwrap(), &x, &y, &cfg).unwrap_err();
        assert!(matches!(err, CtaError::Diverged { .. }), "{err}");
    }
}
