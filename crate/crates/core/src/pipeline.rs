//! Wiring from a resolved config to a finished run: synthetic task,
//! source pretraining, source prototypes, target stream, adaptation.

use crate::config::ExperimentConfig;
use crate::engine::{run_stream, AdaptationState};
use crate::error::{CtaError, Result};
use crate::metrics::RunReport;
use crate::model::{evaluate_accuracy, pretrain_source, Model};
use crate::prototypes::{build_source_prototypes, SourcePrototypes};
use crate::streams::{make_domain_sequence, make_source_dataset, DomainStream, SyntheticTask};

/// Everything shared by runs that differ only in the adaptation settings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub task: SyntheticTask,
    pub source_model: Model,
    pub source_prototypes: SourcePrototypes,
    /// Frozen-statistics accuracy on the clean held-out half (fraction).
    pub heldout_accuracy: f64,
    pub stream: DomainStream,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let task = SyntheticTask::new(cfg.task.clone(), cfg.seeds.data)?;
    let data = make_source_dataset(&task, cfg.stream.source_per_class, cfg.seeds.data)?;
    let (train, heldout) = data.split_by_parity()?;
    let model0 = Model::init(cfg.arch_config(), cfg.seeds.model)?;
    let source_model = pretrain_source(model0, &train.inputs, &train.labels, &cfg.pretrain_config())?;
    let heldout_accuracy = if heldout.is_empty() {
        evaluate_accuracy(&source_model, &train.inputs, &train.labels)?
    } else {
        evaluate_accuracy(&source_model, &heldout.inputs, &heldout.labels)?
    };
    if heldout_accuracy < cfg.pretrain.min_heldout_accuracy {
        return Err(CtaError::Config(format!(
            "pretrain: held-out accuracy {:.4} below pretrain.min_heldout_accuracy {}",
            heldout_accuracy, cfg.pretrain.min_heldout_accuracy
        )));
    }
    let source_prototypes = build_source_prototypes(
        &source_model,
        &train.inputs,
        &train.labels,
        cfg.adapt.source_cap,
        cfg.seeds.data,
    )?;
    let stream = make_stream(cfg, &task)?;
    Ok(Prepared {
        task,
        source_model,
        source_prototypes,
        heldout_accuracy,
        stream,
    })
}

pub fn make_stream(cfg: &ExperimentConfig, task: &SyntheticTask) -> Result<DomainStream> {
    let domains = make_domain_sequence(
        &cfg.corruptions()?,
        cfg.stream.order,
        cfg.seeds.shuffle,
        cfg.stream.clean_last,
    )?;
    DomainStream::new(
        task,
        domains,
        cfg.stream.samples_per_domain,
        cfg.adapt.batch_size,
        cfg.seeds.data,
    )
}

/// Adapts over `prepared.stream` with the method and settings in `cfg`.
/// The stream's batch size is taken from `cfg`.
pub fn run_method(prepared: &Prepared, cfg: &ExperimentConfig) -> Result<(AdaptationState, RunReport)> {
    let stream = prepared.stream.with_batch_size(cfg.adapt.batch_size)?;
    let mut state = AdaptationState::new(
        prepared.source_model.clone(),
        prepared.source_prototypes.clone(),
        cfg.adapt_config(),
    )?;
    let report = run_stream(&mut state, &stream)?;
    Ok((state, report))
}
