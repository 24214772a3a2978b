//! Files written into a run directory, and the sweep table.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use cta_core::config::ExperimentConfig;
use cta_core::engine::AdaptationState;
use cta_core::metrics::{write_calibration_csv, write_metrics_csv, write_summary_json, RunReport};
use cta_core::pipeline::Prepared;
use cta_core::prototypes::{all_rows, write_prototypes_csv, PrototypeKind};
use cta_core::{CtaError, Result, RunSummary};

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    state: &AdaptationState,
    report: &RunReport,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut w = create(&dir.join("config.resolved"))?;
    writeln!(w, "# cta {}", cta_core::VERSION)?;
    w.write_all(cfg.to_toml_string()?.as_bytes())?;
    w.flush()?;

    write_metrics_csv(create(&dir.join("metrics.csv"))?, report)?;
    write_summary_json(create(&dir.join("summary.json"))?, &report.summary)?;
    write_calibration_csv(create(&dir.join("calibration.csv"))?, &report.summary)?;

    let mut w = create(&dir.join("model.ckpt"))?;
    state.model().write_checkpoint(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("source_model.ckpt"))?;
    prepared.source_model.write_checkpoint(&mut w)?;
    w.flush()?;

    write_prototypes_csv(
        create(&dir.join("prototypes.csv"))?,
        &[
            (PrototypeKind::Source, all_rows(prepared.source_prototypes.matrix())),
            (PrototypeKind::Target, all_rows(state.target().matrix())),
            (PrototypeKind::TargetGt, report.last_ground_truth.clone()),
        ],
    )
}

pub struct SweepRow {
    axis: String,
    value: String,
    status: String,
    summary: Option<RunSummary>,
}

impl SweepRow {
    pub fn ok(axis: &str, value: &str, summary: &RunSummary) -> Self {
        Self {
            axis: axis.to_string(),
            value: value.to_string(),
            status: "ok".to_string(),
            summary: Some(summary.clone()),
        }
    }

    pub fn failed(axis: &str, value: &str, err: &CtaError) -> Self {
        Self {
            axis: axis.to_string(),
            value: value.to_string(),
            status: format!("error: {err}"),
            summary: None,
        }
    }
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(path)?);
    out.write_record([
        "axis",
        "value",
        "mean_accuracy",
        "overall_accuracy",
        "bias",
        "ece",
        "updates",
        "status",
    ])?;
    for r in rows {
        let m = |f: fn(&RunSummary) -> String| r.summary.as_ref().map(f).unwrap_or_default();
        out.write_record([
            r.axis.clone(),
            r.value.clone(),
            m(|s| s.mean_accuracy.to_string()),
            m(|s| s.overall_accuracy.to_string()),
            m(|s| s.bias.to_string()),
            m(|s| s.ece.to_string()),
            m(|s| s.updates.to_string()),
            r.status.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
