use std::io::Write;

use super::{RunReport, RunSummary};
use crate::error::Result;

/// `metrics.csv`: one row per adapted batch.
pub fn write_metrics_csv<W: Write>(w: W, report: &RunReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "step",
        "domain",
        "domain_name",
        "accuracy",
        "mean_entropy",
        "loss_total",
        "loss_unsup",
        "loss_ema",
        "loss_src",
        "loss_cons",
        "reliable",
        "updated",
    ])?;
    for b in &report.batches {
        let name = report.domain_names.get(b.domain).map(String::as_str).unwrap_or("");
        out.write_record([
            b.step.to_string(),
            b.domain.to_string(),
            name.to_string(),
            b.accuracy().to_string(),
            b.mean_entropy().to_string(),
            b.losses.total.to_string(),
            b.losses.unsup.to_string(),
            b.losses.ema.to_string(),
            b.losses.src.to_string(),
            b.losses.cons.to_string(),
            b.reliable.to_string(),
            u8::from(b.updated).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `calibration.csv`: one row per confidence bin over the whole run.
pub fn write_calibration_csv<W: Write>(w: W, summary: &RunSummary) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin", "count", "mean_confidence", "accuracy", "mean_entropy"])?;
    for (i, b) in summary.calibration.bins.iter().enumerate() {
        out.write_record([
            i.to_string(),
            b.count.to_string(),
            b.mean_confidence.to_string(),
            b.accuracy.to_string(),
            b.mean_entropy.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `summary.json`, pretty-printed with a trailing newline.
pub fn write_summary_json<W: Write>(mut w: W, summary: &RunSummary) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, summary)?;
    w.write_all(b"\n")?;
    Ok(())
}
