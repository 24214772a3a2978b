//! `cta`: run continual test-time adaptation experiments from a config file.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cta_core::config::ExperimentConfig;
use cta_core::pipeline::{make_stream, prepare, run_method, Prepared};
use cta_core::streams::{write_dataset, DomainOrder, DumpRecord, SyntheticTask};
use cta_core::{CtaError, Method};

#[derive(Parser, Debug)]
#[command(name = "cta", version, about = "Continual test-time adaptation with class prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain, adapt over the domain stream and write all run artifacts.
    Run(RunArgs),
    /// Write the target stream as a fixed-width binary dataset.
    Dump(DumpArgs),
}

#[derive(Parser, Debug)]
struct RunArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// source | tent | ours-only | tent+ours
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Sets the data, model, shuffle and adaptation seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    order: Option<OrderArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Repeat the run over one axis: `--sweep alpha 0.9,0.99,0.996`.
    #[arg(long, num_args = 2, value_names = ["AXIS", "VALUES"])]
    sweep: Option<Vec<String>>,
}

#[derive(Parser, Debug)]
struct DumpArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    order: Option<OrderArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OrderArg {
    Fixed,
    Shuffled,
}

impl From<OrderArg> for DomainOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::Fixed => DomainOrder::Fixed,
            OrderArg::Shuffled => DomainOrder::Shuffled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SweepAxis {
    BatchSize,
    Alpha,
    LambdaEma,
    LambdaSrc,
}

impl SweepAxis {
    fn parse(s: &str) -> Result<Self, CtaError> {
        Ok(match s {
            "batch-size" => SweepAxis::BatchSize,
            "alpha" => SweepAxis::Alpha,
            "lambda-ema" => SweepAxis::LambdaEma,
            "lambda-src" => SweepAxis::LambdaSrc,
            _ => {
                return Err(CtaError::Config(format!(
                    "--sweep: unknown axis `{s}` (batch-size, alpha, lambda-ema, lambda-src)"
                )))
            }
        })
    }

    fn name(self) -> &'static str {
        match self {
            SweepAxis::BatchSize => "batch-size",
            SweepAxis::Alpha => "alpha",
            SweepAxis::LambdaEma => "lambda-ema",
            SweepAxis::LambdaSrc => "lambda-src",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: &str) -> Result<(), CtaError> {
        let bad = |e: &dyn std::fmt::Display| CtaError::Config(format!("--sweep {}: `{value}`: {e}", self.name()));
        match self {
            SweepAxis::BatchSize => cfg.adapt.batch_size = value.parse().map_err(|e| bad(&e))?,
            SweepAxis::Alpha => cfg.adapt.alpha = value.parse().map_err(|e| bad(&e))?,
            SweepAxis::LambdaEma => cfg.adapt.lambda_ema = Some(value.parse().map_err(|e| bad(&e))?),
            SweepAxis::LambdaSrc => cfg.adapt.lambda_src = Some(value.parse().map_err(|e| bad(&e))?),
        }
        Ok(())
    }
}

fn exit_code(err: &CtaError) -> u8 {
    if err.is_numerical() {
        3
    } else {
        match err {
            CtaError::Config(_) | CtaError::Unknown { .. } | CtaError::InvalidArgument(_) => 2,
            _ => 1,
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CtaError> {
    if !path.is_file() {
        return Err(CtaError::Config(format!("config file {} not found", path.display())));
    }
    ExperimentConfig::load(path)
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) -> Result<(), CtaError> {
    if let Some(m) = &args.method {
        cfg.method = m
            .parse::<Method>()
            .map_err(|_| CtaError::Config(format!("--method: unknown method `{m}`")))?;
    }
    if let Some(b) = args.batch_size {
        cfg.adapt.batch_size = b;
    }
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = args.order {
        cfg.stream.order = o.into();
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    Ok(())
}

fn run_once(prepared: &Prepared, cfg: &ExperimentConfig, dir: &Path) -> Result<cta_core::RunSummary, CtaError> {
    let (state, report) = run_method(prepared, cfg)?;
    output::write_run(dir, cfg, prepared, &state, &report)?;
    Ok(report.summary)
}

fn cmd_run(args: RunArgs) -> Result<(), CtaError> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, &args)?;
    let sweep = match &args.sweep {
        Some(v) => {
            let axis = SweepAxis::parse(&v[0])?;
            let values: Vec<String> = v[1]
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if values.is_empty() {
                return Err(CtaError::Config("--sweep: needs at least one value".into()));
            }
            let mut resolved = Vec::new();
            for value in &values {
                let mut c = cfg.clone();
                axis.apply(&mut c, value)?;
                resolved.push((value.clone(), c.resolve()?));
            }
            Some((axis, resolved))
        }
        None => None,
    };
    let cfg = cfg.resolve()?;
    eprintln!("cta {}: preparing source model", cta_core::VERSION);
    let prepared = prepare(&cfg)?;
    eprintln!("held-out source accuracy {:.2}%", 100.0 * prepared.heldout_accuracy);

    let Some((axis, runs)) = sweep else {
        let summary = run_once(&prepared, &cfg, &cfg.out)?;
        eprintln!(
            "{}: mean online accuracy {:.2}%, ECE {:.4}, bias {:.4} -> {}",
            cfg.method,
            summary.mean_accuracy,
            summary.ece,
            summary.bias,
            cfg.out.display()
        );
        return Ok(());
    };

    std::fs::create_dir_all(&cfg.out)?;
    let mut rows = Vec::new();
    let mut first_err = None;
    for (value, c) in runs {
        let dir = cfg.out.join(format!("{}={value}", axis.name()));
        let mut c = c;
        c.out = dir.clone();
        match run_once(&prepared, &c, &dir) {
            Ok(s) => {
                eprintln!("{}={value}: mean online accuracy {:.2}%", axis.name(), s.mean_accuracy);
                rows.push(output::SweepRow::ok(axis.name(), &value, &s));
            }
            Err(e) => {
                eprintln!("{}={value}: {e}", axis.name());
                rows.push(output::SweepRow::failed(axis.name(), &value, &e));
                first_err.get_or_insert(e);
            }
        }
    }
    output::write_sweep(&cfg.out.join("sweep.csv"), &rows)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_dump(args: DumpArgs) -> Result<(), CtaError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = args.order {
        cfg.stream.order = o.into();
    }
    cfg.validate()?;
    let task = SyntheticTask::new(cfg.task.clone(), cfg.seeds.data)?;
    let stream = make_stream(&cfg, &task)?;
    let mut records = Vec::new();
    for k in 0..stream.domains().len() {
        let set = stream.domain_set(k)?;
        for (row, &label) in set.inputs.iter_rows().zip(&set.labels) {
            records.push(DumpRecord {
                label: label as u32,
                domain: k as u32,
                pixels: row.to_vec(),
            });
        }
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let file = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    write_dataset(file, task.side(), task.classes(), &records)?;
    eprintln!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Dump(a) => cmd_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
