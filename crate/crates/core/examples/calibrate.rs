//! Runs the default stream and prints one JSON line per (run, method):
//! every method on the fixed order for seeds `0..n`, then `tent` and
//! `ours-only` on `n` shuffled orders of the seed-0 stream.
//!
//! The output is committed as `calibration/default.jsonl` and read back by
//! the acceptance suite.
//!
//! Usage: `cargo run --release -p cta-core --example calibrate -- [n] > crates/core/calibration/default.jsonl`

use std::time::Instant;

use cta_core::config::ExperimentConfig;
use cta_core::pipeline::{make_stream, prepare, run_method};
use cta_core::{DomainOrder, Method};

fn line(kind: &str, seed: u64, method: Method, s: &cta_core::RunSummary) {
    let per_domain: Vec<String> = s.domains.iter().map(|d| d.accuracy.to_string()).collect();
    println!(
        "{{\"run\":\"{kind}\",\"seed\":{seed},\"method\":\"{method}\",\"mean_accuracy\":{},\"bias\":{},\"ece\":{},\"domains\":[{}]}}",
        s.mean_accuracy,
        s.bias,
        s.ece,
        per_domain.join(",")
    );
}

fn main() -> cta_core::Result<()> {
    let n: u64 = std::env::args().nth(1).map(|s| s.parse().expect("seed count")).unwrap_or(3);
    for seed in 0..n {
        let mut cfg = ExperimentConfig::default();
        cfg.set_seed(seed);
        let t = Instant::now();
        let prepared = prepare(&cfg)?;
        eprintln!("seed {seed}: prepared in {:.1?}, held-out {:.4}", t.elapsed(), prepared.heldout_accuracy);
        for method in Method::ALL {
            let mut c = cfg.clone();
            c.method = method;
            let (_, report) = run_method(&prepared, &c)?;
            line("fixed", seed, method, &report.summary);
        }
    }

    let mut cfg = ExperimentConfig::default();
    cfg.set_seed(0);
    cfg.stream.order = DomainOrder::Shuffled;
    let mut prepared = prepare(&cfg)?;
    for shuffle in 0..n {
        cfg.seeds.shuffle = shuffle;
        prepared.stream = make_stream(&cfg, &prepared.task)?;
        let names: Vec<String> = prepared.stream.domains().iter().map(|d| d.name()).collect();
        eprintln!("order {shuffle}: {}", names.join(" "));
        for method in [Method::Tent, Method::OursOnly] {
            let mut c = cfg.clone();
            c.method = method;
            let (_, report) = run_method(&prepared, &c)?;
            line("shuffled", shuffle, method, &report.summary);
        }
    }
    Ok(())
}
