use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use kslab::experiment::{run, ExperimentConfig};
use kslab::report::write_outputs;
use kslab::{stats, Error};

/// Run a kslab experiment from a TOML or JSON config.
#[derive(Debug, Parser)]
#[command(name = "kslab", version)]
struct Args {
    /// Experiment config (TOML, or JSON for a `.json` file).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory for report.json and series.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn error_json(e: &Error) -> serde_json::Value {
    let (kind, field) = match e {
        Error::InvalidParameter { field, .. } => ("invalid-parameter", Some(field.clone())),
        Error::InvalidMode(_) => ("invalid-mode", None),
        Error::Config(_) => ("config", None),
        Error::Io(_) => ("io", None),
        _ => ("runtime", None),
    };
    serde_json::json!({ "error": kind, "field": field, "message": e.to_string() })
}

fn fail(e: Error) -> ExitCode {
    eprintln!("{}", error_json(&e));
    if e.is_validation() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(w) = args.workers {
        if w == 0 {
            return fail(Error::InvalidParameter {
                field: "workers".into(),
                reason: "must be positive".into(),
            });
        }
        stats::configure_workers(w);
    }
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = args.paths {
        cfg.paths = p;
    }
    let cfg = match cfg.resolve() {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let out_dir = args
        .out_dir
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let out = match run(&cfg) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    if let Err(e) = write_outputs(&out_dir, &out.report, &out.series) {
        return fail(e);
    }
    println!("{}", out_dir.display());
    ExitCode::SUCCESS
}
