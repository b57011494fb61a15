use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use r2n::experiment::{
    display_name, emit_table, emit_trace, file_stem, load_config, run_experiment, ExperimentConfig, TableFormat,
    SOLVER_NAMES,
};
use r2n::solvers::{RunRecord, TraceRow};

const DEFAULT_OUT: &str = "r2n-out";

/// Runs a solver roster on one generated problem and writes statistics tables and traces.
#[derive(Parser, Debug)]
#[command(name = "r2n-bench", version)]
struct Args {
    /// Experiment config file.
    #[arg(long, required_unless_present = "list_solvers")]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record per-iteration traces and log them to stderr.
    #[arg(long)]
    trace: bool,
    /// Problem seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the solver roster and exit.
    #[arg(long)]
    list_solvers: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.list_solvers {
        for key in SOLVER_NAMES {
            println!("{key}\t{}", display_name(key).unwrap_or(key));
        }
        return ExitCode::SUCCESS;
    }
    let path = args.config.as_ref().expect("clap enforces --config");
    let mut config = match load_config(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        config.set_seed(seed);
    }
    if args.trace {
        config.trace = true;
    }
    if let Some(out) = args.out {
        config.out = Some(out);
    }
    match run(&config, args.trace) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Returns whether every solver finished without error.
fn run(config: &ExperimentConfig, live: bool) -> anyhow::Result<bool> {
    let mut log = |solver: &str, row: &TraceRow| {
        eprintln!(
            "{solver} k={} f+h={:e} sigma={:e} nu={:e} measure={:e} rho={:e} {}",
            row.k,
            row.f_plus_h,
            row.sigma,
            row.nu,
            row.measure,
            row.rho,
            row.status.as_str()
        );
    };
    let observer: Option<&mut dyn FnMut(&str, &TraceRow)> = if live { Some(&mut log) } else { None };
    let runs = run_experiment(config, observer);

    let mut ok = true;
    let mut records: Vec<RunRecord> = Vec::new();
    for run in runs {
        match run.result {
            Ok(rec) => records.push(rec),
            Err(e) => {
                ok = false;
                eprintln!("error: {}: {e}", run.solver);
            }
        }
    }
    if records.is_empty() {
        return Ok(false);
    }

    let out = config.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let markdown = emit_table(&records, TableFormat::Markdown)?;
    let csv = emit_table(&records, TableFormat::Csv)?;
    write(&out.join("table.md"), &markdown)?;
    write(&out.join("table.csv"), &csv)?;
    if config.trace {
        for rec in &records {
            let name = format!("trace_{}.csv", file_stem(&rec.solver));
            write(&out.join(name), &emit_trace(rec)?)?;
        }
    }
    print!("{markdown}");
    Ok(ok)
}

fn write(path: &std::path::Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
