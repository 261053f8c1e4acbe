use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fairhgr_cli::config::ConfigErrors;
use fairhgr_cli::sweep::{write_few_shot, write_sweep};
use fairhgr_cli::{exit, run_few_shot, run_sweep, ExperimentConfig, RunError};
use toml::{Table, Value};

/// Sweep the fairness regularizer λ and write tradeoff curves as CSV.
///
/// Flags override values from the config file. Exit codes: 0 success,
/// 1 configuration error, 2 dataset ingestion error, 3 some points failed.
#[derive(Debug, Parser)]
#[command(name = "fairhgr", version)]
struct Args {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// compas, adult, cc, synth-coins, synth-bias or synth-cts-bias.
    #[arg(long)]
    dataset: Option<String>,
    /// discrete or continuous; inferred from the dataset when omitted.
    #[arg(long)]
    pipeline: Option<String>,
    /// independence or separation.
    #[arg(long)]
    criterion: Option<String>,
    /// Comma-separated ascending λ grid, e.g. `0,0.5,1`.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    lambdas: Option<Vec<f64>>,
    /// Comma-separated ascending seeds.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    seeds: Option<Vec<i64>>,
    #[arg(long)]
    k: Option<i64>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the few-shot adaptation experiment instead of a sweep.
    #[arg(long)]
    few_shot: bool,
}

fn load_table(args: &Args) -> Result<Table, ConfigErrors> {
    let mut table = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigErrors(vec![format!("cannot read {}: {e}", path.display())]))?;
            text.parse::<Table>().map_err(|e| ConfigErrors(vec![e.to_string()]))?
        }
        None => Table::new(),
    };
    let mut set = |key: &str, v: Value| {
        table.insert(key.into(), v);
    };
    if let Some(v) = &args.dataset {
        set("dataset", v.clone().into());
    }
    if let Some(v) = &args.pipeline {
        set("pipeline", v.clone().into());
    }
    if let Some(v) = &args.criterion {
        set("criterion", v.clone().into());
    }
    if let Some(v) = &args.lambdas {
        set("lambdas", Value::Array(v.iter().map(|&x| Value::Float(x)).collect()));
    }
    if let Some(v) = &args.seeds {
        set("seeds", Value::Array(v.iter().map(|&x| Value::Integer(x)).collect()));
    }
    if let Some(v) = args.k {
        set("k", Value::Integer(v));
    }
    if let Some(v) = &args.out {
        set("out", v.to_string_lossy().into_owned().into());
    }
    Ok(table)
}

fn run(args: &Args) -> i32 {
    let cfg = match load_table(args).and_then(|t| ExperimentConfig::from_table(&t)) {
        Ok(c) => c,
        Err(errors) => {
            for e in &errors.0 {
                eprintln!("config error: {e}");
            }
            return exit::CONFIG;
        }
    };
    let result = if args.few_shot {
        run_few_shot(&cfg).and_then(|o| write_few_shot(&cfg, &o).map(|_| o.failures()))
    } else {
        run_sweep(&cfg).and_then(|o| write_sweep(&cfg, &o).map(|_| o.failures()))
    };
    match result {
        Ok(0) => {
            eprintln!("wrote {}", cfg.out.display());
            exit::OK
        }
        Ok(n) => {
            eprintln!("wrote {} with {n} failed point(s)", cfg.out.display());
            exit::PARTIAL
        }
        Err(e @ RunError::Config(_)) => {
            eprintln!("config error: {e}");
            exit::CONFIG
        }
        Err(e @ RunError::Ingestion(_)) => {
            eprintln!("{e}");
            exit::INGESTION
        }
        Err(e @ RunError::Output(_)) => {
            eprintln!("{e}");
            exit::INGESTION
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = run(&Args::parse());
    ExitCode::from(code as u8)
}
