use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparsegrow::artifacts::{aggregate, read_report};
use sparsegrow::config::{ExperimentConfig, OUTPUT_ENV};
use sparsegrow::experiment::{run_baseline, Baseline, RunOutcome, StaticBudget};
use sparsegrow::model::inspect_snapshot;
use sparsegrow::suites::{run_all, SUITES};
use sparsegrow::Error;

#[derive(Parser)]
#[command(name = "sparsegrow", version, about = "Grow sparse networks from a seed topology")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the growth pipeline with the configured method.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run a single seed instead of the config's seed list.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seeds, run one after another.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Run a comparison method under the same config.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        /// imp-c, rg, gg, pwmp, pwmpr or phew-static.
        #[arg(long)]
        method: String,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Growth run whose stop density and FLOPs set the phew-static budget.
        #[arg(long = "match", value_name = "RUN_DIR")]
        match_dir: Option<PathBuf>,
    },
    /// Run the brute-force equivalence suites and print a JSON summary.
    Oracle {
        /// Suite to run; repeat for several. Defaults to all.
        #[arg(long)]
        suite: Vec<String>,
        /// Relative error injected into the computed side (negative control).
        #[arg(long, default_value_t = 0.0)]
        perturb: f64,
    },
    /// Aggregate run directories into summary tables.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write density_table.csv and method_table.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the layout of a weight snapshot as JSON.
    InspectSnapshot { file: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Data(_) | Error::Format { .. } | Error::Io { .. } => 4,
        Error::Divergence(_) => 5,
        Error::Usage(_) | Error::Shape(_) => 2,
        Error::CannotGrow(_) | Error::EmptyCore => 1,
    }
}

fn seeds(cfg: &ExperimentConfig, one: Option<u64>, many: Vec<u64>) -> Vec<u64> {
    match (one, many.is_empty()) {
        (Some(s), _) => vec![s],
        (None, false) => many,
        (None, true) => cfg.seeds.clone(),
    }
}

fn summarize(out: &RunOutcome) -> sparsegrow::Result<()> {
    let r = &out.report;
    let reason = r
        .stop_reason
        .as_ref()
        .map(|s| serde_json::to_string(s).unwrap_or_default())
        .unwrap_or_else(|| "-".into());
    emit(&format!(
        "{} seed {}: density {:.4} after {} steps, val acc {:.4}, relative cost {:.4}, stop {}  [{}]\n",
        r.method,
        r.seed,
        r.stop_density,
        r.growth_steps,
        r.final_val_acc,
        r.relative_cost,
        reason,
        out.dir.display()
    ))
}

/// Prints to stdout, treating a closed pipe (e.g. `| head`) as success.
fn emit(text: &str) -> sparsegrow::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn json(v: &impl serde::Serialize) -> sparsegrow::Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Usage(format!("serializing output: {e}")))
}

fn dispatch(cmd: Cmd) -> sparsegrow::Result<ExitCode> {
    match cmd {
        Cmd::Run { config, seed, seeds: many } => {
            let cfg = ExperimentConfig::load(&config)?;
            let kind = Baseline::Growth(cfg.growth.method);
            for s in seeds(&cfg, seed, many) {
                summarize(&run_baseline(&cfg, kind, s, None)?)?;
            }
        }
        Cmd::Baseline {
            config,
            method,
            seed,
            seeds: many,
            match_dir,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let kind: Baseline = method.parse()?;
            let budget = match match_dir {
                Some(d) => Some(StaticBudget::from_report(&read_report(&d)?)),
                None => None,
            };
            for s in seeds(&cfg, seed, many) {
                summarize(&run_baseline(&cfg, kind, s, budget)?)?;
            }
        }
        Cmd::Oracle { suite, perturb } => {
            let names: Vec<&str> = if suite.is_empty() {
                SUITES.to_vec()
            } else {
                suite.iter().map(String::as_str).collect()
            };
            let summary = run_all(&names, perturb)?;
            emit(&(json(&summary)? + "\n"))?;
            if !summary.passed {
                for s in summary.suites.iter().filter(|s| !s.passed) {
                    eprintln!("suite {} failed: {}", s.name, s.failures.join("; "));
                }
                return Ok(ExitCode::from(6));
            }
        }
        Cmd::Report { dirs, out } => {
            let agg = aggregate(&dirs)?;
            emit(&agg.render())?;
            if let Some(out) = out {
                agg.write_csv(&out)?;
            }
        }
        Cmd::InspectSnapshot { file } => {
            let bytes = std::fs::read(&file).map_err(|e| Error::Io {
                path: file.clone(),
                source: e,
            })?;
            emit(&(json(&inspect_snapshot(&bytes)?)? + "\n"))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    log::debug!("output root override: {:?}", std::env::var_os(OUTPUT_ENV));
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
