//! Command-line front end for the federated contribution simulator.
//!
//! Exit codes: 0 on success, 1 for configuration problems, 3 when a
//! computation refuses to exceed its resource cap, 2 for everything else.

use clap::{Args, Parser, Subcommand};
use fedsim_core::runner::config::{compose_config, ShapleyMode};
use fedsim_core::runner::record::RunRecord;
use fedsim_core::runner::{output_base, run_and_persist, run_shapley_on_dir};
use fedsim_core::scenario::PRESETS;
use fedsim_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fedsim",
    about = "Federated learning simulator with a per-round contribution ledger",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment description in TOML.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Named scenario preset; replaces the config file's scenario section.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Dotted-path override, e.g. `--set trainer.learning_rate=0.1`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
    /// Master seed shorthand for `--set master_seed=N`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads shorthand for `--set workers=N`.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Where run directories land; defaults to the config's output_dir,
    /// then $FEDSIM_OUTPUT_DIR, then runs/.
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ShapleyArgs {
    /// A run directory written by `fedsim run`.
    #[arg(long, value_name = "DIR")]
    record: PathBuf,
    /// `exact` enumerates subsets (twelve agents at most); `mc` samples
    /// permutations.
    #[arg(long, value_name = "MODE", default_value = "mc")]
    mode: String,
    /// Permutations for mc mode.
    #[arg(long, value_name = "N", default_value_t = 500)]
    iterations: usize,
    /// Seed of the permutation stream.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    /// A run directory written by `fedsim run`.
    #[arg(long, value_name = "DIR")]
    record: PathBuf,
    /// `csv` writes contributions.csv and attention.csv; `json` writes
    /// summary.json.
    #[arg(long, value_name = "FORMAT", default_value = "csv")]
    format: String,
    /// Destination directory; defaults to the run directory itself.
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and persist its artifacts.
    Run(RunArgs),
    /// Compute Shapley values for a persisted run.
    Shapley(ShapleyArgs),
    /// Re-export a persisted run's tables.
    Export(ExportArgs),
    /// List the built-in scenario presets.
    Presets,
}

fn parse_mode(mode: &str) -> Result<ShapleyMode, Error> {
    match mode {
        "exact" => Ok(ShapleyMode::Exact),
        "mc" => Ok(ShapleyMode::Mc),
        other => Err(Error::Config(format!("unknown shapley mode '{other}'; use exact or mc"))),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let mut sets = args.sets.clone();
    if let Some(seed) = args.seed {
        sets.push(format!("master_seed={seed}"));
    }
    if let Some(workers) = args.workers {
        sets.push(format!("workers={workers}"));
    }
    let config = compose_config(args.config.as_deref(), args.preset.as_deref(), &sets)?;
    let resolved = config.resolve()?;
    let base = output_base(args.output_dir.as_deref(), &config);
    let (output, dir) = run_and_persist(&resolved, &base)?;
    let record = &output.record;
    println!("run {} -> {}", record.run_id, dir.display());
    for row in &record.rounds {
        println!(
            "round {:>3}: cohort {:>2}, {} {:.4}",
            row.round,
            row.selected.len(),
            row.eval.kind,
            row.eval.value
        );
    }
    let mut ranked: Vec<usize> = (0..record.final_contribution.len()).collect();
    ranked.sort_by(|&a, &b| {
        record.final_contribution[b].partial_cmp(&record.final_contribution[a]).unwrap().then(a.cmp(&b))
    });
    println!("contributions (best first):");
    for k in ranked {
        println!("  agent {k:>2}: {:.6}", record.final_contribution[k]);
    }
    if let Some(shapley) = &record.shapley {
        println!("shapley ({:?} mode, {} evaluations):", shapley.mode, shapley.evaluations);
        for (k, v) in shapley.raw.iter().enumerate() {
            println!("  agent {k:>2}: {v:+.6}");
        }
    }
    Ok(())
}

fn cmd_shapley(args: ShapleyArgs) -> Result<(), Error> {
    let mode = parse_mode(&args.mode)?;
    let report = run_shapley_on_dir(&args.record, mode, args.iterations, args.seed)?;
    println!(
        "shapley over {} agents: {} evaluations in {:.0} ms",
        report.agents.len(),
        report.evaluations,
        report.elapsed_ms
    );
    for (k, (raw, norm)) in report.raw.iter().zip(&report.normalized).enumerate() {
        println!("  agent {k:>2}: raw {raw:+.6}, normalized {norm:.6}");
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), Error> {
    let record = RunRecord::load(&args.record.join("record.json"))
        .map_err(|e| e.with_context(&format!("loading {}", args.record.display())))?;
    let dest = args.output_dir.clone().unwrap_or_else(|| args.record.clone());
    match args.format.as_str() {
        "csv" => {
            record.export_csv(&dest)?;
            println!("wrote {} and {}", dest.join("contributions.csv").display(), dest.join("attention.csv").display());
        }
        "json" => {
            record.export_summary(&dest)?;
            println!("wrote {}", dest.join("summary.json").display());
        }
        other => {
            return Err(Error::Config(format!("unknown export format '{other}'; use csv or json")))
        }
    }
    Ok(())
}

fn cmd_presets() {
    for (name, description) in PRESETS {
        println!("{name:<18} {description}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Shapley(args) => cmd_shapley(args),
        Command::Export(args) => cmd_export(args),
        Command::Presets => {
            cmd_presets();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
