//! `segunify` command-line entry point.

mod config;
mod data;
mod infer;
mod mapping;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Ctx;

const AFTER_HELP: &str = "\
Settings resolve as: command-line flags, then the --config JSON file, then
built-in defaults.

Exit codes: 0 ok, 1 verification warning under --strict, 2 parse or argument
error, 3 data error, 4 predictor error.";

#[derive(Debug, Parser)]
#[command(name = "segunify", version, about = "Multi-dataset semantic segmentation toolkit", after_help = AFTER_HELP)]
struct Cli {
    /// JSON file with default settings.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random draw [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Turn verification warnings into exit code 1 and missing data into errors.
    #[arg(long, global = true)]
    strict: bool,
    /// Worker threads; 1 runs sequentially [default: all cores].
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dataset catalog JSON replacing the built-in one.
    #[arg(long, global = true, value_name = "FILE")]
    catalog: Option<PathBuf>,
    /// Directory holding `<dataset>.csv` mapping files.
    #[arg(long, global = true, value_name = "DIR")]
    mapping_dir: Option<PathBuf>,
    /// Default output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check mapping files and print original -> projected class counts.
    ValidateMapping(mapping::ValidateArgs),
    /// Project a directory of masks between a dataset space and the unified space.
    Remap(mapping::RemapArgs),
    /// Scan dataset directories into a JSONL manifest.
    Manifest(data::ManifestArgs),
    /// Build the repeat-factor training schedule.
    Plan(data::PlanArgs),
    /// Run the training augmentation pipeline on manifest samples.
    Augment(data::AugmentArgs),
    /// Multi-scale, flipped inference through a predictor.
    Tta(infer::TtaArgs),
    /// Score predictions against ground truth, per dataset.
    Evaluate(infer::EvaluateArgs),
    /// Record counts and class histograms of a manifest.
    Stats(data::StatsArgs),
    /// Serve the predictor protocol with a deterministic fake model.
    #[command(hide = true)]
    StubPredictor(infer::StubArgs),
}

fn run(cli: Cli) -> segunify::Result<usize> {
    let ctx = Ctx::resolve(
        cli.config.as_deref(),
        config::GlobalFlags {
            seed: cli.seed,
            strict: cli.strict,
            threads: cli.threads,
            catalog: cli.catalog,
            mapping_dir: cli.mapping_dir,
            out_dir: cli.out_dir,
        },
    )?;
    match cli.command {
        Command::ValidateMapping(a) => mapping::validate(&ctx, a),
        Command::Remap(a) => mapping::remap(&ctx, a),
        Command::Manifest(a) => data::manifest(&ctx, a),
        Command::Plan(a) => data::plan(&ctx, a),
        Command::Augment(a) => data::augment(&ctx, a),
        Command::Tta(a) => infer::tta(&ctx, a),
        Command::Evaluate(a) => infer::evaluate(&ctx, a),
        Command::Stats(a) => data::stats(&ctx, a),
        Command::StubPredictor(a) => infer::serve_stub(a),
    }
    .map(|warnings| if ctx.strict { warnings } else { 0 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} verification warning(s) under --strict");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
