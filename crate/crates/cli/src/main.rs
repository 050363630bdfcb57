//! Command-line driver for the gridsync experiment suite.
//!
//! Every subcommand maps to one experiment kind. Parameters come from a
//! TOML config document (`--config`), from the kind's defaults, or from
//! `--set key=value` overrides; flags win over the document.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gridsync::experiment::{self, ConfigDoc, OutputFormat};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "gridsync",
    version,
    about = "Group synchronization on grids: estimators, samplers, phase diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML experiment document; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (required for stochastic experiments).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Result format: csv or jsonl.
    #[arg(long)]
    format: Option<String>,
    /// Parameter overrides, e.g. --set p=0.02 --set l=64.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synchronization instance and write it to a checksummed file.
    Generate(CommonArgs),
    /// Path-product estimators on a 3D grid (diagonal / axis / pair).
    EstimatePath(CommonArgs),
    /// Hierarchical block synchronization on the 2D grid.
    EstimateMultiscale(CommonArgs),
    /// Nishimori-line heat-bath phase scan.
    Gibbs(CommonArgs),
    /// Exact least-squares error of the translation toy model.
    ToyMse(CommonArgs),
    /// Bond-percolation connectivity probe.
    Percolation(CommonArgs),
    /// Spin-wave Dirichlet energy and the non-recovery bound.
    Spinwave(CommonArgs),
    /// Empirical intersection-tail diagnostic of the path measures.
    EitDiag(CommonArgs),
    /// Monte Carlo calibration of the channel coefficient lambda.
    LambdaCalib(CommonArgs),
    /// Run the sweep axes of a config document (requires --config).
    Sweep(CommonArgs),
}

impl Command {
    fn kind(&self) -> Option<&'static str> {
        match self {
            Command::Generate(_) => Some("generate"),
            Command::EstimatePath(_) => Some("estimate-path"),
            Command::EstimateMultiscale(_) => Some("estimate-multiscale"),
            Command::Gibbs(_) => Some("gibbs"),
            Command::ToyMse(_) => Some("toy-mse"),
            Command::Percolation(_) => Some("percolation"),
            Command::Spinwave(_) => Some("spinwave"),
            Command::EitDiag(_) => Some("eit-diag"),
            Command::LambdaCalib(_) => Some("lambda-calib"),
            Command::Sweep(_) => None,
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Generate(a)
            | Command::EstimatePath(a)
            | Command::EstimateMultiscale(a)
            | Command::Gibbs(a)
            | Command::ToyMse(a)
            | Command::Percolation(a)
            | Command::Spinwave(a)
            | Command::EitDiag(a)
            | Command::LambdaCalib(a)
            | Command::Sweep(a) => a,
        }
    }
}

fn load_doc(kind: Option<&str>, args: &CommonArgs) -> Result<ConfigDoc> {
    let mut doc = match (&args.config, kind) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let doc = ConfigDoc::from_toml_str(&text)?;
            if let Some(k) = kind {
                if doc.kind != k {
                    bail!("config is for kind '{}', but the subcommand is '{k}'", doc.kind);
                }
            }
            doc
        }
        (None, Some(k)) => ConfigDoc::default_for(k)?,
        (None, None) => bail!("the sweep subcommand needs --config with a [sweep] table"),
    };
    if kind.is_none() && doc.sweep.as_ref().map_or(true, |s| s.is_empty()) {
        bail!("sweep requires a non-empty [sweep] table in the config");
    }
    if let Some(seed) = args.seed {
        doc.seed = Some(seed);
    }
    if let Some(workers) = args.workers {
        doc.workers = Some(workers);
    }
    if let Some(format) = &args.format {
        doc.format = match format.as_str() {
            "csv" => OutputFormat::Csv,
            "jsonl" => OutputFormat::Jsonl,
            other => bail!("format must be 'csv' or 'jsonl', got '{other}'"),
        };
    }
    for kv in &args.sets {
        let (key, value) = kv
            .split_once('=')
            .with_context(|| format!("--set needs KEY=VALUE, got '{kv}'"))?;
        doc.set_param(key.trim(), value.trim())?;
    }
    Ok(doc)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let args = cli.command.args().clone();
    let doc = load_doc(cli.command.kind(), &args)?;
    let out = experiment::run(&doc, &args.out)?;
    eprintln!(
        "{}: {} rows -> {}",
        doc.kind,
        out.table.rows.len(),
        out.result_file.display()
    );
    for extra in &out.extra_files {
        eprintln!("  wrote {}", extra.display());
    }
    Ok(())
}
