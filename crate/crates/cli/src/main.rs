use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;
use nfmimo::harness::plotdata::PlotSpec;
use nfmimo::harness::{
    emit_plotdata, recipe, run_to_file, write_likelihood_figure, ExperimentConfig, ExperimentKind, RunOptions, RunSummary,
};

#[derive(Parser)]
#[command(name = "nfmimo", version, about = "Near-field LoS MIMO acquisition and precoding experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; the shipped default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Output CSV (single experiments) or directory (figures).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log failed trials and keep going instead of exiting with an error.
    #[arg(long, global = true)]
    skip_failures: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Angle estimation errors and their bounds.
    Estimate,
    /// Angle bounds only.
    Crlb,
    /// Stage-1 precoding rates.
    Precode,
    /// Over-the-air refinement traces.
    Ota,
    /// Runs a figure recipe and writes its plot data.
    Figure {
        /// One of fig4 .. fig10.
        name: String,
        /// Grid step of the likelihood surface (fig6 only).
        #[arg(long, default_value_t = 0.25)]
        surface_step_deg: f64,
    },
    /// Aggregates an existing metrics CSV with a recipe's plot columns.
    Plotdata {
        csv: PathBuf,
        #[arg(long)]
        recipe: String,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = common.trials {
        cfg.trials = trials;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(summary: &RunSummary, target: &Path) {
    for (trial, point, msg) in &summary.failures {
        warn!("trial {trial} at {point} skipped: {msg}");
    }
    println!("{} rows -> {} ({} trials skipped)", summary.rows, target.display(), summary.failures.len());
}

fn run_single(kind: ExperimentKind, common: &Common, opts: &RunOptions) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.kind = kind;
    let target = common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from(format!("results/{}.csv", kind.name())));
    let summary = run_to_file(std::slice::from_ref(&cfg), opts, &target)?;
    report(&summary, &target);
    Ok(())
}

fn run_figure(name: &str, surface_step_deg: f64, common: &Common, opts: &RunOptions) -> Result<()> {
    let base = load_config(common)?;
    let r = recipe(name, &base)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    if !r.surface_pilots.is_empty() {
        write_likelihood_figure(&base, &r.surface_pilots, surface_step_deg, &dir)?;
        println!("{}: surface written to {}", r.name, dir.display());
        return Ok(());
    }
    let raw = dir.join(format!("{}_metrics.csv", r.name));
    let summary = run_to_file(&r.experiments, opts, &raw)?;
    report(&summary, &raw);
    let plot = emit_plotdata(&raw, &r.plot, &dir.join("plotdata"))?;
    println!("{}: plot data -> {}", r.title, plot.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let opts = RunOptions { skip_failures: common.skip_failures, threads: common.threads };
    match cli.command {
        Command::Estimate => run_single(ExperimentKind::Estimate, common, &opts),
        Command::Crlb => run_single(ExperimentKind::Crlb, common, &opts),
        Command::Precode => run_single(ExperimentKind::Precode, common, &opts),
        Command::Ota => run_single(ExperimentKind::Ota, common, &opts),
        Command::Figure { name, surface_step_deg } => run_figure(&name, surface_step_deg, common, &opts),
        Command::Plotdata { csv, recipe: name } => {
            let spec: PlotSpec = recipe(&name, &ExperimentConfig::default())?.plot;
            if spec.metrics.is_empty() {
                bail!("recipe {name} writes a surface, not aggregated columns");
            }
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("results/plotdata"));
            let plot = emit_plotdata(&csv, &spec, &dir).with_context(|| format!("aggregating {}", csv.display()))?;
            println!("plot data -> {}", plot.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
