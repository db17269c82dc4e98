//! Monte Carlo orchestration: configuration, per-trial pipelines, CSV output,
//! aggregation into plot data and the figure recipes.

pub mod config;
pub mod pipeline;
pub mod plotdata;
pub mod recipes;

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;

pub use config::{
    CsiSource, EstimationConfig, ExperimentConfig, ExperimentKind, OtaSettings, PoseDeg, PrecodingConfig, ScenarioConfig,
    Sweep, SweepAxis, DEFAULT_CONFIG_JSON,
};
pub use pipeline::{draw_scenario, run_trial, trial_rng, MetricsRow, RngModule, METRICS_HEADER};
pub use plotdata::{emit_plotdata, PlotSpec};
pub use recipes::{likelihood_surface, recipe, write_likelihood_figure, Recipe, SurfacePoint, RECIPE_NAMES};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Log failed trials and continue instead of stopping.
    pub skip_failures: bool,
    /// Worker count; `None` uses the global pool.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub rows: usize,
    /// `(trial, sweep value, message)` of every skipped trial.
    pub failures: Vec<(u64, String, String)>,
}

/// Runs every sweep point and trial of `cfg`, handing rows to `sink` in
/// (sweep point, trial) order whatever order the workers finish in.
pub fn run_with<F>(cfg: &ExperimentConfig, opts: &RunOptions, sink: F) -> Result<RunSummary>
where
    F: FnMut(MetricsRow) -> Result<()> + Send,
{
    cfg.validate()?;
    match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?
            .install(|| run_ordered(cfg, opts, sink)),
        None => run_ordered(cfg, opts, sink),
    }
}

fn run_ordered<F>(cfg: &ExperimentConfig, opts: &RunOptions, mut sink: F) -> Result<RunSummary>
where
    F: FnMut(MetricsRow) -> Result<()>,
{
    let mut units = Vec::new();
    for point in cfg.sweep_points() {
        let point_cfg = match point {
            (Some(axis), v) => cfg.with_sweep_value(axis, v)?,
            (None, _) => cfg.clone(),
        };
        for trial in 0..cfg.trials as u64 {
            units.push((point, trial, point_cfg.clone()));
        }
    }
    let mut summary = RunSummary::default();
    // Bounded chunks keep memory flat and let rows reach the sink early.
    let chunk = 4 * rayon::current_num_threads();
    for batch in units.chunks(chunk) {
        let results: Vec<Result<Vec<MetricsRow>>> =
            batch.par_iter().map(|(point, trial, c)| run_trial(c, *point, *trial)).collect();
        for ((point, trial, _), res) in batch.iter().zip(results) {
            match res {
                Ok(rows) => {
                    for row in rows {
                        sink(row)?;
                        summary.rows += 1;
                    }
                }
                Err(e) => {
                    let label = point.1.map_or_else(|| "-".to_string(), |v| v.to_string());
                    if !opts.skip_failures {
                        return Err(Error::Trial { trial: *trial, point: label, source: Box::new(e) });
                    }
                    warn!("skipping trial {trial} at {label}: {e}");
                    summary.failures.push((*trial, label, e.to_string()));
                }
            }
        }
        info!("{} rows written", summary.rows);
    }
    Ok(summary)
}

/// Writes the metrics CSV (header [`METRICS_HEADER`]) incrementally.
pub fn run_experiment<W: Write + Send>(cfg: &ExperimentConfig, opts: &RunOptions, out: W) -> Result<RunSummary> {
    run_experiments(std::slice::from_ref(cfg), opts, out)
}

/// Several experiments into one CSV, one after the other.
pub fn run_experiments<W: Write + Send>(cfgs: &[ExperimentConfig], opts: &RunOptions, out: W) -> Result<RunSummary> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER)?;
    w.flush()?;
    let mut total = RunSummary::default();
    for cfg in cfgs {
        let summary = run_with(cfg, opts, |row| {
            w.serialize(&row)?;
            w.flush()?;
            Ok(())
        })?;
        total.rows += summary.rows;
        total.failures.extend(summary.failures);
    }
    w.flush()?;
    Ok(total)
}

/// [`run_experiments`] into a file, creating its directory.
pub fn run_to_file(cfgs: &[ExperimentConfig], opts: &RunOptions, path: &Path) -> Result<RunSummary> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    run_experiments(cfgs, opts, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// All rows in memory.
pub fn collect_rows(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    run_with(cfg, opts, |r| {
        rows.push(r);
        Ok(())
    })?;
    Ok(rows)
}
