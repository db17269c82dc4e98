//! Aggregation of a metrics CSV into per-figure series.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Columns that identify a series point.
pub const GROUP_COLUMNS: &[&str] = &["label", "csi", "init_mode", "sweep_axis", "sweep_value", "iteration"];

/// Header of every plot-data file.
pub const PLOT_HEADER: &[&str] = &[
    "label", "csi", "init_mode", "sweep_axis", "sweep_value", "iteration", "metric", "count", "mean", "min", "p10", "p25",
    "p50", "p75", "p90", "max",
];

/// Which metric columns a figure aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotSpec {
    pub name: String,
    pub metrics: Vec<String>,
}

impl PlotSpec {
    pub fn new(name: &str, metrics: &[&str]) -> Self {
        Self { name: name.into(), metrics: metrics.iter().map(|m| m.to_string()).collect() }
    }
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summary statistics in the order of the `count..max` plot columns.
pub fn summarize(values: &[f64]) -> Option<[f64; 9]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Some([
        v.len() as f64,
        mean,
        v[0],
        percentile(&v, 0.10),
        percentile(&v, 0.25),
        percentile(&v, 0.50),
        percentile(&v, 0.75),
        percentile(&v, 0.90),
        v[v.len() - 1],
    ])
}

/// Aggregates metrics CSV text into plot-data CSV. Groups appear in the
/// order they first occur; empty metric cells are skipped.
pub fn aggregate<R: Read, W: Write>(input: R, spec: &PlotSpec, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PLOT_HEADER)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = rdr.records();
    let Some(header) = records.next().transpose()? else {
        w.flush()?;
        return Ok(());
    };
    let find = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.into()));
    let keys: Vec<usize> = GROUP_COLUMNS.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let metrics: Vec<usize> = spec.metrics.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut order: Vec<Vec<String>> = Vec::new();
    let mut groups: HashMap<Vec<String>, Vec<Vec<f64>>> = HashMap::new();
    for rec in records {
        let rec = rec?;
        let key: Vec<String> = keys.iter().map(|&i| rec.get(i).unwrap_or("").to_string()).collect();
        let slot = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            vec![Vec::new(); metrics.len()]
        });
        for (j, &i) in metrics.iter().enumerate() {
            let cell = rec.get(i).unwrap_or("").trim();
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Config(format!("column `{}` holds non-numeric `{cell}`", spec.metrics[j])))?;
            slot[j].push(v);
        }
    }
    for key in &order {
        for (j, values) in groups[key].iter().enumerate() {
            let Some(stats) = summarize(values) else { continue };
            let mut line: Vec<String> = key.clone();
            line.push(spec.metrics[j].clone());
            line.push(format!("{}", stats[0] as usize));
            line.extend(stats[1..].iter().map(|x| format!("{x:e}")));
            w.write_record(&line)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `csv_path` and writes `<out_dir>/<spec.name>.csv`.
pub fn emit_plotdata(csv_path: &Path, spec: &PlotSpec, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let target = out_dir.join(format!("{}.csv", spec.name));
    aggregate(std::fs::File::open(csv_path)?, spec, std::fs::File::create(&target)?)?;
    Ok(target)
}
