//! Ready-made experiment sets, one per reproduced figure.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{CsiSource, ExperimentConfig, ExperimentKind, PoseDeg, Sweep, SweepAxis};
use super::pipeline::{draw_scenario, trial_rng, RngModule};
use super::plotdata::PlotSpec;
use crate::channel::{generate_channels, NlosMode};
use crate::error::{Error, Result};
use crate::estimation::{search_estimate, transmit_pilots, Likelihood, PilotConfig};
use crate::geometry::AngleTriplet;
use crate::ota::InitMode;
use crate::units::{deg, rad};

pub const RECIPE_NAMES: [&str; 7] = ["fig4", "fig5", "fig6", "fig7", "fig8", "fig9", "fig10"];

const ANGLE_METRICS: &[&str] = &["se_omega11", "se_omega1m", "se_gamma", "crlb_omega11", "crlb_omega1m", "crlb_gamma"];
const BOUND_METRICS: &[&str] = &["crlb_omega11", "crlb_omega1m", "crlb_gamma"];
const RATE_METRICS: &[&str] = &["r_min", "r_mean"];

/// Experiments behind one figure and the columns its plot data aggregates.
#[derive(Clone, Debug)]
pub struct Recipe {
    pub name: &'static str,
    pub title: &'static str,
    pub experiments: Vec<ExperimentConfig>,
    pub plot: PlotSpec,
    /// Pilot counts of the likelihood-surface figure (empty elsewhere).
    pub surface_pilots: Vec<usize>,
}

fn sweep(axis: SweepAxis, values: impl IntoIterator<Item = f64>) -> Option<Sweep> {
    Some(Sweep { axis, values: values.into_iter().map(Some).collect() })
}

fn variant(base: &ExperimentConfig, label: &str, edit: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut c = base.clone();
    c.label = label.into();
    edit(&mut c);
    c
}

fn single_ue_los(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = base.clone();
    c.scenario.num_ues = 1;
    c.scenario.nlos = false;
    c.scenario.placements.clear();
    c.sweep = None;
    c.output = None;
    c
}

fn pilot_range() -> impl Iterator<Item = f64> {
    ints(2..=8)
}

/// Experiments for `name`, built on `base` (which supplies trials, seed and
/// the scenario defaults).
pub fn recipe(name: &str, base: &ExperimentConfig) -> Result<Recipe> {
    let one = single_ue_los(base);
    let r = match name {
        "fig4" => {
            let est = variant(&one, "", |c| {
                c.kind = ExperimentKind::Estimate;
                c.estimation.refinement_levels = c.estimation.refinement_levels.max(4);
                c.sweep = sweep(SweepAxis::Pilots, pilot_range());
            });
            let experiments = [(Some(6), "q6"), (Some(8), "q8"), (None, "qinf")]
                .into_iter()
                .map(|(q, label)| variant(&est, label, |c| c.estimation.quant_bits = q))
                .collect();
            Recipe { name: "fig4", title: "Angle MSE and CRLB vs pilot count", experiments, plot: PlotSpec::new("fig4", ANGLE_METRICS), surface_pilots: vec![] }
        }
        "fig5" => {
            let pre = variant(&one, "", |c| {
                c.kind = ExperimentKind::Precode;
                c.sweep = sweep(SweepAxis::Pilots, pilot_range());
            });
            let mut experiments: Vec<ExperimentConfig> = [(Some(8), "q8"), (Some(10), "q10"), (None, "qinf")]
                .into_iter()
                .map(|(q, label)| variant(&pre, label, |c| c.estimation.quant_bits = q))
                .collect();
            experiments.push(variant(&pre, "perfect", |c| {
                c.csi = CsiSource::Perfect;
                c.sweep = None;
            }));
            Recipe { name: "fig5", title: "Single-UE rate vs pilot count", experiments, plot: PlotSpec::new("fig5", RATE_METRICS), surface_pilots: vec![] }
        }
        "fig6" => Recipe {
            name: "fig6",
            title: "ML cost over (omega1M, gamma) at the estimated omega11",
            experiments: vec![],
            plot: PlotSpec::new("fig6", &[]),
            surface_pilots: vec![2, 4],
        },
        "fig7" => {
            let bound = variant(&one, "", |c| {
                c.kind = ExperimentKind::Crlb;
                c.estimation.quant_bits = None;
                c.sweep = sweep(SweepAxis::BsLengthM, [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]);
            });
            let experiments = [2, 4].into_iter().map(|m| variant(&bound, &format!("m{m}"), |c| c.estimation.pilots = m)).collect();
            Recipe { name: "fig7", title: "Angle CRLB vs BS array length", experiments, plot: PlotSpec::new("fig7", BOUND_METRICS), surface_pilots: vec![] }
        }
        "fig8" => {
            let mut experiments = Vec::new();
            for beta in [60.0, -17.34] {
                for m in [2, 4, 6] {
                    experiments.push(variant(&one, &format!("beta{beta}_m{m}"), |c| {
                        c.kind = ExperimentKind::Crlb;
                        c.trials = 1;
                        c.estimation.pilots = m;
                        c.estimation.quant_bits = None;
                        c.scenario.placements = vec![PoseDeg { d_m: 5.5, beta_deg: beta, gamma_deg: 90.0 }];
                        c.sweep = sweep(SweepAxis::GammaDeg, (0..=180).map(f64::from));
                    }));
                }
            }
            Recipe { name: "fig8", title: "Angle CRLB vs UE rotation", experiments, plot: PlotSpec::new("fig8", BOUND_METRICS), surface_pilots: vec![] }
        }
        "fig9" => {
            let multi = variant(base, "", |c| {
                c.kind = ExperimentKind::Precode;
                c.scenario.nlos = false;
                c.scenario.placements.clear();
                c.sweep = None;
                c.output = None;
            });
            let nlos = variant(&multi, "", |c| c.scenario.nlos = true);
            let experiments = vec![
                variant(&multi, "los_pilots", |c| c.sweep = sweep(SweepAxis::Pilots, ints(2..=6))),
                variant(&multi, "los_grid_m3", |c| {
                    c.estimation.pilots = 3;
                    c.sweep = sweep(SweepAxis::GridStepDeg, [0.08, 0.16, 0.32, 0.64, 1.28]);
                }),
                variant(&multi, "los_grid_m4", |c| {
                    c.estimation.pilots = 4;
                    c.sweep = sweep(SweepAxis::GridStepDeg, [0.08, 0.16, 0.32, 0.64, 1.28]);
                }),
                variant(&multi, "los_perfect", |c| c.csi = CsiSource::Perfect),
                variant(&nlos, "nlos_pilots", |c| c.sweep = sweep(SweepAxis::Pilots, pilot_range())),
                variant(&nlos, "nlos_perfect_los", |c| c.csi = CsiSource::PerfectLos),
                variant(&nlos, "nlos_perfect", |c| c.csi = CsiSource::Perfect),
            ];
            Recipe { name: "fig9", title: "Multi-UE rates without refinement", experiments, plot: PlotSpec::new("fig9", RATE_METRICS), surface_pilots: vec![] }
        }
        "fig10" => {
            let ota = variant(base, "", |c| {
                c.kind = ExperimentKind::Ota;
                c.scenario.nlos = true;
                c.scenario.placements.clear();
                c.sweep = None;
                c.output = None;
            });
            let mut experiments: Vec<ExperimentConfig> =
                InitMode::ALL.into_iter().map(|m| variant(&ota, m.name(), |c| c.init_mode = m)).collect();
            experiments.push(variant(&ota, "perfect_stage1", |c| {
                c.kind = ExperimentKind::Precode;
                c.csi = CsiSource::Perfect;
            }));
            Recipe { name: "fig10", title: "Rates vs OTA iteration for three initializations", experiments, plot: PlotSpec::new("fig10", RATE_METRICS), surface_pilots: vec![] }
        }
        other => return Err(Error::Config(format!("unknown recipe `{other}`; expected one of {}", RECIPE_NAMES.join(", ")))),
    };
    Ok(r)
}

fn ints(range: std::ops::RangeInclusive<i32>) -> impl Iterator<Item = f64> {
    range.map(f64::from)
}

/// One sample of the ML cost surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub pilots: usize,
    pub omega1m_deg: f64,
    pub gamma_deg: f64,
    pub cost: f64,
}

/// Surface of the concentrated ML cost over `(omega1M, gamma)` with `omega11`
/// fixed at its estimate, for the first UE of trial `trial` of `cfg`.
/// Points where the model is undefined are left out.
pub fn likelihood_surface(cfg: &ExperimentConfig, trial: u64, step_deg: f64) -> Result<(AngleTriplet, Vec<SurfacePoint>)> {
    if !(step_deg > 0.0) {
        return Err(Error::Config("surface step must be positive".into()));
    }
    let scenario = draw_scenario(cfg, trial)?;
    let nlos = if cfg.scenario.nlos { NlosMode::On } else { NlosMode::Off };
    let channels = generate_channels(&scenario, nlos)?;
    let pilots = PilotConfig::dft_with_length(
        scenario.bs.len(),
        cfg.estimation.pilots,
        cfg.pilot_length(),
        scenario.pilot_power,
        cfg.estimation.active_set,
    )?;
    let ue = &scenario.ues[0].array;
    let mut rng = trial_rng(cfg.seed, trial, RngModule::Pilots, 0);
    let meas = transmit_pilots(&channels.ues[0].composite, &pilots, scenario.ue_noise, &mut rng)?;
    let est = search_estimate(&meas, &pilots, &scenario.bs, ue, scenario.wavelength, &cfg.search_options()?)?;
    let lik = Likelihood::new(&meas, &pilots, &scenario.bs, ue, scenario.wavelength)?;
    let e = &cfg.estimation;
    let nw = ((e.omega_range_deg.1 - e.omega_range_deg.0) / step_deg).floor() as usize;
    let ng = ((e.gamma_range_deg.1 - e.gamma_range_deg.0) / step_deg).floor() as usize;
    let mut points = Vec::with_capacity((nw + 1) * (ng + 1));
    for i in 0..=nw {
        let w = e.omega_range_deg.0 + i as f64 * step_deg;
        for j in 0..=ng {
            let g = e.gamma_range_deg.0 + j as f64 * step_deg;
            let cost = lik.cost(&AngleTriplet::new(est.triplet.omega11, rad(w), rad(g)));
            if cost.is_finite() {
                points.push(SurfacePoint { pilots: e.pilots, omega1m_deg: w, gamma_deg: g, cost });
            }
        }
    }
    Ok((est.triplet, points))
}

/// Writes surface points as CSV with header `pilots,omega1m_deg,gamma_deg,cost`.
pub fn write_surface<W: Write>(points: &[SurfacePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Surfaces for every pilot count of the recipe into `<dir>/fig6_surface.csv`,
/// with the estimated and true triplets (in degrees) in `<dir>/fig6_points.csv`.
pub fn write_likelihood_figure(base: &ExperimentConfig, pilots: &[usize], step_deg: f64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut all = Vec::new();
    let mut marks = csv::Writer::from_path(dir.join("fig6_points.csv"))?;
    marks.write_record(["pilots", "which", "omega11_deg", "omega1m_deg", "gamma_deg"])?;
    for &m in pilots {
        let mut cfg = single_ue_los(base);
        cfg.estimation.pilots = m;
        let truth = draw_scenario(&cfg, 0)?.triplet(0)?;
        let (est, points) = likelihood_surface(&cfg, 0, step_deg)?;
        for (which, t) in [("truth", truth), ("estimate", est)] {
            let a = t.as_array().map(deg);
            marks.write_record([m.to_string(), which.to_string(), a[0].to_string(), a[1].to_string(), a[2].to_string()])?;
        }
        all.extend(points);
    }
    marks.flush()?;
    write_surface(&all, std::fs::File::create(dir.join("fig6_surface.csv"))?)
}
