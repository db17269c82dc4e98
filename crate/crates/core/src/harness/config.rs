//! Experiment configuration as read from JSON. Angles are in degrees and
//! powers in dBm here; everything past this module works in radians and
//! watts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::RoomModel;
use crate::error::{Error, Result};
use crate::estimation::{default_pilot_length, ActiveSetRule, QuantizerSpec, SearchOptions};
use crate::geometry::LinearArray;
use crate::grid::{GridSpec, Refinement};
use crate::ota::{InitMode, OtaConfig};
use crate::precoding::ScaOptions;
use crate::units::{dbm_to_watts, rad};

/// Default configuration shipped with the repository.
pub const DEFAULT_CONFIG_JSON: &str = include_str!("../../../../configs/default.json");

/// A UE pose given directly instead of drawn at random.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDeg {
    pub d_m: f64,
    pub beta_deg: f64,
    pub gamma_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub wavelength_m: f64,
    pub bs_antennas: usize,
    /// Distance between the first and last BS antenna.
    pub bs_length_m: f64,
    pub num_ues: usize,
    pub ue_antennas: usize,
    pub ue_spacing_m: f64,
    pub room: RoomModel,
    pub plane_height_m: f64,
    pub bs_power_dbm: f64,
    pub pilot_power_dbm: f64,
    pub ue_noise_dbm: f64,
    pub bs_noise_dbm: f64,
    /// Range of the BS-center to UE-center distance.
    pub distance_m: (f64, f64),
    /// Largest offset of the UE from BS broadside.
    pub beta_max_deg: f64,
    /// Range of the UE array rotation.
    pub gamma_deg: (f64, f64),
    /// Adds the image-source reflections to the true channel.
    pub nlos: bool,
    /// Fixed poses, one per UE. Empty means random placement.
    #[serde(default)]
    pub placements: Vec<PoseDeg>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationConfig {
    /// Number of pilot-transmitting BS antennas.
    pub pilots: usize,
    #[serde(default)]
    pub active_set: ActiveSetRule,
    /// Pilot length; `null` uses `max(4, pilots)`.
    #[serde(default)]
    pub pilot_length: Option<usize>,
    /// Bits per fed-back angle; `null` disables quantization.
    #[serde(default)]
    pub quant_bits: Option<u32>,
    /// Lattice step of the angle search.
    pub grid_step_deg: f64,
    /// Search and quantizer range shared by both AoDs.
    pub omega_range_deg: (f64, f64),
    pub gamma_range_deg: (f64, f64),
    /// Zoom levels below the lattice step (each shrinks the window).
    #[serde(default)]
    pub refinement_levels: usize,
    #[serde(default = "default_shrink")]
    pub refinement_shrink: f64,
}

fn default_shrink() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecodingConfig {
    /// Largest allowed ratio between the first and the last kept singular value.
    pub stream_threshold: f64,
    /// Streams below this rate (bps/Hz) are dropped before refinement.
    pub prune_threshold: f64,
    #[serde(default)]
    pub sca: ScaOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtaSettings {
    /// Pilot length; `null` uses the BS antenna count.
    #[serde(default)]
    pub pilot_length: Option<usize>,
    pub iterations: usize,
    /// Total uplink pilot power; `null` uses the downlink pilot power.
    #[serde(default)]
    pub ue_power_dbm: Option<f64>,
    #[serde(default = "default_loading")]
    pub loading_floor: f64,
    #[serde(default = "default_inner")]
    pub inner_iters: usize,
}

fn default_loading() -> f64 {
    1e-9
}

fn default_inner() -> usize {
    30
}

/// What a trial computes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Angle estimation errors next to their bounds.
    #[default]
    Estimate,
    /// Bounds only.
    Crlb,
    /// Stage-1 design with one forward pass for the combiners.
    Precode,
    /// Stage 1, pruning and over-the-air refinement.
    Ota,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Estimate => "estimate",
            Self::Crlb => "crlb",
            Self::Precode => "precode",
            Self::Ota => "ota",
        }
    }
}

/// Channel knowledge the BS designs with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsiSource {
    /// LoS channels rebuilt from fed-back angle estimates.
    #[default]
    Estimated,
    /// The true LoS components.
    PerfectLos,
    /// The true composite channels.
    Perfect,
}

impl CsiSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::Estimated => "estimated",
            Self::PerfectLos => "perfect_los",
            Self::Perfect => "perfect",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Pilots,
    Bits,
    GridStepDeg,
    OtaIterations,
    BsLengthM,
    /// Rotation of every UE (fixed placements only).
    GammaDeg,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pilots => "pilots",
            Self::Bits => "bits",
            Self::GridStepDeg => "grid_step_deg",
            Self::OtaIterations => "ota_iterations",
            Self::BsLengthM => "bs_length_m",
            Self::GammaDeg => "gamma_deg",
        }
    }
}

/// `null` values stand for "unbounded" and are only valid for `bits`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form tag copied into every output row.
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub kind: ExperimentKind,
    pub scenario: ScenarioConfig,
    pub estimation: EstimationConfig,
    pub precoding: PrecodingConfig,
    pub ota: OtaSettings,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub init_mode: InitMode,
    #[serde(default)]
    pub csi: CsiSource,
}

fn whole(v: f64, what: &str) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || !v.is_finite() {
        return Err(Error::Config(format!("{what} must be a non-negative integer, got {v}")));
    }
    Ok(v as usize)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_json(DEFAULT_CONFIG_JSON).expect("shipped default config is valid")
    }
}

impl ExperimentConfig {
    /// Parses and validates a config; errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        let bad = |m: String| Err(Error::Config(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if s.num_ues == 0 || s.ue_antennas == 0 || s.bs_antennas < 2 {
            return bad("need at least one UE, one UE antenna and two BS antennas".into());
        }
        if !(s.distance_m.0 > 0.0 && s.distance_m.0 <= s.distance_m.1) {
            return bad(format!("distance range {:?} is not a positive interval", s.distance_m));
        }
        if !(0.0..90.0).contains(&s.beta_max_deg) {
            return bad(format!("beta_max_deg must lie in [0, 90), got {}", s.beta_max_deg));
        }
        if !(s.gamma_deg.0 <= s.gamma_deg.1) {
            return bad(format!("gamma range {:?} is reversed", s.gamma_deg));
        }
        if !s.placements.is_empty() && s.placements.len() != s.num_ues {
            return bad(format!("{} fixed placements for {} UEs", s.placements.len(), s.num_ues));
        }
        let e = &self.estimation;
        if e.pilots < 2 || e.pilots > s.bs_antennas {
            return bad(format!("pilots must lie in 2..={}, got {}", s.bs_antennas, e.pilots));
        }
        if e.pilot_length.is_some_and(|t| t < e.pilots) {
            return bad("estimation pilot_length is shorter than the pilot count".into());
        }
        if !(e.grid_step_deg > 0.0) {
            return bad("grid_step_deg must be positive".into());
        }
        if !(self.precoding.stream_threshold >= 1.0) {
            return bad("stream_threshold must be at least 1".into());
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return bad(format!("sweep over {} has no values", sweep.axis.name()));
            }
            for v in &sweep.values {
                self.with_sweep_value(sweep.axis, *v)?;
            }
        }
        self.scenario_bs()?;
        self.quantizer()?;
        self.search_options()?;
        Ok(())
    }

    /// Copy with one sweep point applied.
    pub fn with_sweep_value(&self, axis: SweepAxis, value: Option<f64>) -> Result<Self> {
        let mut c = self.clone();
        let need = |v: Option<f64>| v.ok_or_else(|| Error::Config(format!("null is only valid for bits, not {}", axis.name())));
        match axis {
            SweepAxis::Pilots => {
                let p = whole(need(value)?, "pilot count")?;
                if p < 2 || p > c.scenario.bs_antennas {
                    return Err(Error::Config(format!("pilot count {p} outside 2..={}", c.scenario.bs_antennas)));
                }
                c.estimation.pilots = p;
            }
            SweepAxis::Bits => {
                c.estimation.quant_bits = match value {
                    None => None,
                    Some(b) => {
                        let b = whole(b, "bits")?;
                        if !(1..=52).contains(&b) {
                            return Err(Error::Config(format!("bits {b} outside 1..=52")));
                        }
                        Some(b as u32)
                    }
                };
            }
            SweepAxis::GridStepDeg => {
                let v = need(value)?;
                if !(v > 0.0) {
                    return Err(Error::Config(format!("grid step must be positive, got {v}")));
                }
                c.estimation.grid_step_deg = v;
            }
            SweepAxis::OtaIterations => c.ota.iterations = whole(need(value)?, "OTA iterations")?,
            SweepAxis::BsLengthM => {
                let v = need(value)?;
                if !(v > 0.0) {
                    return Err(Error::Config(format!("BS length must be positive, got {v}")));
                }
                c.scenario.bs_length_m = v;
            }
            SweepAxis::GammaDeg => {
                let v = need(value)?;
                if c.scenario.placements.is_empty() {
                    return Err(Error::Config("a gamma sweep needs fixed placements".into()));
                }
                for p in &mut c.scenario.placements {
                    p.gamma_deg = v;
                }
            }
        }
        c.sweep = None;
        Ok(c)
    }

    /// Sweep points, or a single unnamed point without a sweep.
    pub fn sweep_points(&self) -> Vec<(Option<SweepAxis>, Option<f64>)> {
        match &self.sweep {
            Some(s) => s.values.iter().map(|&v| (Some(s.axis), v)).collect(),
            None => vec![(None, None)],
        }
    }

    pub fn scenario_bs(&self) -> Result<LinearArray> {
        LinearArray::uniform_span(self.scenario.bs_antennas, self.scenario.bs_length_m)
    }

    pub fn scenario_ue(&self) -> Result<LinearArray> {
        LinearArray::uniform(self.scenario.ue_antennas, self.scenario.ue_spacing_m)
    }

    /// Quantizer over the search ranges.
    pub fn quantizer(&self) -> Result<QuantizerSpec> {
        let e = &self.estimation;
        let w = (rad(e.omega_range_deg.0), rad(e.omega_range_deg.1));
        let g = (rad(e.gamma_range_deg.0), rad(e.gamma_range_deg.1));
        QuantizerSpec::new(e.quant_bits, [w, w, g])
    }

    pub fn search_options(&self) -> Result<SearchOptions> {
        let e = &self.estimation;
        let mut grid = GridSpec::with_resolution(
            (rad(e.omega_range_deg.0), rad(e.omega_range_deg.1)),
            (rad(e.gamma_range_deg.0), rad(e.gamma_range_deg.1)),
            rad(e.grid_step_deg),
        )?;
        grid.refinement = Refinement { levels: e.refinement_levels, shrink: e.refinement_shrink };
        grid.validate()?;
        Ok(SearchOptions::new(grid))
    }

    /// Effective pilot length of the acquisition phase.
    pub fn pilot_length(&self) -> usize {
        self.estimation.pilot_length.unwrap_or_else(|| default_pilot_length(self.estimation.pilots))
    }

    pub fn ota_config(&self) -> OtaConfig {
        let s = &self.scenario;
        let mut cfg = OtaConfig::new(
            self.ota.pilot_length.unwrap_or(s.bs_antennas),
            dbm_to_watts(self.ota.ue_power_dbm.unwrap_or(s.pilot_power_dbm)),
            self.ota.iterations,
        );
        cfg.loading_floor = self.ota.loading_floor;
        cfg.inner_iters = self.ota.inner_iters;
        cfg.taylor = self.precoding.sca.taylor;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults_hold_the_reference_setting() {
        let c = ExperimentConfig::default();
        let s = &c.scenario;
        assert_eq!(s.bs_antennas, 64);
        assert_eq!(s.bs_length_m, 2.0);
        assert_eq!(s.num_ues, 8);
        assert_eq!(s.wavelength_m, 0.03);
        assert_eq!((s.room.width, s.room.depth, s.room.height), (15.0, 17.0, 8.0));
        assert_eq!(s.bs_power_dbm, -5.0);
        assert_eq!(s.pilot_power_dbm, -3.0);
        assert_eq!(s.ue_noise_dbm, -85.0);
        assert_eq!(s.bs_noise_dbm, -85.0);
        assert_eq!(s.distance_m, (4.5, 8.5));
        assert_eq!(s.beta_max_deg, 80.0);
        assert_eq!(s.gamma_deg, (0.0, 180.0));
        assert_eq!((s.ue_antennas, s.ue_spacing_m), (8, 0.015));
        assert_eq!(c.estimation.grid_step_deg, 0.08);
        assert_eq!(c.estimation.quant_bits, Some(9));
        assert_eq!(c.estimation.pilot_length, None);
        assert_eq!(c.ota.pilot_length, None);
        assert_eq!(c.ota_config().pilot_length, 64);
        assert_eq!(c.pilot_length(), 4);
        let six = c.with_sweep_value(SweepAxis::Pilots, Some(6.0)).unwrap();
        assert_eq!(six.pilot_length(), 6);
        assert_eq!(c.ota.iterations, 30);
        assert!(c.trials >= 1);
    }

    #[test]
    fn parse_errors_point_at_the_line() {
        let text = DEFAULT_CONFIG_JSON.replacen("\"trials\"", "\"trails\"", 1);
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        let line = DEFAULT_CONFIG_JSON.lines().position(|l| l.contains("\"trials\"")).unwrap() + 1;
        assert!(err.contains(&format!("line {line}")), "{err}");
    }

    #[test]
    fn sweep_values_are_checked_against_the_axis() {
        let c = ExperimentConfig::default();
        assert!(c.with_sweep_value(SweepAxis::Pilots, Some(2.5)).is_err());
        assert!(c.with_sweep_value(SweepAxis::Pilots, Some(65.0)).is_err());
        assert!(c.with_sweep_value(SweepAxis::Pilots, None).is_err());
        assert_eq!(c.with_sweep_value(SweepAxis::Bits, None).unwrap().estimation.quant_bits, None);
        assert_eq!(c.with_sweep_value(SweepAxis::Bits, Some(8.0)).unwrap().estimation.quant_bits, Some(8));
        assert!(c.with_sweep_value(SweepAxis::GammaDeg, Some(30.0)).is_err());
        let mut bad = c.clone();
        bad.trials = 0;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.sweep = Some(Sweep { axis: SweepAxis::GridStepDeg, values: vec![Some(0.1), Some(-1.0)] });
        assert!(bad.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }
}
