//! One Monte Carlo trial: placement, channels, acquisition, design and
//! evaluation.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{CsiSource, ExperimentConfig, ExperimentKind, SweepAxis};
use crate::channel::{generate_channels, ChannelSet, NlosMode, Scenario, UeSpec};
use crate::crlb::{angle_crlb, quantized_crlb};
use crate::error::{Error, Result};
use crate::estimation::{acquire, Acquisition, PilotConfig};
use crate::geometry::{placement_to_triplet, AngleTriplet, Placement};
use crate::linalg::CMat;
use crate::ota::{ota_refine, random_precoders, stream_pilots, InitMode, PhysicalLink};
use crate::precoding::{
    allocate_streams, prune_streams, sca_maxmin_solve, sinr_rate, DualState, PrecoderSet, StreamAllocation,
};
use crate::units::{dbm_to_watts, rad};

/// Independent random streams of a trial. The generator for `(seed, trial,
/// module, sub)` is ChaCha8 keyed by `seed` on stream
/// `(trial << 16) | (module << 8) | sub`, so no two draws share a stream and
/// adding trials or UEs never shifts existing ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RngModule {
    Placement = 1,
    /// Downlink acquisition pilots; `sub` is the UE index.
    Pilots = 2,
    /// The single forward pass that sets stage-1 combiners.
    Forward = 3,
    Ota = 4,
    /// Random initial precoders.
    Init = 5,
}

pub fn trial_rng(seed: u64, trial: u64, module: RngModule, sub: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((trial << 16) | ((module as u64) << 8) | sub as u64);
    rng
}

/// Attempts per UE before random placement gives up.
const MAX_DRAWS: usize = 10_000;

/// One output line. Optional fields are empty when the experiment kind does
/// not produce them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub kind: ExperimentKind,
    pub csi: CsiSource,
    pub init_mode: InitMode,
    pub sweep_axis: String,
    /// Sweep point; `inf` for unquantized feedback.
    pub sweep_value: String,
    pub trial: u64,
    pub seed: u64,
    /// OTA iteration (0 is the starting point).
    pub iteration: Option<usize>,
    /// Squared angle errors in rad², averaged over UEs.
    pub se_omega11: Option<f64>,
    pub se_omega1m: Option<f64>,
    pub se_gamma: Option<f64>,
    /// Angle bounds in rad² (with quantization noise), averaged over UEs.
    pub crlb_omega11: Option<f64>,
    pub crlb_omega1m: Option<f64>,
    pub crlb_gamma: Option<f64>,
    pub r_min: Option<f64>,
    pub r_mean: Option<f64>,
    pub power: Option<f64>,
    pub runtime_s: f64,
}

/// Column names of the metrics CSV, in order.
pub const METRICS_HEADER: &[&str] = &[
    "label",
    "kind",
    "csi",
    "init_mode",
    "sweep_axis",
    "sweep_value",
    "trial",
    "seed",
    "iteration",
    "se_omega11",
    "se_omega1m",
    "se_gamma",
    "crlb_omega11",
    "crlb_omega1m",
    "crlb_gamma",
    "r_min",
    "r_mean",
    "power",
    "runtime_s",
];

impl MetricsRow {
    fn blank(cfg: &ExperimentConfig, point: (Option<SweepAxis>, Option<f64>), trial: u64) -> Self {
        let sweep_value = match point {
            (None, _) => String::new(),
            (Some(_), None) => "inf".into(),
            (Some(_), Some(v)) => format!("{v}"),
        };
        Self {
            label: cfg.label.clone(),
            kind: cfg.kind,
            csi: cfg.csi,
            init_mode: cfg.init_mode,
            sweep_axis: point.0.map(|a| a.name().to_string()).unwrap_or_default(),
            sweep_value,
            trial,
            seed: cfg.seed,
            iteration: None,
            se_omega11: None,
            se_omega1m: None,
            se_gamma: None,
            crlb_omega11: None,
            crlb_omega1m: None,
            crlb_gamma: None,
            r_min: None,
            r_mean: None,
            power: None,
            runtime_s: 0.0,
        }
    }

    fn set_errors(&mut self, se: [f64; 3]) {
        [self.se_omega11, self.se_omega1m, self.se_gamma] = se.map(Some);
    }

    fn set_bounds(&mut self, crlb: [f64; 3]) {
        [self.crlb_omega11, self.crlb_omega1m, self.crlb_gamma] = crlb.map(Some);
    }

    fn set_rates(&mut self, r_min: f64, r_mean: f64, power: f64) {
        self.r_min = Some(r_min);
        self.r_mean = Some(r_mean);
        self.power = Some(power);
    }
}

fn empty_scenario(cfg: &ExperimentConfig) -> Result<Scenario> {
    let s = &cfg.scenario;
    Ok(Scenario {
        wavelength: s.wavelength_m,
        bs: cfg.scenario_bs()?,
        ues: Vec::new(),
        room: s.room,
        plane_height: s.plane_height_m,
        bs_power: dbm_to_watts(s.bs_power_dbm),
        pilot_power: dbm_to_watts(s.pilot_power_dbm),
        ue_noise: dbm_to_watts(s.ue_noise_dbm),
        bs_noise: dbm_to_watts(s.bs_noise_dbm),
        seed: cfg.seed,
    })
}

/// Whether a UE at `placement` fits in the room and its angles inside the
/// search ranges.
fn admissible(cfg: &ExperimentConfig, shell: &Scenario, spec: &UeSpec) -> bool {
    let single = Scenario { ues: vec![spec.clone()], ..shell.clone() };
    if single.validate().is_err() {
        return false;
    }
    let Ok(t) = placement_to_triplet(&spec.placement, &shell.bs, &spec.array) else {
        return false;
    };
    let e = &cfg.estimation;
    let (w0, w1) = (rad(e.omega_range_deg.0), rad(e.omega_range_deg.1));
    let (g0, g1) = (rad(e.gamma_range_deg.0), rad(e.gamma_range_deg.1));
    let inside = |x: f64, lo: f64, hi: f64| x >= lo && x <= hi;
    inside(t.omega11, w0, w1) && inside(t.omega1m, w0, w1) && inside(t.gamma, g0, g1)
}

/// Scenario of one trial: fixed poses, or uniform draws of distance, offset
/// and rotation, redrawn until the UE is inside the room and its angles are
/// inside the search ranges.
pub fn draw_scenario(cfg: &ExperimentConfig, trial: u64) -> Result<Scenario> {
    let shell = empty_scenario(cfg)?;
    let array = cfg.scenario_ue()?;
    let s = &cfg.scenario;
    let mut ues = Vec::with_capacity(s.num_ues);
    if !s.placements.is_empty() {
        for (k, p) in s.placements.iter().enumerate() {
            let spec = UeSpec { array: array.clone(), placement: Placement::new(p.d_m, rad(p.beta_deg), rad(p.gamma_deg))? };
            if !admissible(cfg, &shell, &spec) {
                return Err(Error::Infeasible(format!("fixed placement of UE {k} is outside the room or the search ranges")));
            }
            ues.push(spec);
        }
    } else {
        let mut rng = trial_rng(cfg.seed, trial, RngModule::Placement, 0);
        let beta = rad(s.beta_max_deg);
        let (g0, g1) = (rad(s.gamma_deg.0), rad(s.gamma_deg.1));
        for k in 0..s.num_ues {
            let mut found = None;
            for _ in 0..MAX_DRAWS {
                let d = rng.gen_range(s.distance_m.0..=s.distance_m.1);
                let b = rng.gen_range(-beta..=beta);
                let g = rng.gen_range(g0..=g1);
                let spec = UeSpec { array: array.clone(), placement: Placement::new(d, b, g)? };
                if admissible(cfg, &shell, &spec) {
                    found = Some(spec);
                    break;
                }
            }
            ues.push(found.ok_or_else(|| Error::Infeasible(format!("no admissible placement for UE {k} in {MAX_DRAWS} draws")))?);
        }
    }
    let scenario = Scenario { ues, ..shell };
    scenario.validate()?;
    Ok(scenario)
}

fn pilot_config(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<PilotConfig> {
    PilotConfig::dft_with_length(
        scenario.bs.len(),
        cfg.estimation.pilots,
        cfg.pilot_length(),
        scenario.pilot_power,
        cfg.estimation.active_set,
    )
}

/// Every UE's acquisition round over its true channel.
pub fn acquire_all(cfg: &ExperimentConfig, scenario: &Scenario, channels: &ChannelSet, trial: u64) -> Result<Vec<Acquisition>> {
    let pilots = pilot_config(cfg, scenario)?;
    let search = cfg.search_options()?;
    let quantizer = cfg.quantizer()?;
    (0..scenario.num_ues())
        .into_par_iter()
        .map(|k| {
            let sub = u8::try_from(k).map_err(|_| Error::invalid("at most 256 UEs per trial"))?;
            let mut rng = trial_rng(cfg.seed, trial, RngModule::Pilots, sub);
            acquire(
                &channels.ues[k].composite,
                &pilots,
                scenario.ue_noise,
                &search,
                &quantizer,
                &scenario.bs,
                &scenario.ues[k].array,
                scenario.wavelength,
                &mut rng,
            )
        })
        .collect()
}

fn true_triplets(scenario: &Scenario) -> Result<Vec<AngleTriplet>> {
    (0..scenario.num_ues()).map(|k| scenario.triplet(k)).collect()
}

fn mean3(items: &[[f64; 3]]) -> [f64; 3] {
    let n = items.len() as f64;
    std::array::from_fn(|i| items.iter().map(|x| x[i]).sum::<f64>() / n)
}

fn bounds(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<[f64; 3]> {
    let pilots = pilot_config(cfg, scenario)?;
    let quantizer = cfg.quantizer()?;
    let per_ue = true_triplets(scenario)?
        .iter()
        .zip(&scenario.ues)
        .map(|(t, ue)| {
            let fm = angle_crlb(t, &pilots, scenario.ue_noise, &scenario.bs, &ue.array, scenario.wavelength)?;
            Ok(quantized_crlb(&fm, &quantizer))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean3(&per_ue))
}

/// Channels the BS designs with.
fn design_channels(cfg: &ExperimentConfig, scenario: &Scenario, channels: &ChannelSet, trial: u64) -> Result<Vec<CMat>> {
    Ok(match cfg.csi {
        CsiSource::Estimated => acquire_all(cfg, scenario, channels, trial)?.into_iter().map(|a| a.reconstructed).collect(),
        CsiSource::PerfectLos => channels.ues.iter().map(|u| u.los.clone()).collect(),
        CsiSource::Perfect => channels.ues.iter().map(|u| u.composite.clone()).collect(),
    })
}

fn physical_link(scenario: &Scenario, channels: &ChannelSet) -> Result<PhysicalLink> {
    PhysicalLink::new(
        channels.ues.iter().map(|u| u.composite.clone()).collect(),
        vec![scenario.ue_noise; scenario.num_ues()],
        scenario.bs_noise,
    )
}

/// Stage-1 precoders with their allocation and duals.
struct StageOne {
    alloc: StreamAllocation,
    precoders: PrecoderSet,
    duals: DualState,
    /// Per-stream rates on the design channels.
    stream_rates: Vec<Vec<f64>>,
}

fn stage_one(cfg: &ExperimentConfig, scenario: &Scenario, design: &[CMat]) -> Result<StageOne> {
    let noise = vec![scenario.ue_noise; design.len()];
    let alloc = allocate_streams(design, cfg.precoding.stream_threshold)?;
    let sol = sca_maxmin_solve(design, &alloc, &noise, scenario.bs_power, &cfg.precoding.sca)?;
    let stream_rates = sinr_rate(design, &sol.precoders, &sol.combiners, &noise)?.stream_rates();
    Ok(StageOne { alloc, precoders: sol.precoders, duals: sol.duals, stream_rates })
}

/// Runs one trial of `cfg` (a single sweep point) and returns its rows.
pub fn run_trial(cfg: &ExperimentConfig, point: (Option<SweepAxis>, Option<f64>), trial: u64) -> Result<Vec<MetricsRow>> {
    let started = Instant::now();
    let scenario = draw_scenario(cfg, trial)?;
    let nlos = if cfg.scenario.nlos { NlosMode::On } else { NlosMode::Off };
    let channels = generate_channels(&scenario, nlos)?;
    let mut row = MetricsRow::blank(cfg, point, trial);
    let mut rows = match cfg.kind {
        ExperimentKind::Crlb => {
            row.set_bounds(bounds(cfg, &scenario)?);
            vec![row]
        }
        ExperimentKind::Estimate => {
            let acq = acquire_all(cfg, &scenario, &channels, trial)?;
            let errors: Vec<[f64; 3]> = acq
                .iter()
                .zip(true_triplets(&scenario)?)
                .map(|(a, t)| {
                    let (e, t) = (a.received.as_array(), t.as_array());
                    std::array::from_fn(|i| (e[i] - t[i]).powi(2))
                })
                .collect();
            row.set_errors(mean3(&errors));
            row.set_bounds(bounds(cfg, &scenario)?);
            vec![row]
        }
        ExperimentKind::Precode => {
            let design = design_channels(cfg, &scenario, &channels, trial)?;
            let stage = stage_one(cfg, &scenario, &design)?;
            let link = physical_link(&scenario, &channels)?;
            let ota = cfg.ota_config();
            let pilots = stream_pilots(stage.precoders.num_streams(), ota.pilot_length)?;
            let mut rng = trial_rng(cfg.seed, trial, RngModule::Forward, 0);
            let combiners = link.forward(&stage.precoders, &pilots, ota.loading_floor, &mut rng)?;
            let rates = link.rates(&stage.precoders, &combiners)?;
            row.set_rates(rates.min_rate(), rates.mean_rate(), stage.precoders.total_power());
            vec![row]
        }
        ExperimentKind::Ota => {
            let (start, duals) = initial_point(cfg, &scenario, &channels, trial)?;
            let link = physical_link(&scenario, &channels)?;
            let mut rng = trial_rng(cfg.seed, trial, RngModule::Ota, 0);
            let out = ota_refine(start, &link, &cfg.ota_config(), duals, &mut rng)?;
            out.trace
                .iter()
                .map(|step| {
                    let mut r = row.clone();
                    r.iteration = Some(step.iteration);
                    r.set_rates(step.min_rate, step.mean_rate, step.power);
                    r
                })
                .collect()
        }
    };
    let runtime = started.elapsed().as_secs_f64();
    for r in &mut rows {
        r.runtime_s = runtime;
    }
    Ok(rows)
}

/// Starting precoders and duals of the refinement for the configured init mode.
fn initial_point(cfg: &ExperimentConfig, scenario: &Scenario, channels: &ChannelSet, trial: u64) -> Result<(PrecoderSet, DualState)> {
    let step = cfg.precoding.sca.step;
    let m = scenario.bs.len();
    let mut rng = trial_rng(cfg.seed, trial, RngModule::Init, 0);
    match cfg.init_mode {
        InitMode::Los => {
            let design = design_channels(cfg, scenario, channels, trial)?;
            let stage = stage_one(cfg, scenario, &design)?;
            let pruned = prune_streams(
                &stage.alloc,
                &stage.stream_rates,
                &stage.precoders,
                cfg.precoding.prune_threshold,
                cfg.precoding.sca.power_scaling,
            )?;
            let mut duals = stage.duals;
            duals.retain(&pruned.keep);
            Ok((pruned.precoders, duals))
        }
        InitMode::Random => {
            let counts: Vec<usize> = scenario.ues.iter().map(|u| u.array.len()).collect();
            let p = random_precoders(&counts, m, scenario.bs_power, &mut rng)?;
            Ok((p, DualState::new(&counts, step)))
        }
        InitMode::RankGuided => {
            let design = design_channels(cfg, scenario, channels, trial)?;
            let counts = allocate_streams(&design, cfg.precoding.stream_threshold)?.allocated;
            let p = random_precoders(&counts, m, scenario.bs_power, &mut rng)?;
            Ok((p, DualState::new(&counts, step)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::PoseDeg;
    use rand::RngCore;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.scenario.num_ues = 2;
        c.trials = 2;
        c
    }

    #[test]
    fn streams_are_distinct_and_stable() {
        let a = trial_rng(7, 3, RngModule::Pilots, 1).next_u64();
        assert_eq!(a, trial_rng(7, 3, RngModule::Pilots, 1).next_u64());
        assert_ne!(a, trial_rng(7, 3, RngModule::Pilots, 2).next_u64());
        assert_ne!(a, trial_rng(7, 4, RngModule::Pilots, 1).next_u64());
        assert_ne!(a, trial_rng(7, 3, RngModule::Forward, 1).next_u64());
        assert_ne!(a, trial_rng(8, 3, RngModule::Pilots, 1).next_u64());
    }

    #[test]
    fn draws_respect_the_ranges() {
        let c = ExperimentConfig::default();
        for trial in 0..20 {
            let s = draw_scenario(&c, trial).unwrap();
            assert_eq!(s.num_ues(), 8);
            for ue in &s.ues {
                let p = ue.placement;
                assert!((4.5..=8.5).contains(&p.d));
                assert!(p.beta.abs() <= rad(80.0) + 1e-12);
                assert!((0.0..=std::f64::consts::PI).contains(&p.gamma));
            }
            for k in 0..8 {
                let t = s.triplet(k).unwrap();
                assert!(t.omega11.abs() <= rad(85.0) && t.omega1m.abs() <= rad(85.0));
            }
        }
        assert_eq!(draw_scenario(&c, 5).unwrap(), draw_scenario(&c, 5).unwrap());
    }

    #[test]
    fn fixed_poses_are_used_verbatim() {
        let mut c = small();
        c.scenario.placements = vec![
            PoseDeg { d_m: 5.5, beta_deg: 60.0, gamma_deg: 30.0 },
            PoseDeg { d_m: 6.0, beta_deg: -10.0, gamma_deg: 90.0 },
        ];
        let s = draw_scenario(&c, 0).unwrap();
        assert_eq!(s.ues[0].placement, Placement::new(5.5, rad(60.0), rad(30.0)).unwrap());
        c.scenario.placements[1].d_m = 30.0;
        assert!(matches!(draw_scenario(&c, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn rows_follow_the_kind() {
        let mut c = small();
        c.kind = ExperimentKind::Crlb;
        let rows = run_trial(&c, (None, None), 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].crlb_gamma.unwrap() > 0.0 && rows[0].se_gamma.is_none() && rows[0].r_min.is_none());

        c.kind = ExperimentKind::Ota;
        c.init_mode = InitMode::Random;
        c.ota.iterations = 3;
        let rows = run_trial(&c, (Some(SweepAxis::OtaIterations), Some(3.0)), 0).unwrap();
        assert_eq!(rows.iter().map(|r| r.iteration.unwrap()).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        for r in &rows {
            assert!(r.r_min.unwrap() <= r.r_mean.unwrap() + 1e-12);
            assert!(r.power.unwrap() <= dbm_to_watts(-5.0) * (1.0 + 1e-9));
            assert_eq!(r.sweep_value, "3");
        }
    }
}
