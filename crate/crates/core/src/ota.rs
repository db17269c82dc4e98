//! Bidirectional over-the-air refinement of precoders and combiners.
//!
//! The true channels live only inside [`PhysicalLink`], which simulates the
//! downlink and uplink pilot exchanges. Everything the BS computes comes
//! from the backward signal and its own precoders and duals.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{complex_gaussian, dft_matrix, inner, norm_sqr, CMat, CVec};
use crate::precoding::{solve_surrogate, sinr_rate, CombinerSet, DualState, PrecoderSet, StreamRates, TaylorForm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtaConfig {
    /// Pilot length; must cover the total stream count.
    pub pilot_length: usize,
    /// Total UE transmit power in the backward phase (W); sets the common
    /// scale of the uplink pilots each iteration.
    pub ue_power: f64,
    /// Loading of the forward combiner solve is `max(noise, this * mean
    /// diagonal of Y Y^H)`.
    #[serde(default = "default_loading_floor")]
    pub loading_floor: f64,
    pub iterations: usize,
    /// Weight updates per iteration at the BS.
    #[serde(default = "default_inner_iters")]
    pub inner_iters: usize,
    #[serde(default)]
    pub taylor: TaylorForm,
}

fn default_inner_iters() -> usize {
    30
}

fn default_loading_floor() -> f64 {
    1e-9
}

impl OtaConfig {
    pub fn new(pilot_length: usize, ue_power: f64, iterations: usize) -> Self {
        Self {
            pilot_length,
            ue_power,
            loading_floor: default_loading_floor(),
            iterations,
            inner_iters: default_inner_iters(),
            taylor: TaylorForm::Tangent,
        }
    }
}

/// Mutually orthogonal pilots (columns of the DFT matrix), `||p||^2 = length`.
pub fn stream_pilots(count: usize, length: usize) -> Result<Vec<CVec>> {
    if count > length {
        return Err(Error::invalid(format!("{count} streams need at least {count} pilot symbols, got {length}")));
    }
    let f = dft_matrix(length);
    Ok((0..count).map(|i| f.column(i).into_owned()).collect())
}

fn check_link(channels: &[CMat], precoders_or_counts: &[usize], pilots: &[CVec]) -> Result<()> {
    let total: usize = precoders_or_counts.iter().sum();
    if total != pilots.len() {
        return Err(Error::Dimension(format!("{total} streams but {} pilots", pilots.len())));
    }
    if channels.len() != precoders_or_counts.len() {
        return Err(Error::Dimension(format!("{} channels for {} UEs", channels.len(), precoders_or_counts.len())));
    }
    Ok(())
}

/// Downlink `Y_k = H_k sum m p^H + Z_k` for every UE.
pub fn forward_tx<R: Rng + ?Sized>(
    channels: &[CMat],
    precoders: &PrecoderSet,
    pilots: &[CVec],
    noise: &[f64],
    rng: &mut R,
) -> Result<Vec<CMat>> {
    check_link(channels, &precoders.counts(), pilots)?;
    let tau = pilots[0].len();
    let m = channels[0].ncols();
    let mut x = CMat::zeros(m, tau);
    for (v, p) in precoders.vectors.iter().flatten().zip(pilots) {
        x += v * p.adjoint();
    }
    Ok(channels
        .iter()
        .zip(noise)
        .map(|(h, &s)| {
            let y = h * &x;
            if s > 0.0 {
                y + complex_gaussian(h.nrows(), tau, s, rng)
            } else {
                y
            }
        })
        .collect())
}

/// Diagonal loading for the forward combiner solve.
pub fn forward_loading(y: &CMat, noise: f64, relative_floor: f64) -> f64 {
    let mean_diag = y.iter().map(|z| z.norm_sqr()).sum::<f64>() / y.nrows() as f64;
    noise.max(relative_floor * mean_diag).max(f64::MIN_POSITIVE)
}

/// `u = (Y Y^H + loading I)^-1 Y p`, which tends to the MMSE combiner.
pub fn ue_combiner_from_forward(y: &CMat, pilot: &CVec, loading: f64) -> Result<CVec> {
    if pilot.len() != y.ncols() {
        return Err(Error::Dimension(format!("pilot of length {} for {} symbols", pilot.len(), y.ncols())));
    }
    let gram = y * y.adjoint() + CMat::identity(y.nrows(), y.nrows()) * Complex64::from(loading);
    let chol = gram.cholesky().ok_or_else(|| Error::Singular("loaded forward covariance is singular".into()))?;
    Ok(chol.solve(&(y * pilot)))
}

/// Uplink `Y = psi sum_k H_k^H sum_s u p^H + Z_BS`.
pub fn backward_tx<R: Rng + ?Sized>(
    channels: &[CMat],
    combiners: &CombinerSet,
    pilots: &[CVec],
    psi: f64,
    noise: f64,
    rng: &mut R,
) -> Result<CMat> {
    let counts: Vec<usize> = combiners.vectors.iter().map(Vec::len).collect();
    check_link(channels, &counts, pilots)?;
    let tau = pilots[0].len();
    let m = channels[0].ncols();
    let mut y = CMat::zeros(m, tau);
    let flat = combiners.vectors.iter().enumerate().flat_map(|(k, g)| g.iter().map(move |u| (k, u)));
    for ((k, u), p) in flat.zip(pilots) {
        y += (channels[k].adjoint() * u) * p.adjoint() * Complex64::from(psi);
    }
    if noise > 0.0 {
        y += complex_gaussian(m, tau, noise, rng);
    }
    Ok(y)
}

/// `Y p / (psi tau)` per stream, grouped by `counts`.
pub fn estimate_effective_channels(y: &CMat, pilots: &[CVec], counts: &[usize], psi: f64) -> Result<Vec<Vec<CVec>>> {
    if counts.iter().sum::<usize>() != pilots.len() {
        return Err(Error::Dimension("stream counts do not match the pilots".into()));
    }
    if !(psi > 0.0) {
        return Err(Error::invalid("uplink scale must be positive"));
    }
    let mut it = pilots.iter();
    Ok(counts
        .iter()
        .map(|&c| {
            (0..c)
                .map(|_| {
                    let p = it.next().expect("counted above");
                    y * p / Complex64::from(psi * p.len() as f64)
                })
                .collect()
        })
        .collect())
}

/// The physical channels and noise levels. The only holder of the true
/// channels: the refinement loop sees it through pilot exchanges alone.
#[derive(Clone, Debug)]
pub struct PhysicalLink {
    channels: Vec<CMat>,
    ue_noise: Vec<f64>,
    bs_noise: f64,
    noisy_pilots: bool,
}

impl PhysicalLink {
    pub fn new(channels: Vec<CMat>, ue_noise: Vec<f64>, bs_noise: f64) -> Result<Self> {
        if channels.is_empty() || channels.len() != ue_noise.len() {
            return Err(Error::Dimension(format!("{} channels with {} noise levels", channels.len(), ue_noise.len())));
        }
        if channels.iter().any(|h| h.ncols() != channels[0].ncols()) {
            return Err(Error::Dimension("channels disagree on the BS antenna count".into()));
        }
        if ue_noise.iter().chain([&bs_noise]).any(|&s| !(s >= 0.0)) {
            return Err(Error::invalid("noise variances must be non-negative"));
        }
        Ok(Self { channels, ue_noise, bs_noise, noisy_pilots: true })
    }

    /// Same link with noise-free pilot exchanges. Rates still count the
    /// receiver noise, and UEs load their combiner solve with the noise
    /// energy the pilots would have carried.
    pub fn with_noiseless_pilots(mut self) -> Self {
        self.noisy_pilots = false;
        self
    }

    pub fn num_ues(&self) -> usize {
        self.channels.len()
    }

    pub fn bs_antennas(&self) -> usize {
        self.channels[0].ncols()
    }

    pub fn ue_antennas(&self) -> Vec<usize> {
        self.channels.iter().map(CMat::nrows).collect()
    }

    /// Runs the downlink pilots and lets every UE form its combiners.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        precoders: &PrecoderSet,
        pilots: &[CVec],
        loading_floor: f64,
        rng: &mut R,
    ) -> Result<CombinerSet> {
        let silent = vec![0.0; self.ue_noise.len()];
        let pilot_noise = if self.noisy_pilots { &self.ue_noise } else { &silent };
        let received = forward_tx(&self.channels, precoders, pilots, pilot_noise, rng)?;
        let tau = pilots.first().map_or(1, |p| p.len()) as f64;
        let mut offset = 0;
        let mut vectors = Vec::with_capacity(received.len());
        for (k, y) in received.iter().enumerate() {
            let noise = if self.noisy_pilots { self.ue_noise[k] } else { tau * self.ue_noise[k] };
            let loading = forward_loading(y, noise, loading_floor);
            let count = precoders.vectors[k].len();
            let group = pilots[offset..offset + count]
                .iter()
                .map(|p| ue_combiner_from_forward(y, p, loading))
                .collect::<Result<Vec<_>>>()?;
            offset += count;
            vectors.push(group);
        }
        Ok(CombinerSet { vectors })
    }

    pub fn backward<R: Rng + ?Sized>(
        &self,
        combiners: &CombinerSet,
        pilots: &[CVec],
        psi: f64,
        rng: &mut R,
    ) -> Result<CMat> {
        let noise = if self.noisy_pilots { self.bs_noise } else { 0.0 };
        backward_tx(&self.channels, combiners, pilots, psi, noise, rng)
    }

    /// Rates the UEs get with these precoders and combiners.
    pub fn rates(&self, precoders: &PrecoderSet, combiners: &CombinerSet) -> Result<StreamRates> {
        let noise: Vec<f64> = self.ue_noise.iter().map(|&s| s.max(f64::MIN_POSITIVE)).collect();
        sinr_rate(&self.channels, precoders, combiners, &noise)
    }
}

/// Unit-norm copies of the combiners for the backward pilots. Every stream
/// then gets the same share of the UE budget, and the BS knows the scale of
/// what it receives.
fn unit_combiners(combiners: &CombinerSet) -> CombinerSet {
    let vectors = combiners
        .vectors
        .iter()
        .map(|g| {
            g.iter()
                .map(|u| {
                    let n = norm_sqr(u).sqrt();
                    if n > 0.0 {
                        u.unscale(n)
                    } else {
                        u.clone()
                    }
                })
                .collect()
        })
        .collect();
    CombinerSet { vectors }
}

/// Effective channels and MSE noise terms of the MMSE-scaled combiners, from
/// the estimated unit-direction channels `g = H^H u / ||u||`. For `c u` the
/// MSE is `1 - 2 Re(conj(c) g^H m) + |c|^2 (sum_j |g^H m_j|^2 + noise)`,
/// minimized by `c = g^H m / (sum_j |g^H m_j|^2 + noise)`.
fn mmse_scaled(unit: &[Vec<CVec>], precoders: &PrecoderSet, noise: &[f64]) -> (Vec<Vec<CVec>>, Vec<Vec<f64>>) {
    let all: Vec<&CVec> = precoders.vectors.iter().flatten().collect();
    let mut effective = Vec::with_capacity(unit.len());
    let mut terms = Vec::with_capacity(unit.len());
    for ((group, ms), &sigma2) in unit.iter().zip(&precoders.vectors).zip(noise) {
        let (mut eg, mut tg) = (Vec::with_capacity(group.len()), Vec::with_capacity(group.len()));
        for (g, m) in group.iter().zip(ms) {
            let q = all.iter().map(|mj| inner(g, mj).norm_sqr()).sum::<f64>() + sigma2;
            let c = if q > 0.0 { inner(g, m) / q } else { Complex64::from(0.0) };
            eg.push(g * c);
            tg.push(sigma2 * c.norm_sqr());
        }
        effective.push(eg);
        terms.push(tg);
    }
    (effective, terms)
}

/// One row of the refinement trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtaStep {
    pub iteration: usize,
    pub min_rate: f64,
    pub mean_rate: f64,
    pub power: f64,
}

#[derive(Clone, Debug)]
pub struct OtaOutcome {
    pub precoders: PrecoderSet,
    /// Combiners the UEs formed from the last forward pass.
    pub combiners: CombinerSet,
    pub duals: DualState,
    /// Row `i` holds the rates after `i` updates; row 0 is the start.
    pub trace: Vec<OtaStep>,
}

/// Ping-pong refinement. Each iteration: backward pilots with unit-norm
/// copies of the current UE combiners, effective-channel estimates rescaled
/// at the BS to MMSE combiners using the known UE noise, one convexified
/// max-min step, then forward pilots from which the UEs form new combiners.
pub fn ota_refine<R: Rng + ?Sized>(
    initial: PrecoderSet,
    link: &PhysicalLink,
    cfg: &OtaConfig,
    mut duals: DualState,
    rng: &mut R,
) -> Result<OtaOutcome> {
    if initial.num_ues() != link.num_ues() {
        return Err(Error::Dimension(format!("{} precoder groups for {} UEs", initial.num_ues(), link.num_ues())));
    }
    if !(cfg.ue_power > 0.0) {
        return Err(Error::invalid("UE power must be positive"));
    }
    let counts = initial.counts();
    if duals.nu.iter().map(Vec::len).ne(counts.iter().copied()) || duals.lambda.len() != counts.len() {
        return Err(Error::Dimension("dual state does not match the stream layout".into()));
    }
    let pilots = stream_pilots(initial.num_streams(), cfg.pilot_length)?;
    let mut precoders = initial;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut combiners = link.forward(&precoders, &pilots, cfg.loading_floor, rng)?;
    let record = |i: usize, p: &PrecoderSet, c: &CombinerSet, trace: &mut Vec<OtaStep>| -> Result<()> {
        let r = link.rates(p, c)?;
        trace.push(OtaStep { iteration: i, min_rate: r.min_rate(), mean_rate: r.mean_rate(), power: p.total_power() });
        Ok(())
    };
    record(0, &precoders, &combiners, &mut trace)?;
    for iteration in 1..=cfg.iterations {
        let unit = unit_combiners(&combiners);
        let energy: f64 = unit.vectors.iter().flatten().map(norm_sqr).sum();
        let psi = if energy > 0.0 { (cfg.ue_power / energy).sqrt() } else { 1.0 };
        let uplink = link.backward(&unit, &pilots, psi, rng)?;
        let directions = estimate_effective_channels(&uplink, &pilots, &counts, psi)?;
        let (effective, noise_terms) = mmse_scaled(&directions, &precoders, &link.ue_noise);
        if let Some(update) = solve_surrogate(&effective, &noise_terms, &precoders, &mut duals, cfg.taylor, cfg.inner_iters)? {
            precoders = update.precoders;
        }

        combiners = link.forward(&precoders, &pilots, cfg.loading_floor, rng)?;
        record(iteration, &precoders, &combiners, &mut trace)?;
    }
    Ok(OtaOutcome { precoders, combiners, duals, trace })
}

/// How the refinement is started.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Stage-1 precoders designed on the estimated LoS channels.
    #[default]
    Los,
    /// Random precoders, one stream per UE antenna.
    Random,
    /// Random precoders with the stream counts of the estimated LoS ranks.
    RankGuided,
}

impl InitMode {
    pub const ALL: [InitMode; 3] = [InitMode::Los, InitMode::RankGuided, InitMode::Random];

    pub fn name(self) -> &'static str {
        match self {
            Self::Los => "los",
            Self::Random => "random",
            Self::RankGuided => "rank_guided",
        }
    }
}

/// Gaussian precoders with the given per-UE stream counts, scaled to the budget.
pub fn random_precoders<R: Rng + ?Sized>(counts: &[usize], antennas: usize, budget: f64, rng: &mut R) -> Result<PrecoderSet> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::invalid("every UE needs at least one stream"));
    }
    let vectors: Vec<Vec<CVec>> = counts
        .iter()
        .map(|&c| (0..c).map(|_| complex_gaussian(antennas, 1, 1.0, rng).column(0).into_owned()).collect())
        .collect();
    let power: f64 = vectors.iter().flatten().map(norm_sqr).sum();
    let scale = Complex64::from((budget / power).sqrt());
    let vectors = vectors.into_iter().map(|g| g.into_iter().map(|v| v * scale).collect()).collect();
    Ok(PrecoderSet { vectors, budget, c1: 1.0, c2: 1.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtaTraceRow {
    pub seed: u64,
    pub iteration: usize,
    pub min_rate: f64,
    pub mean_rate: f64,
    pub power: f64,
    pub init_mode: InitMode,
}

pub fn write_ota_trace<W: Write>(rows: &[OtaTraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_ota_trace(rows: &[OtaTraceRow], path: &Path) -> Result<()> {
    write_ota_trace(rows, std::fs::File::create(path)?)
}
