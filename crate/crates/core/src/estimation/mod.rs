//! Downlink pilot measurement, parametric model response, ML search over
//! angle triplets, feedback quantization and LoS reconstruction.

mod quantize;
mod search;

pub use quantize::{dequantize, quantize, quantize_feasible, Feedback, FeedbackCode, QuantizerSpec};
pub use search::{search_estimate, GateParams, SearchOptions, SearchOutcome};

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::los_channel;
use crate::error::{Error, Result};
use crate::geometry::{distance_radicand, pair_distance, pair_geometry, AngleTriplet, LinearArray};
use crate::grid::AngularGrid;
use crate::linalg::{complex_gaussian, dft_matrix, CMat, CVec};

/// How the pilot power enters the received amplitude.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotScaling {
    /// Amplitude `sqrt(rho)`: each active antenna radiates power `rho`.
    #[default]
    SqrtPower,
    /// Amplitude `rho`, as the received-signal model is sometimes written.
    Literal,
}

/// Closed form used for the complex gain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiForm {
    /// Least-squares minimizer `h^H D y / ||D h||^2`.
    #[default]
    LeastSquares,
    /// Same with an extra factor `1/N` in the denominator.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PilotConfig {
    active: Vec<usize>,
    tau: usize,
    pilots: CMat,
    power: f64,
    scaling: PilotScaling,
}

/// How the pilot antennas are spread over the BS array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActiveSetRule {
    /// Equal spacing. On a uniform array this repeats the far-field grating
    /// lobes at a fraction of the original spacing.
    Uniform,
    /// Consecutive gaps grow by `ratio`, so that no two antenna pairs share a
    /// baseline.
    Geometric { ratio: f64 },
}

impl Default for ActiveSetRule {
    fn default() -> Self {
        Self::Geometric { ratio: 1.5 }
    }
}

/// Picks `count` of `m_total` antennas, always including both ends.
pub fn select_active_set(m_total: usize, count: usize, rule: ActiveSetRule) -> Result<Vec<usize>> {
    if count < 2 || count > m_total {
        return Err(Error::invalid(format!("cannot pick {count} of {m_total} antennas")));
    }
    let gaps: Vec<f64> = match rule {
        ActiveSetRule::Uniform => vec![1.0; count - 1],
        ActiveSetRule::Geometric { ratio } => {
            if !(ratio.is_finite() && ratio > 0.0) {
                return Err(Error::invalid("gap ratio must be positive"));
            }
            (0..count - 1).map(|i| ratio.powi(i as i32)).collect()
        }
    };
    let total: f64 = gaps.iter().sum();
    let span = (m_total - 1) as f64;
    let mut out = vec![0usize];
    let mut acc = 0.0;
    for (i, g) in gaps.iter().enumerate() {
        acc += g;
        let ideal = (acc / total * span).round() as usize;
        let lo = out[i] + 1;
        let hi = m_total - (count - 1 - i);
        out.push(ideal.clamp(lo, hi));
    }
    Ok(out)
}

/// Default pilot length: 4 for up to four antennas, otherwise one per antenna.
pub fn default_pilot_length(active: usize) -> usize {
    active.max(4)
}

impl PilotConfig {
    pub fn new(active: Vec<usize>, pilots: CMat, power: f64, scaling: PilotScaling) -> Result<Self> {
        if active.len() < 2 {
            return Err(Error::invalid("need at least two pilot antennas"));
        }
        if active.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("active antenna indices must be strictly increasing"));
        }
        if pilots.nrows() != active.len() {
            return Err(Error::Dimension(format!(
                "pilot matrix has {} rows for {} antennas",
                pilots.nrows(),
                active.len()
            )));
        }
        let tau = pilots.ncols();
        let gram = &pilots * pilots.adjoint() - CMat::identity(active.len(), active.len()) * Complex64::from(tau as f64);
        if gram.norm() > 1e-10 * tau as f64 {
            return Err(Error::invalid("pilot rows are not orthogonal with energy tau"));
        }
        if !(power > 0.0) {
            return Err(Error::invalid("pilot power must be positive"));
        }
        Ok(Self { active, tau, pilots, power, scaling })
    }

    /// DFT pilots of the default length on the antennas chosen by `rule`.
    pub fn dft(m_total: usize, count: usize, power: f64, rule: ActiveSetRule) -> Result<Self> {
        Self::dft_with_length(m_total, count, default_pilot_length(count), power, rule)
    }

    /// Same with an explicit pilot length `tau >= count`.
    pub fn dft_with_length(m_total: usize, count: usize, tau: usize, power: f64, rule: ActiveSetRule) -> Result<Self> {
        let active = select_active_set(m_total, count, rule)?;
        if tau < count {
            return Err(Error::invalid(format!("{count} orthogonal pilots need length >= {count}, got {tau}")));
        }
        let pilots = dft_matrix(tau).rows(0, count).into_owned();
        Self::new(active, pilots, power, PilotScaling::SqrtPower)
    }

    pub fn with_scaling(mut self, scaling: PilotScaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn pilots(&self) -> &CMat {
        &self.pilots
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn scaling(&self) -> PilotScaling {
        self.scaling
    }

    /// Amplitude multiplying the channel in the received pilot signal.
    pub fn amplitude(&self) -> f64 {
        match self.scaling {
            PilotScaling::SqrtPower => self.power.sqrt(),
            PilotScaling::Literal => self.power,
        }
    }

    /// Effective noise variance of the correlated observation.
    pub fn correlated_noise_var(&self, noise_var: f64) -> f64 {
        noise_var / self.tau as f64
    }
}

#[derive(Clone, Debug)]
pub struct Measurement {
    /// `N x tau` received pilots.
    pub raw: CMat,
    /// `N x |active|` after correlating with the pilots.
    pub correlated: CMat,
    /// Column-major stacking of `correlated`.
    pub stacked: CVec,
    /// Per-entry noise variance of `correlated`.
    pub noise_var: f64,
}

impl Measurement {
    fn from_raw(raw: CMat, cfg: &PilotConfig, noise_var: f64) -> Self {
        let correlated = &raw * cfg.pilots.adjoint() / Complex64::from(cfg.tau as f64);
        let stacked = CVec::from_column_slice(correlated.as_slice());
        Self { raw, correlated, stacked, noise_var: cfg.correlated_noise_var(noise_var) }
    }
}

/// Receives the pilots sent from the active antennas over channel `h`.
pub fn transmit_pilots<R: Rng + ?Sized>(h: &CMat, cfg: &PilotConfig, noise_var: f64, rng: &mut R) -> Result<Measurement> {
    if let Some(&m) = cfg.active.iter().find(|&&m| m >= h.ncols()) {
        return Err(Error::Dimension(format!("active antenna {m} outside a {}-column channel", h.ncols())));
    }
    if noise_var < 0.0 {
        return Err(Error::invalid("noise variance must be non-negative"));
    }
    let cols = h.select_columns(cfg.active.iter());
    let mut raw = cols * &cfg.pilots * Complex64::from(cfg.amplitude());
    if noise_var > 0.0 {
        raw += complex_gaussian(h.nrows(), cfg.tau, noise_var, rng);
    }
    Ok(Measurement::from_raw(raw, cfg, noise_var))
}

/// `D` (as its diagonal) and `h` stacked like the measurement.
#[derive(Clone, Debug)]
pub struct ModelResponse {
    pub inv_dist: Vec<f64>,
    pub phases: CVec,
    /// UE antennas per BS column of the stack.
    pub num_ue: usize,
}

impl ModelResponse {
    /// `xi D h`.
    pub fn mean(&self, xi: Complex64) -> CVec {
        CVec::from_iterator(
            self.phases.len(),
            self.phases.iter().zip(&self.inv_dist).map(|(h, d)| xi * h * *d),
        )
    }
}

pub fn model_response(
    t: &AngleTriplet,
    cfg: &PilotConfig,
    bs: &LinearArray,
    ue: &LinearArray,
    wavelength: f64,
) -> Result<ModelResponse> {
    let d11 = t.reference_distance(bs.aperture())?;
    if !(d11 > 0.0) {
        return Err(Error::Infeasible(format!("triplet implies d11 = {d11}")));
    }
    let k = 2.0 * PI / wavelength;
    let mut inv_dist = Vec::with_capacity(cfg.active.len() * ue.len());
    let mut phases = Vec::with_capacity(inv_dist.capacity());
    for &m in &cfg.active {
        for &lu in ue.offsets() {
            let d = pair_distance(t, d11, bs.offset(m), lu)?;
            if d <= 0.0 {
                return Err(Error::Infeasible("zero antenna-pair distance".into()));
            }
            inv_dist.push(1.0 / d);
            phases.push(Complex64::from_polar(1.0, -k * d));
        }
    }
    Ok(ModelResponse { inv_dist, phases: CVec::from_vec(phases), num_ue: ue.len() })
}

pub fn fit_xi(y: &CVec, resp: &ModelResponse, form: XiForm) -> Result<Complex64> {
    let (c, s) = correlate(y.as_slice(), resp);
    if !(s > 0.0) {
        return Err(Error::Singular("model response has zero norm".into()));
    }
    Ok(match form {
        XiForm::LeastSquares => c / s,
        XiForm::Literal => {
            let fro = resp.inv_dist.iter().map(|d| d * d).sum::<f64>();
            c / (resp.num_ue as f64 * fro)
        }
    })
}

fn correlate(y: &[Complex64], resp: &ModelResponse) -> (Complex64, f64) {
    let mut c = Complex64::new(0.0, 0.0);
    let mut s = 0.0;
    for ((yi, h), d) in y.iter().zip(resp.phases.iter()).zip(&resp.inv_dist) {
        c += h.conj() * yi * *d;
        s += d * d * h.norm_sqr();
    }
    (c, s)
}

/// `||y - xi D h||^2`.
pub fn residual(y: &CVec, resp: &ModelResponse, xi: Complex64) -> f64 {
    y.iter().zip(resp.mean(xi).iter()).map(|(a, b)| (a - b).norm_sqr()).sum()
}

/// Fast evaluator of the concentrated ML cost `||y||^2 - |h^H D y|^2 / ||D h||^2`.
///
/// Both closed forms for the gain give the same argmin (the literal one only
/// rescales the explained energy by a constant), so the search always uses
/// the least-squares value.
#[derive(Clone, Debug)]
pub struct Likelihood {
    y: Vec<Complex64>,
    y_energy: f64,
    bs_offsets: Vec<f64>,
    ue_offsets: Vec<f64>,
    lbs_m: f64,
    wavenumber: f64,
    noise_var: f64,
}

impl Likelihood {
    pub fn new(meas: &Measurement, cfg: &PilotConfig, bs: &LinearArray, ue: &LinearArray, wavelength: f64) -> Result<Self> {
        if meas.correlated.shape() != (ue.len(), cfg.active.len()) {
            return Err(Error::Dimension(format!(
                "measurement {:?} vs N = {}, |active| = {}",
                meas.correlated.shape(),
                ue.len(),
                cfg.active.len()
            )));
        }
        let y = meas.stacked.as_slice().to_vec();
        Ok(Self {
            y_energy: y.iter().map(|z| z.norm_sqr()).sum(),
            y,
            bs_offsets: cfg.active.iter().map(|&m| bs.offset(m)).collect(),
            ue_offsets: ue.offsets().to_vec(),
            lbs_m: bs.aperture(),
            wavenumber: 2.0 * PI / wavelength,
            noise_var: meas.noise_var,
        })
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn energy(&self) -> f64 {
        self.y_energy
    }

    pub fn num_ue(&self) -> usize {
        self.ue_offsets.len()
    }

    pub fn bs_offsets(&self) -> &[f64] {
        &self.bs_offsets
    }

    pub fn ue_offsets(&self) -> &[f64] {
        &self.ue_offsets
    }

    pub fn lbs_m(&self) -> f64 {
        self.lbs_m
    }

    pub fn wavenumber(&self) -> f64 {
        self.wavenumber
    }

    /// Column `j` (one active BS antenna) of the correlated measurement.
    pub fn column(&self, j: usize) -> &[Complex64] {
        let n = self.ue_offsets.len();
        &self.y[j * n..(j + 1) * n]
    }

    /// Concentrated cost; `+inf` where the model is undefined.
    pub fn cost(&self, t: &AngleTriplet) -> f64 {
        let Ok(d11) = t.reference_distance(self.lbs_m) else {
            return f64::INFINITY;
        };
        if !(d11 > 0.0) {
            return f64::INFINITY;
        }
        let mut c = Complex64::new(0.0, 0.0);
        let mut s = 0.0;
        let mut i = 0;
        for &lb in &self.bs_offsets {
            for &lu in &self.ue_offsets {
                let r = distance_radicand(t, d11, lb, lu);
                if !(r > 0.0) {
                    return f64::INFINITY;
                }
                let d = r.sqrt();
                let inv = 1.0 / d;
                let (sn, cs) = (self.wavenumber * d).sin_cos();
                // conj(exp(-jkd)) y / d
                c += Complex64::new(cs, sn) * self.y[i] * inv;
                s += inv * inv;
                i += 1;
            }
        }
        self.y_energy - c.norm_sqr() / s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlEstimate {
    pub triplet: AngleTriplet,
    pub residual: f64,
    pub index: usize,
}

fn better(a: (f64, usize), b: (f64, usize)) -> (f64, usize) {
    // Total order on (cost, index); NaN never wins.
    let ka = if a.0.is_nan() { f64::INFINITY } else { a.0 };
    let kb = if b.0.is_nan() { f64::INFINITY } else { b.0 };
    if kb < ka || (kb == ka && b.1 < a.1) {
        b
    } else {
        a
    }
}

/// Exhaustive argmin of the concentrated cost over `grid`; ties go to the
/// lowest grid index regardless of how the work is partitioned.
pub fn ml_estimate(
    meas: &Measurement,
    grid: &AngularGrid,
    cfg: &PilotConfig,
    bs: &LinearArray,
    ue: &LinearArray,
    wavelength: f64,
) -> Result<MlEstimate> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid("nothing to search".into()));
    }
    let lik = Likelihood::new(meas, cfg, bs, ue, wavelength)?;
    let (residual, index) = grid
        .points
        .par_iter()
        .enumerate()
        .map(|(i, t)| (lik.cost(t), i))
        .reduce(|| (f64::INFINITY, usize::MAX), better);
    if index == usize::MAX {
        return Err(Error::EmptyGrid("no grid point has a defined model".into()));
    }
    Ok(MlEstimate { triplet: grid.points[index], residual, index })
}

/// LoS channel implied by a fed-back triplet.
pub fn reconstruct_los(t: &AngleTriplet, bs: &LinearArray, ue: &LinearArray, wavelength: f64) -> Result<CMat> {
    let pg = pair_geometry(t, bs, ue).map_err(|e| {
        Error::Infeasible(format!(
            "feedback ({:.4}, {:.4}, {:.4}) rad does not describe a valid geometry: {e}",
            t.omega11, t.omega1m, t.gamma
        ))
    })?;
    if !(pg.d11 > 0.0) {
        return Err(Error::Infeasible(format!("feedback implies d11 = {}", pg.d11)));
    }
    los_channel(&pg, wavelength)
}

/// Everything produced by one UE's CSI acquisition round.
#[derive(Clone, Debug)]
pub struct Acquisition {
    pub estimate: AngleTriplet,
    pub feedback: Feedback,
    pub received: AngleTriplet,
    pub reconstructed: CMat,
}

/// Pilots, search, quantized feedback and reconstruction for one UE.
#[allow(clippy::too_many_arguments)]
pub fn acquire<R: Rng + ?Sized>(
    h: &CMat,
    cfg: &PilotConfig,
    noise_var: f64,
    search: &SearchOptions,
    quantizer: &QuantizerSpec,
    bs: &LinearArray,
    ue: &LinearArray,
    wavelength: f64,
    rng: &mut R,
) -> Result<Acquisition> {
    let meas = transmit_pilots(h, cfg, noise_var, rng)?;
    let est = search_estimate(&meas, cfg, bs, ue, wavelength, search)?;
    let feedback = quantize_feasible(&est.triplet, quantizer, bs.aperture());
    let received = dequantize(&feedback, quantizer);
    let reconstructed = reconstruct_los(&received, bs, ue, wavelength)?;
    Ok(Acquisition { estimate: est.triplet, feedback, received, reconstructed })
}
