//! Max-min rate precoder and combiner design from channel estimates.
//!
//! The BS alternates MMSE combiners with a KKT-based precoder update of a
//! successive convex approximation of the max-min rate problem, driven by
//! subgradient steps on the per-UE dual weights.

use std::io::Write;
use std::path::Path;

use log::warn;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inner, norm_sqr, CMat, CVec};

/// Per-UE stream counts and the singular structure they came from.
#[derive(Clone, Debug)]
pub struct StreamAllocation {
    /// Singular values are kept when at least `largest / threshold`.
    pub threshold: f64,
    /// Singular values per UE, descending.
    pub singular_values: Vec<Vec<f64>>,
    /// Streams granted from the singular values.
    pub allocated: Vec<usize>,
    /// Streams left after pruning; equals `allocated` until then.
    pub kept: Vec<usize>,
    /// Leading right singular vectors (`M x allocated`) per UE.
    pub basis: Vec<CMat>,
}

impl StreamAllocation {
    pub fn num_ues(&self) -> usize {
        self.allocated.len()
    }
}

pub fn allocate_streams(channels: &[CMat], threshold: f64) -> Result<StreamAllocation> {
    if !(threshold >= 1.0) {
        return Err(Error::invalid(format!("stream threshold must be at least 1, got {threshold}")));
    }
    if channels.is_empty() {
        return Err(Error::invalid("no channels to allocate streams for"));
    }
    let mut singular_values = Vec::new();
    let mut allocated = Vec::new();
    let mut basis = Vec::new();
    for (k, h) in channels.iter().enumerate() {
        let m = h.ncols();
        let svd = h.clone().svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| Error::Singular("SVD did not return right singular vectors".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        let top = sv.first().copied().unwrap_or(0.0);
        let count = if top > 0.0 {
            sv.iter().filter(|&&s| s >= top / threshold).count()
        } else {
            warn!("channel of UE {k} is zero; allocating a single stream");
            1
        };
        let mut b = CMat::zeros(m, count);
        for (c, &i) in order.iter().take(count).enumerate() {
            let v = v_t.row(i).adjoint();
            b.set_column(c, &v);
        }
        if top == 0.0 {
            b = CMat::zeros(m, 1);
            b[(0, 0)] = Complex64::new(1.0, 0.0);
        }
        singular_values.push(sv);
        allocated.push(count);
        basis.push(b);
    }
    Ok(StreamAllocation { threshold, singular_values, kept: allocated.clone(), allocated, basis })
}

/// How an initial or pruned precoder set is scaled to the power budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerScaling {
    /// Amplitude `sqrt(P / sum ||m||^2)`: the total power lands on the budget.
    #[default]
    Amplitude,
    /// `P / sum ||m||^2` applied to the amplitudes as written. Only meets the
    /// budget when the unscaled power happens to be one.
    Literal,
}

impl PowerScaling {
    fn factor(self, budget: f64, power: f64) -> f64 {
        match self {
            Self::Amplitude => (budget / power).sqrt(),
            Self::Literal => budget / power,
        }
    }
}

/// Precoders `m_{k,s}` grouped per UE.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecoderSet {
    pub vectors: Vec<Vec<CVec>>,
    pub budget: f64,
    /// Scale applied at initialization (1 when not built by `init_precoders`).
    pub c1: f64,
    /// Scale applied after pruning (1 when not built by `prune_streams`).
    pub c2: f64,
}

impl PrecoderSet {
    pub fn total_power(&self) -> f64 {
        self.vectors.iter().flatten().map(norm_sqr).sum()
    }

    pub fn num_streams(&self) -> usize {
        self.vectors.iter().map(Vec::len).sum()
    }

    pub fn num_ues(&self) -> usize {
        self.vectors.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.vectors.iter().map(Vec::len).collect()
    }

    fn all(&self) -> impl Iterator<Item = &CVec> {
        self.vectors.iter().flatten()
    }
}

pub fn init_precoders(alloc: &StreamAllocation, budget: f64, scaling: PowerScaling) -> Result<PrecoderSet> {
    if !(budget > 0.0) {
        return Err(Error::invalid("power budget must be positive"));
    }
    let vectors: Vec<Vec<CVec>> =
        alloc.basis.iter().map(|b| (0..b.ncols()).map(|c| b.column(c).into_owned()).collect()).collect();
    let power: f64 = vectors.iter().flatten().map(norm_sqr).sum();
    if !(power > 0.0) {
        return Err(Error::Singular("initial precoders have zero power".into()));
    }
    let c1 = scaling.factor(budget, power);
    let vectors = vectors.into_iter().map(|v| v.into_iter().map(|x| x * Complex64::from(c1)).collect()).collect();
    Ok(PrecoderSet { vectors, budget, c1, c2: 1.0 })
}

/// Combiners `u_{k,s}` grouped per UE.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinerSet {
    pub vectors: Vec<Vec<CVec>>,
}

fn check_noise(noise: &[f64], k: usize) -> Result<()> {
    if noise.len() != k {
        return Err(Error::Dimension(format!("{} noise variances for {k} UEs", noise.len())));
    }
    if noise.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("noise variances must be positive"));
    }
    Ok(())
}

fn check_sizes(channels: &[CMat], precoders: &PrecoderSet) -> Result<()> {
    if channels.len() != precoders.num_ues() {
        return Err(Error::Dimension(format!(
            "{} channels for {} precoder groups",
            channels.len(),
            precoders.num_ues()
        )));
    }
    if let Some(v) = precoders.all().find(|v| channels.iter().any(|h| h.ncols() != v.len())) {
        return Err(Error::Dimension(format!("precoder of length {} does not match the channels", v.len())));
    }
    Ok(())
}

/// MMSE combiners `(sum H m m^H H^H + s^2 I)^-1 H m` on the given channels.
pub fn mmse_combiners(channels: &[CMat], precoders: &PrecoderSet, noise: &[f64]) -> Result<CombinerSet> {
    check_sizes(channels, precoders)?;
    check_noise(noise, channels.len())?;
    let mut vectors = Vec::with_capacity(channels.len());
    for (k, h) in channels.iter().enumerate() {
        let images: Vec<CVec> = precoders.all().map(|m| h * m).collect();
        let mut cov = CMat::identity(h.nrows(), h.nrows()) * Complex64::from(noise[k]);
        for g in &images {
            cov += g * g.adjoint();
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("combiner covariance of UE {k} is not positive definite")))?;
        vectors.push(precoders.vectors[k].iter().map(|m| chol.solve(&(h * m))).collect());
    }
    Ok(CombinerSet { vectors })
}

/// Per-stream SINR and per-UE rate.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamRates {
    pub sinr: Vec<Vec<f64>>,
    /// `sum_s log2(1 + sinr)` per UE.
    pub rates: Vec<f64>,
}

impl StreamRates {
    pub fn stream_rates(&self) -> Vec<Vec<f64>> {
        self.sinr.iter().map(|v| v.iter().map(|g| (1.0 + g).log2()).collect()).collect()
    }

    pub fn min_rate(&self) -> f64 {
        self.rates.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_rate(&self) -> f64 {
        self.rates.iter().sum::<f64>() / self.rates.len() as f64
    }
}

pub fn sinr_rate(channels: &[CMat], precoders: &PrecoderSet, combiners: &CombinerSet, noise: &[f64]) -> Result<StreamRates> {
    check_sizes(channels, precoders)?;
    check_noise(noise, channels.len())?;
    if combiners.vectors.iter().map(Vec::len).ne(precoders.vectors.iter().map(Vec::len)) {
        return Err(Error::Dimension("combiner and precoder stream counts differ".into()));
    }
    let mut sinr = Vec::with_capacity(channels.len());
    for (k, h) in channels.iter().enumerate() {
        let images: Vec<CVec> = precoders.all().map(|m| h * m).collect();
        let own_offset: usize = precoders.vectors[..k].iter().map(Vec::len).sum();
        let per: Vec<f64> = combiners.vectors[k]
            .iter()
            .enumerate()
            .map(|(s, u)| {
                let own = own_offset + s;
                let mut signal = 0.0;
                let mut interference = noise[k] * norm_sqr(u);
                for (i, g) in images.iter().enumerate() {
                    let p = inner(u, g).norm_sqr();
                    if i == own {
                        signal = p;
                    } else {
                        interference += p;
                    }
                }
                if interference > 0.0 {
                    signal / interference
                } else {
                    0.0
                }
            })
            .collect();
        sinr.push(per);
    }
    let rates = sinr.iter().map(|v| v.iter().map(|g| (1.0 + g).log2()).sum()).collect();
    Ok(StreamRates { sinr, rates })
}

/// MSE of stream `s` of UE `k` with combiner `u` on channel `h`. Cross terms
/// use `|u^H H m|^2`, which keeps `mse = 1 / (1 + sinr)` at the MMSE
/// combiner.
pub fn mse(h: &CMat, u: &CVec, k: usize, s: usize, precoders: &PrecoderSet, noise: f64) -> f64 {
    let mut out = noise * norm_sqr(u);
    for (j, group) in precoders.vectors.iter().enumerate() {
        for (l, m) in group.iter().enumerate() {
            let a = inner(u, &(h * m));
            out += if (j, l) == (k, s) { (Complex64::new(1.0, 0.0) - a).norm_sqr() } else { a.norm_sqr() };
        }
    }
    out
}

pub fn all_mse(channels: &[CMat], combiners: &CombinerSet, precoders: &PrecoderSet, noise: &[f64]) -> Vec<Vec<f64>> {
    combiners
        .vectors
        .iter()
        .enumerate()
        .map(|(k, us)| us.iter().enumerate().map(|(s, u)| mse(&channels[k], u, k, s, precoders, noise[k])).collect())
        .collect()
}

/// Which linearization of the rate constraint `mse <= 2^-t` is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaylorForm {
    /// Tangent of `2^-t` at `t0`: slope `-2^-t0 ln 2`.
    #[default]
    Tangent,
    /// `alpha = 2^t0 ln 2`, `beta = 2^t0 (1 + t0 ln 2)` as written; its line
    /// touches `2^t` in value at `t0` but not in slope.
    Literal,
}

/// `(alpha, beta)` of the line `-alpha t + beta` around `t0`.
pub fn taylor_points(t0: f64, form: TaylorForm) -> (f64, f64) {
    let ln2 = std::f64::consts::LN_2;
    let base = match form {
        TaylorForm::Tangent => (-t0).exp2(),
        TaylorForm::Literal => t0.exp2(),
    };
    (base * ln2, base * (1.0 + t0 * ln2))
}

/// Dual and auxiliary variables of the convexified problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    /// UE weights on the simplex.
    pub lambda: Vec<f64>,
    /// Stream weights `lambda_k / alpha_{k,s}`.
    pub nu: Vec<Vec<f64>>,
    /// Power multiplier from the last precoder update.
    pub eta: f64,
    /// Stream rate variables.
    pub t: Vec<Vec<f64>>,
    /// Common rate `mean_k sum_s t_{k,s}`.
    pub common_rate: f64,
    pub alpha_bar: Vec<Vec<f64>>,
    pub beta_bar: Vec<Vec<f64>>,
    /// Base subgradient step; inner step `j` moves `lambda` by
    /// `step / sqrt(j)` along the normalized subgradient.
    pub step: f64,
    /// Completed linearizations.
    pub iteration: usize,
}

impl DualState {
    pub fn new(counts: &[usize], step: f64) -> Self {
        let k = counts.len();
        let zeros = || counts.iter().map(|&c| vec![0.0; c]).collect::<Vec<_>>();
        Self {
            lambda: vec![1.0 / k as f64; k],
            nu: zeros(),
            eta: 0.0,
            t: zeros(),
            common_rate: 0.0,
            alpha_bar: zeros(),
            beta_bar: zeros(),
            step,
            iteration: 0,
        }
    }

    /// Drops stream entries whose mask is false.
    pub fn retain(&mut self, keep: &[Vec<bool>]) {
        for field in [&mut self.nu, &mut self.t, &mut self.alpha_bar, &mut self.beta_bar] {
            for (v, mask) in field.iter_mut().zip(keep) {
                let mut it = mask.iter();
                v.retain(|_| *it.next().unwrap_or(&true));
            }
        }
    }

    /// Linearizes at the current MSEs and sets `nu = lambda / alpha`.
    pub fn linearize(&mut self, mses: &[Vec<f64>], form: TaylorForm) {
        let points: Vec<Vec<(f64, f64)>> =
            mses.iter().map(|v| v.iter().map(|&e| taylor_points(-e.log2(), form)).collect()).collect();
        self.alpha_bar = points.iter().map(|v| v.iter().map(|p| p.0).collect()).collect();
        self.beta_bar = points.iter().map(|v| v.iter().map(|p| p.1).collect()).collect();
        self.refresh_weights();
    }

    fn refresh_weights(&mut self) {
        self.nu = self
            .alpha_bar
            .iter()
            .zip(&self.lambda)
            .map(|(a, &l)| a.iter().map(|&x| l / x).collect())
            .collect();
    }

    /// Rate variables `(beta - mse) / alpha` for the given MSEs.
    pub fn rate_variables(&self, mses: &[Vec<f64>]) -> Vec<Vec<f64>> {
        mses.iter()
            .enumerate()
            .map(|(k, v)| v.iter().enumerate().map(|(s, &e)| (self.beta_bar[k][s] - e) / self.alpha_bar[k][s]).collect())
            .collect()
    }

    /// Projected step along the normalized subgradient `r_c - sum_s t_{k,s}`.
    fn subgradient_step(&mut self, sums: &[f64], inner: usize) -> bool {
        let common = sums.iter().sum::<f64>() / sums.len() as f64;
        let gap: Vec<f64> = sums.iter().map(|s| common - s).collect();
        let scale = gap.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if !(scale > 0.0) {
            return false;
        }
        let mu = self.step / (inner as f64).sqrt() / scale;
        let raw: Vec<f64> = self.lambda.iter().zip(&gap).map(|(l, g)| l + mu * g).collect();
        self.lambda = project_simplex(&raw);
        self.refresh_weights();
        true
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, x) in u.iter().enumerate() {
        acc += x;
        let t = (acc - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Precoders `(sum nu h h^H + eta I)^-1 nu h` with `eta` set by bisection so
/// the total power equals the budget (`eta = 0` when that already fits).
/// Returns the set and `eta`.
pub fn kkt_precoder_update(effective: &[Vec<CVec>], nu: &[Vec<f64>], budget: f64) -> Result<(PrecoderSet, f64)> {
    if !(budget > 0.0) {
        return Err(Error::invalid("power budget must be positive"));
    }
    if effective.iter().map(Vec::len).ne(nu.iter().map(Vec::len)) {
        return Err(Error::Dimension("effective channels and weights differ in shape".into()));
    }
    let flat_h: Vec<&CVec> = effective.iter().flatten().collect();
    let flat_nu: Vec<f64> = nu.iter().flatten().copied().collect();
    if flat_nu.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("stream weights must be finite and non-negative"));
    }
    let m = flat_h.first().map(|h| h.len()).ok_or_else(|| Error::invalid("no streams"))?;
    let n = flat_h.len();

    // Range of sum nu h h^H from the thin SVD of [sqrt(nu) h].
    let b = CMat::from_fn(m, n, |r, c| flat_h[c][r] * flat_nu[c].sqrt());
    let svd = b.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Singular("SVD did not return left singular vectors".into()))?;
    let top = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > top * 1e-10).collect();
    if keep.is_empty() {
        return Err(Error::Bracketing(format!(
            "all {n} weighted effective channels are zero (largest weight {:e})",
            flat_nu.iter().copied().fold(0.0f64, f64::max)
        )));
    }
    let values: Vec<f64> = keep.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let q = u.select_columns(&keep);
    let proj: Vec<CVec> =
        flat_h.iter().zip(&flat_nu).map(|(h, &v)| q.adjoint() * (*h * Complex64::from(v))).collect();
    // Outside the kept range the system is just eta I. Only streams whose own
    // channel sits mostly there (numerically dead ones) carry such a part.
    let outside: Vec<Option<CVec>> = flat_h
        .iter()
        .zip(&flat_nu)
        .zip(&proj)
        .map(|((h, &v), g)| {
            let r = *h * Complex64::from(v) - &q * g;
            (r.norm() > 1e-10 * h.norm() * v).then_some(r)
        })
        .collect();
    let weight: Vec<f64> = (0..keep.len()).map(|i| proj.iter().map(|g| g[i].norm_sqr()).sum()).collect();
    let weight_out: f64 = outside.iter().flatten().map(norm_sqr).sum();
    let power = |eta: f64| -> f64 {
        let inside: f64 = weight.iter().zip(&values).map(|(c, l)| c / (l + eta).powi(2)).sum();
        if weight_out > 0.0 {
            inside + weight_out / (eta * eta)
        } else {
            inside
        }
    };

    let eta = if power(0.0) <= budget {
        0.0
    } else {
        let mut lo = 0.0;
        let mut hi = ((weight.iter().sum::<f64>() + weight_out) / budget).sqrt();
        if !(power(hi) <= budget) || !hi.is_finite() {
            return Err(Error::Bracketing(format!(
                "power {:e} at eta {hi:e} still exceeds the budget {budget:e}",
                power(hi)
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if power(mid) > budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };

    let mut vectors = Vec::with_capacity(effective.len());
    let mut idx = 0;
    for group in effective {
        let mut out = Vec::with_capacity(group.len());
        for _ in group {
            let g = &proj[idx];
            let scaled = CVec::from_iterator(g.len(), g.iter().zip(&values).map(|(x, l)| x / (l + eta)));
            let mut m = &q * scaled;
            if let Some(r) = &outside[idx] {
                m += r / Complex64::from(eta);
            }
            out.push(m);
            idx += 1;
        }
        vectors.push(out);
    }
    let mut set = PrecoderSet { vectors, budget, c1: 1.0, c2: 1.0 };
    // Rounding in the factorization can leave the power a hair above budget.
    let power = set.total_power();
    if power > budget {
        let fix = Complex64::from((budget / power).sqrt());
        set.vectors.iter_mut().flatten().for_each(|m| *m *= fix);
    }
    Ok((set, eta))
}

/// Largest relative norm of the Lagrangian gradient
/// `(sum nu h h^H + eta I) m_j - nu_j h_j` over streams.
pub fn kkt_residual(effective: &[Vec<CVec>], nu: &[Vec<f64>], eta: f64, precoders: &PrecoderSet) -> f64 {
    let flat_h: Vec<&CVec> = effective.iter().flatten().collect();
    let flat_nu: Vec<f64> = nu.iter().flatten().copied().collect();
    let mut worst = 0.0f64;
    for ((m, h), &v) in precoders.all().zip(&flat_h).zip(&flat_nu) {
        let mut g = m * Complex64::from(eta) - *h * Complex64::from(v);
        for (h2, &v2) in flat_h.iter().zip(&flat_nu) {
            g += *h2 * (inner(h2, m) * v2);
        }
        let scale = (*h * Complex64::from(v)).norm().max(f64::MIN_POSITIVE);
        worst = worst.max(g.norm() / scale);
    }
    worst
}

/// `H^H u` per stream.
pub fn effective_channels(channels: &[CMat], combiners: &CombinerSet) -> Vec<Vec<CVec>> {
    combiners.vectors.iter().zip(channels).map(|(us, h)| us.iter().map(|u| h.adjoint() * u).collect()).collect()
}

/// Noise terms `s^2 ||u||^2` of the stream MSEs.
pub fn combiner_noise_terms(combiners: &CombinerSet, noise: &[f64]) -> Vec<Vec<f64>> {
    combiners.vectors.iter().zip(noise).map(|(g, &s)| g.iter().map(|u| s * norm_sqr(u)).collect()).collect()
}

/// Stream MSEs written through the effective channels `h = H^H u`:
/// `|1 - h^H m|^2 + sum_other |h^H m|^2 + noise term`.
pub fn surrogate_mse(effective: &[Vec<CVec>], noise_terms: &[Vec<f64>], precoders: &PrecoderSet) -> Vec<Vec<f64>> {
    effective
        .iter()
        .enumerate()
        .map(|(k, g)| {
            g.iter()
                .enumerate()
                .map(|(s, h)| {
                    let mut out = noise_terms[k][s];
                    for (j, group) in precoders.vectors.iter().enumerate() {
                        for (l, m) in group.iter().enumerate() {
                            let a = inner(h, m);
                            out += if (j, l) == (k, s) { (Complex64::new(1.0, 0.0) - a).norm_sqr() } else { a.norm_sqr() };
                        }
                    }
                    out
                })
                .collect()
        })
        .collect()
}

/// A precoder update accepted by [`solve_surrogate`].
#[derive(Clone, Debug)]
pub struct AcceptedUpdate {
    pub precoders: PrecoderSet,
    /// Largest relative Lagrangian gradient of the update (see [`kkt_residual`]).
    pub stationarity: f64,
}

/// One convexified max-min step around `current` with the combiners fixed.
///
/// Linearizes the rate constraints at the current MSEs, then runs
/// `inner_iters` KKT precoder updates interleaved with projected
/// subgradient steps on `lambda`. The update whose smallest per-UE rate
/// variable sum is largest is accepted when it beats the current point, so
/// the linearized min-rate never decreases.
pub fn solve_surrogate(
    effective: &[Vec<CVec>],
    noise_terms: &[Vec<f64>],
    current: &PrecoderSet,
    duals: &mut DualState,
    taylor: TaylorForm,
    inner_iters: usize,
) -> Result<Option<AcceptedUpdate>> {
    let sums = |t: &[Vec<f64>]| -> Vec<f64> { t.iter().map(|v| v.iter().sum()).collect() };
    let floor = |mse: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        mse.into_iter().map(|v| v.into_iter().map(|e| e.max(1e-300)).collect()).collect()
    };
    let now = floor(surrogate_mse(effective, noise_terms, current));
    duals.linearize(&now, taylor);
    duals.iteration += 1;
    let mut best_min = sums(&duals.rate_variables(&now)).into_iter().fold(f64::INFINITY, f64::min);
    let mut best: Option<(AcceptedUpdate, DualState, Vec<Vec<f64>>)> = None;
    for j in 1..=inner_iters.max(1) {
        let (m, eta) = kkt_precoder_update(effective, &duals.nu, current.budget)?;
        let t = duals.rate_variables(&floor(surrogate_mse(effective, noise_terms, &m)));
        let per_ue = sums(&t);
        let worst = per_ue.iter().copied().fold(f64::INFINITY, f64::min);
        if worst > best_min {
            best_min = worst;
            let mut snapshot = duals.clone();
            snapshot.eta = eta;
            let stationarity = kkt_residual(effective, &duals.nu, eta, &m);
            let precoders = PrecoderSet { c1: current.c1, c2: current.c2, ..m };
            best = Some((AcceptedUpdate { precoders, stationarity }, snapshot, t.clone()));
        }
        if !duals.subgradient_step(&per_ue, j) {
            break;
        }
    }
    let set_rates = |d: &mut DualState, t: Vec<Vec<f64>>| {
        let s = sums(&t);
        d.common_rate = s.iter().sum::<f64>() / s.len() as f64;
        d.t = t;
    };
    match best {
        Some((update, mut snapshot, t)) => {
            set_rates(&mut snapshot, t);
            *duals = snapshot;
            Ok(Some(update))
        }
        None => {
            // Keep exploring from the last weights; the rates stay at the
            // current point.
            let t = duals.rate_variables(&now);
            set_rates(duals, t);
            Ok(None)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaOptions {
    pub max_iters: usize,
    /// Stop when the common rate moves less than this (bps/Hz).
    pub tolerance: f64,
    /// Base subgradient step on the UE weights.
    pub step: f64,
    /// Weight updates per linearization.
    #[serde(default = "default_inner_iters")]
    pub inner_iters: usize,
    #[serde(default)]
    pub taylor: TaylorForm,
    #[serde(default)]
    pub power_scaling: PowerScaling,
}

fn default_inner_iters() -> usize {
    30
}

impl Default for ScaOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tolerance: 1e-5,
            step: 0.1,
            inner_iters: default_inner_iters(),
            taylor: TaylorForm::Tangent,
            power_scaling: PowerScaling::Amplitude,
        }
    }
}

/// One row of the solver trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaTraceRow {
    pub iteration: usize,
    pub common_rate: f64,
    pub min_rate: f64,
    pub power: f64,
}

#[derive(Clone, Debug)]
pub struct ScaSolution {
    pub precoders: PrecoderSet,
    /// MMSE combiners for `precoders` on the channels the solver saw.
    pub combiners: CombinerSet,
    pub duals: DualState,
    pub trace: Vec<ScaTraceRow>,
    pub converged: bool,
    /// Stationarity residual of the update that produced `precoders`;
    /// infinite when the initial precoders were never replaced.
    pub stationarity: f64,
}

/// Runs the alternating combiner / precoder updates from the allocation's
/// singular-vector initialization.
pub fn sca_maxmin_solve(
    channels: &[CMat],
    alloc: &StreamAllocation,
    noise: &[f64],
    budget: f64,
    opts: &ScaOptions,
) -> Result<ScaSolution> {
    let start = init_precoders(alloc, budget, opts.power_scaling)?;
    let duals = DualState::new(&start.counts(), opts.step);
    sca_from(channels, start, duals, noise, opts)
}

/// Same iteration from a given precoder set and dual state.
pub fn sca_from(
    channels: &[CMat],
    start: PrecoderSet,
    mut duals: DualState,
    noise: &[f64],
    opts: &ScaOptions,
) -> Result<ScaSolution> {
    let mut precoders = start;
    let mut combiners = mmse_combiners(channels, &precoders, noise)?;
    let mut best = (sinr_rate(channels, &precoders, &combiners, noise)?.min_rate(), precoders.clone(), combiners.clone(), duals.clone(), f64::INFINITY);
    let mut stationarity = f64::INFINITY;
    let mut trace = Vec::new();
    let mut previous: Option<f64> = None;
    let mut converged = false;
    for iteration in 1..=opts.max_iters {
        let eff = effective_channels(channels, &combiners);
        let noise_terms = combiner_noise_terms(&combiners, noise);
        if let Some(update) = solve_surrogate(&eff, &noise_terms, &precoders, &mut duals, opts.taylor, opts.inner_iters)? {
            precoders = update.precoders;
            stationarity = update.stationarity;
            combiners = revive_combiners(mmse_combiners(channels, &precoders, noise)?, &combiners);
        }
        let min_rate = sinr_rate(channels, &precoders, &combiners, noise)?.min_rate();
        trace.push(ScaTraceRow { iteration, common_rate: duals.common_rate, min_rate, power: precoders.total_power() });
        if min_rate > best.0 {
            best = (min_rate, precoders.clone(), combiners.clone(), duals.clone(), stationarity);
        }
        if previous.is_some_and(|p| (duals.common_rate - p).abs() < opts.tolerance) {
            converged = true;
            break;
        }
        previous = Some(duals.common_rate);
    }
    if converged {
        Ok(ScaSolution { precoders, combiners, duals, trace, converged, stationarity })
    } else {
        warn!("max-min solver stopped after {} iterations without converging", opts.max_iters);
        let (_, precoders, combiners, duals, stationarity) = best;
        Ok(ScaSolution { precoders, combiners, duals, trace, converged, stationarity })
    }
}

/// A stream whose precoder dropped to zero gets a zero MMSE combiner and with
/// it a zero effective channel, which no dual weight could revive. Such
/// streams keep their previous combiner.
fn revive_combiners(mut fresh: CombinerSet, previous: &CombinerSet) -> CombinerSet {
    for (group, old) in fresh.vectors.iter_mut().zip(&previous.vectors) {
        for (u, prev) in group.iter_mut().zip(old) {
            if norm_sqr(u) == 0.0 {
                u.clone_from(prev);
            }
        }
    }
    fresh
}

/// Result of dropping near-zero-rate streams.
#[derive(Clone, Debug)]
pub struct Pruned {
    pub allocation: StreamAllocation,
    pub precoders: PrecoderSet,
    /// Which original streams survived, per UE.
    pub keep: Vec<Vec<bool>>,
}

/// Drops streams whose estimated rate is below `threshold` (bps/Hz), keeping
/// at least the best stream of every UE, and rescales the survivors to the
/// budget.
pub fn prune_streams(
    alloc: &StreamAllocation,
    rates: &[Vec<f64>],
    precoders: &PrecoderSet,
    threshold: f64,
    scaling: PowerScaling,
) -> Result<Pruned> {
    if !(threshold >= 0.0) {
        return Err(Error::invalid("pruning threshold must be non-negative"));
    }
    if rates.iter().map(Vec::len).ne(precoders.vectors.iter().map(Vec::len)) {
        return Err(Error::Dimension("rates and precoders differ in shape".into()));
    }
    let keep: Vec<Vec<bool>> = rates
        .iter()
        .map(|r| {
            let mut mask: Vec<bool> = r.iter().map(|&x| x >= threshold).collect();
            if !mask.iter().any(|&b| b) {
                if let Some(best) = (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])) {
                    mask[best] = true;
                }
            }
            mask
        })
        .collect();
    let vectors: Vec<Vec<CVec>> = precoders
        .vectors
        .iter()
        .zip(&keep)
        .map(|(g, mask)| g.iter().zip(mask).filter(|(_, &k)| k).map(|(m, _)| m.clone()).collect())
        .collect();
    let power: f64 = vectors.iter().flatten().map(norm_sqr).sum();
    if !(power > 0.0) {
        return Err(Error::Singular("surviving precoders have zero power".into()));
    }
    let c2 = scaling.factor(precoders.budget, power);
    let vectors = vectors.into_iter().map(|g| g.into_iter().map(|m| m * Complex64::from(c2)).collect()).collect();
    let mut allocation = alloc.clone();
    allocation.kept = keep.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
    Ok(Pruned {
        allocation,
        precoders: PrecoderSet { vectors, budget: precoders.budget, c1: precoders.c1, c2 },
        keep,
    })
}

pub fn write_sca_trace<W: Write>(rows: &[ScaTraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_sca_trace(rows: &[ScaTraceRow], path: &Path) -> Result<()> {
    write_sca_trace(rows, std::fs::File::create(path)?)
}
