//! Gated search of the fine angular lattice.
//!
//! An exhaustive pass over the full lattice is far too large at fine
//! resolution, and the coherent cost oscillates on a sub-degree scale, so a
//! plain coarse-to-fine zoom on it locks onto side lobes. Instead:
//!
//! 1. Each measurement column (one active BS antenna) is beamformed with the
//!    UE-side steering vector alone. The output depends only on
//!    `s = sin(gamma + omega_{1,m})`, varies slowly in `s`, and its energy
//!    profile gates the plausible arrival angles at the UE.
//! 2. The lattice is walked over `(omega11, omega1M)`. The gates of the two
//!    outer antennas bound `omega1M` and `gamma`. Each surviving pair is
//!    ranked with a cheap coherent cost that uses exact BS-side distances
//!    and the tabulated UE-side outputs.
//! 3. The best-ranked pairs are scored with the exact cost over their
//!    `gamma` gate, then polished by a discrete descent on the lattice.
//! 4. A few distinct lattice optima are zoomed below the lattice step and
//!    the best one wins. Quantization to the lattice can cost more than the
//!    gap between the true lobe and an alias, so choosing before zooming
//!    picks aliases.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use log::{debug, warn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Likelihood, Measurement, PilotConfig};
use crate::error::{Error, Result};
use crate::geometry::{AngleTriplet, LinearArray};
use crate::grid::{refine_grid, Axis, GridSpec, Refinement};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateParams {
    /// Allowed excess residual in units of the noise variance.
    pub kappa: f64,
    /// Extra slack as a fraction of the column energy (covers the far-field
    /// approximation on the UE side).
    pub relative: f64,
    /// Table resolution in `sin x`.
    pub sine_step: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        Self { kappa: 12.0, relative: 1e-3, sine_step: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchOptions {
    /// Bounds and lattice. Its refinement block sets the zoom levels.
    pub grid: GridSpec,
    #[serde(default)]
    pub gate: GateParams,
    #[serde(default = "default_top")]
    pub top_candidates: usize,
    /// Spacing of `gamma` probes inside wide gates (rad).
    #[serde(default = "default_probe")]
    pub gamma_probe: f64,
    /// Lattice strides in `(omega11, omega1M)` of the cheap ranking pass.
    /// The cost varies slowly when `omega1M` moves alone.
    #[serde(default = "default_stride")]
    pub ranking_stride: (usize, usize),
    /// Samples per axis at each zoom level.
    #[serde(default = "default_refine_steps")]
    pub refine_steps: usize,
    /// Ranked pairs allowed before the lattice is coarsened.
    #[serde(default = "default_budget")]
    pub max_evaluations: usize,
}

fn default_top() -> usize {
    64
}
fn default_probe() -> f64 {
    6f64.to_radians()
}
fn default_stride() -> (usize, usize) {
    (2, 3)
}
fn default_refine_steps() -> usize {
    8
}
fn default_budget() -> usize {
    8_000_000
}

impl SearchOptions {
    pub fn new(grid: GridSpec) -> Self {
        Self {
            grid,
            gate: GateParams::default(),
            top_candidates: default_top(),
            gamma_probe: default_probe(),
            ranking_stride: default_stride(),
            refine_steps: default_refine_steps(),
            max_evaluations: default_budget(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SearchOutcome {
    pub triplet: AngleTriplet,
    pub residual: f64,
    /// Best point of the lattice before zooming.
    pub lattice_point: AngleTriplet,
    pub lattice_step: f64,
    /// Cheap rankings plus exact cost evaluations.
    pub evaluations: usize,
}

type Interval = (f64, f64);

fn normalize(mut v: Vec<Interval>) -> Vec<Interval> {
    v.retain(|(a, b)| a <= b);
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<Interval> = Vec::with_capacity(v.len());
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn intersect(a: &[Interval], b: &[Interval]) -> Vec<Interval> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if lo <= hi {
            out.push((lo, hi));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

fn shifted(a: &[Interval], c: f64) -> Vec<Interval> {
    a.iter().map(|&(x, y)| (x + c, y + c)).collect()
}

/// UE-side beamformer outputs of one column, tabulated over `s = sin x`.
struct ColumnProfile {
    table: Vec<Complex64>,
    inv_ds: f64,
    /// Gate on the arrival angle `x`, within the searched range.
    gate: Vec<Interval>,
}

impl ColumnProfile {
    fn new(col: &[Complex64], ue: &[f64], k: f64, noise: f64, gate: &GateParams, range: Interval) -> Self {
        let n = ue.len() as f64;
        let energy: f64 = col.iter().map(|z| z.norm_sqr()).sum();
        let steps = (2.0 / gate.sine_step).ceil() as usize;
        let ds = 2.0 / steps as f64;
        let table: Vec<Complex64> = (0..=steps)
            .map(|i| {
                let s = -1.0 + i as f64 * ds;
                col.iter().zip(ue).map(|(y, &l)| Complex64::from_polar(1.0, -k * l * s) * y).sum()
            })
            .collect();
        let power: Vec<f64> = table.iter().map(|b| b.norm_sqr() / n).collect();
        let best = power.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let floor = best - gate.kappa * noise - gate.relative * energy;
        let mut sines = Vec::new();
        let mut run: Option<usize> = None;
        for i in 0..=steps + 1 {
            let pass = i <= steps && power[i] >= floor;
            match (pass, run) {
                (true, None) => run = Some(i),
                (false, Some(a)) => {
                    let lo = (-1.0 + a as f64 * ds - ds).max(-1.0);
                    let hi = (-1.0 + (i - 1) as f64 * ds + ds).min(1.0);
                    sines.push((lo, hi));
                    run = None;
                }
                _ => {}
            }
        }
        let mut xs = Vec::new();
        for (s0, s1) in sines {
            let (a0, a1) = (s0.asin(), s1.asin());
            for w in -2..=2 {
                let o = 2.0 * PI * w as f64;
                xs.push((a0 + o, a1 + o));
                xs.push((PI - a1 + o, PI - a0 + o));
            }
        }
        Self { table, inv_ds: 1.0 / ds, gate: intersect(&normalize(xs), &[range]) }
    }

    #[inline]
    fn at(&self, s: f64) -> Complex64 {
        let i = ((s + 1.0) * self.inv_ds).round() as usize;
        self.table[i.min(self.table.len() - 1)]
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    cost: f64,
    key: (usize, usize, usize),
    span: (usize, usize),
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost.total_cmp(&other.cost).then(self.key.cmp(&other.key))
    }
}

struct OverBudget;

/// Exactly scored pairs whose whole `gamma` span is then scanned.
const SPAN_SCANS: usize = 16;

/// Distinct lattice optima carried into the zoom.
const FINALISTS: usize = 4;

struct Lattice {
    omega: Axis,
    gamma: Axis,
}

impl Lattice {
    fn point(&self, key: (usize, usize, usize)) -> AngleTriplet {
        AngleTriplet::new(self.omega.sample(key.0), self.omega.sample(key.1), self.gamma.sample(key.2))
    }
}

fn lattice_search(
    lik: &Likelihood,
    lat: &Lattice,
    cols: &[ColumnProfile],
    opts: &SearchOptions,
    evaluations: &mut usize,
) -> std::result::Result<Vec<Candidate>, OverBudget> {
    let (wa, ga) = (&lat.omega, &lat.gamma);
    let gamma_box = [(ga.min, ga.max)];
    let last = cols.len() - 1;
    let lbs = lik.bs_offsets();
    let k = lik.wavenumber();
    let n_ue = lik.num_ue() as f64;
    let hg = ga.step();
    let stride = ((opts.gamma_probe / hg).round() as usize).max(1);
    let gamma_sc: Vec<(f64, f64)> = (0..ga.len()).map(|l| ga.sample(l).sin_cos()).collect();
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::new();
    let mut geo = vec![(0.0, 0.0, 0.0); cols.len()];

    for i in (0..wa.len()).step_by(opts.ranking_stride.0) {
        let w11 = wa.sample(i);
        let g1 = intersect(&shifted(&cols[0].gate, -w11), &gamma_box);
        if g1.is_empty() {
            continue;
        }
        let mut wm: Vec<Interval> = Vec::new();
        for kx in &cols[last].gate {
            for g in &g1 {
                wm.push((kx.0 - g.1, kx.1 - g.0));
            }
        }
        let (s11, c11) = w11.sin_cos();
        // Lobes are narrow in omega11 but long in omega1M, so keeping one
        // pair per omega11 stops a few strong lobes from filling the heap.
        let mut row_best: Option<Candidate> = None;
        for (lo, hi) in normalize(wm) {
            let r = wa.indices_within(lo, hi);
            for j in (*r.start().max(&(i + 1))..=*r.end()).step_by(opts.ranking_stride.1) {
                let w1m = wa.sample(j);
                let d11 = lik.lbs_m() * w1m.cos() / (w1m - w11).sin();
                if !(d11 > 0.0) || !d11.is_finite() {
                    continue;
                }
                let (ux, uy) = (d11 * c11, -d11 * s11);
                let mut inv_sq = 0.0;
                for (g, &lb) in geo.iter_mut().zip(lbs) {
                    let dy = uy - lb;
                    let d = ux.hypot(dy);
                    // (distance, sin, cos) of the bearing from this BS antenna
                    *g = (d, -dy / d, ux / d);
                    inv_sq += 1.0 / (d * d);
                }
                let norm = n_ue * inv_sq;
                for ga_seg in &g1 {
                    for kx in &cols[last].gate {
                        let glo = ga_seg.0.max(kx.0 - w1m);
                        let ghi = ga_seg.1.min(kx.1 - w1m);
                        if glo > ghi {
                            continue;
                        }
                        let mut r = ga.indices_within(glo, ghi);
                        if r.is_empty() {
                            let mid = ((0.5 * (glo + ghi) - ga.min) / hg).round().clamp(0.0, ga.steps as f64) as usize;
                            r = mid..=mid;
                        }
                        let (a, b) = (*r.start(), *r.end());
                        let mut probe = |l: usize, span: (usize, usize)| {
                            let (sg, cg) = gamma_sc[l];
                            let mut c = Complex64::new(0.0, 0.0);
                            for (col, &(d, sw, cw)) in cols.iter().zip(&geo) {
                                let (sn, cs) = (k * d).sin_cos();
                                c += Complex64::new(cs, sn) * col.at(sg * cw + cg * sw) / d;
                            }
                            let cost = lik.energy() - c.norm_sqr() / norm;
                            let c = Candidate { cost, key: (i, j, l), span };
                            if row_best.map_or(true, |b| c < b) {
                                row_best = Some(c);
                            }
                        };
                        if b - a < stride {
                            probe((a + b) / 2, (a, b));
                            *evaluations += 1;
                        } else {
                            let half = stride / 2;
                            let mut l = a + half;
                            while l <= b {
                                probe(l, (l.saturating_sub(half).max(a), (l + half).min(b)));
                                *evaluations += 1;
                                l += stride;
                            }
                        }
                    }
                }
                if *evaluations > opts.max_evaluations {
                    return Err(OverBudget);
                }
            }
        }
        if let Some(c) = row_best {
            heap.push(c);
            if heap.len() > opts.top_candidates {
                heap.pop();
            }
        }
    }

    let (ri, rj) = (opts.ranking_stride.0 - 1, opts.ranking_stride.1 - 1);
    let mut scored: Vec<Candidate> = Vec::new();
    for cand in heap.into_sorted_vec() {
        let (i0, j0, l) = cand.key;
        for i in i0.saturating_sub(ri)..=(i0 + ri).min(wa.steps) {
            for j in j0.saturating_sub(rj).max(i + 1)..=(j0 + rj).min(wa.steps) {
                *evaluations += 1;
                let cost = lik.cost(&lat.point((i, j, l)));
                if cost.is_finite() {
                    scored.push(Candidate { cost, key: (i, j, l), span: cand.span });
                }
            }
        }
    }
    scored.sort();
    let mut spanned: Vec<Candidate> = Vec::new();
    for cand in scored.iter().take(SPAN_SCANS) {
        let (i, j, _) = cand.key;
        let mut best: Option<Candidate> = None;
        for l in cand.span.0..=cand.span.1 {
            *evaluations += 1;
            let c = Candidate { cost: lik.cost(&lat.point((i, j, l))), key: (i, j, l), span: (l, l) };
            if c.cost.is_finite() && best.map_or(true, |b| c < b) {
                best = Some(c);
            }
        }
        spanned.extend(best);
    }
    spanned.sort();

    let mut finalists: Vec<Candidate> = Vec::new();
    for start in spanned {
        if finalists.len() == FINALISTS {
            break;
        }
        if finalists.iter().any(|f| near(f.key, start.key)) {
            continue;
        }
        let best = descend(lik, lat, start, evaluations);
        if !finalists.iter().any(|f| near(f.key, best.key)) {
            finalists.push(best);
        }
    }
    Ok(finalists)
}

fn near(a: (usize, usize, usize), b: (usize, usize, usize)) -> bool {
    a.0.abs_diff(b.0) <= 2 && a.1.abs_diff(b.1) <= 4 && a.2.abs_diff(b.2) <= 4
}

/// Discrete descent over the 26 lattice neighbours.
fn descend(lik: &Likelihood, lat: &Lattice, mut best: Candidate, evaluations: &mut usize) -> Candidate {
    let lim = [lat.omega.steps, lat.omega.steps, lat.gamma.steps];
    loop {
        let mut improved = false;
        let base = best.key;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                for dl in -1i64..=1 {
                    let key = [base.0 as i64 + di, base.1 as i64 + dj, base.2 as i64 + dl];
                    if (di, dj, dl) == (0, 0, 0) || key.iter().zip(lim).any(|(&x, m)| x < 0 || x > m as i64) {
                        continue;
                    }
                    let key = (key[0] as usize, key[1] as usize, key[2] as usize);
                    *evaluations += 1;
                    let c = Candidate { cost: lik.cost(&lat.point(key)), key, span: (key.2, key.2) };
                    if c.cost.is_finite() && c < best {
                        best = c;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            return best;
        }
    }
}

/// Zooms around `start` with the grid's refinement levels.
fn zoom(lik: &Likelihood, lat: &Lattice, start: AngleTriplet, cost: f64, opts: &SearchOptions, evaluations: &mut usize) -> (AngleTriplet, f64) {
    let (mut center, mut cost) = (start, cost);
    let levels = opts.grid.refinement.levels;
    let (hw, hg) = (2.0 * lat.omega.step(), 2.0 * lat.gamma.step());
    let local = GridSpec {
        omega_min: -hw,
        omega_max: hw,
        gamma_min: -hg,
        gamma_max: hg,
        omega_steps: opts.refine_steps,
        gamma_steps: opts.refine_steps,
        refinement: Refinement { levels, shrink: opts.grid.refinement.shrink },
        max_points: usize::MAX,
    };
    for level in 0..levels {
        let Ok(win) = refine_grid(&center, &local, level, lik.lbs_m()) else {
            break;
        };
        let mut next = (center, cost);
        for p in &win.points {
            *evaluations += 1;
            let c = lik.cost(p);
            if c < next.1 {
                next = (*p, c);
            }
        }
        (center, cost) = next;
    }
    (center, cost)
}

/// ML estimate on the lattice of `opts.grid`, found through arrival-angle
/// gates, then zoomed by the grid's refinement levels.
pub fn search_estimate(
    meas: &Measurement,
    cfg: &PilotConfig,
    bs: &LinearArray,
    ue: &LinearArray,
    wavelength: f64,
    opts: &SearchOptions,
) -> Result<SearchOutcome> {
    opts.grid.validate()?;
    let lik = Likelihood::new(meas, cfg, bs, ue, wavelength)?;
    let g = &opts.grid;
    let x_range = (g.gamma_min + g.omega_min, g.gamma_max + g.omega_max);
    let mut omega_steps = g.omega_steps;
    let mut gamma_steps = g.gamma_steps;
    let mut gate = opts.gate;
    let mut evaluations = 0usize;
    let n_cols = cfg.active().len();

    let (finalists, lat) = loop {
        let lat = Lattice {
            omega: Axis::new(g.omega_min, g.omega_max, omega_steps)?,
            gamma: Axis::new(g.gamma_min, g.gamma_max, gamma_steps)?,
        };
        let cols: Vec<ColumnProfile> = (0..n_cols)
            .map(|c| ColumnProfile::new(lik.column(c), lik.ue_offsets(), lik.wavenumber(), lik.noise_var(), &gate, x_range))
            .collect();
        let mut attempt = 0usize;
        let found = lattice_search(&lik, &lat, &cols, opts, &mut attempt);
        evaluations += attempt;
        debug!("lattice attempt: {attempt} evaluations");
        match found {
            Ok(finalists) if !finalists.is_empty() => break (finalists, lat),
            Ok(_) => {
                if gate.kappa > 1e6 {
                    return Err(Error::EmptyGrid("no lattice point passed the arrival-angle gates".into()));
                }
                debug!("no candidates; widening gates");
                gate.kappa *= 16.0;
                gate.relative = (gate.relative * 16.0).min(1.0);
            }
            Err(OverBudget) => {
                if omega_steps < 16 {
                    return Err(Error::invalid("search budget exhausted even on a coarse lattice"));
                }
                warn!("search budget exceeded; halving lattice resolution");
                omega_steps = omega_steps.div_ceil(2);
                gamma_steps = gamma_steps.div_ceil(2);
            }
        }
    };

    // Lattice quantization can cost more than the gap between the true lobe
    // and an alias, so every finalist is zoomed before choosing.
    let mut pick: Option<(AngleTriplet, f64, AngleTriplet)> = None;
    for f in &finalists {
        let start = lat.point(f.key);
        let (t, c) = zoom(&lik, &lat, start, f.cost, opts, &mut evaluations);
        if pick.map_or(true, |p| c < p.1) {
            pick = Some((t, c, start));
        }
    }
    let (center, cost, lattice_point) = pick.expect("finalists are non-empty");

    Ok(SearchOutcome {
        triplet: center,
        residual: cost,
        lattice_point,
        lattice_step: lat.omega.step(),
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{reconstruct_los, transmit_pilots, ActiveSetRule};
    use crate::geometry::{placement_to_triplet, Placement};
    use crate::units::rad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interval_ops() {
        assert_eq!(normalize(vec![(3.0, 4.0), (0.0, 1.0), (0.5, 2.0)]), vec![(0.0, 2.0), (3.0, 4.0)]);
        assert_eq!(intersect(&[(0.0, 2.0), (3.0, 4.0)], &[(1.0, 3.5)]), vec![(1.0, 2.0), (3.0, 3.5)]);
        assert!(intersect(&[(0.0, 1.0)], &[(2.0, 3.0)]).is_empty());
    }

    fn opts(step_deg: f64, levels: usize) -> SearchOptions {
        let mut g = GridSpec::with_resolution((rad(-85.0), rad(85.0)), (0.0, rad(180.0)), rad(step_deg)).unwrap();
        g.refinement.levels = levels;
        SearchOptions::new(g)
    }

    #[test]
    fn noisy_search_lands_near_truth() {
        let bs = LinearArray::uniform_span(64, 2.0).unwrap();
        let ue = LinearArray::uniform(4, 0.015).unwrap();
        let t = placement_to_triplet(&Placement::new(6.0, -0.4, 1.1).unwrap(), &bs, &ue).unwrap();
        let h = reconstruct_los(&t, &bs, &ue, 0.03).unwrap();
        let cfg = PilotConfig::dft(64, 4, 5e-4, ActiveSetRule::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let meas = transmit_pilots(&h, &cfg, 3.16e-12, &mut rng).unwrap();
        let out = search_estimate(&meas, &cfg, &bs, &ue, 0.03, &opts(0.08, 5)).unwrap();
        let e = out.triplet.as_array();
        let tr = t.as_array();
        // omega1M carries the range information and is the noisiest angle.
        assert!((e[0] - tr[0]).abs() < rad(0.05), "{e:?} vs {tr:?}");
        assert!((e[1] - tr[1]).abs() < rad(0.3), "{e:?} vs {tr:?}");
        assert!((e[2] - tr[2]).abs() < rad(2.0), "{e:?} vs {tr:?}");
        let lik = Likelihood::new(&meas, &cfg, &bs, &ue, 0.03).unwrap();
        assert!(out.residual <= lik.cost(&t) + 1e-30);
    }
}
