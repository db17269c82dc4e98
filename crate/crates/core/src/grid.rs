//! The three-angle search grid: uniform axes, Cartesian product, pruning of
//! triplets whose outer rays do not meet in front of the BS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ref_distance_from_aods, AngleTriplet};

/// Uniform samples `(min (L - i) + i max) / L`, `i = 0..=L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, steps: usize) -> Result<Self> {
        if !(min < max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::invalid(format!("axis bounds [{min}, {max}] are not increasing")));
        }
        if steps == 0 {
            return Err(Error::invalid("axis needs at least one step"));
        }
        Ok(Self { min, max, steps })
    }

    /// Axis whose step is as close to `step` as the bounds allow.
    pub fn with_step(min: f64, max: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::invalid("axis step must be positive"));
        }
        let steps = ((max - min) / step).round().max(1.0) as usize;
        Self::new(min, max, steps)
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / self.steps as f64
    }

    pub fn sample(&self, i: usize) -> f64 {
        let l = self.steps as f64;
        let i = i as f64;
        (self.min * (l - i) + i * self.max) / l
    }

    pub fn samples(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }

    /// Index range of samples inside `[lo, hi]`.
    pub fn indices_within(&self, lo: f64, hi: f64) -> std::ops::RangeInclusive<usize> {
        let h = self.step();
        let a = ((lo - self.min) / h).ceil().max(0.0);
        let b = ((hi - self.min) / h).floor().min(self.steps as f64);
        if a > b || b < 0.0 {
            #[allow(clippy::reversed_empty_ranges)]
            return 1..=0;
        }
        a as usize..=b as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Refinement {
    pub levels: usize,
    pub shrink: f64,
}

impl Default for Refinement {
    fn default() -> Self {
        Self { levels: 0, shrink: 0.25 }
    }
}

/// Bounds and sample counts of the angular grid. Both AoDs share one range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub omega_min: f64,
    pub omega_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub omega_steps: usize,
    pub gamma_steps: usize,
    #[serde(default)]
    pub refinement: Refinement,
    /// Upper bound on materialized grid size.
    #[serde(default = "default_max_points")]
    pub max_points: usize,
}

fn default_max_points() -> usize {
    20_000_000
}

impl GridSpec {
    /// Grid over the given bounds with (approximately) the given angular step.
    pub fn with_resolution(omega: (f64, f64), gamma: (f64, f64), step: f64) -> Result<Self> {
        let wa = Axis::with_step(omega.0, omega.1, step)?;
        let ga = Axis::with_step(gamma.0, gamma.1, step)?;
        Ok(Self {
            omega_min: omega.0,
            omega_max: omega.1,
            gamma_min: gamma.0,
            gamma_max: gamma.1,
            omega_steps: wa.steps,
            gamma_steps: ga.steps,
            refinement: Refinement::default(),
            max_points: default_max_points(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.omega_axis()?;
        self.gamma_axis()?;
        if !(self.refinement.shrink > 0.0 && self.refinement.shrink < 1.0) {
            return Err(Error::invalid("refinement shrink must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn omega_axis(&self) -> Result<Axis> {
        Axis::new(self.omega_min, self.omega_max, self.omega_steps)
    }

    pub fn gamma_axis(&self) -> Result<Axis> {
        Axis::new(self.gamma_min, self.gamma_max, self.gamma_steps)
    }

    /// Unpruned product size.
    pub fn full_size(&self) -> usize {
        (self.omega_steps + 1).pow(2) * (self.gamma_steps + 1)
    }
}

/// Feasible triplets in lexicographic `(omega11, omega1M, gamma)` order.
#[derive(Clone, Debug)]
pub struct AngularGrid {
    pub points: Vec<AngleTriplet>,
    pub axes: [Axis; 3],
}

impl AngularGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Product of three axes, pruned of triplets with negative or undefined `d11`.
    pub fn from_axes(axes: [Axis; 3], lbs_m: f64, max_points: usize) -> Result<Self> {
        let full = axes[0].len() * axes[1].len() * axes[2].len();
        if full > max_points {
            return Err(Error::invalid(format!(
                "grid of {full} points exceeds the limit of {max_points}; use refinement"
            )));
        }
        let (w1, wm, g) = (axes[0].samples(), axes[1].samples(), axes[2].samples());
        let mut points = Vec::new();
        for &a in &w1 {
            for &b in &wm {
                if !is_feasible_pair(a, b, lbs_m) {
                    continue;
                }
                points.extend(g.iter().map(|&c| AngleTriplet::new(a, b, c)));
            }
        }
        if points.is_empty() {
            return Err(Error::EmptyGrid("every triplet was pruned".into()));
        }
        Ok(Self { points, axes })
    }
}

/// Kept iff the outer rays meet at a non-negative reference distance.
pub fn is_feasible_pair(omega11: f64, omega1m: f64, lbs_m: f64) -> bool {
    matches!(ref_distance_from_aods(omega11, omega1m, lbs_m), Ok(d) if d >= 0.0)
}

pub fn build_grid(spec: &GridSpec, lbs_m: f64) -> Result<AngularGrid> {
    spec.validate()?;
    let w = spec.omega_axis()?;
    AngularGrid::from_axes([w, w, spec.gamma_axis()?], lbs_m, spec.max_points)
}

/// Grid with the same sample counts over a window `shrink^level` times the
/// original extent, centered on `center`.
pub fn refine_grid(center: &AngleTriplet, spec: &GridSpec, level: usize, lbs_m: f64) -> Result<AngularGrid> {
    spec.validate()?;
    let f = spec.refinement.shrink.powi(level as i32);
    let hw = 0.5 * f * (spec.omega_max - spec.omega_min);
    let hg = 0.5 * f * (spec.gamma_max - spec.gamma_min);
    let axes = [
        Axis::new(center.omega11 - hw, center.omega11 + hw, spec.omega_steps)?,
        Axis::new(center.omega1m - hw, center.omega1m + hw, spec.omega_steps)?,
        Axis::new(center.gamma - hg, center.gamma + hg, spec.gamma_steps)?,
    ];
    AngularGrid::from_axes(axes, lbs_m, spec.max_points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::rad;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn spec(l_w: usize, l_g: usize) -> GridSpec {
        GridSpec {
            omega_min: rad(-85.0),
            omega_max: rad(85.0),
            gamma_min: 0.0,
            gamma_max: rad(180.0),
            omega_steps: l_w,
            gamma_steps: l_g,
            refinement: Refinement { levels: 3, shrink: 0.1 },
            max_points: 1_000_000,
        }
    }

    #[test]
    fn endpoint_samples() {
        let a = Axis::new(-FRAC_PI_2, FRAC_PI_2, 2).unwrap();
        assert_eq!(a.samples(), vec![-FRAC_PI_2, 0.0, FRAC_PI_2]);
    }

    #[test]
    fn uniform_spacing() {
        let a = Axis::new(rad(-85.0), rad(85.0), 170).unwrap();
        let s = a.samples();
        for w in s.windows(2) {
            assert!((w[1] - w[0] - a.step()).abs() < 8.0 * f64::EPSILON);
        }
    }

    #[test]
    fn pruning_drops_rays_meeting_behind() {
        assert!(!is_feasible_pair(FRAC_PI_4, 0.0, 2.0));
        assert!(is_feasible_pair(0.0, FRAC_PI_4, 2.0));
        let g = build_grid(&spec(20, 10), 2.0).unwrap();
        assert!(g.len() <= spec(20, 10).full_size());
        for p in &g.points {
            assert!(ref_distance_from_aods(p.omega11, p.omega1m, 2.0).unwrap() >= 0.0);
            assert!(p.omega1m > p.omega11);
        }
        // Roughly half of the (w11, w1M) plane lies behind the array.
        assert!(g.len() < spec(20, 10).full_size());
    }

    #[test]
    fn nothing_pruned_means_full_size() {
        let s = GridSpec { omega_min: 0.1, omega_max: 0.2, gamma_min: 0.0, gamma_max: 1.0, ..spec(1, 3) };
        // omega1M = omega11 is parallel, so use disjoint windows through from_axes.
        let axes = [Axis::new(0.0, 0.1, 2).unwrap(), Axis::new(0.3, 0.5, 2).unwrap(), s.gamma_axis().unwrap()];
        let g = AngularGrid::from_axes(axes, 2.0, 100).unwrap();
        assert_eq!(g.len(), 3 * 3 * 4);
    }

    #[test]
    fn deterministic_order() {
        let a = build_grid(&spec(12, 6), 2.0).unwrap();
        let b = build_grid(&spec(12, 6), 2.0).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn level_zero_matches_build() {
        let s = spec(10, 6);
        let mid = AngleTriplet::new(0.0, 0.0, rad(90.0));
        let a = refine_grid(&mid, &s, 0, 2.0).unwrap();
        let b = build_grid(&s, 2.0).unwrap();
        assert_eq!(a.points.len(), b.points.len());
        for (p, q) in a.points.iter().zip(&b.points) {
            for (x, y) in p.as_array().iter().zip(q.as_array()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shrink_arithmetic() {
        // 2 degree steps, shrink 0.1, three levels.
        let s = GridSpec::with_resolution((rad(-84.0), rad(84.0)), (0.0, rad(180.0)), rad(2.0)).unwrap();
        let s = GridSpec { refinement: Refinement { levels: 3, shrink: 0.1 }, ..s };
        let c = AngleTriplet::new(rad(-10.0), rad(10.0), rad(45.0));
        let g = refine_grid(&c, &s, 3, 2.0).unwrap();
        assert!((g.axes[0].step() - rad(0.002)).abs() < 1e-12);
    }

    #[test]
    fn oversized_grid_is_refused() {
        let s = GridSpec { max_points: 1000, ..spec(40, 40) };
        assert!(build_grid(&s, 2.0).is_err());
    }

    #[test]
    fn empty_grid_errors() {
        let axes = [Axis::new(0.5, 0.6, 1).unwrap(), Axis::new(0.0, 0.1, 1).unwrap(), Axis::new(0.0, 1.0, 1).unwrap()];
        assert!(matches!(AngularGrid::from_axes(axes, 2.0, 100), Err(Error::EmptyGrid(_))));
    }

    #[test]
    fn indices_within_window() {
        let a = Axis::new(0.0, 1.0, 10).unwrap();
        assert_eq!(a.indices_within(0.25, 0.55), 3..=5);
        assert!(a.indices_within(0.31, 0.39).is_empty());
        assert_eq!(a.indices_within(-1.0, 0.05), 0..=0);
    }
}
