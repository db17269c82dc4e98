//! Closed-form 2D geometry of a BS/UE pair of linear arrays.
//!
//! Frame: BS element 1 sits at the origin and the BS array runs along +y.
//! UE element 1 sits at `(d11 cos w11, -d11 sin w11)` and UE element `n` is
//! offset from it by `l_n (-sin g, cos g)`. Bearings are measured from the +x
//! axis (BS broadside); a positive AoD points toward -y. With this frame the
//! closed-form distance and AoD expressions below are exact.

use nalgebra::{DMatrix, Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element offsets along a linear array, measured from element 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LinearArray {
    spacings: Vec<f64>,
}

impl LinearArray {
    pub fn new(spacings: Vec<f64>) -> Result<Self> {
        if spacings.is_empty() {
            return Err(Error::invalid("linear array needs at least one element"));
        }
        if spacings[0] != 0.0 {
            return Err(Error::invalid("first element offset must be exactly 0"));
        }
        if spacings.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("non-finite element offset"));
        }
        if spacings.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("element offsets must be strictly increasing"));
        }
        Ok(Self { spacings })
    }

    /// `count` elements with equal `pitch`.
    pub fn uniform(count: usize, pitch: f64) -> Result<Self> {
        Self::new((0..count).map(|i| i as f64 * pitch).collect())
    }

    /// `count` equally spaced elements spanning `aperture` meters.
    pub fn uniform_span(count: usize, aperture: f64) -> Result<Self> {
        if count < 2 {
            return Self::new(vec![0.0]);
        }
        Self::uniform(count, aperture / (count - 1) as f64)
    }

    pub fn len(&self) -> usize {
        self.spacings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spacings.is_empty()
    }

    /// Offset of element `i` (0-based) from element 1.
    pub fn offset(&self, i: usize) -> f64 {
        self.spacings[i]
    }

    /// Distance between the first and last element.
    pub fn aperture(&self) -> f64 {
        *self.spacings.last().expect("non-empty")
    }

    pub fn offsets(&self) -> &[f64] {
        &self.spacings
    }
}

impl TryFrom<Vec<f64>> for LinearArray {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LinearArray> for Vec<f64> {
    fn from(a: LinearArray) -> Self {
        a.spacings
    }
}

/// The three reference angles `(w11, w1M, gamma)`, in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleTriplet {
    pub omega11: f64,
    pub omega1m: f64,
    pub gamma: f64,
}

impl AngleTriplet {
    pub fn new(omega11: f64, omega1m: f64, gamma: f64) -> Self {
        Self { omega11, omega1m, gamma }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.omega11, self.omega1m, self.gamma]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|x| x.is_finite())
    }

    /// `d11` implied by the two outermost AoDs of a BS array with aperture `lbs_m`.
    pub fn reference_distance(&self, lbs_m: f64) -> Result<f64> {
        ref_distance_from_aods(self.omega11, self.omega1m, lbs_m)
    }
}

/// UE pose relative to the BS: center-to-center distance, offset angle of the
/// center line from BS broadside, and UE rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub d: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Placement {
    pub fn new(d: f64, beta: f64, gamma: f64) -> Result<Self> {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::invalid(format!("placement distance must be positive, got {d}")));
        }
        if !(beta.abs() < std::f64::consts::FRAC_PI_2) {
            return Err(Error::invalid(format!("|beta| must be below pi/2, got {beta}")));
        }
        if !gamma.is_finite() {
            return Err(Error::invalid("non-finite rotation"));
        }
        Ok(Self { d, beta, gamma })
    }

    /// UE element positions in the BS-element-1 frame.
    pub fn ue_positions(&self, bs: &LinearArray, ue: &LinearArray) -> Vec<Point2<f64>> {
        let center = Point2::new(
            self.d * self.beta.cos(),
            0.5 * bs.aperture() - self.d * self.beta.sin(),
        );
        let axis = ue_axis(self.gamma);
        let first = center - axis * (0.5 * ue.aperture());
        ue.offsets().iter().map(|&l| first + axis * l).collect()
    }
}

/// Antenna-pair distances and AoDs for every (UE n, BS m) pair.
#[derive(Clone, Debug)]
pub struct PairGeometry {
    /// `N x M` distances in meters.
    pub dist: DMatrix<f64>,
    /// `N x M` AoDs in radians.
    pub aod: DMatrix<f64>,
    pub d11: f64,
}

/// Unit vector along the UE array for rotation `gamma`.
pub fn ue_axis(gamma: f64) -> Vector2<f64> {
    Vector2::new(-gamma.sin(), gamma.cos())
}

/// BS element positions in the BS-element-1 frame.
pub fn bs_positions(bs: &LinearArray) -> Vec<Point2<f64>> {
    bs.offsets().iter().map(|&l| Point2::new(0.0, l)).collect()
}

/// Distance between BS element at offset `lb` and UE element at offset `lu`.
pub fn pair_distance(t: &AngleTriplet, d11: f64, lb: f64, lu: f64) -> Result<f64> {
    if !(d11 > 0.0) {
        return Err(Error::domain(format!("reference distance must be positive, got {d11}")));
    }
    let r = distance_radicand(t, d11, lb, lu);
    if r < 0.0 || !r.is_finite() {
        return Err(Error::domain(format!("negative radicand {r} in pair distance")));
    }
    Ok(r.sqrt())
}

#[inline]
pub(crate) fn distance_radicand(t: &AngleTriplet, d11: f64, lb: f64, lu: f64) -> f64 {
    let (sw, cw) = t.omega11.sin_cos();
    let (sg, cg) = t.gamma.sin_cos();
    // sin(w + g) without a second sin call
    let swg = sw * cg + cw * sg;
    d11 * d11 + 2.0 * d11 * (lb * sw - lu * swg) - 2.0 * lb * lu * cg + lb * lb + lu * lu
}

/// AoD from the BS element at offset `lb` toward the UE element at offset `lu`.
pub fn pair_aod(t: &AngleTriplet, d11: f64, lb: f64, lu: f64) -> Result<f64> {
    let (sw, cw) = t.omega11.sin_cos();
    let (sg, cg) = t.gamma.sin_cos();
    let num = d11 * sw - lu * cg + lb;
    let den = d11 * cw - lu * sg;
    if den == 0.0 || !den.is_finite() {
        return Err(Error::domain("zero denominator in pair AoD"));
    }
    Ok((num / den).atan())
}

/// Reference distance `d11` at the intersection of the rays leaving BS element
/// 1 at `omega11` and BS element M at `omega1m`. Negative values mean the rays
/// intersect behind the array; callers treat that as infeasible.
pub fn ref_distance_from_aods(omega11: f64, omega1m: f64, lbs_m: f64) -> Result<f64> {
    // tan(w1M) cos(w11) - sin(w11) = sin(w1M - w11) / cos(w1M); this form
    // is exactly zero for parallel rays instead of a rounding residue.
    let s = (omega1m - omega11).sin();
    if s == 0.0 || !s.is_finite() {
        return Err(Error::domain("parallel outer rays: reference distance undefined"));
    }
    let d = lbs_m * omega1m.cos() / s;
    if !d.is_finite() {
        return Err(Error::domain("reference distance is not finite"));
    }
    Ok(d)
}

/// Converts a UE pose into the reference-angle triplet.
pub fn placement_to_triplet(p: &Placement, bs: &LinearArray, ue: &LinearArray) -> Result<AngleTriplet> {
    let pts = p.ue_positions(bs, ue);
    if let Some(bad) = pts.iter().find(|q| !(q.x > 0.0)) {
        return Err(Error::Infeasible(format!(
            "UE element at x = {:.4} m is not in front of the BS array",
            bad.x
        )));
    }
    let first = pts[0];
    let lbs_m = bs.aperture();
    let t = AngleTriplet::new(
        (-first.y).atan2(first.x),
        (lbs_m - first.y).atan2(first.x),
        p.gamma,
    );
    let d11 = t.reference_distance(lbs_m)?;
    if !(d11 > 0.0) {
        return Err(Error::Infeasible(format!("placement implies d11 = {d11}")));
    }
    Ok(t)
}

/// Full pair geometry from a triplet; `d11` is recovered from the two AoDs.
pub fn pair_geometry(t: &AngleTriplet, bs: &LinearArray, ue: &LinearArray) -> Result<PairGeometry> {
    let d11 = t.reference_distance(bs.aperture())?;
    pair_geometry_with_reference(t, d11, bs, ue)
}

/// Pair geometry with an explicit reference distance (usable for `M = 1`).
pub fn pair_geometry_with_reference(
    t: &AngleTriplet,
    d11: f64,
    bs: &LinearArray,
    ue: &LinearArray,
) -> Result<PairGeometry> {
    if !(d11 > 0.0) {
        return Err(Error::Infeasible(format!("reference distance {d11} is not positive")));
    }
    let (n, m) = (ue.len(), bs.len());
    let mut dist = DMatrix::zeros(n, m);
    let mut aod = DMatrix::zeros(n, m);
    for (j, &lb) in bs.offsets().iter().enumerate() {
        for (i, &lu) in ue.offsets().iter().enumerate() {
            dist[(i, j)] = pair_distance(t, d11, lb, lu)?;
            aod[(i, j)] = pair_aod(t, d11, lb, lu)?;
        }
    }
    Ok(PairGeometry { dist, aod, d11 })
}

/// UE element coordinates implied by a triplet, with BS element 1 at `bs_origin`.
pub fn ue_coordinates(
    t: &AngleTriplet,
    bs: &LinearArray,
    ue: &LinearArray,
    bs_origin: Point2<f64>,
) -> Result<Vec<Point2<f64>>> {
    let d11 = t.reference_distance(bs.aperture())?;
    if !(d11 > 0.0) {
        return Err(Error::Infeasible(format!("reference distance {d11} is not positive")));
    }
    let first = Point2::new(
        bs_origin.x + d11 * t.omega11.cos(),
        bs_origin.y - d11 * t.omega11.sin(),
    );
    let (s, c) = t.gamma.sin_cos();
    Ok(ue
        .offsets()
        .iter()
        .map(|&l| Point2::new(first.x - l * s, first.y + l * c))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_4, PI};

    fn tri(w11: f64, g: f64) -> AngleTriplet {
        AngleTriplet::new(w11, 0.0, g)
    }

    // Independent oracle: place the antennas and measure.
    fn oracle(t: &AngleTriplet, d11: f64, lb: f64, lu: f64) -> (f64, f64) {
        let ue = Point2::new(
            d11 * t.omega11.cos() - lu * t.gamma.sin(),
            -d11 * t.omega11.sin() + lu * t.gamma.cos(),
        );
        let bs = Point2::new(0.0, lb);
        let v = ue - bs;
        (v.norm(), (-v.y).atan2(v.x))
    }

    #[test]
    fn distance_examples() {
        assert_eq!(pair_distance(&tri(0.0, 0.0), 5.0, 0.0, 0.0).unwrap(), 5.0);
        let d = pair_distance(&tri(0.0, 0.0), 5.0, 2.0, 0.0).unwrap();
        assert!((d - 29f64.sqrt()).abs() < 1e-14);
        let d = pair_distance(&tri(0.0, 0.0), 5.0, 2.0, 2.0).unwrap();
        assert!((d - 5.0).abs() < 1e-14);
    }

    #[test]
    fn distance_requires_positive_reference() {
        assert!(matches!(pair_distance(&tri(0.0, 0.0), 0.0, 1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(pair_distance(&tri(0.0, 0.0), -2.0, 1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn aod_examples() {
        assert_eq!(pair_aod(&tri(0.0, 0.0), 5.0, 0.0, 0.0).unwrap(), 0.0);
        let a = pair_aod(&tri(0.0, 0.0), 5.0, 5.0, 0.0).unwrap();
        assert!((a - FRAC_PI_4).abs() < 1e-15);
        let t = tri(0.2, 0.3);
        let a = pair_aod(&t, 6.0, 1.0, 0.05).unwrap();
        let (_, bearing) = oracle(&t, 6.0, 1.0, 0.05);
        assert!((a - bearing).abs() < 1e-12);
    }

    #[test]
    fn aod_zero_denominator() {
        // d11 cos w = lu sin g
        let t = tri(0.0, FRAC_PI_2);
        assert!(matches!(pair_aod(&t, 1.0, 0.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn reference_distance_examples() {
        let d = ref_distance_from_aods(0.0, FRAC_PI_4, 5.0).unwrap();
        assert!((d - 5.0).abs() < 1e-12);
        let d = ref_distance_from_aods(FRAC_PI_4, 0.0, 2.0).unwrap();
        assert!(d < 0.0);
        assert!((d + 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(ref_distance_from_aods(0.3, 0.3, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn degenerate_pair_is_reference() {
        let t = AngleTriplet::new(0.37, 0.6, 1.1);
        let d = pair_distance(&t, 4.2, 0.0, 0.0).unwrap();
        let a = pair_aod(&t, 4.2, 0.0, 0.0).unwrap();
        assert!((d - 4.2).abs() < 1e-14);
        assert!((a - 0.37).abs() < 1e-15);
    }

    #[test]
    fn symmetric_broadside_placement() {
        let bs = LinearArray::uniform_span(64, 2.0).unwrap();
        let ue = LinearArray::new(vec![0.0]).unwrap();
        let p = Placement::new(5.0, 0.0, 0.0).unwrap();
        let t = placement_to_triplet(&p, &bs, &ue).unwrap();
        assert!((t.omega11 + t.omega1m).abs() < 1e-14);
        assert!(t.omega11 < 0.0);
    }

    #[test]
    fn worst_case_pose_is_still_valid() {
        let bs = LinearArray::uniform_span(64, 2.0).unwrap();
        let ue = LinearArray::uniform(4, 0.015).unwrap();
        let p = Placement::new(5.0, FRAC_PI_3, FRAC_PI_2 - FRAC_PI_3).unwrap();
        let t = placement_to_triplet(&p, &bs, &ue).unwrap();
        assert!(t.is_finite());
        assert!(t.reference_distance(2.0).unwrap() > 0.0);
    }

    #[test]
    fn placement_behind_array_is_rejected() {
        let bs = LinearArray::uniform_span(8, 2.0).unwrap();
        let ue = LinearArray::uniform(4, 0.5).unwrap();
        // UE array pointing along -x from a center 0.5 m in front of the BS.
        let p = Placement::new(0.5, 0.0, FRAC_PI_2).unwrap();
        assert!(matches!(placement_to_triplet(&p, &bs, &ue), Err(Error::Infeasible(_))));
    }

    #[test]
    fn single_element_arrays() {
        let bs = LinearArray::new(vec![0.0]).unwrap();
        let ue = LinearArray::new(vec![0.0]).unwrap();
        let t = AngleTriplet::new(0.25, 0.0, 0.4);
        let pg = pair_geometry_with_reference(&t, 3.0, &bs, &ue).unwrap();
        assert_eq!(pg.dist.shape(), (1, 1));
        assert!((pg.dist[(0, 0)] - 3.0).abs() < 1e-15);
        assert!((pg.aod[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn last_column_bearing_is_omega1m() {
        let bs = LinearArray::uniform_span(16, 2.0).unwrap();
        let ue = LinearArray::uniform(3, 0.015).unwrap();
        let p = Placement::new(6.0, 0.4, 1.2).unwrap();
        let t = placement_to_triplet(&p, &bs, &ue).unwrap();
        let pg = pair_geometry(&t, &bs, &ue).unwrap();
        assert!((pg.aod[(0, 15)] - t.omega1m).abs() < 1e-10);
        assert!((pg.aod[(0, 0)] - t.omega11).abs() < 1e-12);
        assert!((pg.dist[(0, 0)] - pg.d11).abs() < 1e-12);
    }

    #[test]
    fn ue_coordinates_examples() {
        let bs = LinearArray::uniform_span(2, 5.0).unwrap();
        let ue = LinearArray::uniform(3, 0.5).unwrap();
        // w1M = pi/4 with a 5 m aperture puts d11 at 5 m.
        let t = AngleTriplet::new(0.0, FRAC_PI_4, 0.0);
        let pts = ue_coordinates(&t, &bs, &ue, Point2::origin()).unwrap();
        assert!((pts[0].x - 5.0).abs() < 1e-12 && pts[0].y.abs() < 1e-12);
        for p in &pts {
            assert!((p.x - pts[0].x).abs() < 1e-12);
        }
        for w in pts.windows(2) {
            assert!(((w[1] - w[0]).norm() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn array_validation() {
        assert!(LinearArray::new(vec![]).is_err());
        assert!(LinearArray::new(vec![0.1, 0.2]).is_err());
        assert!(LinearArray::new(vec![0.0, 0.2, 0.2]).is_err());
        let a = LinearArray::uniform_span(64, 2.0).unwrap();
        assert_eq!(a.len(), 64);
        assert!((a.aperture() - 2.0).abs() < 1e-12);
        let json = serde_json::to_string(&a).unwrap();
        let b: LinearArray = serde_json::from_str(&json).unwrap();
        assert_eq!(a, b);
        assert!(serde_json::from_str::<LinearArray>("[0.5, 1.0]").is_err());
    }

    #[test]
    fn placement_validation() {
        assert!(Placement::new(0.0, 0.0, 0.0).is_err());
        assert!(Placement::new(1.0, PI / 2.0, 0.0).is_err());
        assert!(Placement::new(1.0, -1.2, 3.0).is_ok());
    }
}
